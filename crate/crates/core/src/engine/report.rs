use std::fmt::Write as _;
use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use super::eval::EvalOutput;
use super::train::{Primary, TrainOutcome, TrainReport};
use crate::error::{Error, Result};
use crate::io::{sha256_hex, write_atomic};
use crate::model::write_checkpoint;

/// Checkpoint file names inside a run directory.
pub const RAW_CHECKPOINT: &str = "raw.ckpt";
pub const SWA_CHECKPOINT: &str = "swa.ckpt";
pub const PRIMARY_CHECKPOINT: &str = "model.ckpt";

/// A finished run together with its provenance.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport<'a> {
    pub command: &'a str,
    /// Extra provenance such as the teacher checkpoint hash.
    pub provenance: IndexMap<String, String>,
    pub checkpoints: IndexMap<String, String>,
    pub run: &'a TrainReport,
    pub config: &'a str,
}

fn pct(v: f64) -> String {
    if v.is_nan() {
        "n/a".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

fn eval_lines(out: &mut String, title: &str, e: &EvalOutput) {
    let m = &e.metrics;
    let _ = writeln!(out, "[{title}]");
    let _ = writeln!(out, "tta = {}", e.tta);
    let _ = writeln!(out, "accuracy = {}", pct(m.accuracy));
    let _ = writeln!(out, "sensitivity = {}", pct(m.sensitivity));
    let _ = writeln!(out, "specificity = {}", pct(m.specificity));
    let _ = writeln!(out, "loss = {:.6}", e.loss);
    if !m.sensitivity_excluded.is_empty() {
        let _ = writeln!(out, "sensitivity_excluded_classes = {:?}", m.sensitivity_excluded);
    }
    if !m.specificity_excluded.is_empty() {
        let _ = writeln!(out, "specificity_excluded_classes = {:?}", m.specificity_excluded);
    }
    let _ = writeln!(out, "confusion (rows true, cols predicted):");
    for row in &e.confusion.counts {
        let cells: Vec<String> = row.iter().map(|c| format!("{c:>6}")).collect();
        let _ = writeln!(out, "  {}", cells.join(""));
    }
    out.push('\n');
}

impl RunReport<'_> {
    pub fn to_text(&self) -> String {
        let r = self.run;
        let mut out = String::new();
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "role = {}", r.role);
        let _ = writeln!(out, "loss = {}", r.loss);
        if let Some(a) = &r.focal_alpha {
            let _ = writeln!(out, "focal_alpha = {a:?}");
        }
        let _ = writeln!(out, "split_hash = {}", r.split_hash);
        let _ = writeln!(out, "parameters = {}", r.parameter_count);
        let _ = writeln!(out, "epochs_run = {}", r.epochs_run);
        let _ = writeln!(out, "best_epoch = {}", r.best_epoch);
        let _ = writeln!(out, "stopped_early = {}", r.stopped_early);
        let _ = writeln!(out, "swa_snapshots = {}", r.swa_snapshots);
        let primary = match r.primary {
            Primary::Raw => "raw",
            Primary::Swa => "swa",
        };
        let _ = writeln!(out, "primary = {primary}");
        if let (Some(a), Some(b)) = (&r.teacher_hash_before, &r.teacher_hash_after) {
            let _ = writeln!(out, "teacher_hash_before = {a}");
            let _ = writeln!(out, "teacher_hash_after = {b}");
        }
        for (k, v) in &self.provenance {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in &self.checkpoints {
            let _ = writeln!(out, "checkpoint {k} = {v}");
        }
        out.push('\n');

        let _ = writeln!(out, "[history]");
        let _ = writeln!(
            out,
            "{:>5} {:>12} {:>10} {:>10} {:>8} {:>8} {:>8} {:>4} {:>4}",
            "epoch", "lr", "train", "val_loss", "acc", "sens", "spec", "best", "swa"
        );
        for e in &r.history {
            let _ = writeln!(
                out,
                "{:>5} {:>12.5e} {:>10.5} {:>10.5} {:>8} {:>8} {:>8} {:>4} {:>4}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val_loss,
                pct(e.val_accuracy),
                pct(e.val_sensitivity),
                pct(e.val_specificity),
                if e.improved { "*" } else { "" },
                if e.swa_snapshot { "+" } else { "" },
            );
        }
        out.push('\n');
        eval_lines(&mut out, "validation raw", &r.raw_val);
        if let Some(v) = &r.swa_val {
            eval_lines(&mut out, "validation swa", v);
        }
        if let Some(t) = &r.test {
            eval_lines(&mut out, "test", t);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Writes checkpoints, `report.txt`, `report.json` and `config.cfg` into
/// `dir`, each atomically. Returns the checkpoint hashes by file name.
pub fn write_run(
    dir: &Path,
    command: &str,
    outcome: &TrainOutcome,
    config_echo: &str,
    provenance: IndexMap<String, String>,
) -> Result<IndexMap<String, String>> {
    let mut checkpoints = IndexMap::new();
    let mut emit = |name: &str, bytes: Vec<u8>| -> Result<()> {
        write_atomic(&dir.join(name), &bytes)?;
        checkpoints.insert(name.to_string(), sha256_hex(&bytes));
        Ok(())
    };
    emit(RAW_CHECKPOINT, write_checkpoint(&outcome.best))?;
    if let Some(swa) = &outcome.swa {
        emit(SWA_CHECKPOINT, write_checkpoint(swa))?;
    }
    emit(PRIMARY_CHECKPOINT, write_checkpoint(outcome.primary()))?;
    let report = RunReport {
        command,
        provenance,
        checkpoints: checkpoints.clone(),
        run: &outcome.report,
        config: config_echo,
    };
    write_atomic(&dir.join("config.cfg"), config_echo.as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.to_text().as_bytes())?;
    write_atomic(&dir.join("report.json"), report.to_json()?.as_bytes())?;
    Ok(checkpoints)
}

/// Wall-clock time goes to its own file so reports stay reproducible.
pub fn write_timing(dir: &Path, seconds: f64) -> Result<()> {
    write_atomic(&dir.join("timing.txt"), format!("wall_clock_seconds = {seconds:.3}\n").as_bytes())
}
