//! Synthetic OCT-like B-scans: layered retinal bands, with drusen bumps or a
//! choroidal neovascular mass depending on the class.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{DatasetManifest, SampleRecord};
use super::pgm::encode_pgm;
use crate::augment::ImageBuffer;
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::seed::{self, Stream};

pub const CLASS_NAMES: [&str; 4] = ["normal", "drusen", "cnv", "dme"];

/// Per-class patient and scan counts for a dataset shaped like the
/// three-class clinical cohort (120 / 160 / 161 patients).
pub const NEH_PATIENTS: [usize; 3] = [120, 160, 161];
pub const NEH_SCANS: [usize; 3] = [5667, 3742, 3240];

/// Splits `scans` among `patients` with random per-patient weights; every
/// patient gets at least one scan.
fn allocate(scans: usize, patients: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let weights: Vec<f64> = (0..patients).map(|_| rng.gen_range(0.5..1.5)).collect();
    let total: f64 = weights.iter().sum();
    let spare = scans - patients;
    let shares: Vec<f64> = weights.iter().map(|w| w / total * spare as f64).collect();
    let mut counts: Vec<usize> = shares.iter().map(|s| 1 + s.floor() as usize).collect();
    let mut left = scans - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..patients).collect();
    order.sort_by(|a, b| {
        let fa = shares[*a] - shares[*a].floor();
        let fb = shares[*b] - shares[*b].floor();
        fb.total_cmp(&fa).then(a.cmp(b))
    });
    for i in order {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

fn check_counts(scans: &[usize], patients: &[usize]) -> Result<()> {
    if scans.is_empty() || scans.len() != patients.len() || scans.len() > CLASS_NAMES.len() {
        return Err(Error::Data(format!(
            "need matching per-class scan and patient counts for 1..={} classes",
            CLASS_NAMES.len()
        )));
    }
    for (c, (&s, &p)) in scans.iter().zip(patients).enumerate() {
        if p == 0 || s < p {
            return Err(Error::Data(format!(
                "class `{}`: need scans ({s}) >= patients ({p}) >= 1",
                CLASS_NAMES[c]
            )));
        }
    }
    Ok(())
}

fn patient_id(class: usize, p: usize) -> String {
    format!("{}-p{:03}", CLASS_NAMES[class], p)
}

/// (class, patient index, scan index) for every scan, with records.
fn layout(scans: &[usize], patients: &[usize], seed: u64) -> Result<Vec<(usize, usize, usize, SampleRecord)>> {
    check_counts(scans, patients)?;
    let mut out = Vec::new();
    for (class, (&s, &p)) in scans.iter().zip(patients).enumerate() {
        let counts = allocate(s, p, &mut seed::rng(seed, Stream::Synth, &[0, class as u64]));
        for (patient, &n) in counts.iter().enumerate() {
            let pid = patient_id(class, patient);
            for scan in 0..n {
                out.push((
                    class,
                    patient,
                    scan,
                    SampleRecord {
                        image_path: format!("images/{}/{pid}_{scan:03}.pgm", CLASS_NAMES[class]),
                        label: class,
                        patient_id: pid.clone(),
                    },
                ));
            }
        }
    }
    Ok(out)
}

fn class_names(n: usize) -> Vec<String> {
    CLASS_NAMES[..n].iter().map(|s| s.to_string()).collect()
}

/// Records only (no image files), for exercising splitting at cohort scale.
pub fn synth_metadata(scans: &[usize], patients: &[usize], seed: u64) -> Result<DatasetManifest> {
    let records = layout(scans, patients, seed)?.into_iter().map(|(.., r)| r).collect();
    DatasetManifest::new(class_names(scans.len()), records, Default::default())
}

/// The three-class cohort shape used by the leakage checks.
pub fn neh_shaped_metadata(seed: u64) -> DatasetManifest {
    synth_metadata(&NEH_SCANS, &NEH_PATIENTS, seed).expect("valid cohort shape")
}

/// Style shared by all scans of one patient.
#[derive(Clone, Copy, Debug)]
struct PatientStyle {
    gain: f64,
    center: f64,
    tilt: f64,
    curvature: f64,
    thickness: f64,
}

impl PatientStyle {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        Self {
            gain: rng.gen_range(0.9..1.1),
            center: rng.gen_range(0.45..0.6),
            tilt: rng.gen_range(-0.12..0.12),
            curvature: rng.gen_range(-0.4..0.4),
            thickness: rng.gen_range(0.85..1.15),
        }
    }
}

fn gauss(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Renders one scan as a single-channel `size`×`size` image.
pub fn render_scan(class: usize, size: usize, style_seed: u64, scan_seed: u64) -> ImageBuffer {
    let mut prng = seed::rng(style_seed, Stream::Synth, &[1]);
    let style = PatientStyle::sample(&mut prng);
    let mut rng = seed::rng(scan_seed, Stream::Synth, &[2]);
    let n = size as f64;
    let u = n / 32.0;
    let shift_x = rng.gen_range(-2.0..2.0) * u;
    let shift_y = rng.gen_range(-2.0..2.0) * u;
    let mid = n / 2.0 + shift_x;
    let baseline = |x: f64| {
        let dx = x - mid;
        style.center * n + shift_y + style.tilt * dx + style.curvature * dx * dx / n
    };
    // (offset from the pigment layer, intensity, width)
    let t = style.thickness * u;
    let layers = [(-9.0 * t, 110.0, 0.9 * u), (-6.0 * t, 70.0, 0.9 * u), (-3.0 * t, 140.0, 0.9 * u)];

    // drusen: local elevations of the pigment layer
    let bumps: Vec<(f64, f64, f64)> = if class == 1 {
        let count = rng.gen_range(4..=6);
        (0..count)
            .map(|i| {
                let slot = n * (i as f64 + 0.5) / count as f64;
                (
                    slot + rng.gen_range(-0.1..0.1) * n / count as f64,
                    rng.gen_range(2.5..4.0) * u,
                    rng.gen_range(1.6..2.4) * u,
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    // neovascular mass: an irregular bright ellipse straddling the pigment layer
    let mass = (class == 2).then(|| {
        let cx = mid + rng.gen_range(-0.2..0.2) * n;
        (
            cx,
            rng.gen_range(8.0..11.0) * u,
            rng.gen_range(4.5..6.5) * u,
            [rng.gen_range(0.0..6.3), rng.gen_range(0.0..6.3)],
        )
    });
    // macular edema: dark fluid pockets and a thickened inner retina
    let cysts: Vec<(f64, f64, f64)> = if class == 3 {
        (0..rng.gen_range(2..=3))
            .map(|_| (mid + rng.gen_range(-0.25..0.25) * n, rng.gen_range(-7.0..-4.0) * t, rng.gen_range(1.5..2.5) * u))
            .collect()
    } else {
        Vec::new()
    };

    let speckle = Normal::new(1.0, 0.08).expect("valid");
    let additive = Normal::new(0.0, 4.0).expect("valid");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let rpe = baseline(xf);
            let lift: f64 = bumps.iter().map(|&(bx, h, w)| h * gauss(xf - bx, w)).sum();
            let pigment = rpe - lift;
            let mut v = 15.0;
            // tissue between the inner layer and the pigment layer
            if yf > pigment - 10.0 * t && yf < pigment {
                v += 35.0;
            }
            for &(off, level, w) in &layers {
                v += level * gauss(yf - (pigment + off), w);
            }
            v += 210.0 * gauss(yf - pigment, 1.0 * u);
            // drusen material fills the space under the lifted pigment layer
            if lift > 0.3 && yf > pigment && yf < rpe {
                v += 120.0;
            }
            if let Some((cx, rx, ry, phase)) = mass {
                let (dx, dy) = (xf - cx, yf - (rpe - 2.0 * u));
                let theta = dy.atan2(dx);
                let wobble = 1.0 + 0.2 * (3.0 * theta + phase[0]).sin() + 0.1 * (5.0 * theta + phase[1]).sin();
                let r = ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt();
                if r < wobble {
                    v = v.max(200.0) + 50.0 * (1.0 - r / wobble);
                }
            }
            for &(cx, off, rad) in &cysts {
                if ((xf - cx).powi(2) + (yf - (rpe + off)).powi(2)).sqrt() < rad {
                    v = 10.0;
                }
            }
            // choroid below the pigment layer
            if yf > rpe + 1.5 * u {
                v += 40.0 * gauss(yf - (rpe + 4.0 * u), 2.5 * u);
            }
            v = v * style.gain * speckle.sample(&mut rng) + additive.sample(&mut rng);
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    ImageBuffer::new(size, size, 1, data).expect("size x size gray")
}

/// Writes PGM scans plus `manifest.txt` under `out_dir` and returns the
/// manifest. Output bytes are a pure function of the arguments.
pub fn synth_generate(
    out_dir: &Path,
    scans: &[usize],
    patients: &[usize],
    image_size: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if image_size < 8 {
        return Err(Error::Data(format!("image size {image_size} is below the 8-pixel minimum")));
    }
    let entries = layout(scans, patients, seed)?;
    for (class, patient, scan, record) in &entries {
        let style_seed = seed::mix(seed, &[Stream::Synth as u64, *class as u64, *patient as u64]);
        let scan_seed = seed::mix(style_seed, &[*scan as u64]);
        let img = render_scan(*class, image_size, style_seed, scan_seed);
        write_atomic(&out_dir.join(&record.image_path), &encode_pgm(&img)?)?;
    }
    let records = entries.into_iter().map(|(.., r)| r).collect();
    let manifest = DatasetManifest::new(class_names(scans.len()), records, out_dir.to_path_buf())?;
    write_atomic(&out_dir.join("manifest.txt"), manifest.to_text().as_bytes())?;
    Ok(manifest)
}

/// Half-height of the window aligned on each column's brightest row.
const PROFILE_REACH: isize = 8;

/// Pose-normalized descriptors: each column is aligned on its brightest
/// row (3-row smoothed); the per-offset mean and spread of the aligned
/// columns are concatenated with the RMS deviation of the brightest-row
/// trace from its least-squares quadratic.
pub fn scan_features(image: &ImageBuffer) -> Vec<f64> {
    let (w, h) = (image.width() as isize, image.height() as isize);
    let at = |x: isize, y: isize| image.get(x as usize, y.clamp(0, h - 1) as usize, 0) as f64;
    let trace: Vec<isize> = (0..w)
        .map(|x| {
            (0..h)
                .map(|y| (y, at(x, y - 1) + at(x, y) + at(x, y + 1)))
                .fold((0, f64::MIN), |best, cur| if cur.1 > best.1 { cur } else { best })
                .0
        })
        .collect();
    let span = (2 * PROFILE_REACH + 1) as usize;
    let mut sum = vec![0.0; span];
    let mut sq = vec![0.0; span];
    for x in 0..w {
        for (k, off) in (-PROFILE_REACH..=PROFILE_REACH).enumerate() {
            let v = at(x, trace[x as usize] + off);
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let n = w as f64;
    let mut out: Vec<f64> = sum.iter().map(|s| s / n).collect();
    out.extend(sum.iter().zip(&sq).map(|(s, q)| (q / n - (s / n).powi(2)).max(0.0).sqrt()));

    let xs: Vec<f64> = (0..w).map(|x| (x as f64 - (w - 1) as f64 / 2.0) / n).collect();
    let mut ata = [[0.0; 3]; 3];
    let mut atb = [0.0; 3];
    for (x, t) in xs.iter().zip(&trace) {
        let row = [1.0, *x, x * x];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            atb[i] += row[i] * *t as f64;
        }
    }
    let c = solve3(ata, atb);
    let rough = xs
        .iter()
        .zip(&trace)
        .map(|(x, t)| (*t as f64 - (c[0] + c[1] * x + c[2] * x * x)).powi(2))
        .sum::<f64>()
        / n;
    out.push(rough.sqrt());
    out
}

pub fn mean_intensity(image: &ImageBuffer) -> f64 {
    image.data().iter().map(|v| *v as f64).sum::<f64>() / image.data().len() as f64
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let pivot = (col..3).max_by(|i, j| a[*i][col].abs().total_cmp(&a[*j][col].abs())).unwrap_or(col);
        a.swap(col, pivot);
        b.swap(col, pivot);
        if a[col][col].abs() < 1e-12 {
            return [0.0; 3];
        }
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in 0..3 {
                    a[r][c] -= f * a[col][c];
                }
                b[r] -= f * b[col];
            }
        }
    }
    [b[0] / a[0][0], b[1] / a[1][1], b[2] / a[2][2]]
}

/// Nearest-centroid accuracy on standardized [`scan_features`], fit on
/// `train` and scored on `eval`. A model-free signal that the classes are
/// separable.
pub fn separability_signal(images: &[ImageBuffer], labels: &[usize], train: &[usize], eval: &[usize]) -> f64 {
    let feats: Vec<Vec<f64>> = images.iter().map(scan_features).collect();
    let dim = feats.first().map_or(0, Vec::len);
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let n = train.len().max(1) as f64;
    let mu: Vec<f64> = (0..dim).map(|j| train.iter().map(|&i| feats[i][j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..dim)
        .map(|j| {
            (train.iter().map(|&i| (feats[i][j] - mu[j]).powi(2)).sum::<f64>() / n)
                .sqrt()
                .max(1e-9)
        })
        .collect();
    let z = |f: &[f64]| -> Vec<f64> { (0..dim).map(|j| (f[j] - mu[j]) / sd[j]).collect() };
    let mut centroids = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for &i in train {
        for (c, v) in centroids[labels[i]].iter_mut().zip(z(&feats[i])) {
            *c += v;
        }
        counts[labels[i]] += 1;
    }
    for (c, count) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= (*count).max(1) as f64);
    }
    let correct = eval
        .iter()
        .filter(|&&i| {
            let zi = z(&feats[i]);
            let dist = |c: &Vec<f64>| c.iter().zip(&zi).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let pred = (0..k)
                .filter(|c| counts[*c] > 0)
                .min_by(|a, b| dist(&centroids[*a]).total_cmp(&dist(&centroids[*b])))
                .unwrap_or(0);
            pred == labels[i]
        })
        .count();
    correct as f64 / eval.len().max(1) as f64
}
