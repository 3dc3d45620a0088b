use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

/// One scan: image path, class index and patient.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub label: usize,
    pub patient_id: String,
}

/// Records plus class names. Relative image paths resolve against
/// `base_dir`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub class_names: Vec<String>,
    pub records: Vec<SampleRecord>,
    pub base_dir: PathBuf,
}

fn check_field(field: &str, what: &str, line: usize) -> Result<()> {
    if field.is_empty() {
        return Err(Error::Manifest {
            line,
            reason: format!("empty {what}"),
        });
    }
    if field.contains(',') || field.contains('\n') {
        return Err(Error::Manifest {
            line,
            reason: format!("{what} `{field}` contains a separator"),
        });
    }
    Ok(())
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, records: Vec<SampleRecord>, base_dir: PathBuf) -> Result<Self> {
        let manifest = Self {
            class_names,
            records,
            base_dir,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        if self.class_names.is_empty() {
            return Err(Error::Data("manifest declares no classes".into()));
        }
        let mut names = HashSet::new();
        for name in &self.class_names {
            check_field(name, "class name", 1)?;
            if !names.insert(name) {
                return Err(Error::Data(format!("class `{name}` declared twice")));
            }
        }
        if self.records.is_empty() {
            return Err(Error::Data("no records".into()));
        }
        let mut paths = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            let line = i + 2;
            check_field(&r.image_path, "path", line)?;
            check_field(&r.patient_id, "patient id", line)?;
            if r.label >= self.class_names.len() {
                return Err(Error::Manifest {
                    line,
                    reason: format!("label {} out of range", r.label),
                });
            }
            if !paths.insert(r.image_path.as_str()) {
                return Err(Error::Manifest {
                    line,
                    reason: format!("duplicate path `{}`", r.image_path),
                });
            }
        }
        Ok(())
    }

    /// Parses manifest text: a `classes:a,b,c` header, then `path,class,patient`
    /// rows. Blank lines are ignored.
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let (header_line, header) = lines.next().ok_or_else(|| Error::Data("no records".into()))?;
        let class_list = header.strip_prefix("classes:").ok_or_else(|| Error::Manifest {
            line: header_line,
            reason: "expected a `classes:` header".into(),
        })?;
        let class_names: Vec<String> = class_list.split(',').map(|s| s.trim().to_string()).collect();
        if class_names.iter().any(String::is_empty) {
            return Err(Error::Manifest {
                line: header_line,
                reason: "empty class name".into(),
            });
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (line, row) in lines {
            let fields: Vec<&str> = row.split(',').map(str::trim).collect();
            let [path, class, patient] = fields[..] else {
                return Err(Error::Manifest {
                    line,
                    reason: format!("expected 3 comma-separated fields, found {}", fields.len()),
                });
            };
            check_field(path, "path", line)?;
            check_field(patient, "patient id", line)?;
            let label = class_names.iter().position(|c| c == class).ok_or_else(|| Error::Manifest {
                line,
                reason: format!("unknown class `{class}`"),
            })?;
            if !seen.insert(path.to_string()) {
                return Err(Error::Manifest {
                    line,
                    reason: format!("duplicate path `{path}`"),
                });
            }
            records.push(SampleRecord {
                image_path: path.to_string(),
                label,
                patient_id: patient.to_string(),
            });
        }
        Self::new(class_names, records, base_dir.into())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("classes:{}\n", self.class_names.join(","));
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.image_path, self.class_names[r.label], r.patient_id));
        }
        out
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn resolve(&self, record: &SampleRecord) -> PathBuf {
        self.base_dir.join(&record.image_path)
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.records
            .iter()
            .filter(|r| seen.insert(r.patient_id.as_str()))
            .map(|r| r.patient_id.clone())
            .collect()
    }
}

/// Reads a manifest; image files are not opened.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    DatasetManifest::parse(&text, base)
}
