//! Recording CSV files and dataset manifests.
//!
//! CSV layout: `subject,timestamp,label,ch_0,...,ch_{H-1}`, rows sorted by
//! timestamp within each subject. A file may interleave several subjects;
//! each (file, subject) pair becomes one [`Recording`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mixhar_core::data::Recording;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

const FIXED: [&str; 3] = ["subject", "timestamp", "label"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// CSV paths, relative to the manifest's directory unless absolute.
    pub files: Vec<PathBuf>,
    pub sample_rate_hz: f64,
    /// Class names indexed by class id.
    pub classes: Vec<String>,
    pub channels: Vec<String>,
}

impl Manifest {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| LabError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if m.classes.len() < 2 || m.channels.is_empty() || m.files.is_empty() {
            return Err(LabError::Config(format!(
                "{}: manifest needs files, channels and at least two classes",
                path.display()
            )));
        }
        if !(m.sample_rate_hz > 0.0) {
            return Err(LabError::Config(format!("{}: sample_rate_hz must be positive", path.display())));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(|e| LabError::io(path, e))
    }

    /// Loads every listed file in order.
    pub fn load(&self, manifest_path: &Path) -> Result<Vec<Recording>> {
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut out = Vec::new();
        for f in &self.files {
            let path = if f.is_absolute() { f.clone() } else { base.join(f) };
            let recs = read_csv(&path, self.num_classes())?;
            for r in &recs {
                if r.channel_names != self.channels {
                    return Err(LabError::parse(
                        &path,
                        1,
                        format!("channels {:?} differ from the manifest's {:?}", r.channel_names, self.channels),
                    ));
                }
            }
            out.extend(recs);
        }
        Ok(out)
    }
}

struct Pending {
    last_timestamp: f64,
    channels: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

/// Reads one CSV file. NaN or empty samples take the previous value of their
/// channel; leading gaps become 0.
pub fn read_csv(path: &Path, num_classes: usize) -> Result<Vec<Recording>> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names.len() <= FIXED.len() || names[..FIXED.len()] != FIXED {
        return Err(LabError::parse(
            path,
            1,
            format!("header must start with subject,timestamp,label and list at least one channel, got {names:?}"),
        ));
    }
    let channel_names: Vec<String> = names[FIXED.len()..].iter().map(|s| s.to_string()).collect();
    let h = channel_names.len();
    let mut order: Vec<String> = Vec::new();
    let mut pending: BTreeMap<String, Pending> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let line = row.position().map_or(0, |p| p.line());
        if row.len() != FIXED.len() + h {
            return Err(LabError::parse(
                path,
                line,
                format!("expected {} fields, found {}", FIXED.len() + h, row.len()),
            ));
        }
        let subject = row[0].to_string();
        if subject.is_empty() {
            return Err(LabError::parse(path, line, "empty subject id"));
        }
        let timestamp: f64 = row[1]
            .parse()
            .map_err(|_| LabError::parse(path, line, format!("bad timestamp {:?}", &row[1])))?;
        let label: usize = row[2]
            .parse()
            .map_err(|_| LabError::parse(path, line, format!("bad label {:?}", &row[2])))?;
        if label >= num_classes {
            return Err(LabError::parse(
                path,
                line,
                format!("unknown class id {label} (dataset has {num_classes} classes)"),
            ));
        }
        let entry = pending.entry(subject.clone()).or_insert_with(|| {
            order.push(subject.clone());
            Pending {
                last_timestamp: f64::NEG_INFINITY,
                channels: vec![Vec::new(); h],
                labels: Vec::new(),
            }
        });
        if timestamp < entry.last_timestamp {
            return Err(LabError::parse(
                path,
                line,
                format!("timestamp {timestamp} precedes {} for subject {subject}", entry.last_timestamp),
            ));
        }
        entry.last_timestamp = timestamp;
        for (k, ch) in entry.channels.iter_mut().enumerate() {
            let field = &row[FIXED.len() + k];
            let v = if field.is_empty() {
                f64::NAN
            } else {
                field
                    .parse::<f64>()
                    .map_err(|_| LabError::parse(path, line, format!("bad value {field:?} in {}", channel_names[k])))?
            };
            let v = if v.is_nan() { ch.last().copied().unwrap_or(0.0) } else { v };
            if !v.is_finite() {
                return Err(LabError::parse(path, line, format!("non-finite value in {}", channel_names[k])));
            }
            ch.push(v);
        }
        entry.labels.push(label);
    }
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("recording");
    order
        .into_iter()
        .map(|subject| {
            let p = pending.remove(&subject).expect("subject recorded");
            let id = format!("{stem}:{subject}");
            Recording::new(id, subject, channel_names.clone(), p.channels, p.labels).map_err(LabError::from)
        })
        .collect()
}

fn csv_error(path: &Path, e: csv::Error) -> LabError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => LabError::io(path, io),
        other => LabError::parse(path, line, format!("{other:?}")),
    }
}

/// Writes one recording with integer sample indices as timestamps.
pub fn write_csv(path: &Path, recording: &Recording) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(recording.channel_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for t in 0..recording.len() {
        let mut row = vec![recording.subject_id.clone(), t.to_string(), recording.labels[t].to_string()];
        row.extend(recording.channels.iter().map(|c| c[t].to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| LabError::io(path, e))
}
