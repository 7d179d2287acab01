//! File formats, LOSO orchestration and reporting around `mixhar-core`.

pub mod checkpoint;
pub mod config;
pub mod embed;
pub mod error;
pub mod experiment;
pub mod recordings;
pub mod table;

pub use config::{DatasetSource, ExperimentConfig};
pub use error::{LabError, Result};
pub use experiment::{run_experiment, FoldReport, FoldStatus, RunReport};

use std::path::Path;

use mixhar_core::synth::{generate, SynthSpec};
use recordings::{write_csv, Manifest};

/// Writes one CSV per synthetic subject plus `manifest.json`.
pub fn write_synth(spec: &SynthSpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    let recs = generate(spec)?;
    let mut files = Vec::new();
    for r in &recs {
        let name = format!("{}.csv", r.subject_id);
        write_csv(&dir.join(&name), r)?;
        files.push(name.into());
    }
    let manifest = Manifest {
        files,
        sample_rate_hz: 50.0,
        classes: (0..spec.classes).map(|c| format!("class_{c}")).collect(),
        channels: recs[0].channel_names.clone(),
    };
    manifest.write(&dir.join("manifest.json"))
}
