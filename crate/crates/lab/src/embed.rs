//! FC-layer embedding export.

use std::path::Path;

use mixhar_core::data::{contiguous_segments, segment, Origin, Recording, Window};

use crate::checkpoint::Checkpoint;
use crate::error::{LabError, Result};

/// Windows of the given subject's recordings, normalised with the
/// checkpoint's statistics when it carries them.
pub fn subject_windows(checkpoint: &Checkpoint, recordings: &[Recording], subject: &str, overlap: f64) -> Result<Vec<Window>> {
    let selected: Vec<usize> = (0..recordings.len()).filter(|&i| recordings[i].subject_id == subject).collect();
    if selected.is_empty() {
        return Err(LabError::Config(format!("subject {subject:?} is not in the dataset")));
    }
    let len = checkpoint.model.spec().window_len;
    let mut windows = segment(recordings, &contiguous_segments(recordings, &selected), len, overlap, Origin::Test);
    if let Some(n) = &checkpoint.norm {
        windows.iter_mut().for_each(|w| n.apply(w));
    }
    Ok(windows)
}

/// `window_id,true_label,feat_0..feat_{D-1}`, one row per window in input order.
pub fn embedding_csv(checkpoint: &Checkpoint, windows: &[Window]) -> Result<String> {
    let dim = checkpoint.model.embedding_dim();
    let mut out = String::from("window_id,true_label");
    for k in 0..dim {
        out.push_str(&format!(",feat_{k}"));
    }
    out.push('\n');
    if windows.is_empty() {
        return Ok(out);
    }
    let refs: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
    let feats = checkpoint.model.embed(&checkpoint.params, &refs)?;
    for (i, (w, row)) in windows.iter().zip(feats.chunks(dim)).enumerate() {
        out.push_str(&format!("{i},{}", w.true_label));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(checkpoint: &Checkpoint, windows: &[Window], out: &Path) -> Result<usize> {
    let csv = embedding_csv(checkpoint, windows)?;
    std::fs::write(out, csv).map_err(|e| LabError::io(out, e))?;
    Ok(windows.len())
}
