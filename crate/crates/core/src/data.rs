//! Recordings, the per-class labelled/unlabelled split, sliding-window
//! segmentation, z-score normalisation, LOSO folds and the cyclic sampler.
//!
//! The labelled/unlabelled split happens on contiguous constant-label
//! segments *before* windowing, so no raw sample can end up in both pools.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded, Rng64};
use crate::{Error, Result};

/// One continuous multi-channel stream from a single subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub subject_id: String,
    pub channel_names: Vec<String>,
    /// `H` channels of `T` samples each.
    pub channels: Vec<Vec<f64>>,
    /// Per-sample class ids.
    pub labels: Vec<usize>,
}

impl Recording {
    pub fn new(
        id: impl Into<String>,
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        channels: Vec<Vec<f64>>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let id = id.into();
        if channels.is_empty() {
            return Err(Error::Data(format!("recording {id} has no channels")));
        }
        if channel_names.len() != channels.len() {
            return Err(Error::Data(format!(
                "recording {id}: {} channel names for {} channels",
                channel_names.len(),
                channels.len()
            )));
        }
        if let Some((h, ch)) = channels.iter().enumerate().find(|(_, c)| c.len() != labels.len()) {
            return Err(Error::Data(format!(
                "recording {id}: channel {h} has {} samples, label stream has {}",
                ch.len(),
                labels.len()
            )));
        }
        Ok(Self {
            id,
            subject_id: subject_id.into(),
            channel_names,
            channels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    LabelledPool,
    UnlabelledPool,
    Test,
}

/// A segmented `H x L` frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    /// Channel-major `H x L` values.
    pub values: Vec<f64>,
    pub channels: usize,
    pub len: usize,
    /// Visible label. Always `None` for unlabelled-pool windows.
    pub label: Option<usize>,
    /// Ground truth, kept for diagnostics only.
    pub true_label: usize,
    pub subject_id: String,
    pub origin: Origin,
    /// Index of the source recording in the list passed to [`segment`].
    pub recording: usize,
    pub start: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub label_fraction: f64,
    pub seed: u64,
    pub window_len: usize,
    pub overlap: f64,
}

impl SplitSpec {
    pub fn stride(&self) -> usize {
        stride(self.window_len, self.overlap)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "label_fraction must lie in (0, 1], got {}",
                self.label_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must lie in [0, 1), got {}", self.overlap)));
        }
        if self.window_len == 0 {
            return Err(Error::Config("window_len must be at least 1".into()));
        }
        Ok(())
    }
}

/// `max(1, round(window_len * (1 - overlap)))`.
pub fn stride(window_len: usize, overlap: f64) -> usize {
    let s = libm::round(window_len as f64 * (1.0 - overlap));
    if s < 1.0 {
        1
    } else {
        s as usize
    }
}

/// Maximal run of one label inside one recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Segment {
    pub recording: usize,
    pub start: usize,
    pub len: usize,
    pub label: usize,
}

/// Decomposes the selected recordings into maximal constant-label segments.
pub fn contiguous_segments(recordings: &[Recording], selected: &[usize]) -> Vec<Segment> {
    let mut out = Vec::new();
    for &r in selected {
        let labels = &recordings[r].labels;
        let mut start = 0;
        while start < labels.len() {
            let label = labels[start];
            let mut end = start + 1;
            while end < labels.len() && labels[end] == label {
                end += 1;
            }
            out.push(Segment {
                recording: r,
                start,
                len: end - start,
                label,
            });
            start = end;
        }
    }
    out
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Split {
    pub labelled: Vec<Segment>,
    pub unlabelled: Vec<Segment>,
    pub warnings: Vec<String>,
}

/// Per-class labelled/unlabelled partition of the selected recordings.
///
/// For every class, its segments are shuffled and moved into the labelled pool
/// until the pool holds at least `label_fraction` of the class's samples. If
/// that leaves a class without any segment long enough for one window, its
/// smallest window-sized segment is labelled too.
pub fn split_labelled(
    recordings: &[Recording],
    selected: &[usize],
    spec: &SplitSpec,
    num_classes: usize,
) -> Result<Split> {
    spec.validate()?;
    let segments = contiguous_segments(recordings, selected);
    let mut rng: Rng64 = seeded(spec.seed);
    let mut split = Split::default();
    for class in 0..num_classes {
        let mut pool: Vec<Segment> = segments.iter().copied().filter(|s| s.label == class).collect();
        if pool.is_empty() {
            let msg = format!("class {class} is absent from the training recordings");
            log::warn!("{msg}");
            split.warnings.push(msg);
            continue;
        }
        let total: usize = pool.iter().map(|s| s.len).sum();
        let target = spec.label_fraction * total as f64;
        pool.shuffle(&mut rng);
        let mut taken = 0usize;
        let mut cut = 0;
        while cut < pool.len() && (taken as f64) < target {
            taken += pool[cut].len;
            cut += 1;
        }
        let (lab, unlab) = pool.split_at(cut);
        let mut lab = lab.to_vec();
        let mut unlab = unlab.to_vec();
        if !lab.iter().any(|s| s.len >= spec.window_len) {
            let msg = format!(
                "class {class}: labelled share ({taken} of {total} samples) yields no window of length {}",
                spec.window_len
            );
            log::warn!("{msg}");
            split.warnings.push(msg);
            let smallest = unlab
                .iter()
                .enumerate()
                .filter(|(_, s)| s.len >= spec.window_len)
                .min_by_key(|(_, s)| s.len)
                .map(|(i, _)| i);
            if let Some(i) = smallest {
                lab.push(unlab.remove(i));
            }
        }
        split.labelled.extend(lab);
        split.unlabelled.extend(unlab);
    }
    Ok(split)
}

/// Sliding windows inside each segment; tails shorter than `window_len` are
/// dropped and windows never cross segment boundaries.
pub fn segment(
    recordings: &[Recording],
    segments: &[Segment],
    window_len: usize,
    overlap: f64,
    origin: Origin,
) -> Vec<Window> {
    let step = stride(window_len, overlap);
    let mut out = Vec::new();
    for seg in segments {
        if seg.len < window_len {
            log::debug!(
                "segment at {}:{} ({} samples) is shorter than the window",
                recordings[seg.recording].id,
                seg.start,
                seg.len
            );
            continue;
        }
        let rec = &recordings[seg.recording];
        let mut offset = 0;
        while offset + window_len <= seg.len {
            let start = seg.start + offset;
            let mut values = Vec::with_capacity(rec.num_channels() * window_len);
            for ch in &rec.channels {
                values.extend_from_slice(&ch[start..start + window_len]);
            }
            out.push(Window {
                values,
                channels: rec.num_channels(),
                len: window_len,
                label: (origin != Origin::UnlabelledPool).then_some(seg.label),
                true_label: seg.label,
                subject_id: rec.subject_id.clone(),
                origin,
                recording: seg.recording,
                start,
            });
            offset += step;
        }
    }
    out
}

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn fit(windows: &[&Window]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Data("cannot fit normalisation on zero windows".into()))?;
        let h = first.channels;
        let mut sum = vec![0.0; h];
        let mut count = 0usize;
        for w in windows {
            for c in 0..h {
                sum[c] += w.values[c * w.len..(c + 1) * w.len].iter().sum::<f64>();
            }
            count += w.len;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; h];
        for w in windows {
            for c in 0..h {
                sq[c] += w.values[c * w.len..(c + 1) * w.len]
                    .iter()
                    .map(|v| (v - mean[c]) * (v - mean[c]))
                    .sum::<f64>();
            }
        }
        let std = sq
            .iter()
            .map(|s| libm::sqrt(s / count as f64).max(STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, window: &mut Window) {
        for c in 0..window.channels {
            let (m, s) = (self.mean[c], self.std[c]);
            window.values[c * window.len..(c + 1) * window.len]
                .iter_mut()
                .for_each(|v| *v = (*v - m) / s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
}

/// Subjects in order of first appearance.
pub fn subjects(recordings: &[Recording]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in recordings {
        if !out.contains(&r.subject_id) {
            out.push(r.subject_id.clone());
        }
    }
    out
}

/// One fold per subject, the subject held out as the test set.
pub fn loso_folds(recordings: &[Recording]) -> Result<Vec<Fold>> {
    let subjects = subjects(recordings);
    if subjects.len() < 2 {
        return Err(Error::Config(format!(
            "leave-one-subject-out needs at least two subjects, found {}",
            subjects.len()
        )));
    }
    Ok(subjects
        .iter()
        .map(|test| Fold {
            test_subject: test.clone(),
            train_subjects: subjects.iter().filter(|s| *s != test).cloned().collect(),
        })
        .collect())
}

/// Index batches into the labelled and unlabelled pools for one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
}

/// Unlabelled windows are consumed exactly once per epoch; labelled windows
/// are cycled, reshuffled at every wrap and at the start of every epoch.
/// Every labelled batch holds `batch` windows, including the one paired with
/// a short final unlabelled batch.
#[derive(Debug, Clone)]
pub struct CyclicSampler {
    n_labelled: usize,
    n_unlabelled: usize,
    batch: usize,
    rng: Rng64,
}

impl CyclicSampler {
    pub fn new(n_labelled: usize, n_unlabelled: usize, batch: usize, seed: u64) -> Result<Self> {
        if n_labelled == 0 {
            return Err(Error::Data("labelled pool is empty".into()));
        }
        if batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(Self {
            n_labelled,
            n_unlabelled,
            batch,
            rng: seeded(seed),
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        let driver = if self.n_unlabelled > 0 {
            self.n_unlabelled
        } else {
            self.n_labelled
        };
        driver.div_ceil(self.batch)
    }

    pub fn next_epoch(&mut self) -> Vec<Batch> {
        if self.n_unlabelled == 0 {
            let mut order: Vec<usize> = (0..self.n_labelled).collect();
            order.shuffle(&mut self.rng);
            return order
                .chunks(self.batch)
                .map(|c| Batch {
                    labelled: c.to_vec(),
                    unlabelled: Vec::new(),
                })
                .collect();
        }
        let mut unlabelled: Vec<usize> = (0..self.n_unlabelled).collect();
        unlabelled.shuffle(&mut self.rng);
        let mut cycle: Vec<usize> = (0..self.n_labelled).collect();
        cycle.shuffle(&mut self.rng);
        let mut cursor = 0;
        unlabelled
            .chunks(self.batch)
            .map(|u| {
                let mut labelled = Vec::with_capacity(self.batch);
                while labelled.len() < self.batch {
                    if cursor == cycle.len() {
                        cycle.shuffle(&mut self.rng);
                        cursor = 0;
                    }
                    labelled.push(cycle[cursor]);
                    cursor += 1;
                }
                Batch {
                    labelled,
                    unlabelled: u.to_vec(),
                }
            })
            .collect()
    }
}
