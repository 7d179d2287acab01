//! Synthetic multi-subject activity streams.
//!
//! Each class is a sum of sinusoids at a class-specific base frequency plus a
//! class-specific second-harmonic mix and per-channel offset. Subjects perturb
//! amplitude, phase, offset and (slightly) frequency, so neighbouring classes
//! overlap across subjects. Each subject's recording is a shuffled sequence of
//! single-class bouts.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::Recording;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub subjects: usize,
    pub classes: usize,
    pub channels: usize,
    /// Samples per (subject, class), split evenly over `bouts` bouts.
    pub samples_per_class: usize,
    pub bouts: usize,
    /// Base frequency of class 0, in cycles per sample.
    pub base_frequency: f64,
    /// Spacing between class base frequencies.
    pub frequency_step: f64,
    /// Subject frequency jitter as a fraction of `frequency_step`.
    pub frequency_jitter: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            subjects: 8,
            classes: 6,
            channels: 3,
            samples_per_class: 240,
            bouts: 4,
            base_frequency: 0.04,
            frequency_step: 0.035,
            frequency_jitter: 0.4,
            noise_std: 0.1,
            seed: 1,
        }
    }
}

/// Per-class shape shared by every subject.
#[derive(Debug, Clone)]
struct ClassShape {
    amplitude: Vec<f64>,
    offset: Vec<f64>,
    harmonic: f64,
}

/// Subject-specific distortion.
#[derive(Debug, Clone)]
struct SubjectStyle {
    gain: Vec<f64>,
    offset: Vec<f64>,
    frequency_shift: Vec<f64>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.subjects < 2 || self.classes < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 subjects and 2 classes (got {} and {})",
                self.subjects, self.classes
            )));
        }
        if self.channels == 0 || self.bouts == 0 || self.samples_per_class < self.bouts {
            return Err(Error::Config("synthetic data needs channels, bouts and samples per bout".into()));
        }
        let top = self.class_frequency(self.classes - 1) + self.frequency_jitter * self.frequency_step;
        if !(self.base_frequency > 0.0 && top < 0.5) {
            return Err(Error::Config(format!(
                "class frequencies must stay inside (0, 0.5) cycles/sample, highest is {top}"
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    /// Nominal base frequency of `class`, cycles per sample.
    pub fn class_frequency(&self, class: usize) -> f64 {
        self.base_frequency + class as f64 * self.frequency_step
    }

    pub fn bout_len(&self) -> usize {
        self.samples_per_class / self.bouts
    }

    fn class_shapes(&self) -> Vec<ClassShape> {
        (0..self.classes)
            .map(|c| {
                let mut rng = substream(self.seed, 0x1000 + c as u64);
                ClassShape {
                    amplitude: (0..self.channels).map(|_| rng.random_range(0.5..1.5)).collect(),
                    offset: (0..self.channels).map(|_| rng.random_range(-0.3..0.3)).collect(),
                    harmonic: rng.random_range(0.0..0.6),
                }
            })
            .collect()
    }

    fn subject_style(&self, subject: usize) -> SubjectStyle {
        let mut rng = substream(self.seed, 0x2000 + subject as u64);
        let jitter = self.frequency_jitter * self.frequency_step;
        SubjectStyle {
            gain: (0..self.channels).map(|_| rng.random_range(0.7..1.3)).collect(),
            offset: (0..self.channels).map(|_| rng.random_range(-0.2..0.2)).collect(),
            frequency_shift: (0..self.classes)
                .map(|_| if jitter > 0.0 { rng.random_range(-jitter..jitter) } else { 0.0 })
                .collect(),
        }
    }

    /// Frequency actually used for `(subject, class)`.
    pub fn subject_frequency(&self, subject: usize, class: usize) -> f64 {
        self.class_frequency(class) + self.subject_style(subject).frequency_shift[class]
    }

    pub fn subject_id(&self, subject: usize) -> String {
        format!("s{:02}", subject + 1)
    }
}

/// One recording per subject, channels named `ch_0..`.
pub fn generate(spec: &SynthSpec) -> Result<Vec<Recording>> {
    spec.validate()?;
    let shapes = spec.class_shapes();
    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let bout = spec.bout_len();
    (0..spec.subjects)
        .map(|s| {
            let style = spec.subject_style(s);
            let mut rng = substream(spec.seed, 0x3000 + s as u64);
            let mut order: Vec<usize> = (0..spec.classes).flat_map(|c| core::iter::repeat_n(c, spec.bouts)).collect();
            order.shuffle(&mut rng);
            let mut channels: Vec<Vec<f64>> = (0..spec.channels).map(|_| Vec::with_capacity(order.len() * bout)).collect();
            let mut labels = Vec::with_capacity(order.len() * bout);
            for &c in &order {
                let f = spec.class_frequency(c) + style.frequency_shift[c];
                let shape = &shapes[c];
                for (h, ch) in channels.iter_mut().enumerate() {
                    let phase = rng.random_range(0.0..2.0 * PI);
                    let phase2 = rng.random_range(0.0..2.0 * PI);
                    let amp = shape.amplitude[h] * style.gain[h];
                    for t in 0..bout {
                        let x = 2.0 * PI * f * t as f64;
                        let clean = libm::sin(x + phase) + shape.harmonic * libm::sin(2.0 * x + phase2);
                        let v = shape.offset[h] + style.offset[h] + amp * clean;
                        ch.push(if spec.noise_std > 0.0 { v + noise.sample(&mut rng) } else { v });
                    }
                }
                labels.extend(core::iter::repeat_n(c, bout));
            }
            let names = (0..spec.channels).map(|h| format!("ch_{h}")).collect();
            Recording::new(format!("synth_{}", spec.subject_id(s)), spec.subject_id(s), names, channels, labels)
        })
        .collect()
}
