//! The HAR network: three conv blocks, the covariance-driven mixing
//! calibration block, and a two-layer classifier head.
//!
//! Shape chain for a `H x L` window with the default backbone:
//! `H x L -> 96 x (L-10) -> 96 x (L-10) -> C`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::{seeded, Rng64};
use crate::tensor::{CovAxis, Mode, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub filters: [usize; 3],
    pub kernel_sizes: [usize; 3],
    pub dropout_rate: f64,
    pub fc_hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            filters: [32, 64, 96],
            kernel_sizes: [5, 5, 3],
            dropout_rate: 0.3,
            fc_hidden: 64,
        }
    }
}

/// Input geometry plus backbone hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub in_channels: usize,
    pub window_len: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub backbone: BackboneConfig,
}

// Parameter slots, in declaration order.
const CONV_W: [usize; 3] = [0, 2, 4];
const CONV_B: [usize; 3] = [1, 3, 5];
const CAL_SENSOR_GROUP_W: usize = 6;
const CAL_SENSOR_GROUP_B: usize = 7;
const CAL_SENSOR_MIX_W: usize = 8;
const CAL_SENSOR_MIX_B: usize = 9;
const CAL_TIME_GROUP_W: usize = 10;
const CAL_TIME_GROUP_B: usize = 11;
const CAL_TIME_MIX_W: usize = 12;
const CAL_TIME_MIX_B: usize = 13;
const FC1_W: usize = 14;
const FC1_B: usize = 15;
const FC2_W: usize = 16;
const FC2_B: usize = 17;

/// Nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// Backbone feature map `[N, c, t]`.
    pub features: Var,
    /// Feature map after calibration (same node as `features` when disabled).
    pub calibrated: Var,
    /// ReLU activations of the first dense layer, `[N, fc_hidden]`.
    pub embedding: Var,
    pub logits: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarModel {
    spec: ModelSpec,
    calibration: bool,
    feature_channels: usize,
    feature_len: usize,
}

impl HarModel {
    pub fn new(spec: ModelSpec, calibration: bool) -> Result<Self> {
        let shrink: usize = spec.backbone.kernel_sizes.iter().map(|k| k.saturating_sub(1)).sum();
        if spec.in_channels == 0 || spec.num_classes < 2 {
            return Err(Error::Config(format!(
                "model needs at least one input channel and two classes (got H={}, C={})",
                spec.in_channels, spec.num_classes
            )));
        }
        if spec.backbone.kernel_sizes.contains(&0) || spec.backbone.filters.contains(&0) {
            return Err(Error::Config("filters and kernel sizes must be positive".into()));
        }
        if spec.window_len <= shrink {
            return Err(Error::Config(format!(
                "window length {} leaves no temporal extent after valid convolutions (needs > {shrink})",
                spec.window_len
            )));
        }
        let feature_len = spec.window_len - shrink;
        if calibration && feature_len < 2 {
            return Err(Error::Config("calibration needs a feature map with t >= 2".into()));
        }
        if !(0.0..1.0).contains(&spec.backbone.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        Ok(Self {
            feature_channels: spec.backbone.filters[2],
            feature_len,
            spec,
            calibration,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn uses_calibration(&self) -> bool {
        self.calibration
    }

    /// Same weights layout with calibration switched on or off.
    pub fn with_calibration(&self, calibration: bool) -> Self {
        Self {
            calibration,
            ..self.clone()
        }
    }

    /// `(c, t)` of the backbone feature map.
    pub fn feature_shape(&self) -> (usize, usize) {
        (self.feature_channels, self.feature_len)
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn embedding_dim(&self) -> usize {
        self.spec.backbone.fc_hidden
    }

    /// Parameter shapes in declaration order. Calibration weights are always
    /// allocated so checkpoints do not depend on the algorithm.
    pub fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let b = &self.spec.backbone;
        let (c, t) = self.feature_shape();
        let h = self.spec.in_channels;
        vec![
            ("conv1.weight", vec![b.filters[0], h, b.kernel_sizes[0]]),
            ("conv1.bias", vec![b.filters[0]]),
            ("conv2.weight", vec![b.filters[1], b.filters[0], b.kernel_sizes[1]]),
            ("conv2.bias", vec![b.filters[1]]),
            ("conv3.weight", vec![b.filters[2], b.filters[1], b.kernel_sizes[2]]),
            ("conv3.bias", vec![b.filters[2]]),
            ("calibration.sensor_group.weight", vec![c, 1, c]),
            ("calibration.sensor_group.bias", vec![c]),
            ("calibration.sensor_mix.weight", vec![c, c, 1]),
            ("calibration.sensor_mix.bias", vec![c]),
            ("calibration.time_group.weight", vec![t, 1, t]),
            ("calibration.time_group.bias", vec![t]),
            ("calibration.time_mix.weight", vec![t, t, 1]),
            ("calibration.time_mix.bias", vec![t]),
            ("fc1.weight", vec![b.fc_hidden, c * t]),
            ("fc1.bias", vec![b.fc_hidden]),
            ("fc2.weight", vec![self.spec.num_classes, b.fc_hidden]),
            ("fc2.bias", vec![self.spec.num_classes]),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn zero_params(&self) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            store.push(name, Tensor::zeros(shape));
        }
        store
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = seeded(seed);
        let groups_of = |name: &str| -> usize {
            if name.ends_with("_group.weight") {
                self.param_shapes().iter().find(|(n, _)| *n == name).map(|(_, s)| s[0]).unwrap_or(1)
            } else {
                1
            }
        };
        let mut store = ParamStore::new();
        for (name, shape) in self.param_shapes() {
            let numel: usize = shape.iter().product();
            if name.ends_with(".bias") {
                store.push(name, Tensor::zeros(shape));
                continue;
            }
            let (fan_in, fan_out) = match shape.as_slice() {
                [o, i, k] => {
                    let g = groups_of(name);
                    (i * k, (o / g) * k)
                }
                [o, i] => (*i, *o),
                _ => unreachable!("weights are rank 2 or 3"),
            };
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let data = (0..numel).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect();
            store.push(name, Tensor::new(shape, data).expect("shape matches numel"));
        }
        store
    }

    /// Checks that `params` has exactly this model's layout.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let shapes = self.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (name, shape)) in shapes.iter().enumerate() {
            if params.name(i) != *name || params.get(i).shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {i} mismatch: expected {name} {:?}, found {} {:?}",
                    shape,
                    params.name(i),
                    params.get(i).shape()
                )));
            }
        }
        Ok(())
    }

    /// Stacks `H x L` windows into a `[N, H, L]` tensor.
    pub fn batch_input<'a>(&self, windows: impl IntoIterator<Item = &'a [f64]>) -> Result<Tensor> {
        let per = self.spec.in_channels * self.spec.window_len;
        let mut data = Vec::new();
        let mut n = 0;
        for w in windows {
            if w.len() != per {
                return Err(Error::Validation(format!(
                    "window has {} values, model expects {} x {}",
                    w.len(),
                    self.spec.in_channels,
                    self.spec.window_len
                )));
            }
            data.extend_from_slice(w);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Validation("empty batch".into()));
        }
        Ok(Tensor::new(vec![n, self.spec.in_channels, self.spec.window_len], data)?)
    }

    /// Three `[conv -> relu -> dropout]` blocks.
    pub fn backbone_forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let rate = self.spec.backbone.dropout_rate;
        let mut x = input;
        for block in 0..3 {
            x = tape.conv1d(x, params[CONV_W[block]], params[CONV_B[block]], 0, 1)?;
            x = tape.relu(x)?;
            x = tape.dropout(x, rate, mode, rng)?;
        }
        Ok(x)
    }

    /// Sensor-wise and time-wise covariance attention, `F * (a_c a_t^T)`.
    pub fn calibration_attention(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<Var> {
        let shape = tape.value(features).shape().to_vec();
        let batch = shape[0];
        let (c, t) = self.feature_shape();

        let m_c = tape.covariance(features, CovAxis::Sensor)?;
        let a_c = tape.conv1d(m_c, params[CAL_SENSOR_GROUP_W], params[CAL_SENSOR_GROUP_B], 0, c)?;
        let a_c = tape.conv1d(a_c, params[CAL_SENSOR_MIX_W], params[CAL_SENSOR_MIX_B], 0, 1)?;
        let a_c = tape.sigmoid(a_c)?;
        let a_c = tape.reshape(a_c, vec![batch, c])?;

        let m_t = tape.covariance(features, CovAxis::Time)?;
        let a_t = tape.conv1d(m_t, params[CAL_TIME_GROUP_W], params[CAL_TIME_GROUP_B], 0, t)?;
        let a_t = tape.conv1d(a_t, params[CAL_TIME_MIX_W], params[CAL_TIME_MIX_B], 0, 1)?;
        let a_t = tape.sigmoid(a_t)?;
        let a_t = tape.reshape(a_t, vec![batch, t])?;

        let attention = tape.outer(a_c, a_t)?;
        Ok(tape.mul(features, attention)?)
    }

    /// Flatten, dense + ReLU, dense. Returns `(embedding, logits)`.
    pub fn classify(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<(Var, Var)> {
        let batch = tape.value(features).shape()[0];
        let (c, t) = self.feature_shape();
        let flat = tape.reshape(features, vec![batch, c * t])?;
        let hidden = tape.dense(flat, params[FC1_W], params[FC1_B])?;
        let hidden = tape.relu(hidden)?;
        let logits = tape.dense(hidden, params[FC2_W], params[FC2_B])?;
        Ok((hidden, logits))
    }

    /// Full forward pass from a `[N, H, L]` input node.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        params: &[Var],
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardOutput> {
        let features = self.backbone_forward(tape, params, input, mode, rng)?;
        let calibrated = if self.calibration {
            self.calibration_attention(tape, params, features)?
        } else {
            features
        };
        let (embedding, logits) = self.classify(tape, params, calibrated)?;
        Ok(ForwardOutput {
            features,
            calibrated,
            embedding,
            logits,
        })
    }

    /// Gradient-free forward over many windows, chunked. Returns row-major
    /// `[N, C]` softmax probabilities.
    pub fn predict_probs<'a, R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        windows: &[&'a [f64]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Vec<f64>> {
        self.gradient_free(params, windows, mode, rng, |tape, out| {
            let p = tape.softmax(out.logits)?;
            Ok(tape.value(p).data().to_vec())
        })
    }

    /// Gradient-free eval-mode embedding (first dense layer activations).
    pub fn embed(&self, params: &ParamStore, windows: &[&[f64]]) -> Result<Vec<f64>> {
        let mut rng: Rng64 = seeded(0);
        self.gradient_free(params, windows, Mode::Eval, &mut rng, |tape, out| {
            Ok(tape.value(out.embedding).data().to_vec())
        })
    }

    fn gradient_free<R: Rng + ?Sized>(
        &self,
        params: &ParamStore,
        windows: &[&[f64]],
        mode: Mode,
        rng: &mut R,
        read: impl Fn(&mut Tape, &ForwardOutput) -> Result<Vec<f64>>,
    ) -> Result<Vec<f64>> {
        const CHUNK: usize = 128;
        let mut out = Vec::new();
        for chunk in windows.chunks(CHUNK) {
            let mut tape = Tape::new();
            let vars = tape.frozen_params(params);
            let x = tape.constant(self.batch_input(chunk.iter().copied())?);
            let fwd = self.forward(&mut tape, &vars, x, mode, rng)?;
            out.extend(read(&mut tape, &fwd)?);
        }
        Ok(out)
    }
}

/// Sensor-wise `c x c` and time-wise `t x t` covariances of one `c x t` map.
pub fn covariances(features: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let m_c = tape.covariance(f, CovAxis::Sensor)?;
    let m_t = tape.covariance(f, CovAxis::Time)?;
    Ok((tape.value(m_c).clone(), tape.value(m_t).clone()))
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
