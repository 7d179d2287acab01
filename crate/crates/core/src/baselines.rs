//! Conventional semi-supervised baselines sharing the HAR backbone:
//! supervised-only, π-Model, Mean Teacher, Pseudo-Labeling, VAT and VAT with
//! entropy minimisation.
//!
//! Each step records its loss on a caller-owned tape and returns the total
//! node; the caller runs backward and the optimizer. Consistency and pseudo
//! targets are always computed gradient-free.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::model::{argmax, HarModel};
use crate::rng::{seeded, substream, Rng64};
use crate::tensor::{Mode, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmKind {
    Supervised,
    PiModel,
    MeanTeacher,
    PseudoLabeling,
    Vat,
    Vatent,
    Mixhar,
    MixharNocal,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 8] = [
        Self::Supervised,
        Self::PiModel,
        Self::MeanTeacher,
        Self::PseudoLabeling,
        Self::Vat,
        Self::Vatent,
        Self::Mixhar,
        Self::MixharNocal,
    ];

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Self::Supervised => "Supervised",
            Self::PiModel => "Pi-Model",
            Self::MeanTeacher => "Mean Teacher",
            Self::PseudoLabeling => "Pseudo-Labeling",
            Self::Vat => "VAT",
            Self::Vatent => "VATENT",
            Self::Mixhar => "MixHAR",
            Self::MixharNocal => "MixHAR (w/o Cal)",
        }
    }

    pub fn uses_calibration(self) -> bool {
        self == Self::Mixhar
    }

    pub fn uses_unlabelled(self) -> bool {
        self != Self::Supervised
    }
}

/// Algorithm choice plus its hyperparameters. Fields not used by `kind` are
/// ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlgorithmSpec {
    pub kind: AlgorithmKind,
    #[serde(default)]
    pub hyper: Hyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    /// Mean Teacher EMA decay.
    pub ema_decay: f64,
    /// VAT probe step.
    pub xi: f64,
    /// VAT perturbation radius.
    pub eps: f64,
    /// VAT power iterations.
    pub iters: usize,
    /// Weight of the VATENT entropy term.
    pub entropy_weight: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        let vat = VatConfig::default();
        Self {
            ema_decay: 0.9,
            xi: vat.xi,
            eps: vat.eps,
            iters: vat.iters,
            entropy_weight: 1.0,
        }
    }
}

impl Hyper {
    pub fn vat(&self) -> VatConfig {
        VatConfig {
            xi: self.xi,
            eps: self.eps,
            iters: self.iters,
        }
    }
}

impl AlgorithmSpec {
    pub fn new(kind: AlgorithmKind) -> Self {
        Self {
            kind,
            hyper: Hyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let h = &self.hyper;
        let bad = |msg: &str| Err(Error::Config(alloc::format!("{:?}: {msg}", self.kind)));
        match self.kind {
            AlgorithmKind::MeanTeacher if !(0.0..=1.0).contains(&h.ema_decay) => bad("ema_decay must lie in [0, 1]"),
            AlgorithmKind::Vat | AlgorithmKind::Vatent if !(h.xi > 0.0 && h.xi.is_finite()) => bad("xi must be positive"),
            AlgorithmKind::Vat | AlgorithmKind::Vatent if !(h.eps > 0.0 && h.eps.is_finite()) => bad("eps must be positive"),
            AlgorithmKind::Vat | AlgorithmKind::Vatent if h.iters == 0 => bad("iters must be at least 1"),
            AlgorithmKind::Vatent if !(h.entropy_weight >= 0.0 && h.entropy_weight.is_finite()) => {
                bad("entropy_weight must be non-negative")
            }
            _ => Ok(()),
        }
    }
}

/// Independent streams for the labelled and unlabelled halves of a step, so
/// that the labelled branch draws the same dropout masks under every
/// algorithm.
#[derive(Debug, Clone)]
pub struct StepRngs {
    pub labelled: Rng64,
    pub unlabelled: Rng64,
}

impl StepRngs {
    pub fn new(step_seed: u64) -> Self {
        Self {
            labelled: substream(step_seed, 1),
            unlabelled: substream(step_seed, 2),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StepLoss {
    pub total: Var,
    /// Labelled cross-entropy.
    pub supervised: f64,
    /// Weighted sum of every unlabelled term.
    pub unlabelled: f64,
}

/// Labelled batch as `(window values, class id)` pairs.
pub type LabelledBatch<'a> = [(&'a [f64], usize)];

fn one_hot_targets(labels: impl Iterator<Item = usize>, num_classes: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut n = 0;
    for y in labels {
        let mut row = vec![0.0; num_classes];
        row[y] = 1.0;
        data.extend(row);
        n += 1;
    }
    Ok(Tensor::new(vec![n, num_classes], data)?)
}

fn probs_node<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &HarModel,
    vars: &[Var],
    input: Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let x = tape.constant(input);
    let out = model.forward(tape, vars, x, mode, rng)?;
    Ok(tape.softmax(out.logits)?)
}

/// Mean cross-entropy on the labelled batch, train mode.
pub fn supervised_part<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &HarModel,
    vars: &[Var],
    labelled: &LabelledBatch<'_>,
    rng: &mut R,
) -> Result<Var> {
    let input = model.batch_input(labelled.iter().map(|(x, _)| *x))?;
    let probs = probs_node(tape, model, vars, input, Mode::Train, rng)?;
    let targets = one_hot_targets(labelled.iter().map(|(_, y)| *y), model.num_classes())?;
    let rows = tape.cross_entropy(probs, &targets)?;
    Ok(tape.mean(rows)?)
}

fn finish(tape: &mut Tape, supervised: Var, unlabelled: Option<Var>) -> Result<StepLoss> {
    let sup = tape.value(supervised).item();
    match unlabelled {
        Some(u) => {
            let total = tape.add(supervised, u)?;
            Ok(StepLoss {
                total,
                supervised: sup,
                unlabelled: tape.value(u).item(),
            })
        }
        None => Ok(StepLoss {
            total: supervised,
            supervised: sup,
            unlabelled: 0.0,
        }),
    }
}

pub fn supervised_step(
    tape: &mut Tape,
    model: &HarModel,
    params: &ParamStore,
    labelled: &LabelledBatch<'_>,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    let vars = tape.params(params);
    let sup = supervised_part(tape, model, &vars, labelled, &mut rngs.labelled)?;
    finish(tape, sup, None)
}

/// `gamma * mean_rows(mse(probs, target))` as a scalar node.
fn weighted_mean_mse(tape: &mut Tape, probs: Var, target: &Tensor, gamma: f64) -> Result<Var> {
    let rows = tape.mse(probs, target)?;
    let n = tape.value(rows).numel();
    Ok(tape.weighted_sum(rows, vec![gamma / n as f64; n])?)
}

fn as_tensor(rows: Vec<f64>, n: usize, c: usize) -> Result<Tensor> {
    Ok(Tensor::new(vec![n, c], rows)?)
}

/// π-Model: consistency between the plain view (detached target) and a
/// scaled view, both with dropout active.
#[allow(clippy::too_many_arguments)]
pub fn pi_step(
    tape: &mut Tape,
    model: &HarModel,
    params: &ParamStore,
    labelled: &LabelledBatch<'_>,
    unlabelled: &[&[f64]],
    gamma: f64,
    augment: &AugmentSpec,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    let vars = tape.params(params);
    let sup = supervised_part(tape, model, &vars, labelled, &mut rngs.labelled)?;
    if unlabelled.is_empty() {
        return finish(tape, sup, None);
    }
    let rng = &mut rngs.unlabelled;
    let (h, l, c) = (model.spec().in_channels, model.spec().window_len, model.num_classes());
    let target = model.predict_probs(params, unlabelled, Mode::Train, rng)?;
    let target = as_tensor(target, unlabelled.len(), c)?;
    let augmented: Vec<Vec<f64>> = unlabelled.iter().map(|x| augment.apply(x, h, l, rng)).collect();
    let input = model.batch_input(augmented.iter().map(Vec::as_slice))?;
    let probs = probs_node(tape, model, &vars, input, Mode::Train, rng)?;
    let cons = weighted_mean_mse(tape, probs, &target, gamma)?;
    finish(tape, sup, Some(cons))
}

/// `teacher <- decay * teacher + (1 - decay) * student`.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, decay: f64) {
    assert_eq!(teacher.len(), student.len(), "ema: parameter lists differ");
    for (t, s) in teacher.values_mut().iter_mut().zip(student.values()) {
        assert_eq!(t.shape(), s.shape(), "ema: parameter shapes differ");
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = decay * *tv + (1.0 - decay) * sv;
        }
    }
}

/// Mean Teacher: student predictions pulled towards the EMA teacher's.
#[allow(clippy::too_many_arguments)]
pub fn mt_step(
    tape: &mut Tape,
    model: &HarModel,
    student: &ParamStore,
    teacher: &ParamStore,
    labelled: &LabelledBatch<'_>,
    unlabelled: &[&[f64]],
    gamma: f64,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    let vars = tape.params(student);
    let sup = supervised_part(tape, model, &vars, labelled, &mut rngs.labelled)?;
    if unlabelled.is_empty() {
        return finish(tape, sup, None);
    }
    let rng = &mut rngs.unlabelled;
    let c = model.num_classes();
    let target = model.predict_probs(teacher, unlabelled, Mode::Train, rng)?;
    let target = as_tensor(target, unlabelled.len(), c)?;
    let input = model.batch_input(unlabelled.iter().copied())?;
    let probs = probs_node(tape, model, &vars, input, Mode::Train, rng)?;
    let cons = weighted_mean_mse(tape, probs, &target, gamma)?;
    finish(tape, sup, Some(cons))
}

/// Pseudo-Labeling: cross-entropy against the model's own eval-mode argmax,
/// recomputed every step, no confidence threshold.
#[allow(clippy::too_many_arguments)]
pub fn pl_step(
    tape: &mut Tape,
    model: &HarModel,
    params: &ParamStore,
    labelled: &LabelledBatch<'_>,
    unlabelled: &[&[f64]],
    gamma: f64,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    let vars = tape.params(params);
    let sup = supervised_part(tape, model, &vars, labelled, &mut rngs.labelled)?;
    if unlabelled.is_empty() {
        return finish(tape, sup, None);
    }
    let rng = &mut rngs.unlabelled;
    let c = model.num_classes();
    let targets = pseudo_targets(model, params, unlabelled, rng)?;
    let targets = one_hot_targets(targets.into_iter(), c)?;
    let input = model.batch_input(unlabelled.iter().copied())?;
    let probs = probs_node(tape, model, &vars, input, Mode::Train, rng)?;
    let rows = tape.cross_entropy(probs, &targets)?;
    let n = unlabelled.len();
    let term = tape.weighted_sum(rows, vec![gamma / n as f64; n])?;
    finish(tape, sup, Some(term))
}

/// Hard pseudo labels from a gradient-free eval-mode pass.
pub fn pseudo_targets<R: Rng + ?Sized>(
    model: &HarModel,
    params: &ParamStore,
    unlabelled: &[&[f64]],
    rng: &mut R,
) -> Result<Vec<usize>> {
    let c = model.num_classes();
    let probs = model.predict_probs(params, unlabelled, Mode::Eval, rng)?;
    Ok(probs.chunks(c).map(argmax).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VatConfig {
    /// Step used when probing the adversarial direction.
    pub xi: f64,
    /// L2 radius of the final perturbation.
    pub eps: f64,
    pub iters: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            xi: 0.8,
            eps: 10.0,
            iters: 1,
        }
    }
}

fn normalise_rows(data: &mut [f64], width: usize) -> Vec<bool> {
    data.chunks_mut(width)
        .map(|row| {
            let norm = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 0.0 && norm.is_finite() {
                row.iter_mut().for_each(|v| *v /= norm);
                true
            } else {
                false
            }
        })
        .collect()
}

/// Power-iteration estimate of the adversarial direction for an arbitrary
/// differentiable `probs = forward(tape, input)`.
///
/// `input` is `[N, ...]`; `clean` holds the detached clean predictions
/// `[N, C]`. Returns `eps * d` with each row of `d` unit-norm.
pub fn vat_perturbation_with<R, F>(input: &Tensor, clean: &Tensor, cfg: &VatConfig, rng: &mut R, forward: F) -> Result<Tensor>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let n = input.shape()[0];
    let width = input.numel() / n;
    let mut dir: Vec<f64> = (0..input.numel()).map(|_| StandardNormal.sample(rng)).collect();
    normalise_rows(&mut dir, width);
    for _ in 0..cfg.iters {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let d = tape.leaf(Tensor::new(input.shape().to_vec(), dir.clone())?, true);
        let step = tape.scale(d, cfg.xi);
        let probe = tape.add(x, step)?;
        let probs = forward(&mut tape, probe)?;
        let kl = tape.kl_divergence(probs, clean)?;
        let loss = tape.sum(kl)?;
        let grads = tape.backward(loss)?;
        let mut g = grads.get(d).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; dir.len()]);
        let ok = normalise_rows(&mut g, width);
        for (row, ok) in ok.iter().enumerate() {
            if *ok {
                dir[row * width..(row + 1) * width].copy_from_slice(&g[row * width..(row + 1) * width]);
            } else {
                log::debug!("vat: zero KL gradient for row {row}, keeping previous direction");
            }
        }
    }
    let data = dir.iter().map(|v| v * cfg.eps).collect();
    Ok(Tensor::new(input.shape().to_vec(), data)?)
}

/// Adversarial perturbations for a batch of unlabelled windows, eval mode.
pub fn vat_perturbation<R: Rng + ?Sized>(
    model: &HarModel,
    params: &ParamStore,
    unlabelled: &[&[f64]],
    cfg: &VatConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let input = model.batch_input(unlabelled.iter().copied())?;
    let c = model.num_classes();
    let clean = as_tensor(model.predict_probs(params, unlabelled, Mode::Eval, rng)?, unlabelled.len(), c)?;
    vat_perturbation_with(&input, &clean, cfg, rng, |tape, probe| {
        let vars = tape.frozen_params(params);
        let mut no_dropout = seeded(0);
        let out = model.forward(tape, &vars, probe, Mode::Eval, &mut no_dropout)?;
        Ok(tape.softmax(out.logits)?)
    })
}

/// VAT (and, with `entropy_weight > 0`, VATENT).
#[allow(clippy::too_many_arguments)]
pub fn vat_step(
    tape: &mut Tape,
    model: &HarModel,
    params: &ParamStore,
    labelled: &LabelledBatch<'_>,
    unlabelled: &[&[f64]],
    gamma: f64,
    entropy_weight: f64,
    cfg: &VatConfig,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    if entropy_weight < 0.0 {
        return Err(Error::Config("entropy weight must be non-negative".into()));
    }
    let vars = tape.params(params);
    let sup = supervised_part(tape, model, &vars, labelled, &mut rngs.labelled)?;
    if unlabelled.is_empty() {
        return finish(tape, sup, None);
    }
    let rng = &mut rngs.unlabelled;
    let n = unlabelled.len();
    let c = model.num_classes();
    let r_adv = vat_perturbation(model, params, unlabelled, cfg, rng)?;
    let clean = as_tensor(model.predict_probs(params, unlabelled, Mode::Eval, rng)?, n, c)?;
    let input = model.batch_input(unlabelled.iter().copied())?;
    let shifted: Vec<f64> = input.data().iter().zip(r_adv.data()).map(|(x, r)| x + r).collect();
    let shifted = Tensor::new(input.shape().to_vec(), shifted)?;
    let adv_probs = probs_node(tape, model, &vars, shifted, Mode::Train, rng)?;
    let kl = tape.kl_divergence(adv_probs, &clean)?;
    let mut unl = tape.weighted_sum(kl, vec![gamma / n as f64; n])?;
    if entropy_weight > 0.0 {
        let probs = probs_node(tape, model, &vars, input, Mode::Train, rng)?;
        let ent = tape.entropy(probs)?;
        let ent = tape.weighted_sum(ent, vec![entropy_weight / n as f64; n])?;
        unl = tape.add(unl, ent)?;
    }
    finish(tape, sup, Some(unl))
}
