//! MixHAR: averaged pseudo labels over two augmentations, sharpening,
//! labelled/unlabelled MixUp over a super batch, and origin-dependent loss
//! routing (cross-entropy when a labelled parent is involved, weighted MSE
//! otherwise).

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::model::{argmax, HarModel};
use crate::tensor::{Mode, ParamStore, Tape, Tensor, Var, LOG_FLOOR};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    Labelled,
    Pseudo,
    Mixed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    pub probs: Vec<f64>,
    pub origin: LabelOrigin,
}

impl SoftLabel {
    pub fn one_hot(class: usize, num_classes: usize) -> Self {
        let mut probs = vec![0.0; num_classes];
        probs[class] = 1.0;
        Self {
            probs,
            origin: LabelOrigin::Labelled,
        }
    }
}

/// Both augmented views of one unlabelled window and their shared label.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelled {
    pub a1: Vec<f64>,
    pub a2: Vec<f64>,
    pub soft_label: SoftLabel,
}

/// Pseudo labels for a batch: the average of the eval-mode predictions on
/// the two augmented views. No gradient is recorded.
pub fn pseudo_label_batch<R: Rng + ?Sized>(
    model: &HarModel,
    params: &ParamStore,
    batch: &[&[f64]],
    a1: &AugmentSpec,
    a2: &AugmentSpec,
    rng: &mut R,
) -> Result<Vec<PseudoLabelled>> {
    if batch.is_empty() {
        return Ok(Vec::new());
    }
    let (h, l) = (model.spec().in_channels, model.spec().window_len);
    let view1: Vec<Vec<f64>> = batch.iter().map(|x| a1.apply(x, h, l, rng)).collect();
    let view2: Vec<Vec<f64>> = batch.iter().map(|x| a2.apply(x, h, l, rng)).collect();
    let refs1: Vec<&[f64]> = view1.iter().map(Vec::as_slice).collect();
    let refs2: Vec<&[f64]> = view2.iter().map(Vec::as_slice).collect();
    let p1 = model.predict_probs(params, &refs1, Mode::Eval, rng)?;
    let p2 = model.predict_probs(params, &refs2, Mode::Eval, rng)?;
    let c = model.num_classes();
    Ok(view1
        .into_iter()
        .zip(view2)
        .enumerate()
        .map(|(k, (a1, a2))| {
            let probs = p1[k * c..(k + 1) * c]
                .iter()
                .zip(&p2[k * c..(k + 1) * c])
                .map(|(x, y)| 0.5 * (x + y))
                .collect();
            PseudoLabelled {
                a1,
                a2,
                soft_label: SoftLabel {
                    probs,
                    origin: LabelOrigin::Pseudo,
                },
            }
        })
        .collect())
}

pub fn pseudo_label<R: Rng + ?Sized>(
    model: &HarModel,
    params: &ParamStore,
    window: &[f64],
    a1: &AugmentSpec,
    a2: &AugmentSpec,
    rng: &mut R,
) -> Result<PseudoLabelled> {
    Ok(pseudo_label_batch(model, params, &[window], a1, a2, rng)?.remove(0))
}

/// Temperatures below this collapse to an argmax one-hot.
pub const SHARPEN_ONE_HOT_BELOW: f64 = 1e-3;

/// `p^(1/v) / ||p^(1/v)||_1`, entries floored at `LOG_FLOOR` first.
pub fn sharpen(p: &[f64], v: f64) -> Vec<f64> {
    assert!(v > 0.0, "sharpen temperature must be positive");
    if v < SHARPEN_ONE_HOT_BELOW {
        let mut out = vec![0.0; p.len()];
        out[argmax(p)] = 1.0;
        return out;
    }
    // log-space keeps p^(1/v) from underflowing for small v
    let logs: Vec<f64> = p.iter().map(|x| libm::log(x.max(LOG_FLOOR)) / v).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let powed: Vec<f64> = logs.iter().map(|l| libm::exp(l - max)).collect();
    let z: f64 = powed.iter().sum();
    powed.into_iter().map(|x| x / z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuperBatchEntry {
    pub values: Vec<f64>,
    pub label: Vec<f64>,
    pub origin: LabelOrigin,
}

/// `B ∪ U^A1 ∪ U^A2`, in that order, `|B| + 2|U|` entries. The sampler keeps
/// `|B|` fixed, so `|U|` is smaller on the short last step of an epoch and
/// zero without unlabelled data.
pub fn build_super_batch(
    labelled: &[(&[f64], usize)],
    pseudo: &[PseudoLabelled],
    num_classes: usize,
) -> Result<Vec<SuperBatchEntry>> {
    if labelled.is_empty() {
        return Err(Error::Validation("super batch needs at least one labelled window".into()));
    }
    let mut out = Vec::with_capacity(labelled.len() + 2 * pseudo.len());
    for (x, y) in labelled {
        out.push(SuperBatchEntry {
            values: x.to_vec(),
            label: SoftLabel::one_hot(*y, num_classes).probs,
            origin: LabelOrigin::Labelled,
        });
    }
    for p in pseudo {
        out.push(SuperBatchEntry {
            values: p.a1.clone(),
            label: p.soft_label.probs.clone(),
            origin: LabelOrigin::Pseudo,
        });
    }
    for p in pseudo {
        out.push(SuperBatchEntry {
            values: p.a2.clone(),
            label: p.soft_label.probs.clone(),
            origin: LabelOrigin::Pseudo,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedExample {
    pub values: Vec<f64>,
    pub soft_label: SoftLabel,
    /// Origins of the dominant element and of its shuffled partner.
    pub parents: (LabelOrigin, LabelOrigin),
    pub lambda_used: f64,
}

impl MixedExample {
    pub fn has_labelled_parent(&self) -> bool {
        self.parents.0 == LabelOrigin::Labelled || self.parents.1 == LabelOrigin::Labelled
    }
}

/// `Beta(beta, beta)` as `X / (X + Y)` with `X, Y ~ Gamma(beta, 1)`.
pub fn sample_beta<R: Rng + ?Sized>(beta: f64, rng: &mut R) -> f64 {
    let gamma = Gamma::new(beta, 1.0).expect("beta must be positive");
    let x = gamma.sample(rng);
    let y = gamma.sample(rng);
    if x + y == 0.0 {
        0.5
    } else {
        x / (x + y)
    }
}

/// Mixes entry `k` with entry `perm[k]` using `max(lambdas[k], 1 - lambdas[k])`.
pub fn mixup_with(batch: &[SuperBatchEntry], perm: &[usize], lambdas: &[f64]) -> Vec<MixedExample> {
    batch
        .iter()
        .zip(perm)
        .zip(lambdas)
        .map(|((s, &j), &lambda)| {
            let lambda = lambda.max(1.0 - lambda);
            let other = &batch[j];
            let mix = |a: &[f64], b: &[f64]| -> Vec<f64> {
                a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect()
            };
            MixedExample {
                values: mix(&s.values, &other.values),
                soft_label: SoftLabel {
                    probs: mix(&s.label, &other.label),
                    origin: LabelOrigin::Mixed,
                },
                parents: (s.origin, other.origin),
                lambda_used: lambda,
            }
        })
        .collect()
}

/// MixUp of the super batch against a uniformly shuffled copy of itself, one
/// `λ ~ Beta(beta, beta)` per pair.
pub fn mixup<R: Rng + ?Sized>(batch: &[SuperBatchEntry], beta: f64, rng: &mut R) -> Result<Vec<MixedExample>> {
    if !(beta > 0.0) {
        return Err(Error::Config(alloc::format!("mixup beta must be positive, got {beta}")));
    }
    let mut perm: Vec<usize> = (0..batch.len()).collect();
    perm.shuffle(rng);
    let lambdas: Vec<f64> = (0..batch.len()).map(|_| sample_beta(beta, rng)).collect();
    Ok(mixup_with(batch, &perm, &lambdas))
}

/// Loss graph nodes plus their scalar values.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    /// Mean cross-entropy over examples with a labelled parent.
    pub ce: f64,
    /// `gamma` times the mean MSE over examples without a labelled parent.
    pub mse: f64,
}

/// Indices of examples routed to cross-entropy and to MSE.
pub fn loss_routing(mixed: &[MixedExample]) -> (Vec<usize>, Vec<usize>) {
    (0..mixed.len()).partition(|&i| mixed[i].has_labelled_parent())
}

fn routed_weights(set: &[usize], n: usize, scale: f64) -> Vec<f64> {
    let mut w = vec![0.0; n];
    if !set.is_empty() {
        let each = scale / set.len() as f64;
        set.iter().for_each(|&i| w[i] = each);
    }
    w
}

/// Routes per-example losses given the predicted probabilities `[N, C]`.
pub fn route_losses(tape: &mut Tape, probs: Var, mixed: &[MixedExample], gamma: f64) -> Result<LossTerms> {
    let n = mixed.len();
    let c = tape.value(probs).shape()[1];
    let mut targets = Vec::with_capacity(n * c);
    for m in mixed {
        targets.extend_from_slice(&m.soft_label.probs);
    }
    let targets = Tensor::new(vec![n, c], targets)?;
    let (ce_set, mse_set) = loss_routing(mixed);
    let ce_rows = tape.cross_entropy(probs, &targets)?;
    let ce = tape.weighted_sum(ce_rows, routed_weights(&ce_set, n, 1.0))?;
    let mse_rows = tape.mse(probs, &targets)?;
    let mse = tape.weighted_sum(mse_rows, routed_weights(&mse_set, n, gamma))?;
    let total = tape.add(ce, mse)?;
    Ok(LossTerms {
        total,
        ce: tape.value(ce).item(),
        mse: tape.value(mse).item(),
    })
}

/// Train-mode forward of the mixed batch followed by [`route_losses`].
pub fn mixhar_loss<R: Rng + ?Sized>(
    tape: &mut Tape,
    model: &HarModel,
    params: &[Var],
    mixed: &[MixedExample],
    gamma: f64,
    rng: &mut R,
) -> Result<LossTerms> {
    let input = model.batch_input(mixed.iter().map(|m| m.values.as_slice()))?;
    let x = tape.constant(input);
    let out = model.forward(tape, params, x, Mode::Train, rng)?;
    let probs = tape.softmax(out.logits)?;
    route_losses(tape, probs, mixed, gamma)
}

/// Sigmoid-shaped ramp-up `gamma_max * exp(-5 (1 - min(e / ramp, 1))^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub gamma_max: f64,
    pub ramp_epochs: usize,
}

impl Default for RampSchedule {
    fn default() -> Self {
        Self {
            gamma_max: 1.0,
            ramp_epochs: 30,
        }
    }
}

impl RampSchedule {
    pub fn weight(&self, epoch: usize) -> f64 {
        if self.ramp_epochs == 0 {
            return self.gamma_max;
        }
        let progress = (epoch as f64 / self.ramp_epochs as f64).min(1.0);
        let r = 1.0 - progress;
        self.gamma_max * libm::exp(-5.0 * r * r)
    }
}
