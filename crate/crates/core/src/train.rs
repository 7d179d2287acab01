//! Fold preparation, the shared training loop for every algorithm, and
//! evaluation on the held-out subject.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentSpec;
use crate::baselines::{
    ema_update, mt_step, pi_step, pl_step, supervised_step, vat_step, AlgorithmKind, AlgorithmSpec, StepLoss,
    StepRngs,
};
use crate::data::{segment, split_labelled, CyclicSampler, Fold, NormStats, Origin, Recording, Window, SplitSpec};
use crate::metrics::{mean_f1_with, F1Average, F1Report};
use crate::model::{argmax, BackboneConfig, HarModel, ModelSpec};
use crate::rng::{derive_seed, seeded};
use crate::semisup::{build_super_batch, mixhar_loss, mixup, pseudo_label_batch, sharpen, RampSchedule};
use crate::tensor::{AdamState, Mode, ParamStore, Tape, TensorError};
use crate::{Error, Result};

// seed tags
const TAG_INIT: u64 = 0x494e_4954;
const TAG_SAMPLER: u64 = 0x5341_4d50;
const TAG_STEP: u64 = 0x5354_4550;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// First pseudo-label view.
    pub a1: AugmentSpec,
    /// Second pseudo-label view.
    pub a2: AugmentSpec,
    /// π-Model perturbation.
    pub pi: AugmentSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            a1: AugmentSpec::rescale(),
            a2: AugmentSpec::time_warp(),
            pi: AugmentSpec::scaling(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub algorithm: AlgorithmSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub mixup_beta: f64,
    pub sharpen_temperature: f64,
    pub ramp: RampSchedule,
    pub augment: AugmentConfig,
    pub backbone: BackboneConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmSpec::new(AlgorithmKind::Mixhar),
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            mixup_beta: 0.8,
            sharpen_temperature: 0.4,
            ramp: RampSchedule::default(),
            augment: AugmentConfig::default(),
            backbone: BackboneConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.algorithm.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.mixup_beta > 0.0 && self.mixup_beta.is_finite()) {
            return bad(format!("mixup_beta must be positive, got {}", self.mixup_beta));
        }
        if !(self.sharpen_temperature > 0.0 && self.sharpen_temperature <= 1.0) {
            return bad(format!("sharpen_temperature must lie in (0, 1], got {}", self.sharpen_temperature));
        }
        if !(self.ramp.gamma_max >= 0.0 && self.ramp.gamma_max.is_finite()) {
            return bad("ramp.gamma_max must be non-negative".into());
        }
        for spec in [&self.augment.a1, &self.augment.a2, &self.augment.pi] {
            spec.validate()?;
        }
        Ok(())
    }
}

/// Normalised windows of one LOSO fold.
#[derive(Debug, Clone)]
pub struct FoldData {
    pub fold: Fold,
    pub labelled: Vec<Window>,
    pub unlabelled: Vec<Window>,
    pub test: Vec<Window>,
    pub norm: NormStats,
    pub warnings: Vec<String>,
}

/// Split, segment and normalise one fold. Statistics are fitted on the
/// training windows (both pools) only.
pub fn prepare_fold(recordings: &[Recording], fold: &Fold, split: &SplitSpec, num_classes: usize) -> Result<FoldData> {
    split.validate()?;
    let select = |pred: &dyn Fn(&str) -> bool| -> Vec<usize> {
        (0..recordings.len()).filter(|&i| pred(&recordings[i].subject_id)).collect()
    };
    let train = select(&|s| fold.train_subjects.iter().any(|t| t == s));
    let test = select(&|s| s == fold.test_subject);
    if train.is_empty() || test.is_empty() {
        return Err(Error::Data(format!("fold holding out {} has an empty side", fold.test_subject)));
    }
    let parts = split_labelled(recordings, &train, split, num_classes)?;
    let (l, o) = (split.window_len, split.overlap);
    let mut labelled = segment(recordings, &parts.labelled, l, o, Origin::LabelledPool);
    let mut unlabelled = segment(recordings, &parts.unlabelled, l, o, Origin::UnlabelledPool);
    let test_segments = crate::data::contiguous_segments(recordings, &test);
    let mut test = segment(recordings, &test_segments, l, o, Origin::Test);
    if labelled.is_empty() {
        return Err(Error::Data(format!(
            "fold holding out {}: labelled pool has no complete window",
            fold.test_subject
        )));
    }
    if test.is_empty() {
        return Err(Error::Data(format!("fold holding out {}: no test windows", fold.test_subject)));
    }
    let norm = {
        let refs: Vec<&Window> = labelled.iter().chain(&unlabelled).collect();
        NormStats::fit(&refs)?
    };
    for w in labelled.iter_mut().chain(unlabelled.iter_mut()).chain(test.iter_mut()) {
        norm.apply(w);
    }
    Ok(FoldData {
        fold: fold.clone(),
        labelled,
        unlabelled,
        test,
        norm,
        warnings: parts.warnings,
    })
}

/// Per-epoch means over steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    /// 1-based.
    pub epoch: usize,
    /// Labelled (or labelled-parent) cross-entropy.
    pub ce: f64,
    /// Weighted unlabelled term.
    pub mse: f64,
    pub total: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: HarModel,
    /// Parameters used for evaluation (the student for Mean Teacher).
    pub params: ParamStore,
    pub teacher: Option<ParamStore>,
    pub losses: Vec<EpochLoss>,
}

pub fn model_for(spec: ModelSpec, kind: AlgorithmKind) -> Result<HarModel> {
    HarModel::new(spec, kind.uses_calibration())
}

fn model_spec(data: &FoldData, num_classes: usize, cfg: &TrainConfig) -> ModelSpec {
    let w = &data.labelled[0];
    ModelSpec {
        in_channels: w.channels,
        window_len: w.len,
        num_classes,
        backbone: cfg.backbone.clone(),
    }
}

fn diverged(epoch: usize, step: usize, loss: f64) -> Error {
    Error::Diverged { epoch, step, loss }
}

/// Trains the configured algorithm on a prepared fold.
pub fn train(data: &FoldData, num_classes: usize, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let kind = cfg.algorithm.kind;
    let model = model_for(model_spec(data, num_classes, cfg), kind)?;
    let mut params = model.init_params(derive_seed(cfg.seed, TAG_INIT));
    let mut teacher = (kind == AlgorithmKind::MeanTeacher).then(|| params.clone());
    let mut adam = AdamState::new(&params, cfg.lr);
    let mut sampler = CyclicSampler::new(
        data.labelled.len(),
        data.unlabelled.len(),
        cfg.batch_size,
        derive_seed(cfg.seed, TAG_SAMPLER),
    )?;
    let vat = cfg.algorithm.hyper.vat();
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut global_step = 0u64;

    for epoch in 0..cfg.epochs {
        let gamma = cfg.ramp.weight(epoch);
        let batches = sampler.next_epoch();
        let (mut ce, mut mse, mut total) = (0.0, 0.0, 0.0);
        for (step, batch) in batches.iter().enumerate() {
            let mut rngs = StepRngs::new(derive_seed(derive_seed(cfg.seed, TAG_STEP), global_step));
            global_step += 1;
            let lab: Vec<(&[f64], usize)> = batch
                .labelled
                .iter()
                .map(|&i| {
                    let w = &data.labelled[i];
                    (w.values.as_slice(), w.label.expect("labelled pool windows carry labels"))
                })
                .collect();
            let unl: Vec<&[f64]> = batch.unlabelled.iter().map(|&i| data.unlabelled[i].values.as_slice()).collect();

            let mut tape = Tape::new();
            let result: Result<StepLoss> = match kind {
                AlgorithmKind::Supervised => supervised_step(&mut tape, &model, &params, &lab, &mut rngs),
                AlgorithmKind::PiModel => pi_step(&mut tape, &model, &params, &lab, &unl, gamma, &cfg.augment.pi, &mut rngs),
                AlgorithmKind::MeanTeacher => {
                    let t = teacher.as_ref().expect("teacher allocated");
                    mt_step(&mut tape, &model, &params, t, &lab, &unl, gamma, &mut rngs)
                }
                AlgorithmKind::PseudoLabeling => pl_step(&mut tape, &model, &params, &lab, &unl, gamma, &mut rngs),
                AlgorithmKind::Vat => vat_step(&mut tape, &model, &params, &lab, &unl, gamma, 0.0, &vat, &mut rngs),
                AlgorithmKind::Vatent => vat_step(
                    &mut tape,
                    &model,
                    &params,
                    &lab,
                    &unl,
                    gamma,
                    cfg.algorithm.hyper.entropy_weight,
                    &vat,
                    &mut rngs,
                ),
                AlgorithmKind::Mixhar | AlgorithmKind::MixharNocal => {
                    mixhar_step(&mut tape, &model, &params, &lab, &unl, gamma, cfg, &mut rngs)
                }
            };
            let loss = match result {
                Ok(l) => l,
                Err(Error::Tensor(TensorError::NonFinite { .. })) => return Err(diverged(epoch + 1, step, f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(diverged(epoch + 1, step, value));
            }
            let grads = tape.backward(loss.total)?.for_params(&tape, &params);
            if grads.iter().any(|g| g.data().iter().any(|v| !v.is_finite())) {
                return Err(diverged(epoch + 1, step, value));
            }
            adam.step(&mut params, &grads);
            if let Some(t) = teacher.as_mut() {
                ema_update(t, &params, cfg.algorithm.hyper.ema_decay);
            }
            ce += loss.supervised;
            mse += loss.unlabelled;
            total += value;
        }
        let n = batches.len().max(1) as f64;
        let record = EpochLoss {
            epoch: epoch + 1,
            ce: ce / n,
            mse: mse / n,
            total: total / n,
            gamma,
        };
        log::debug!(
            "{} epoch {}: total {:.5} (ce {:.5}, unlabelled {:.5}, gamma {:.4})",
            kind.label(),
            record.epoch,
            record.total,
            record.ce,
            record.mse,
            gamma
        );
        losses.push(record);
    }
    Ok(TrainOutcome {
        model,
        params,
        teacher,
        losses,
    })
}

/// One MixHAR update: pseudo-label, sharpen, super batch, mixup, routed
/// loss. With no unlabelled windows the super batch is the labelled batch.
#[allow(clippy::too_many_arguments)]
pub fn mixhar_step(
    tape: &mut Tape,
    model: &HarModel,
    params: &ParamStore,
    labelled: &[(&[f64], usize)],
    unlabelled: &[&[f64]],
    gamma: f64,
    cfg: &TrainConfig,
    rngs: &mut StepRngs,
) -> Result<StepLoss> {
    let mut pseudo = pseudo_label_batch(model, params, unlabelled, &cfg.augment.a1, &cfg.augment.a2, &mut rngs.unlabelled)?;
    for p in pseudo.iter_mut() {
        p.soft_label.probs = sharpen(&p.soft_label.probs, cfg.sharpen_temperature);
    }
    let batch = build_super_batch(labelled, &pseudo, model.num_classes())?;
    let mixed = mixup(&batch, cfg.mixup_beta, &mut rngs.unlabelled)?;
    let vars = tape.params(params);
    let terms = mixhar_loss(tape, model, &vars, &mixed, gamma, &mut rngs.labelled)?;
    Ok(StepLoss {
        total: terms.total,
        supervised: terms.ce,
        unlabelled: terms.mse,
    })
}

/// Eval-mode argmax predictions.
pub fn predict(model: &HarModel, params: &ParamStore, windows: &[Window]) -> Result<Vec<usize>> {
    let refs: Vec<&[f64]> = windows.iter().map(|w| w.values.as_slice()).collect();
    if refs.is_empty() {
        return Ok(Vec::new());
    }
    let mut rng = seeded(0);
    let probs = model.predict_probs(params, &refs, Mode::Eval, &mut rng)?;
    Ok(probs.chunks(model.num_classes()).map(argmax).collect())
}

pub fn evaluate(model: &HarModel, params: &ParamStore, windows: &[Window], average: F1Average) -> Result<F1Report> {
    let preds = predict(model, params, windows)?;
    let truths: Vec<usize> = windows.iter().map(|w| w.true_label).collect();
    mean_f1_with(&preds, &truths, model.num_classes(), average)
}
