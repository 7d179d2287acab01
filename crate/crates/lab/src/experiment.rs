//! LOSO orchestration and persisted results.

use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use mixhar_core::baselines::AlgorithmKind;
use mixhar_core::data::{loso_folds, Fold, Recording, Window};
use mixhar_core::metrics::{mean_std, ConfusionCounts};
use mixhar_core::synth::generate;
use mixhar_core::train::{evaluate, prepare_fold, train, EpochLoss, FoldData};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{DatasetSource, ExperimentConfig};
use crate::error::{LabError, Result};
use crate::recordings::Manifest;

pub const REPORT_FORMAT: &str = "mixhar-run-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldStatus {
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    pub status: FoldStatus,
    pub error: Option<String>,
    pub mean_f1: Option<f64>,
    pub per_class_f1: Vec<f64>,
    pub counts: Option<ConfusionCounts>,
    pub losses: Vec<EpochLoss>,
    pub n_labelled: usize,
    pub n_unlabelled: usize,
    pub n_test: usize,
    pub warnings: Vec<String>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub format: String,
    pub algorithm: AlgorithmKind,
    pub label_fraction: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub deterministic: bool,
    /// Mean and sample std of F_m over the successful folds.
    pub mean_f1: f64,
    pub std_f1: f64,
    /// Per-class F1 averaged over the successful folds.
    pub per_class_f1: Vec<f64>,
    pub failed_folds: Vec<String>,
    pub folds: Vec<FoldReport>,
    pub config: ExperimentConfig,
    pub created_unix_s: u64,
    pub wall_time_s: f64,
}

impl RunReport {
    pub fn has_failures(&self) -> bool {
        !self.failed_folds.is_empty()
    }

    /// Copy with every clock-derived field zeroed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        r.created_unix_s = 0;
        r.wall_time_s = 0.0;
        r.folds.iter_mut().for_each(|f| f.wall_time_s = 0.0);
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises") + "\n"
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| LabError::Json {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Source span of one window, as written to fold manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpan {
    pub recording: String,
    pub subject_id: String,
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldManifest {
    pub test_subject: String,
    pub train_subjects: Vec<String>,
    pub labelled: Vec<WindowSpan>,
    pub unlabelled: Vec<WindowSpan>,
    pub test: Vec<WindowSpan>,
}

impl FoldManifest {
    fn new(recordings: &[Recording], data: &FoldData) -> Self {
        let spans = |ws: &[Window]| -> Vec<WindowSpan> {
            ws.iter()
                .map(|w| WindowSpan {
                    recording: recordings[w.recording].id.clone(),
                    subject_id: w.subject_id.clone(),
                    start: w.start,
                    len: w.len,
                })
                .collect()
        };
        Self {
            test_subject: data.fold.test_subject.clone(),
            train_subjects: data.fold.train_subjects.clone(),
            labelled: spans(&data.labelled),
            unlabelled: spans(&data.unlabelled),
            test: spans(&data.test),
        }
    }
}

/// Recordings and class count for a config.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Vec<Recording>, usize)> {
    match &cfg.dataset {
        DatasetSource::Synth(spec) => Ok((generate(spec)?, spec.classes)),
        DatasetSource::Manifest(path) => {
            let m = Manifest::read(path)?;
            Ok((m.load(path)?, m.num_classes()))
        }
    }
}

fn selected_folds(cfg: &ExperimentConfig, recordings: &[Recording]) -> Result<Vec<Fold>> {
    let all = loso_folds(recordings)?;
    if cfg.folds.is_empty() {
        return Ok(all);
    }
    cfg.folds
        .iter()
        .map(|s| {
            all.iter()
                .find(|f| &f.test_subject == s)
                .cloned()
                .ok_or_else(|| LabError::Config(format!("fold subject {s:?} is not in the dataset")))
        })
        .collect()
}

pub fn loss_csv(losses: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,ce_loss,mse_loss,total,gamma\n");
    for l in losses {
        out.push_str(&format!("{},{},{},{},{}\n", l.epoch, l.ce, l.mse, l.total, l.gamma));
    }
    out
}

struct FoldOutcome {
    report: FoldReport,
    manifest: Option<FoldManifest>,
    checkpoint: Option<Checkpoint>,
}

fn run_fold(cfg: &ExperimentConfig, recordings: &[Recording], num_classes: usize, fold: &Fold) -> FoldOutcome {
    let start = Instant::now();
    let mut report = FoldReport {
        test_subject: fold.test_subject.clone(),
        train_subjects: fold.train_subjects.clone(),
        status: FoldStatus::Failed,
        error: None,
        mean_f1: None,
        per_class_f1: Vec::new(),
        counts: None,
        losses: Vec::new(),
        n_labelled: 0,
        n_unlabelled: 0,
        n_test: 0,
        warnings: Vec::new(),
        wall_time_s: 0.0,
    };
    let data = match prepare_fold(recordings, fold, &cfg.split(), num_classes) {
        Ok(d) => d,
        Err(e) => {
            log::error!("fold {}: {e}", fold.test_subject);
            report.error = Some(e.to_string());
            report.wall_time_s = start.elapsed().as_secs_f64();
            return FoldOutcome {
                report,
                manifest: None,
                checkpoint: None,
            };
        }
    };
    report.n_labelled = data.labelled.len();
    report.n_unlabelled = data.unlabelled.len();
    report.n_test = data.test.len();
    report.warnings = data.warnings.clone();
    let manifest = Some(FoldManifest::new(recordings, &data));
    let mut checkpoint = None;
    let result = train(&data, num_classes, &cfg.train).and_then(|out| {
        let f1 = evaluate(&out.model, &out.params, &data.test, cfg.f1_average)?;
        Ok((out, f1))
    });
    match result {
        Ok((out, f1)) => {
            log::info!(
                "fold {} ({}): F_m = {:.4}",
                fold.test_subject,
                cfg.train.algorithm.kind.label(),
                f1.mean_f1
            );
            report.status = FoldStatus::Ok;
            report.mean_f1 = Some(f1.mean_f1);
            report.per_class_f1 = f1.per_class;
            report.counts = Some(f1.counts);
            report.losses = out.losses;
            if cfg.save_checkpoints {
                checkpoint = Some(Checkpoint {
                    model: out.model,
                    params: out.params,
                    norm: Some(data.norm.clone()),
                });
            }
        }
        Err(e) => {
            log::error!("fold {}: {e}", fold.test_subject);
            report.error = Some(e.to_string());
        }
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    FoldOutcome {
        report,
        manifest,
        checkpoint,
    }
}

/// Folds run one after another under `deterministic`; otherwise they are
/// spread over worker threads. Each fold is self-contained and seeded, so the
/// collected results are identical either way.
fn run_folds(cfg: &ExperimentConfig, recordings: &[Recording], num_classes: usize, folds: &[Fold]) -> Vec<FoldOutcome> {
    let workers = if cfg.deterministic {
        1
    } else {
        std::thread::available_parallelism().map_or(1, |n| n.get()).min(folds.len())
    };
    if workers <= 1 {
        return folds.iter().map(|f| run_fold(cfg, recordings, num_classes, f)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<FoldOutcome>>> = Mutex::new((0..folds.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= folds.len() {
                    break;
                }
                let outcome = run_fold(cfg, recordings, num_classes, &folds[i]);
                slots.lock().expect("no poisoned workers")[i] = Some(outcome);
            });
        }
    });
    slots
        .into_inner()
        .expect("no poisoned workers")
        .into_iter()
        .map(|o| o.expect("every fold ran"))
        .collect()
}

fn aggregate(cfg: &ExperimentConfig, num_classes: usize, folds: Vec<FoldReport>, wall: f64) -> RunReport {
    let ok: Vec<&FoldReport> = folds.iter().filter(|f| f.status == FoldStatus::Ok).collect();
    let scores: Vec<f64> = ok.iter().filter_map(|f| f.mean_f1).collect();
    let (mean_f1, std_f1) = mean_std(&scores);
    let per_class_f1 = (0..num_classes)
        .map(|c| {
            if ok.is_empty() {
                f64::NAN
            } else {
                ok.iter().map(|f| f.per_class_f1[c]).sum::<f64>() / ok.len() as f64
            }
        })
        .collect();
    RunReport {
        format: REPORT_FORMAT.into(),
        algorithm: cfg.train.algorithm.kind,
        label_fraction: cfg.label_fraction,
        seed: cfg.train.seed,
        num_classes,
        deterministic: cfg.deterministic,
        mean_f1,
        std_f1,
        per_class_f1,
        failed_folds: folds
            .iter()
            .filter(|f| f.status == FoldStatus::Failed)
            .map(|f| f.test_subject.clone())
            .collect(),
        folds,
        config: cfg.clone(),
        created_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        wall_time_s: wall,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

/// Runs every selected LOSO fold. A fold that fails (divergence, empty
/// pools) is recorded and the run continues. With `out`, writes
/// `report.json`, `losses/<subject>.csv`, `folds/<subject>.json` and, when
/// enabled, `checkpoints/<subject>.ckpt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let (recordings, num_classes) = load_dataset(cfg)?;
    let folds = selected_folds(cfg, &recordings)?;
    let outcomes = run_folds(cfg, &recordings, num_classes, &folds);
    if let Some(dir) = out {
        for o in &outcomes {
            let s = &o.report.test_subject;
            write_file(&dir.join("losses").join(format!("{s}.csv")), &loss_csv(&o.report.losses))?;
            if let Some(m) = &o.manifest {
                let json = serde_json::to_string_pretty(m).expect("manifest serialises") + "\n";
                write_file(&dir.join("folds").join(format!("{s}.json")), &json)?;
            }
            if let Some(ck) = &o.checkpoint {
                write_file(&dir.join("checkpoints").join(format!("{s}.ckpt")), &ck.to_text())?;
            }
        }
    }
    let reports = outcomes.into_iter().map(|o| o.report).collect();
    let report = aggregate(cfg, num_classes, reports, start.elapsed().as_secs_f64());
    if let Some(dir) = out {
        write_file(&dir.join("report.json"), &report.to_json())?;
    }
    Ok(report)
}
