use std::collections::HashSet;
use std::fs;

use har_lab::checkpoint::Checkpoint;
use har_lab::embed::{embedding_csv, export_embeddings, subject_windows};
use har_lab::experiment::{load_dataset, FoldManifest};
use har_lab::{run_experiment, DatasetSource, ExperimentConfig, FoldStatus};
use mixhar_core::baselines::{AlgorithmKind, AlgorithmSpec};
use mixhar_core::metrics::mean_std;
use mixhar_core::model::{BackboneConfig, HarModel, ModelSpec};
use mixhar_core::synth::SynthSpec;

fn small(kind: AlgorithmKind, epochs: usize, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        dataset: DatasetSource::Synth(SynthSpec {
            subjects: 3,
            samples_per_class: 120,
            bouts: 2,
            ..SynthSpec::default()
        }),
        label_fraction: 0.2,
        deterministic: true,
        ..ExperimentConfig::default()
    };
    cfg.train.algorithm = AlgorithmSpec::new(kind);
    cfg.train.epochs = epochs;
    cfg.train.batch_size = 16;
    cfg.train.seed = seed;
    cfg
}

#[test]
fn untrained_model_scores_near_chance() {
    for seed in 0..3 {
        let report = run_experiment(&small(AlgorithmKind::Supervised, 0, seed), None).unwrap();
        assert!(report.mean_f1 < 2.0 / 6.0, "seed {seed}: {}", report.mean_f1);
    }
}

#[test]
fn aggregate_matches_fold_scores() {
    let report = run_experiment(&small(AlgorithmKind::Mixhar, 2, 1), None).unwrap();
    assert_eq!(report.folds.len(), 3);
    assert!(report.failed_folds.is_empty());
    let scores: Vec<f64> = report.folds.iter().map(|f| f.mean_f1.unwrap()).collect();
    let (m, s) = mean_std(&scores);
    assert!((report.mean_f1 - m).abs() < 1e-12);
    assert!((report.std_f1 - s).abs() < 1e-12);
    for c in 0..6 {
        let avg = report.folds.iter().map(|f| f.per_class_f1[c]).sum::<f64>() / 3.0;
        assert!((report.per_class_f1[c] - avg).abs() < 1e-12);
    }
    for f in &report.folds {
        assert_eq!(f.losses.len(), 2);
        let counts = f.counts.as_ref().unwrap();
        let n: u64 = (0..6).map(|c| counts.tp[c] + counts.fn_[c]).sum();
        assert_eq!(n as usize, f.n_test);
    }
}

#[test]
fn fold_manifests_keep_subjects_apart() {
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&small(AlgorithmKind::Supervised, 1, 2), Some(dir.path())).unwrap();
    for f in &report.folds {
        let text = fs::read_to_string(dir.path().join("folds").join(format!("{}.json", f.test_subject))).unwrap();
        let m: FoldManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(m.test_subject, f.test_subject);
        assert!(!m.train_subjects.contains(&m.test_subject));
        assert!(m.test.iter().all(|w| w.subject_id == m.test_subject));
        assert!(m.labelled.iter().chain(&m.unlabelled).all(|w| w.subject_id != m.test_subject));
        let samples = |ws: &[har_lab::experiment::WindowSpan]| -> HashSet<(String, usize)> {
            ws.iter().flat_map(|w| (w.start..w.start + w.len).map(|t| (w.recording.clone(), t))).collect()
        };
        assert!(samples(&m.labelled).is_disjoint(&samples(&m.unlabelled)));
        assert_eq!(m.labelled.len(), f.n_labelled);
        assert_eq!(m.unlabelled.len(), f.n_unlabelled);
        let csv = fs::read_to_string(dir.path().join("losses").join(format!("{}.csv", f.test_subject))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "epoch,ce_loss,mse_loss,total,gamma");
        assert_eq!(csv.lines().count(), 2);
    }
    assert!(dir.path().join("report.json").exists());
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn full_labels_make_supervised_ignore_unlabelled_settings() {
    let mut a = small(AlgorithmKind::Supervised, 2, 4);
    a.label_fraction = 1.0;
    let mut b = a.clone();
    b.train.ramp.gamma_max = 9.0;
    b.train.augment.a1.sigma = 0.5;
    b.train.sharpen_temperature = 0.9;
    let (ra, rb) = (run_experiment(&a, None).unwrap(), run_experiment(&b, None).unwrap());
    for (x, y) in ra.folds.iter().zip(&rb.folds) {
        assert_eq!(x.n_unlabelled, 0);
        // gamma records the schedule even where it weights nothing
        for (l, m) in x.losses.iter().zip(&y.losses) {
            assert_eq!((l.ce, l.mse, l.total), (m.ce, m.mse, m.total));
        }
        assert_eq!(x.mean_f1, y.mean_f1);
    }
}

#[test]
fn diverging_folds_are_marked_and_the_run_continues() {
    let mut cfg = small(AlgorithmKind::Supervised, 40, 0);
    cfg.train.lr = 1e150;
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, Some(dir.path())).unwrap();
    assert!(report.has_failures());
    assert_eq!(report.failed_folds.len(), 3);
    assert!(report.folds.iter().all(|f| f.status == FoldStatus::Failed && f.error.is_some()));
    assert!(report.mean_f1.is_nan());
    assert!(dir.path().join("report.json").exists());
}

#[test]
fn threaded_and_sequential_runs_agree() {
    let seq = small(AlgorithmKind::PiModel, 1, 6);
    let par = ExperimentConfig { deterministic: false, ..seq.clone() };
    let (a, b) = (run_experiment(&seq, None).unwrap(), run_experiment(&par, None).unwrap());
    for (x, y) in a.folds.iter().zip(&b.folds) {
        assert_eq!(x.test_subject, y.test_subject);
        assert_eq!(x.losses, y.losses);
        assert_eq!(x.counts, y.counts);
    }
}

#[test]
fn unknown_fold_subject_is_a_config_error() {
    let mut cfg = small(AlgorithmKind::Supervised, 0, 0);
    cfg.folds = vec!["s99".into()];
    assert!(run_experiment(&cfg, None).unwrap_err().is_config());
}

#[test]
fn embeddings_follow_window_order() {
    let mut cfg = small(AlgorithmKind::Mixhar, 1, 3);
    cfg.save_checkpoints = true;
    cfg.folds = vec!["s02".into()];
    let dir = tempfile::tempdir().unwrap();
    let report = run_experiment(&cfg, Some(dir.path())).unwrap();
    let ck = Checkpoint::load(&dir.path().join("checkpoints").join("s02.ckpt")).unwrap();
    assert!(ck.norm.is_some());
    let (recs, _) = load_dataset(&cfg).unwrap();
    let windows = subject_windows(&ck, &recs, "s02", cfg.overlap).unwrap();
    assert_eq!(windows.len(), report.folds[0].n_test);

    let out = dir.path().join("emb.csv");
    assert_eq!(export_embeddings(&ck, &windows, &out).unwrap(), windows.len());
    let text = fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), windows.len() + 1);
    let dim = ck.model.embedding_dim();
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.len(), dim + 2);
    assert_eq!(&header[..3], &["window_id", "true_label", "feat_0"]);
    for (i, (line, w)) in lines[1..].iter().zip(&windows).enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[0], i.to_string());
        assert_eq!(cells[1], w.true_label.to_string());
        assert_eq!(cells.len(), dim + 2);
    }
    assert!(subject_windows(&ck, &recs, "nobody", 0.5).is_err());
}

#[test]
fn zero_weight_checkpoint_embeds_every_window_alike() {
    let cfg = small(AlgorithmKind::Mixhar, 0, 0);
    let (recs, _) = load_dataset(&cfg).unwrap();
    let spec = ModelSpec {
        in_channels: 3,
        window_len: 30,
        num_classes: 6,
        backbone: BackboneConfig::default(),
    };
    let model = HarModel::new(spec, true).unwrap();
    let ck = Checkpoint { params: model.zero_params(), model, norm: None };
    let windows = subject_windows(&ck, &recs, "s01", 0.5).unwrap();
    let csv = embedding_csv(&ck, &windows).unwrap();
    let rows: HashSet<String> = csv
        .lines()
        .skip(1)
        .map(|l| l.splitn(3, ',').nth(2).unwrap().to_string())
        .collect();
    assert_eq!(rows.len(), 1);
    assert!(embedding_csv(&ck, &[]).unwrap().lines().count() == 1);
}
