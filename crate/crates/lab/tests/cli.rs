use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn har_lab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_har-lab"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = r#""label_fraction": 0.2, "epochs": 1, "batch_size": 16, "folds": ["s01", "s02"]"#;

#[test]
fn synth_run_report_and_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = har_lab(&["synth", "--subjects", "3", "--samples-per-class", "60", "--out", "data"], d);
    assert!(o.status.success(), "{o:?}");
    assert!(d.join("data/manifest.json").exists());

    for kind in ["supervised", "mixhar"] {
        let cfg = format!(
            r#"{{"dataset": {{"manifest": "data/manifest.json"}}, {SMALL}, "save_checkpoints": true, "algorithm": {{"kind": "{kind}"}}}}"#
        );
        fs::write(d.join(format!("{kind}.json")), cfg).unwrap();
        let o = har_lab(&["run", "--config", &format!("{kind}.json"), "--deterministic", "--out", &format!("run_{kind}")], d);
        assert_eq!(o.status.code(), Some(0), "{o:?}");
        assert!(stdout(&o).contains("over 2 folds"));
        assert!(d.join(format!("run_{kind}/losses/s02.csv")).exists());
    }

    let o = har_lab(&["report", "--runs", "run_supervised", "run_mixhar/report.json"], d);
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let table = stdout(&o);
    assert!(table.contains("Supervised") && table.contains("MixHAR") && table.contains("20"), "{table}");

    let o = har_lab(
        &["export-embeddings", "--checkpoint", "run_mixhar/checkpoints/s01.ckpt", "--config", "mixhar.json", "--subject", "s01", "--out", "emb.csv"],
        d,
    );
    assert_eq!(o.status.code(), Some(0), "{o:?}");
    let emb = fs::read_to_string(d.join("emb.csv")).unwrap();
    assert!(emb.starts_with("window_id,true_label,feat_0,"));
    assert!(emb.lines().count() > 1);
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.json"), r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(har_lab(&["run", "--config", "bad.json"], d).status.code(), Some(2));
    fs::write(d.join("junk.json"), "{not json").unwrap();
    assert_eq!(har_lab(&["run", "--config", "junk.json"], d).status.code(), Some(2));
    fs::write(d.join("folds.json"), r#"{"folds": ["s42"], "epochs": 0}"#).unwrap();
    assert_eq!(har_lab(&["run", "--config", "folds.json"], d).status.code(), Some(2));
    assert_eq!(har_lab(&["synth", "--subjects", "1", "--out", "x"], d).status.code(), Some(2));
    let missing = har_lab(&["run", "--config", "missing.json"], d);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn failed_folds_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("boom.json"),
        r#"{"dataset": {"synth": {"subjects": 3, "samples_per_class": 60, "bouts": 2}}, "label_fraction": 0.5,
           "epochs": 40, "lr": 1e150, "folds": ["s01"], "algorithm": {"kind": "supervised"}}"#,
    )
    .unwrap();
    let o = har_lab(&["run", "--config", "boom.json", "--out", "r"], d);
    assert_eq!(o.status.code(), Some(3), "{o:?}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("s01"));
    assert!(d.join("r/report.json").exists());
}
