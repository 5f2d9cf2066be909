use std::path::Path;
use std::process::{Command, Output};

fn mixseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("MIXSEG_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BASE: &str = r#"
name = "cli"
[data.synthetic]
kind = "geometric"
msl_images = 6
m2020_images = 4
test_images = 2
size = 16
[backbone]
family = "toy"
pretrain_source = "random"
[train]
epochs = 1
batch_size = 3
learning_rate = 0.001
[output]
dir = "out"
"#;

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("exp.toml");
    std::fs::write(&p, format!("{BASE}{extra}")).unwrap();
    p.display().to_string()
}

#[test]
fn validate_counts_cells_without_running() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[grid]\ntrain_set = [\"msl\", \"m2020\", \"mixed\"]\nseed = [1, 2]\n");
    let o = mixseg(&["sweep", "--validate", "--config", &cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("6 cells"), "{}", stdout(&o));
    assert!(!tmp.path().join("out").exists());

    let o = mixseg(&["sweep", "--validate", "--config", &cfg, "--seed", "9"], tmp.path());
    assert!(stdout(&o).contains("3 cells"), "{}", stdout(&o));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[composition]\nlabel_fraction = 1.5\n");
    let o = mixseg(&["sweep", "--validate", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "[grid]\nlearning_rate = [0.1]\n");
    let o = mixseg(&["sweep", "--validate", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));

    let o = mixseg(&["sweep", "--validate"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("CONFIG_ERROR"));

    let o = mixseg(&["table", "--results", "nowhere", "--format", "yaml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn partial_failure_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "[composition]\ncap = 8\nm2020_proportion = 0.5\n[grid]\nm2020_proportion = [0.5, 0.0]\n",
    );
    let o = mixseg(&["sweep", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("INSUFFICIENT_SOURCE"));
    let summary = std::fs::read_to_string(tmp.path().join("out/summary.jsonl")).unwrap();
    assert_eq!(summary.lines().count(), 2);
}

#[test]
fn train_eval_table_and_plot_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let o = mixseg(&["train", "--config", &cfg], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let ckpt = text
        .lines()
        .find_map(|l| l.strip_prefix("checkpoint "))
        .expect("checkpoint path printed")
        .to_string();
    assert!(Path::new(&ckpt).is_absolute() || tmp.path().join(&ckpt).is_file(), "{ckpt}");

    let test_manifest = tmp.path().join("out/data/m2020_test/manifest.tsv");
    assert!(test_manifest.is_file());
    let o = mixseg(&["eval", "--checkpoint", &ckpt, "--test", test_manifest.to_str().unwrap()], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let acc = report["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = mixseg(&["table", "--results", "out", "--format", "csv"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("Setting,Seeds,"), "{}", stdout(&o));

    let o = mixseg(&["table", "--results", "out", "--filter", "loss_kind=focal"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("MISSING_AXIS"));

    let o = mixseg(&["plot", "--results", "out", "--kind", "confusion_heatmap"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).lines().all(|l| l.ends_with(".svg")));
}

#[test]
fn train_rejects_multi_cell_configs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[grid]\nseed = [1, 2]\n");
    let o = mixseg(&["train", "--config", &cfg], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("2 cells"));
}

#[test]
fn data_tools_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for (dom, n) in [("msl", "12"), ("m2020", "8")] {
        let o = mixseg(&["synth", "--domain", dom, "--images", n, "--size", "16", "--out", dom], d);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let o = mixseg(
        &["compose", "--msl", "msl/manifest.tsv", "--m2020", "m2020/manifest.tsv", "--cap", "10", "--proportion", "0.3", "--out", "mixed.tsv"],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("10 images (2 M2020, 8 MSL)"), "{}", stdout(&o));

    let o = mixseg(&["subsample", "--source", "msl/manifest.tsv", "--fraction", "0.5", "--out", "half.tsv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("6 images"), "{}", stdout(&o));

    let o = mixseg(&["ingest", "msl", "--domain", "msl", "--out", "scanned.tsv"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("12 entries (0 without mask, 0 without image)"), "{}", stdout(&o));

    let o = mixseg(&["ingest", "empty", "--domain", "msl", "--out", "e.tsv"], d);
    assert_eq!(o.status.code(), Some(1));
}
