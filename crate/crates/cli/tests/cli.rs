use std::fs;
use std::path::Path;

use assert_cmd::Command;

fn graphtnc() -> Command {
    Command::cargo_bin("graphtnc").unwrap()
}

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.json");
    fs::write(&cfg, r#"{"length": 120, "n_samples": 5}"#).unwrap();
    let data = dir.join("data");
    graphtnc()
        .args([
            "synth",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            data.to_str().unwrap(),
            "--seed",
            "3",
        ])
        .assert()
        .success();
    data
}

fn train(data: &Path, out: &Path, method: &str) {
    graphtnc()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            method,
            "--seed",
            "9",
            "--epochs",
            "2",
        ])
        .args(["--out", out.to_str().unwrap()])
        .assert()
        .success();
}

#[test]
fn usage_errors_exit_with_code_two() {
    graphtnc().arg("frobnicate").assert().code(2);
    graphtnc()
        .args(["train", "--data", "d", "--method", "tnc", "--out", "o"])
        .assert()
        .code(2);
    graphtnc()
        .args([
            "train", "--data", "d", "--method", "vicreg", "--seed", "1", "--out", "o",
        ])
        .assert()
        .code(2);
    graphtnc()
        .args(["synth", "--out", "d", "--bogus"])
        .assert()
        .code(2);
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    graphtnc()
        .args([
            "train",
            "--data",
            missing.to_str().unwrap(),
            "--method",
            "tnc",
            "--seed",
            "1",
        ])
        .args(["--out", dir.path().join("o").to_str().unwrap()])
        .assert()
        .code(1);
}

#[test]
fn synth_writes_a_dataset_directory() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for f in [
        "manifest.json",
        "synth_config.json",
        "signals_0.csv",
        "states_4.csv",
        "graphs_4.jsonl",
    ] {
        assert!(data.join(f).exists(), "{f}");
    }
    let signals = fs::read_to_string(data.join("signals_0.csv")).unwrap();
    assert_eq!(signals.lines().count(), 120);
}

#[test]
fn train_probe_eval_and_export_chain_together() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, "graphtnc");
    let run_args = [
        "--run",
        run.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    graphtnc().arg("eval").args(run_args).assert().code(1);
    graphtnc()
        .arg("probe")
        .args(run_args)
        .args(["--seed", "2"])
        .assert()
        .success();
    let out = graphtnc()
        .arg("eval")
        .args(run_args)
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    assert!(String::from_utf8(out).unwrap().contains("auprc"));
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    let run_json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("run.json")).unwrap()).unwrap();
    assert_eq!(eval["spec_digest"], run_json["spec_digest"]);
    let acc = eval["content"]["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let csv = dir.path().join("z.csv");
    graphtnc()
        .arg("export-embeddings")
        .args(run_args)
        .args(["--out", csv.to_str().unwrap()])
        .assert()
        .success();
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "z_0,z_1,z_2,z_3,z_4,z_5,z_6,z_7,label"
    );
    // One test sample of length 120 in windows of 20.
    assert_eq!(text.lines().count(), 1 + 6);
}

#[test]
fn supervised_runs_evaluate_with_their_own_head() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, "supervised");
    graphtnc()
        .args([
            "eval",
            "--run",
            run.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
        ])
        .assert()
        .success();
    graphtnc()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "byol",
            "--seed",
            "1",
            "--out",
        ])
        .arg(dir.path().join("b").to_str().unwrap())
        .args(["--resume", run.join("checkpoint.json").to_str().unwrap()])
        .assert()
        .code(1);
}

#[test]
fn training_is_bit_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, "graphtnc");
    train(&data, &b, "graphtnc");
    for f in ["run.json", "model.json", "report.json", "checkpoint.json"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn resume_continues_a_checkpointed_run() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let full = dir.path().join("full");
    graphtnc()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "tnc",
            "--seed",
            "4",
            "--epochs",
            "3",
        ])
        .args(["--out", full.to_str().unwrap()])
        .assert()
        .success();
    let part = dir.path().join("part");
    graphtnc()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "tnc",
            "--seed",
            "4",
            "--epochs",
            "1",
        ])
        .args(["--out", part.to_str().unwrap()])
        .assert()
        .success();
    let resumed = dir.path().join("resumed");
    graphtnc()
        .args([
            "train",
            "--data",
            data.to_str().unwrap(),
            "--method",
            "tnc",
            "--seed",
            "4",
            "--epochs",
            "3",
        ])
        .args([
            "--out",
            resumed.to_str().unwrap(),
            "--resume",
            part.join("checkpoint.json").to_str().unwrap(),
        ])
        .assert()
        .success();
    assert_eq!(
        fs::read(full.join("model.json")).unwrap(),
        fs::read(resumed.join("model.json")).unwrap()
    );
}

#[test]
fn gradcheck_reports_and_passes_at_seed_seven() {
    let out = graphtnc()
        .args(["gradcheck", "--seed", "7"])
        .assert()
        .success()
        .get_output()
        .stdout
        .clone();
    let text = String::from_utf8(out).unwrap();
    assert!(text.contains("max relative error"));
    assert!(text.contains("disc.hidden.weight"));
}

#[test]
fn compare_writes_a_comparison_table() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("exp.json");
    fs::write(
        &spec,
        r#"{"source": {"synthetic": {"length": 200, "n_samples": 5}}, "methods": ["graphtnc", "tnc"], "n_splits": 2}"#,
    )
    .unwrap();
    let out = dir.path().join("cmp");
    graphtnc()
        .args([
            "compare",
            "--config",
            spec.to_str().unwrap(),
            "--seed",
            "1",
            "--epochs",
            "1",
        ])
        .args(["--out", out.to_str().unwrap()])
        .assert()
        .success();
    let csv = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2);
    assert!(out
        .join("split_1")
        .join("tnc")
        .join("embeddings_test.csv")
        .exists());
}

#[test]
fn bundled_experiment_config_parses() {
    let path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/experiment_synthetic.json");
    let spec = graphtnc::experiment::load_spec(&path).unwrap();
    spec.validate().unwrap();
    assert_eq!(spec.n_splits, 10);
    assert_eq!(spec.train.epochs, 30);
}
