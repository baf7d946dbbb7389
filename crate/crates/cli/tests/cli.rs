use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn eer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eer")).args(args).output().expect("binary runs")
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.conll")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero() {
    let out = eer(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for sub in ["sample", "preprocess", "train", "decode", "eval", "significance", "bench"] {
        assert!(text.contains(sub), "help lists {sub}");
    }
}

#[test]
fn invalid_variant_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = eer(&["preprocess", "--variant", "longest", "--input", s(&fixture()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("longest"));
}

#[test]
fn missing_input_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = eer(&["train", "--train", "/no/such/file", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "not_a_key = 1\n").unwrap();
    let out = eer(&["--config", s(&config), "train", "--train", s(&fixture()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = eer(&["train", "--train", s(&fixture()), "--out", s(dir.path()), "--lr", "-1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = eer(&["decode", "--model", s(&fixture()), "--input", s(&fixture()), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("load model"));
}

#[test]
fn sample_preprocess_train_decode_eval_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name);
    let run = |args: &[&str]| {
        let out = eer(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out
    };
    run(&["--seed", "3", "sample", "--scheme", "ee", "--input", s(&fixture()), "--out", s(&d("sample")), "--budget", "5"]);
    let stats = read_json(&d("sample/stats.json"));
    assert_eq!(stats["observed_spans"], 5);
    assert_eq!(stats["precision"], 1.0);
    run(&["preprocess", "--variant", "short", "--input", s(&d("sample")), "--out", s(&d("short"))]);

    let config = d("cfg.toml");
    std::fs::write(&config, "[train]\nepochs = 3\nlearning_rate = 0.05\n[scorer]\nembed_dim = 8\nhidden = 8\n").unwrap();
    run(&[
        "--config", s(&config), "train", "--train", s(&d("short")), "--dev", s(&fixture()), "--out", s(&d("model")), "--epochs", "25",
        "--rho", "0.4", "--gamma", "0.05",
    ]);
    let manifest = read_json(&d("model/manifest.json"));
    assert_eq!(manifest["config"]["train"]["epochs"], 25, "flag overrides file");
    assert_eq!(manifest["config"]["train"]["learning_rate"], 0.05, "file overrides default");
    assert_eq!(manifest["config"]["scorer"]["hidden"], 8);
    let log = std::fs::read_to_string(d("model/train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 25);
    assert!(d("model/o_bias.json").is_file());

    run(&["decode", "--model", s(&d("model")), "--input", s(&fixture()), "--out", s(&d("decoded"))]);
    let out = run(&["eval", "--gold", s(&fixture()), "--predictions", s(&d("decoded")), "--out", s(&d("eval"))]);
    let metrics = read_json(&d("eval/metrics.json"));
    let printed: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(metrics, printed);
    let f1 = metrics["spans"]["f1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&f1));
    assert_eq!(metrics["sentences"], 5);

    run(&["eval", "--gold", s(&fixture()), "--model", s(&d("model")), "--out", s(&d("eval2"))]);
    let direct = read_json(&d("eval2/metrics.json"));
    assert_eq!(direct["spans"], metrics["spans"], "decode+eval equals eval with the model");
    assert!(direct["rho_hat"].as_f64().is_some());

    run(&[
        "significance", "--gold", s(&fixture()), "--a", s(&d("decoded")), "--b", s(&d("eval2")), "--out", s(&d("sig")), "--iterations", "200",
    ]);
    let sig = read_json(&d("sig/significance.json"));
    assert_eq!(sig["observed_diff"], 0.0);
    assert_eq!(sig["significant"], false);
    for sub in ["sample", "short", "model", "decoded", "eval", "sig"] {
        assert!(d(sub).join("manifest.json").is_file(), "{sub} has a manifest");
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let train = |out: &Path, epochs: &str, extra: &[&str]| {
        let fx = fixture();
        let mut args = vec!["--seed", "5", "train", "--train", s(&fx), "--format", "gold", "--out", s(out), "--epochs", epochs];
        args.extend_from_slice(extra);
        let o = eer(&args);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    train(&a, "4", &[]);
    train(&b, "4", &["--stop-after", "2"]);
    assert!(b.join("checkpoint/trainer_state.json").is_file());
    train(&b, "4", &["--resume"]);
    let model = |p: &Path| std::fs::read_to_string(p.join("model.json")).unwrap();
    assert_eq!(model(&a), model(&b));
}

#[test]
fn bench_consistency_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = eer(&[
        "bench", "consistency", "--out", s(dir.path()), "--train-sentences", "60", "--test-sentences", "20", "--epochs", "1", "--sizes", "30,60",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("consistency.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(dir.path().join("learning_curve.csv")).unwrap().lines().count(), 3);
    assert!(dir.path().join("manifest.json").is_file());
}
