use std::path::Path;
use std::process::{Command, Output};

fn rationale(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rationale"))
        .args(args)
        .arg("--log-level=warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn gen(dir: &Path, seed: &str) -> Output {
    rationale(&[
        "gen-synthetic",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        seed,
        "--n-train",
        "60",
        "--n-validation",
        "12",
        "--n-test",
        "12",
    ])
}

#[test]
fn gen_synthetic_is_deterministic_and_rule_solvable() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let out = gen(&a, "3");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("rule oracle test accuracy 1.000"));
    assert!(gen(&b, "3").status.success());
    for file in ["train.jsonl", "validation.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn unknown_config_keys_fail_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.toml");
    let out_dir = tmp.path().join("out");
    std::fs::write(&cfg, format!("dataset = \"{}\"\nlamda_mlr = 0.1\n", tmp.path().display())).unwrap();
    let out = rationale(&["run", "--config", cfg.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lamda_mlr"));
    assert!(!out_dir.exists());
}

#[test]
fn run_report_evaluate_and_pseudo_label() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "1").status.success());
    let out_dir = tmp.path().join("run");
    let small = [
        "--mode",
        "few_shot",
        "--k-per-class",
        "3",
        "--seeds",
        "1",
        "--max-epochs",
        "2",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--max-generation-len",
        "16",
    ];
    let mut args = vec!["run", "--dataset", data.to_str().unwrap(), "--output-dir", out_dir.to_str().unwrap()];
    args.extend(small);
    let out = rationale(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("few_shot (mean)"));
    for f in ["manifest.json", "report.json", "report.txt", "trace.jsonl", "seed_0/joint_model/manifest.json"] {
        assert!(out_dir.join(f).exists(), "missing {f}");
    }

    let out = rationale(&["report", out_dir.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("config hash"));

    let model = out_dir.join("seed_0/joint_model");
    let out = rationale(&["evaluate", "--model", model.to_str().unwrap(), "--dataset", data.to_str().unwrap(), "--association"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("joint test"));

    let labeled = tmp.path().join("labeled.jsonl");
    let out = rationale(&[
        "pseudo-label",
        "--model",
        model.to_str().unwrap(),
        "--input",
        data.join("test.jsonl").to_str().unwrap(),
        "--output",
        labeled.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&labeled).unwrap().lines().count(), 12);
}

#[test]
fn sweep_skips_unsupplied_sizes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert!(gen(&data, "2").status.success());
    let out_dir = tmp.path().join("sweep");
    let out = rationale(&[
        "sweep",
        "--dataset",
        data.to_str().unwrap(),
        "--output-dir",
        out_dir.to_str().unwrap(),
        "--mode",
        "few_shot",
        "--seeds",
        "1",
        "--max-epochs",
        "1",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--association",
        "false",
        "--max-generation-len",
        "16",
        "--k-values",
        "2,500",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = stdout(&out);
    assert!(table.contains("k=2"));
    assert!(!table.contains("k=500"));
    assert!(String::from_utf8_lossy(&out.stderr).contains("skipping k = 500"));

    let out = rationale(&["report", out_dir.to_str().unwrap()]);
    assert!(stdout(&out).contains("k=2"));
}

#[test]
fn bad_mode_is_a_usage_error() {
    let out = rationale(&["run", "--dataset", ".", "--mode", "co_training"]);
    assert!(!out.status.success());
}
