use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn surveil(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_surveil"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn sha(p: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(p).unwrap()))
}

const SMALL: &str = r#"
importance_repeats = 2
[synth]
n_institutions = 30
n_quarters = 14

[train]
max_epochs = 4
patience = 2
seeds = [5]
"#;

/// Writes a small config and synthesizes a panel into `dir`.
fn small_panel(dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, SMALL).unwrap();
    let o = surveil(&["synth", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    (cfg, dir.join("panel.csv"), dir.join("macro.csv"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&surveil(&["train", "--bogus"])), 2);
    assert_eq!(code(&surveil(&["frobnicate"])), 2);
    assert_eq!(code(&surveil(&["train", "--out", out])), 2);
    assert_eq!(code(&surveil(&["train", "--ablation", "NO_SUCH", "--out", out])), 2);
    let o = surveil(&["train", "--out", out, "--seed", "1", "--seeds", "2,3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("code=2"), "{}", stderr(&o));
    let o = surveil(&["reconstruct", "--out", out, "--panel", "/no/such.csv", "--macro", "/no/such.csv"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_panel_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (_, _, macro_csv) = small_panel(dir.path());
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "cert,quarter\n1,notaquarter\n").unwrap();
    let o = surveil(&["reconstruct", "--panel", s(&bad), "--macro", s(&macro_csv), "--out", s(dir.path())]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error: code=3"));
}

#[test]
fn ras_non_convergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let (_, panel, macro_csv) = small_panel(dir.path());
    let o = surveil(&[
        "reconstruct", "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(dir.path()),
        "--max-iter", "1", "--tol", "1e-15",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}

#[test]
fn evaluate_without_checkpoint_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let (_, panel, macro_csv) = small_panel(dir.path());
    let o = surveil(&["evaluate", "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(dir.path()), "--seed", "9"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("FULL_seed9.json"), "{}", stderr(&o));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn pipeline_is_deterministic_and_leaves_inputs_alone() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, panel, macro_csv) = small_panel(dir.path());
    let before = (sha(&panel), sha(&macro_csv), sha(&cfg));
    let run = |name: &str| -> PathBuf {
        let out = dir.path().join(name);
        for cmd in ["reconstruct", "train", "evaluate"] {
            let o = surveil(&[
                cmd, "--config", s(&cfg), "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(&out),
                "--epochs", "1",
            ]);
            assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
        }
        out
    };
    let a = run("a");
    let b = run("b");
    for f in ["edges.csv", "recon_log.csv", "checkpoints/FULL_seed5.json", "checkpoints/FULL_seed5.meta.json", "metrics.csv"] {
        assert_eq!(sha(&a.join(f)), sha(&b.join(f)), "{f} differs between runs");
    }
    assert_eq!(before, (sha(&panel), sha(&macro_csv), sha(&cfg)));

    // The flag overrode the config's epoch budget, and the manifest records input digests.
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(a.join("manifest_train.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["max_epochs"], 1);
    assert_eq!(m["config"]["train"]["seeds"], serde_json::json!([5]));
    let inputs = m["inputs"].as_array().unwrap();
    assert_eq!(inputs.len(), 2);
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    let ckpt = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .find(|o| o["path"] == "checkpoints/FULL_seed5.json")
        .expect("checkpoint listed");
    assert_eq!(ckpt["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn explain_and_report_write_their_bundles() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, panel, macro_csv) = small_panel(dir.path());
    let out = dir.path().join("o");
    let base = ["--config", s(&cfg), "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(&out), "--seed", "5", "--epochs", "1"];
    for cmd in ["train", "explain", "report"] {
        let mut args = vec![cmd];
        args.extend(base);
        let o = surveil(&args);
        assert_eq!(code(&o), 0, "{cmd}: {}", stderr(&o));
    }
    let imp = fs::read_to_string(out.join("importance.csv")).unwrap();
    assert!(imp.starts_with("feature,delta_auroc,rank\n"));
    assert_eq!(imp.lines().count(), 14);
    assert!(fs::read_to_string(out.join("attributions.csv")).unwrap().starts_with("cert,quarter,history_quarter"));
    for f in ["report.csv", "tier_summary.csv", "plot_pr_curve.csv"] {
        assert!(out.join("report").join(f).is_file(), "{f}");
    }
    assert!(out.join("manifest_report.json").is_file());
}

#[test]
fn calendar_split_from_config() {
    let dir = tempfile::tempdir().unwrap();
    let (_, panel, macro_csv) = small_panel(dir.path());
    let cfg = dir.path().join("split.toml");
    fs::write(&cfg, format!("{SMALL}\n[split]\ntrain_end = \"2012Q1\"\nval_end = \"2012Q3\"\ntest_end = \"2013Q2\"\n")).unwrap();
    let out = dir.path().join("o");
    let o = surveil(&["train", "--config", s(&cfg), "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(&out), "--epochs", "1"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let meta: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("checkpoints/FULL_seed5.meta.json")).unwrap()).unwrap();
    let split = &meta["split"];
    assert_eq!((split["train"]["end"].as_u64(), split["val"]["end"].as_u64(), split["test"]["end"].as_u64()), (Some(9), Some(11), Some(14)), "{split}");

    fs::write(&cfg, format!("{SMALL}\n[split]\ntrain_end = \"2012Q9\"\nval_end = \"2012Q3\"\ntest_end = \"2013Q2\"\n")).unwrap();
    let o = surveil(&["train", "--config", s(&cfg), "--panel", s(&panel), "--macro", s(&macro_csv), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}
