//! Subcommand smoke tests against the built binary with reduced configs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_tapinn")
}

fn tmp(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("tapinn-cli-{}-{name}", std::process::id()));
    std::fs::remove_dir_all(&dir).ok();
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(
        &path,
        "dataset.per_regime = 10\n\
         dataset.samples_per_trajectory = 200\n\
         train.epochs = 6\n\
         train.phase1_epochs = 2\n\
         train.phase2_epochs = 2\n\
         train.batch_size = 4\n\
         train.collocation_per_item = 8\n\
         train.data_points_per_item = 20\n\
         train.window_len = 40\n\
         train.lstm_hidden = 5\n\
         train.d_z = 3\n\
         train.gen_hidden = 8\n\
         train.parametric_hidden = 8\n\
         train.hyper_hidden = 5\n\
         train.target_hidden = 4\n",
    )
    .unwrap();
    path
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).to_string()
}

#[test]
fn generate_writes_files_and_validates_regimes() {
    let dir = tmp("gen");
    let cfg = small_config(&dir);
    let data = dir.join("data");
    let out = run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "42", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["train.csv", "test.csv", "manifest.json"] {
        assert!(data.join(f).exists(), "{f} missing");
    }
    let text = stdout(&out);
    assert!(!text.contains("WARNING"), "unexpected warning:\n{text}");
    assert!(text.contains("Chaotic"), "oracle output missing:\n{text}");

    // byte-identical regeneration under the same seed
    let data2 = dir.join("data2");
    let out2 = run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "42", "--out", data2.to_str().unwrap()]);
    assert!(out2.status.success());
    for f in ["train.csv", "test.csv", "manifest.json"] {
        assert_eq!(
            std::fs::read(data.join(f)).unwrap(),
            std::fs::read(data2.join(f)).unwrap(),
            "{f} not deterministic"
        );
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn generate_with_bad_constants_warns_about_separation() {
    let dir = tmp("gen-bad");
    let cfg_path = dir.join("bad.cfg");
    // strong damping kills chaos at every amplitude in this sweep
    std::fs::write(
        &cfg_path,
        "dataset.per_regime = 2\ndataset.samples_per_trajectory = 100\ndataset.delta = 3.0\ndataset.omega = 0.8\n",
    )
    .unwrap();
    let data = dir.join("data");
    let out = run(&["generate", "--config", cfg_path.to_str().unwrap(), "--seed", "1", "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "oracle failure must still exit 0");
    assert!(
        stdout(&out).contains("regime separation"),
        "missing warning:\n{}",
        stdout(&out)
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_config_is_usage_error() {
    let out = run(&["generate", "--config", "/nonexistent.cfg", "--seed", "1", "--out", "/tmp/x"]);
    assert_eq!(out.status.code(), Some(2));
    let no_flag = run(&["generate", "--seed", "1", "--out", "/tmp/x"]);
    assert_eq!(no_flag.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&no_flag.stderr).to_lowercase().contains("usage"));
}

#[test]
fn train_evaluate_compare_round_trip() {
    let dir = tmp("train");
    let cfg = small_config(&dir);
    let data = dir.join("data");
    assert!(run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", data.to_str().unwrap()])
        .status
        .success());

    // invalid method lists the valid ones
    let bad = run(&["train", "--config", cfg.to_str().unwrap(), "--method", "bogus", "--data", data.to_str().unwrap(), "--out", dir.join("x").to_str().unwrap()]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("tapinn_ao"));

    // two methods x two seeds into disjoint run dirs
    let runs = dir.join("runs");
    for method in ["tapinn_ao", "parametric"] {
        let out = run(&["train", "--config", cfg.to_str().unwrap(), "--method", method, "--seeds", "0,1", "--data", data.to_str().unwrap(), "--out", runs.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let mut run_dirs: Vec<PathBuf> = std::fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    run_dirs.sort();
    assert_eq!(run_dirs.len(), 4);
    for rd in &run_dirs {
        assert!(rd.join("steplog.csv").exists());
        assert!(rd.join("checkpoints").join("model_final.bin").exists());
        let ev = run(&["evaluate", "--run-dir", rd.to_str().unwrap(), "--data", data.to_str().unwrap()]);
        assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(rd.join("eval_report.json")).unwrap())
                .unwrap();
        for key in ["physics_residual", "data_mse", "param_count", "grad_norm_mean"] {
            assert!(report.get(key).is_some(), "report missing {key}");
        }
    }
    // tapinn runs exported embeddings; parametric runs did not
    assert!(runs.join("tapinn_ao_seed0").join("embeddings_test.csv").exists());
    assert!(!runs.join("parametric_seed0").join("embeddings_test.csv").exists());

    let cmp = run(&["compare", "--runs-dir", runs.to_str().unwrap()]);
    assert!(cmp.status.success(), "{}", String::from_utf8_lossy(&cmp.stderr));
    let table = stdout(&cmp);
    let para_pos = table.find("Parametric Baseline").expect("parametric row");
    let ours_pos = table.find("Ours (AO)").expect("tapinn row");
    assert!(para_pos < ours_pos, "table row order:\n{table}");
    assert!(runs.join("compare.csv").exists());

    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn divergence_exits_three() {
    let dir = tmp("diverge");
    let cfg_path = dir.join("exp.cfg");
    std::fs::write(
        &cfg_path,
        "dataset.per_regime = 4\ndataset.samples_per_trajectory = 150\n\
         train.epochs = 4\ntrain.phase1_epochs = 1\ntrain.phase2_epochs = 1\n\
         train.batch_size = 3\ntrain.collocation_per_item = 4\ntrain.data_points_per_item = 10\n\
         train.window_len = 30\ntrain.lstm_hidden = 4\ntrain.d_z = 2\ntrain.gen_hidden = 6\n\
         train.parametric_hidden = 6\ntrain.hyper_hidden = 4\ntrain.target_hidden = 3\n\
         train.lr = 1e9\n",
    )
    .unwrap();
    let data = dir.join("data");
    assert!(run(&["generate", "--config", cfg_path.to_str().unwrap(), "--seed", "3", "--out", data.to_str().unwrap()])
        .status
        .success());
    let out = run(&["train", "--config", cfg_path.to_str().unwrap(), "--method", "parametric", "--seed", "0", "--data", data.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("parametric"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn compare_with_no_runs_is_an_error() {
    let dir = tmp("empty");
    let out = run(&["compare", "--runs-dir", dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn dump_defaults_parses_back() {
    let out = run(&["dump-defaults"]);
    assert!(out.status.success());
    let text = stdout(&out);
    for key in ["dataset.omega", "train.method", "train.lr", "eval.n_collocation", "train.dataset_dir"] {
        assert!(text.contains(key), "missing {key}:\n{text}");
    }
}
