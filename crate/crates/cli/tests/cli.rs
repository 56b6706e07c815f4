use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": "wine",
  "preset": {
    "bnn": {"width": 16},
    "dgm": {"depth": 1, "vae_width": 16, "vaeac_width": 16, "inner_width": 16, "latent_dim": 3, "inner_latent": 2},
    "training": {
      "sghmc": {"step_size": 0.01, "friction": 0.05, "batch_size": 128, "burn_in": {"epochs": 6},
                "estimation": {"epochs": 2}, "save_every": {"epochs": 1}, "n_samples": 4,
                "resample_momentum": {"epochs": 2}, "gibbs_every": {"epochs": 3}},
      "dgm_epochs": 3, "dgm_batch_size": 128
    }
  },
  "framework": {"n_train": 200, "n_test": 100}
}"#;

fn clue(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clue"))
        .current_dir(dir)
        .env_remove("CLUE_OUT_ROOT")
        .args(args)
        .output()
        .expect("run clue")
}

fn ok(dir: &Path, args: &[&str]) {
    let o = clue(dir, args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn read(dir: &Path, f: &str) -> String {
    std::fs::read_to_string(dir.join(f)).unwrap()
}

#[test]
fn unknown_preset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = clue(dir.path(), &["train-bnn", "--dataset", "none"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown preset"));
    assert!(!dir.path().join("runs").exists());
}

#[test]
fn bad_flags_and_missing_checkpoints_exit_2() {
    let dir = setup();
    let d = dir.path();
    assert_eq!(clue(d, &["train-bnn", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(clue(d, &["no-such-command"]).status.code(), Some(2));
    let o = clue(d, &["clue", "--config", "tiny.json", "--out", "o"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing checkpoint"));
    assert_eq!(clue(d, &["train-bnn", "--dataset", "compas"]).status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_1_with_json_report() {
    let dir = setup();
    let d = dir.path();
    let o = clue(d, &["train-bnn", "--dataset", "compas", "--data", "missing.csv", "--out", "o"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    let report: serde_json::Value = serde_json::from_str(err.trim()).unwrap();
    assert_eq!(report["status"], "error");
    assert_eq!(report["kind"], "model");
}

#[test]
fn checkpoints_are_write_once() {
    let dir = setup();
    let d = dir.path();
    ok(d, &["train-bnn", "--config", "tiny.json", "--out", "o"]);
    let before = std::fs::read(d.join("o/bnn/member_0000.bin")).unwrap();
    let o = clue(d, &["train-bnn", "--config", "tiny.json", "--out", "o", "--seed", "3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("already holds a checkpoint"));
    assert_eq!(before, std::fs::read(d.join("o/bnn/member_0000.bin")).unwrap());
}

#[test]
fn framework_grid_rows_and_bit_identical_reruns() {
    let dir = setup();
    let d = dir.path();
    for out in ["a", "b"] {
        ok(d, &["train-dgm", "--kind", "ground-truth", "--config", "tiny.json", "--out", out]);
        ok(
            d,
            &[
                "eval-framework", "--config", "tiny.json", "--out", out, "--method", "clue", "--grid", "1e-2:1e2:9",
                "--seeds", "3",
            ],
        );
    }
    let records = read(d, "a/records.csv");
    for metric in ["dh_gt", "derr_gt", "dx_l1", "dlogp_gt", "dh_model"] {
        let n = records.lines().filter(|l| l.split(',').nth(4) == Some(metric)).count();
        assert_eq!(n, 9 * 3, "{metric}");
    }
    let seeds: std::collections::BTreeSet<&str> = records.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(seeds.len(), 3);
    let hash = records.lines().nth(1).unwrap().split(',').next().unwrap().to_string();
    assert_eq!(hash.len(), 64);
    assert!(records.lines().skip(1).all(|l| l.starts_with(&hash)));
    for f in ["records.csv", "curves.csv", "knee.json"] {
        assert_eq!(read(d, &format!("a/{f}")), read(d, &format!("b/{f}")), "{f}");
    }
    let knee: serde_json::Value = serde_json::from_str(&read(d, "a/knee.json")).unwrap();
    assert_eq!(knee["per_seed"].as_array().unwrap().len(), 3);
    let m = knee["mean"]["clue"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&m));
}

#[test]
fn explanation_commands_write_stamped_tables() {
    let dir = setup();
    let d = dir.path();
    let base = ["--config", "tiny.json", "--out", "o"];
    let with = |cmd: &[&str]| -> Vec<String> { cmd.iter().chain(base.iter()).map(|s| s.to_string()).collect() };
    for cmd in [
        vec!["train-bnn"],
        vec!["train-dgm", "--kind", "vae"],
        vec!["train-dgm", "--kind", "vaeac"],
        vec!["uncertainty"],
        vec!["clue", "--lambda-x", "2.5"],
        vec!["sensitivity", "--eta", "0.5"],
        vec!["ufido", "--lambda-b", "0.1"],
        vec!["eval-real"],
        vec!["ablate", "init-strategy"],
        vec!["ablate", "lambda-y", "--values", "0,2"],
        vec!["ablate", "dgm-capacity", "--latent", "2,4"],
        vec!["ablate", "deterministic-nn", "--epochs", "3"],
    ] {
        let args = with(&cmd);
        ok(d, &args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    let o = d.join("o");
    for f in [
        "uncertainty.csv",
        "clue.csv",
        "clue_features.csv",
        "latent_trajectories.csv",
        "sensitivity.csv",
        "ufido.csv",
        "real.csv",
        "ablate_init_strategy.csv",
        "ablate_lambda_y.csv",
        "ablate_dgm_capacity.csv",
        "ablate_deterministic_nn.csv",
    ] {
        let text = read(&o, f);
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("config_hash,seed,"), "{f}");
        assert!(lines.all(|l| l.split(',').nth(1) == Some("0")), "{f}");
    }
    assert_eq!(read(&o, "uncertainty.csv").lines().count(), 161);
    assert_eq!(read(&o, "ablate_lambda_y.csv").lines().count(), 3);
    let cfg: serde_json::Value = serde_json::from_str(&read(&o, "clue.config.json")).unwrap();
    assert_eq!(cfg["clue"]["lambda_x"], 2.5);
    let cfg: serde_json::Value = serde_json::from_str(&read(&o, "sensitivity.config.json")).unwrap();
    assert_eq!(cfg["clue"]["lambda_x"], 2.5);
    assert_eq!(cfg["sensitivity"]["eta"], 0.5);
}

#[test]
fn moons_demo_emits_the_grid() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["moons-demo", "--out", "m", "--n", "120", "--burn-in", "6", "--resolution", "4"]);
    let grid = read(dir.path(), "m/moons_grid.csv");
    assert_eq!(grid.lines().count(), 1 + 16);
    for line in grid.lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(4).map(|x| x.parse().unwrap()).collect();
        assert!((v[0] - v[1] - v[2]).abs() < 1e-9 && v[2] >= 0.0);
    }
}

#[test]
fn out_root_env_prefixes_relative_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_clue"))
        .current_dir(dir.path())
        .env("CLUE_OUT_ROOT", "root")
        .args(["moons-demo", "--out", "m", "--n", "60", "--burn-in", "3", "--resolution", "2"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(dir.path().join("root/m/moons_grid.csv").exists());
}
