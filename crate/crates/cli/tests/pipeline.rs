use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ionsync_cli::pipeline::{reference_checks, run_couplings, run_modes, DerivedParameters};
use ionsync_cli::{load_config, run_pipeline, RunConfig, Stage};

fn table2() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/table2.cfg")
}

fn small_config(dir: &Path) -> RunConfig {
    let text = format!(
        r#"
[crystal]
n_sigma = 5
n_tau = 2
[experiment]
n_traj = 40
dt_s = 2e-4
t_final_s = 0.1
sample_interval_s = 0.005
w_over_n_gamma_c = [0.5, 1.0]
seed = 11
[output]
dir = "{}"
"#,
        dir.display()
    );
    RunConfig::from_toml(&text).unwrap()
}

fn ionsync() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ionsync"));
    cmd.env("RUST_LOG", "warn");
    cmd
}

#[test]
fn bundled_config_reproduces_reference_rates() {
    let cfg = load_config(&table2()).unwrap();
    assert_eq!(cfg.crystal.n_sigma, 124);
    let m = run_modes(&cfg).unwrap();
    let c = run_couplings(&cfg, &m).unwrap();
    let d = DerivedParameters::new(&m, Some(&c));
    let checks = reference_checks(&d);
    assert_eq!(checks.len(), 6);
    for k in checks.iter().filter(|k| k.name != "gamma_c_hz") {
        assert!(k.pass, "{} = {} vs {}", k.name, k.value, k.target);
    }
    assert!(d.gamma_c_hz.unwrap() > 0.0);
    assert!(d.markov_ratio.unwrap() > 10.0);
}

#[test]
fn empty_file_runs_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("empty.toml");
    fs::write(&cfg_path, "").unwrap();
    let out = tmp.path().join("out");
    let status = ionsync()
        .args(["--config", cfg_path.to_str().unwrap(), "--stage", "modes", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let echoed = RunConfig::from_toml(&fs::read_to_string(out.join("config.toml")).unwrap()).unwrap();
    let mut expected = RunConfig::default();
    expected.output.dir = out.clone();
    assert_eq!(echoed, expected);
}

#[test]
fn stage_filter_stops_after_modes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let report = run_pipeline(&cfg, Stage::Modes).unwrap();
    assert!(report.files.contains(&"modes.csv".to_string()));
    assert!(report.files.contains(&"cooling.csv".to_string()));
    assert!(!tmp.path().join("raman.json").exists());
    assert!(!tmp.path().join("sweep.csv").exists());
    assert!(report.derived.gamma_c_hz.is_none());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "modes");
    assert_eq!(manifest["config_sha256"], cfg.hash());
}

#[test]
fn same_seed_gives_identical_observables() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_pipeline(&small_config(a.path()), Stage::Experiment).unwrap();
    run_pipeline(&small_config(b.path()), Stage::Experiment).unwrap();
    assert_eq!(ra.sweep.len(), 2);
    for name in ["ramsey_w00.csv", "ramsey_w01.csv", "sweep.csv", "spin_model.csv"] {
        let fa = fs::read(a.path().join(name)).unwrap();
        let fb = fs::read(b.path().join(name)).unwrap();
        assert!(!fa.is_empty());
        assert_eq!(fa, fb, "{name} differs between identical runs");
    }
    let mut other = small_config(b.path());
    other.experiment.seed = 12;
    run_pipeline(&other, Stage::Experiment).unwrap();
    assert_ne!(fs::read(a.path().join("ramsey_w00.csv")).unwrap(), fs::read(b.path().join("ramsey_w00.csv")).unwrap());
}

#[test]
fn manifest_config_reruns_identically() {
    let a = tempfile::tempdir().unwrap();
    run_pipeline(&small_config(a.path()), Stage::Experiment).unwrap();
    let mut again = load_config(&a.path().join("config.toml")).unwrap();
    let b = tempfile::tempdir().unwrap();
    again.output.dir = b.path().to_path_buf();
    run_pipeline(&again, Stage::Experiment).unwrap();
    assert_eq!(fs::read(a.path().join("sweep.csv")).unwrap(), fs::read(b.path().join("sweep.csv")).unwrap());
}

#[test]
fn json_format_writes_json_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config(tmp.path());
    cfg.output.format = ionsync_cli::Format::Json;
    cfg.experiment.w_over_n_gamma_c = vec![0.5];
    run_pipeline(&cfg, Stage::Experiment).unwrap();
    for name in ["modes.json", "cooling.json", "spin_model.json", "ramsey_w00.json", "sweep.json"] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join(name)).unwrap()).unwrap();
        assert!(!v.is_null(), "{name}");
    }
    assert!(!tmp.path().join("sweep.csv").exists());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[cooling]\nlinewidth_hz = -1.0\n").unwrap();
    let out = ionsync().args(["--config", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cooling.linewidth_hz"));

    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "[raman]\nmystery = 1\n").unwrap();
    assert_eq!(ionsync().args(["--config", unknown.to_str().unwrap()]).status().unwrap().code(), Some(2));

    let missing = tmp.path().join("missing.toml");
    assert_eq!(ionsync().args(["--config", missing.to_str().unwrap()]).status().unwrap().code(), Some(2));

    // Dense engine refuses a large crystal: stage failure.
    let dense = tmp.path().join("dense.toml");
    fs::write(&dense, "[crystal]\nn_sigma = 12\nn_tau = 7\n").unwrap();
    let out = ionsync()
        .args(["--config", dense.to_str().unwrap(), "--engine", "dense", "--out", tmp.path().join("d").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment"));

    // A step far beyond stability blows up every trajectory.
    let unstable = tmp.path().join("unstable.toml");
    fs::write(&unstable, "[crystal]\nn_sigma = 5\nn_tau = 2\n[experiment]\nn_traj = 8\ndt_s = 0.5\nt_final_s = 50.0\nsample_interval_s = 0.5\n")
        .unwrap();
    let out = ionsync()
        .args(["--config", unstable.to_str().unwrap(), "--out", tmp.path().join("u").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(4), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sweep_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("c.toml");
    fs::write(&cfg_path, "[crystal]\nn_sigma = 5\nn_tau = 2\n[experiment]\nn_traj = 8\nt_final_s = 0.05\nsample_interval_s = 0.005\n")
        .unwrap();
    let out = tmp.path().join("o");
    let status = ionsync()
        .args(["--config", cfg_path.to_str().unwrap(), "--sweep", "w=0.5:1.5:3", "--seed", "5", "--format", "csv"])
        .args(["--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    let echoed = load_config(&out.join("config.toml")).unwrap();
    assert_eq!(echoed.experiment.w_over_n_gamma_c, vec![0.5, 1.0, 1.5]);
    assert_eq!(echoed.experiment.seed, 5);
}
