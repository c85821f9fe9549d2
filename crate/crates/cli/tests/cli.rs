use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_walkctl"))
}

fn bundled(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(rel)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Rows of a CSV as maps from header to field.
fn rows(path: &Path) -> Vec<std::collections::HashMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<String> = lines.next().unwrap().split(',').map(str::to_owned).collect();
    lines
        .map(|l| header.iter().cloned().zip(l.split(',').map(str::to_owned)).collect())
        .collect()
}

fn num(s: &str) -> f64 {
    s.parse().unwrap()
}

#[test]
fn quiescent_scenario_exits_zero_and_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("q");
    let o = run(&[
        "run",
        bundled("scenarios/quiescent.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in [
        "state.csv",
        "zmp.csv",
        "forces.csv",
        "footsteps.csv",
        "joints.csv",
        "telemetry.csv",
        "summary.txt",
        "config.toml",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("fall=false"), "{stdout}");
}

#[test]
fn flags_override_the_file_and_the_merged_config_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("short.toml");
    fs::write(
        &cfg,
        "[scenario]\nname = \"short\"\nduration = 0.3\nseed = 1\n\n[run]\nmode = \"mpc\"\n",
    )
    .unwrap();
    let out = dir.path().join("o");
    let o = run(&[
        "run",
        cfg.to_str().unwrap(),
        "--mode",
        "rhp",
        "--seed",
        "42",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let echoed = fs::read_to_string(out.join("config.toml")).unwrap();
    let v: toml::Table = echoed.parse().unwrap();
    assert_eq!(v["run"]["mode"].as_str(), Some("rhp"));
    assert_eq!(v["scenario"]["seed"].as_integer(), Some(42));
    assert_eq!(v["scenario"]["duration"].as_float(), Some(0.3));
}

#[test]
fn missing_config_is_a_usage_error() {
    let o = run(&["run", "/nonexistent/walkctl.toml"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/nonexistent/walkctl.toml"));
}

#[test]
fn unknown_key_is_reported_with_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(
        &cfg,
        "[scenario]\nname = \"x\"\n\n[mpc]\nt_mpc = 0.05\nhorizon_seconds = 1.2\n",
    )
    .unwrap();
    let o = run(&["run", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("bad.toml:6:"), "{e}");
    assert!(e.contains("horizon_seconds"), "{e}");
}

#[test]
fn invalid_mode_flag_is_a_usage_error() {
    let o = run(&[
        "run",
        bundled("scenarios/quiescent.toml").to_str().unwrap(),
        "--mode",
        "fast",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn aligned_push_in_mpc_mode_moves_a_footstep() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("push");
    let o = run(&[
        "run",
        bundled("scenarios/push_aligned.toml").to_str().unwrap(),
        "--mode",
        "mpc",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let steps = rows(&out.join("footsteps.csv"));
    let moved = steps.iter().map(|r| num(&r["adjustment"])).fold(0.0, f64::max);
    assert!(moved > 0.01, "largest adjustment {moved}");
    // the adjustment column is the planar distance between nominal and adjusted
    for r in &steps {
        let d = (num(&r["adjusted_x"]) - num(&r["nominal_x"])).hypot(num(&r["adjusted_y"]) - num(&r["nominal_y"]));
        assert!((d - num(&r["adjustment"])).abs() < 1e-9);
    }
}

fn gen_samples(t_mpc: f64) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("g.toml");
    fs::write(&cfg, format!("[mpc]\nt_mpc = {t_mpc}\n")).unwrap();
    let out = dir.path().join("refs");
    let o = run(&[
        "gen",
        cfg.to_str().unwrap(),
        "--horizon",
        "1.2",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    rows(&out.join("references.csv")).len()
}

#[test]
fn gen_emits_one_sample_per_interval_plus_one() {
    // 1.2 s split into 60 ms and 50 ms intervals
    assert_eq!(gen_samples(0.06), 1 + (1.2f64 / 0.06).round() as usize);
    assert_eq!(gen_samples(0.05), 1 + (1.2f64 / 0.05).round() as usize);
    assert_eq!(gen_samples(0.06), 21);
    assert_eq!(gen_samples(0.05), 25);
}

#[test]
fn gen_with_zero_command_keeps_the_initial_stance() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("refs");
    let o = run(&[
        "gen",
        bundled("scenarios/quiescent.toml").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let steps = rows(&out.join("footsteps.csv"));
    assert_eq!(steps.len(), 2);
    for r in &steps {
        assert_eq!(r["deactivation"], "inf", "{r:?}");
        assert!(num(&r["x"]).abs() < 1e-12);
        assert!((num(&r["y"]).abs() - 0.045).abs() < 1e-12);
    }
}

#[test]
fn gen_rejects_a_horizon_shorter_than_one_period() {
    let o = run(&[
        "gen",
        bundled("scenarios/quiescent.toml").to_str().unwrap(),
        "--horizon",
        "0.01",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_dataset_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "t,j0\n0,0.1\n0.001,not-a-number\n").unwrap();
    let o = run(&[
        "tune-kf",
        csv.to_str().unwrap(),
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = run(&[
        "tune-kf",
        bundled("data/joints_sine.csv").to_str().unwrap(),
        "--joints",
        "elbow",
        "--out",
        dir.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
}

fn history(dir: &Path, seed: u64) -> Vec<f64> {
    let cfg = dir.join("ga.toml");
    fs::write(
        &cfg,
        "[estimation.ga]\ngenerations = 8\npopulation = 24\nparents = 12\n",
    )
    .unwrap();
    let out = dir.join(format!("seed{seed}"));
    let o = run(&[
        "tune-kf",
        bundled("data/joints_sine.csv").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--joints",
        "joint0",
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let xi: toml::Table = fs::read_to_string(out.join("xi.toml")).unwrap().parse().unwrap();
    assert!(xi["joints"]["joint0"]["r"].as_float().unwrap() > 0.0);
    rows(&out.join("history.csv"))
        .iter()
        .map(|r| num(&r["joint0"]))
        .collect()
}

#[test]
fn tuning_histories_depend_on_the_seed_and_never_decrease() {
    let dir = tempfile::tempdir().unwrap();
    let a = history(dir.path(), 1);
    let b = history(dir.path(), 2);
    assert_eq!(a.len(), 9);
    assert_ne!(a, b);
    for h in [&a, &b] {
        assert!(h.windows(2).all(|w| w[1] >= w[0]), "{h:?}");
        assert_eq!(h.last(), h.iter().max_by(|x, y| x.total_cmp(y)));
    }
}
