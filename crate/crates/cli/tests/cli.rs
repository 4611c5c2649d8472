use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dptr_core::FitReport;

fn dptr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dptr"))
        .args(args)
        .env_remove("DPTR_SEED")
        .output()
        .expect("run dptr")
}

fn ok(args: &[&str]) -> Output {
    let out = dptr(args);
    assert!(
        out.status.success(),
        "dptr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["simulate", "--out", s(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("panel.csv")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn q_column(path: &Path) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "q").unwrap();
    lines
        .map(|l| l.split(',').nth(col).unwrap().parse().unwrap())
        .collect()
}

#[test]
fn simulate_is_deterministic_in_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(&dir.path().join("a"), &["--n", "50", "--seed", "4"]);
    let b = simulate(&dir.path().join("b"), &["--n", "50", "--seed", "4"]);
    let c = simulate(&dir.path().join("c"), &["--n", "50", "--seed", "5"]);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
    let manifest = read_json(&dir.path().join("a/manifest.json"));
    assert_eq!(manifest["command"], "simulate");
    assert_eq!(manifest["seed"], 4);
    assert_eq!(manifest["outputs"][0], "panel.csv");
}

#[test]
fn simulate_seed_falls_back_to_environment() {
    let dir = tempfile::tempdir().unwrap();
    let a = simulate(&dir.path().join("a"), &["--n", "20", "--seed", "77"]);
    let out = Command::new(env!("CARGO_BIN_EXE_dptr"))
        .args(["simulate", "--n", "20", "--out", s(&dir.path().join("b"))])
        .env("DPTR_SEED", "77")
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(
        std::fs::read(a).unwrap(),
        std::fs::read(dir.path().join("b/panel.csv")).unwrap()
    );
}

#[test]
fn noise_free_zero_design_file_is_constant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("dgp.toml");
    std::fs::write(&cfg, "beta2 = 0.0\nbeta3 = 0.0\nsigma = 0.0\n").unwrap();
    let panel = simulate(dir.path(), &["--config", s(&cfg), "--linear", "--n", "30"]);
    let text = std::fs::read_to_string(panel).unwrap();
    for line in text.lines().skip(1) {
        let y: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(y, 0.0);
    }
}

#[test]
fn simulated_threshold_variable_has_ar1_variance() {
    let dir = tempfile::tempdir().unwrap();
    let q = q_column(&simulate(dir.path(), &["--n", "1600", "--seed", "2"]));
    let m = q.iter().sum::<f64>() / q.len() as f64;
    let var = q.iter().map(|v| (v - m).powi(2)).sum::<f64>() / q.len() as f64;
    assert!((var - 1.0 / 0.51).abs() < 0.08, "variance {var}");
}

#[test]
fn estimate_recovers_threshold_without_noise() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), &["--sigma", "0", "--n", "200"]);
    let out = dir.path().join("fit");
    ok(&[
        "estimate",
        s(&panel),
        "--threshold",
        "q",
        "--grid",
        "quantile:0.1:0.9:21",
        "--grid-add",
        "0.25",
        "--out",
        s(&out),
    ]);
    let fit = read_json(&out.join("fit.json"));
    assert_eq!(fit["theta"]["gamma"].as_f64().unwrap(), 0.25);
    assert!(fit["criterion"].as_f64().unwrap() < 1e-12);
    let curve = std::fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("gamma,Qtilde\n"));
    assert_eq!(curve.lines().count(), 23);
}

#[test]
fn fit_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), &["--n", "400", "--seed", "1"]);
    let out = dir.path().join("fit");
    ok(&["estimate", s(&panel), "--threshold", "q", "--out", s(&out)]);
    let bytes = std::fs::read_to_string(out.join("fit.json")).unwrap();
    let report: FitReport = serde_json::from_str(&bytes).unwrap();
    let again = serde_json::to_string_pretty(&report).unwrap() + "\n";
    assert_eq!(bytes, again);
    assert_eq!(report.k, 24);
    assert_eq!(report.residuals.path.as_deref(), Some("residuals.csv"));
    assert!(out.join("residuals.csv").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), &["--n", "50"]);
    let missing_threshold = dptr(&["estimate", s(&panel)]);
    assert_eq!(missing_threshold.status.code(), Some(2));
    let bad_grid = dptr(&[
        "estimate",
        s(&panel),
        "--threshold",
        "q",
        "--grid",
        "uniform:3",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(bad_grid.status.code(), Some(2));
    let bad_lags = dptr(&[
        "estimate",
        s(&panel),
        "--threshold",
        "q",
        "--iv-y-lags",
        "x",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(bad_lags.status.code(), Some(2));
    let bad_tau = dptr(&[
        "ci-grid",
        s(&panel),
        "--threshold",
        "q",
        "--tau",
        "1.5",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(bad_tau.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dptr(&[
        "estimate",
        s(&dir.path().join("nope.csv")),
        "--threshold",
        "q",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(missing.status.code(), Some(1));
    let panel = simulate(dir.path(), &["--n", "50"]);
    let wrong_column = dptr(&[
        "estimate",
        s(&panel),
        "--threshold",
        "z",
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(wrong_column.status.code(), Some(1));
}

#[test]
fn grid_ci_contains_estimate_and_uses_default_tau() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), &["--n", "200", "--seed", "3"]);
    let out = dir.path().join("ci");
    ok(&[
        "ci-grid",
        s(&panel),
        "--threshold",
        "q",
        "--grid",
        "quantile:0.1:0.9:11",
        "--B",
        "49",
        "--out",
        s(&out),
    ]);
    let ci = read_json(&out.join("ci_grid.json"));
    assert_eq!(ci["ci"]["tau"].as_f64().unwrap(), 0.05);
    let gamma_hat = ci["estimate"]["theta"]["gamma"].as_f64().unwrap();
    let set: Vec<f64> = ci["ci"]["ci_set"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect();
    assert!(set.contains(&gamma_hat));
    let curve = std::fs::read_to_string(out.join("grid_curve.csv")).unwrap();
    assert!(curve.starts_with("gamma,D_n,crit\n"));
    assert_eq!(curve.lines().count(), 12);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["bootstrap"]["B"], 49);
}

#[test]
fn coefficient_and_test_commands_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let panel = simulate(dir.path(), &["--n", "200", "--seed", "8"]);
    let common = [
        "--threshold",
        "q",
        "--grid",
        "quantile:0.1:0.9:11",
        "--B",
        "39",
    ];
    for (cmd, file) in [
        ("ci-resid", "ci_resid.json"),
        ("test-continuity", "test_continuity.json"),
        ("test-linearity", "test_linearity.json"),
    ] {
        let out = dir.path().join(cmd);
        let mut args = vec![cmd, s(&panel)];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--out", s(&out)]);
        ok(&args);
        let report = read_json(&out.join(file));
        if cmd == "ci-resid" {
            let w = report["w_n"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&w));
            assert_eq!(report["coefficients"].as_array().unwrap().len(), 6);
        } else {
            let p = report["report"]["p_value"].as_f64().unwrap();
            assert!((0.0..=1.0).contains(&p));
        }
    }
}

#[test]
fn continuity_test_rarely_rejects_on_smooth_low_noise_data() {
    let dir = tempfile::tempdir().unwrap();
    let mut above = 0;
    for seed in 1..=50 {
        let sub = dir.path().join(format!("s{seed}"));
        let panel = simulate(
            &sub,
            &[
                "--n",
                "200",
                "--jump",
                "0",
                "--sigma",
                "0.1",
                "--seed",
                &seed.to_string(),
            ],
        );
        ok(&[
            "test-continuity",
            s(&panel),
            "--threshold",
            "q",
            "--grid",
            "quantile:0.1:0.9:11",
            "--B",
            "99",
            "--seed",
            &seed.to_string(),
            "--out",
            s(&sub),
        ]);
        let p = read_json(&sub.join("test_continuity.json"))["report"]["p_value"]
            .as_f64()
            .unwrap();
        above += usize::from(p > 0.05);
    }
    assert!(above >= 45, "p > 0.05 in {above} of 50 runs");
}

#[test]
fn mc_tables_identical_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    std::fs::write(
        &cfg,
        r#"reps = 3
seed = 11
grid = { kind = "quantile", lo = 0.15, hi = 0.85, count = 7 }

[dgp]
n = 100

[bootstrap]
B = 19

[targets]
power_offsets = [0.5]
continuity_test = true
"#,
    )
    .unwrap();
    let run = |workers: &str| {
        let out = dir.path().join(format!("w{workers}"));
        ok(&["mc", s(&cfg), "--workers", workers, "--out", s(&out)]);
        out
    };
    let (a, b) = (run("1"), run("8"));
    for name in [
        "table1_coverage.csv",
        "table2_power.csv",
        "tests.csv",
        "records.json",
        "mc_result.json",
    ] {
        assert_eq!(
            std::fs::read(a.join(name)).unwrap(),
            std::fs::read(b.join(name)).unwrap(),
            "{name}"
        );
    }
    let manifest = read_json(&a.join("manifest.json"));
    assert_eq!(manifest["config"]["bootstrap"]["B"], 19);
    assert_eq!(manifest["config"]["reps"], 3);
}

#[test]
fn mc_flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mc.toml");
    std::fs::write(&cfg, "reps = 50\n[dgp]\nn = 60\n[bootstrap]\nB = 500\n[targets]\nthreshold_coverage = false\npower_offsets = []\nlinearity_test = true\n").unwrap();
    let out = dir.path().join("o");
    ok(&[
        "mc",
        s(&cfg),
        "--reps",
        "1",
        "--B",
        "9",
        "--seed",
        "3",
        "--out",
        s(&out),
    ]);
    let manifest = read_json(&out.join("manifest.json"));
    assert_eq!(manifest["config"]["reps"], 1);
    assert_eq!(manifest["config"]["bootstrap"]["B"], 9);
    assert_eq!(manifest["config"]["seed"], 3);
    assert!(out.join("tests.csv").exists());
}
