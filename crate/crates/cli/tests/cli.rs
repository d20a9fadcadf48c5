use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_toc-nmpc"));
    c.env("TOC_NMPC_LOG_LEVEL", "error");
    c
}

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(path: &Path) -> BTreeMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once(" = ").map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

fn number(s: &BTreeMap<String, String>, key: &str) -> f64 {
    s[key].parse().unwrap_or_else(|_| panic!("{key} = {}", s[key]))
}

fn read_fields(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    assert!(!text.contains('\r'), "{} has CR line endings", path.display());
    let mut lines = text.lines().map(|l| l.split(',').map(String::from).collect::<Vec<_>>());
    let header = lines.next().unwrap();
    (header, lines.collect())
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<f64>>) {
    let (header, rows) = read_fields(path);
    (header, rows.iter().map(|r| r.iter().map(|v| v.parse().unwrap()).collect()).collect())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn bundled_scenarios_validate() {
    for name in ["two_dof_soft.scn", "double_integrator_hard.scn", "crane_quasi.scn"] {
        let o = run(&["validate", p(&scenarios().join(name))]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn missing_horizon_is_reported_by_key_path() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenarios().join("double_integrator_hard.scn")).unwrap();
    let broken = dir.path().join("broken.scn");
    std::fs::write(&broken, text.replace("N = 40\n", "")).unwrap();
    for cmd in ["validate", "simulate", "solve-ocp"] {
        let o = bin().current_dir(dir.path()).args([cmd, p(&broken)]).output().unwrap();
        assert!(!o.status.success());
        assert!(stderr(&o).contains("horizon.N"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_2() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
}

#[test]
fn double_integrator_open_loop_takes_two_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["solve-ocp", p(&scenarios().join("double_integrator_hard.scn")), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&dir.path().join("summary.txt"));
    // bang-bang over unit distance with |u| <= 1: T = 2 sqrt(d)
    let t = number(&s, "transition_time");
    assert!((t - 2.0).abs() <= 0.02 * 2.0, "T = {t}");
    assert_eq!(s["usable"], "true");
    let (header, rows) = read_csv(&dir.path().join("trajectory.csv"));
    assert_eq!(header, ["t", "x0", "x1", "u0"]);
    assert_eq!(rows.len(), 41);
    assert!(rows.iter().all(|r| r[3].abs() <= 1.0 + 1e-9));
    assert!(dir.path().join("plot.dat").is_file());
}

#[test]
fn double_integrator_closed_loop_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", p(&scenarios().join("double_integrator_hard.scn")), "--out", p(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&dir.path().join("summary.txt"));
    let t = number(&s, "transition_time");
    assert!((t - 2.0).abs() <= 0.02 * 2.0, "T = {t}");
    assert!(number(&s, "final_state_error") < 2e-2);
    let (header, rows) = read_fields(&dir.path().join("log.csv"));
    assert_eq!(&header[..4], ["t", "x0", "x1", "u0"]);
    assert_eq!(rows.len(), 50);
    assert!(rows.iter().all(|r| r.len() == header.len()));
    let plot = std::fs::read_to_string(dir.path().join("plot.dat")).unwrap();
    assert!(plot.starts_with('#'));
    assert_eq!(plot.lines().nth(1).unwrap().split_whitespace().count(), 4);
}

/// Double integrator with seeded measurement noise.
fn noisy_scenario(dir: &Path, name: &str, seed: u64) -> PathBuf {
    let text = std::fs::read_to_string(scenarios().join("double_integrator_hard.scn")).unwrap();
    let path = dir.join(name);
    std::fs::write(&path, format!("{}\n[noise]\nseed = {seed}\nstd = 1e-3\n", text.replace("t_end = 2.5", "t_end = 0.5"))).unwrap();
    path
}

#[test]
fn same_seed_gives_byte_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let scn = noisy_scenario(dir.path(), "noisy.scn", 11);
    let other = noisy_scenario(dir.path(), "other.scn", 12);
    let mut logs = Vec::new();
    for (i, s) in [&scn, &scn, &other].iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let o = run(&["simulate", p(s), "--out", p(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        logs.push(std::fs::read(out.join("log.csv")).unwrap());
    }
    assert_eq!(logs[0], logs[1]);
    assert_ne!(logs[0], logs[2]);
}

#[test]
fn batch_runs_into_per_scenario_directories() {
    let dir = tempfile::tempdir().unwrap();
    let batch = dir.path().join("batch");
    std::fs::create_dir(&batch).unwrap();
    noisy_scenario(&batch, "a.scn", 1);
    noisy_scenario(&batch, "b.scn", 2);
    std::fs::write(batch.join("notes.txt"), "not a scenario").unwrap();
    let out = dir.path().join("out");
    let o = run(&["simulate", "--batch", p(&batch), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["a", "b"] {
        for file in ["log.csv", "summary.txt", "plot.dat"] {
            assert!(out.join(name).join(file).is_file(), "{name}/{file}");
        }
    }
    assert!(!out.join("notes").exists());
}

#[test]
fn two_dof_soft_reports_slack_and_state_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["simulate", p(&scenarios().join("two_dof_soft.scn")), "--out", p(dir.path()), "--t-end", "0.1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let s = summary(&dir.path().join("summary.txt"));
    assert!(number(&s, "max_slack") >= 0.0);
    assert!(number(&s, "final_state_error").is_finite());
    assert_eq!(s["steps"], "5");
    let (header, _) = read_fields(&dir.path().join("log.csv"));
    assert!(header.contains(&"s1".to_string()), "{header:?}");
}

#[test]
fn psd_finds_a_sampled_tone() {
    let dir = tempfile::tempdir().unwrap();
    let (dt, f0) = (0.01, 7.0);
    let mut text = String::from("t,value\n");
    for k in 0..1024 {
        let t = k as f64 * dt;
        text.push_str(&format!("{t},{}\n", (2.0 * std::f64::consts::PI * f0 * t).sin()));
    }
    let sig = dir.path().join("sig.csv");
    std::fs::write(&sig, text).unwrap();
    let out = dir.path().join("psd.csv");
    let o = run(&["psd", "--in", p(&sig), "--dt", "0.01", "--segment", "256", "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = read_csv(&out);
    assert_eq!(header, ["frequency", "power"]);
    assert_eq!(rows.len(), 129);
    let peak = rows.iter().max_by(|a, b| a[1].total_cmp(&b[1])).unwrap()[0];
    let resolution = 1.0 / (256.0 * dt);
    assert!((peak - f0).abs() <= resolution, "peak {peak}");
    assert!(rows.iter().all(|r| r[0] <= 0.5 / dt + 1e-12));
}

/// `Σ c_ij m^i y^j`, evaluated independently of the library.
fn eval_terms(rows: &[Vec<f64>], m: f64, y: f64) -> f64 {
    rows.iter().map(|r| r[2] * m.powi(r[0] as i32) * y.powi(r[1] as i32)).sum()
}

#[test]
fn sampled_polynomial_surface_fits_back() {
    let dir = tempfile::tempdir().unwrap();
    let gen = dir.path().join("gen.csv");
    std::fs::write(&gen, "i,j,c\n0,0,3.5\n1,0,-1.25\n0,1,0.5\n2,1,0.75\n0,3,-0.2\n1,2,2\n").unwrap();
    let samples = dir.path().join("samples.csv");
    let o = run(&["sample-surface", "--poly", p(&gen), "--masses", "0.5,2,7", "--positions", "0,2,9", "--out", p(&samples)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, pts) = read_csv(&samples);
    assert_eq!(header, ["m_l", "y_l", "omega"]);
    assert_eq!(pts.len(), 63);

    let coeffs = dir.path().join("coeffs.csv");
    let o = run(&["fit-surface", "--in", p(&samples), "--degree", "3", "--out", p(&coeffs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let rms: f64 = stdout.trim().strip_prefix("fit_rms = ").unwrap().parse().unwrap();
    assert!(rms < 1e-9, "fit_rms {rms}");

    let (header, fitted) = read_csv(&coeffs);
    assert_eq!(header, ["i", "j", "c"]);
    assert_eq!(fitted.len(), 10);
    let (_, generator) = read_csv(&gen);
    for r in &pts {
        let (m, y) = (r[0], r[1]);
        assert!((eval_terms(&fitted, m, y) - eval_terms(&generator, m, y)).abs() < 1e-6, "({m}, {y})");
    }
}

#[test]
fn cantilever_samples_are_positive_frequencies() {
    let o = run(&["sample-surface", "--cantilever", "--branch", "1", "--masses", "0.5,2,3", "--positions", "0,2,3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 9);
    assert!(rows.iter().all(|r| r[2] > 0.0 && r[2].is_finite()));
    let o = run(&["sample-surface", "--cantilever", "--param", "EI=-"]);
    assert_eq!(o.status.code(), Some(2));
}
