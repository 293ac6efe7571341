//! Command-line contract: exit codes, artifacts, and error reporting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn robliq() -> Command {
    Command::new(env!("CARGO_BIN_EXE_robliq"))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir()
        .join("robliq-cli-tests")
        .join(format!("{name}-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    dir
}

const CONSTANT_CFG: &str = r#"
seed = 5

[params]
p = 2.0
m = 4.0
horizon = 1.0
theta = 0.0

[model]
kind = "constant"
dim = 1
eta = 1.0
lambda = 0.25
vol = 1.0

[grid]
y_min = [-4.0]
y_max = [4.0]
n_space = [24]
n_time = 96
tau_min_frac = 1e-4

[assumptions]
n_samples = 200

[simulation]
n_paths = 200
n_steps = 1200
t0 = 0.0
y0 = [0.0]
x0 = 1.0

[asymptotics]
thetas = [0.2, 0.1]
fk_enable = false
"#;

fn write_cfg(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    robliq().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

#[test]
fn solve_smoke_writes_artifacts() {
    let dir = scratch("solve-smoke");
    let cfg = write_cfg(&dir, CONSTANT_CFG);
    let out_dir = dir.join("out");
    let out = run(&["solve", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    for f in ["w.csv", "meta.json", "assumptions.json", "config.toml"] {
        assert!(out_dir.join(f).exists(), "{f} missing");
    }
    // echoed config is byte-identical
    assert_eq!(fs::read(&cfg).unwrap(), fs::read(out_dir.join("config.toml")).unwrap());
}

#[test]
fn malformed_key_is_usage_error_with_field_name() {
    let dir = scratch("bad-key");
    let cfg = write_cfg(&dir, &CONSTANT_CFG.replace("seed = 5", "seed = 5\nturbo = true"));
    let out = run(&["solve", "-c", cfg.to_str().unwrap(), "-o", dir.join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("turbo"), "stderr should name the field: {msg}");
}

#[test]
fn negative_theta_is_usage_error() {
    let dir = scratch("bad-theta");
    let cfg = write_cfg(&dir, &CONSTANT_CFG.replace("theta = 0.0", "theta = -0.2"));
    let out = run(&["solve", "-c", cfg.to_str().unwrap(), "-o", dir.join("out").to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("theta"), "{msg}");
}

fn solved_constant(dirname: &str) -> (PathBuf, PathBuf) {
    let dir = scratch(dirname);
    let cfg = write_cfg(&dir, CONSTANT_CFG);
    let out_dir = dir.join("out");
    let out = run(&["solve", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    (cfg, out_dir)
}

#[test]
fn verify_pipeline_passes_on_oracle_model() {
    let (cfg, out_dir) = solved_constant("verify-ok");
    let vdir = out_dir.parent().unwrap().join("verify");
    let out = run(&[
        "verify",
        "-c",
        cfg.to_str().unwrap(),
        "--solution",
        out_dir.to_str().unwrap(),
        "-o",
        vdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(vdir.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["passed"], true);
    // constant model: degenerate (sentinel) rates still verify
    let rates: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(vdir.join("rates.json")).unwrap()).unwrap();
    assert_eq!(rates["degenerate"], true);
}

#[test]
fn verify_detects_corrupted_solution() {
    let (cfg, out_dir) = solved_constant("verify-corrupt");
    // halve the stored values: the lower bound must break near the horizon
    let csv_path = out_dir.join("w.csv");
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let mut rewritten = vec![header];
    for line in lines {
        let mut cols: Vec<String> = line.split(',').map(|s| s.to_string()).collect();
        // columns: t, y1, w, v, dw1
        for c in [2usize, 3] {
            let v: f64 = cols[c].parse().unwrap();
            cols[c] = (0.5 * v).to_string();
        }
        rewritten.push(cols.join(","));
    }
    fs::write(&csv_path, rewritten.join("\n") + "\n").unwrap();

    let vdir = out_dir.parent().unwrap().join("verify");
    let out = run(&[
        "verify",
        "-c",
        cfg.to_str().unwrap(),
        "--solution",
        out_dir.to_str().unwrap(),
        "-o",
        vdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let cert: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(vdir.join("certificate.json")).unwrap()).unwrap();
    assert_eq!(cert["passed"], false);
    assert!(cert["violation_count"].as_u64().unwrap() > 0);
}

#[test]
fn verify_rejects_config_hash_mismatch() {
    let (_, out_dir) = solved_constant("verify-hash");
    let dir = out_dir.parent().unwrap();
    // same semantics, different bytes: the hash must not match
    let cfg2 = dir.join("other.toml");
    fs::write(&cfg2, CONSTANT_CFG.replace("seed = 5", "seed = 6")).unwrap();
    let out = run(&[
        "verify",
        "-c",
        cfg2.to_str().unwrap(),
        "--solution",
        out_dir.to_str().unwrap(),
        "-o",
        dir.join("v").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn simulate_zero_theta_has_zero_penalty() {
    let (cfg, out_dir) = solved_constant("sim-theta0");
    let sdir = out_dir.parent().unwrap().join("sim");
    let out = run(&[
        "simulate",
        "-c",
        cfg.to_str().unwrap(),
        "--solution",
        out_dir.to_str().unwrap(),
        "-o",
        sdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let saddle: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(sdir.join("saddle.json")).unwrap()).unwrap();
    assert_eq!(saddle["base"]["penalty"].as_f64().unwrap(), 0.0);
}

#[test]
fn simulate_rejects_zero_paths() {
    let dir = scratch("sim-nopaths");
    let cfg = write_cfg(&dir, &CONSTANT_CFG.replace("n_paths = 200", "n_paths = 0"));
    let out_dir = dir.join("out");
    let out = run(&["solve", "-c", cfg.to_str().unwrap(), "-o", out_dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let out = run(&[
        "simulate",
        "-c",
        cfg.to_str().unwrap(),
        "--solution",
        out_dir.to_str().unwrap(),
        "-o",
        dir.join("sim").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn asymptotics_needs_two_thetas() {
    let dir = scratch("asym-one");
    let cfg = write_cfg(&dir, CONSTANT_CFG);
    let out = run(&[
        "asymptotics",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        dir.join("out").to_str().unwrap(),
        "--thetas",
        "0.1",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn asymptotics_constant_model_passes_with_flat_residuals() {
    let dir = scratch("asym-const");
    let cfg = write_cfg(&dir, CONSTANT_CFG);
    let adir = dir.join("out");
    let out = run(&[
        "asymptotics",
        "-c",
        cfg.to_str().unwrap(),
        "-o",
        adir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let rep: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(adir.join("expansion.json")).unwrap()).unwrap();
    assert_eq!(rep["degenerate"], true);
    for r in rep["residual_norms"].as_array().unwrap() {
        assert!(r.as_f64().unwrap() < 1e-12);
    }
}

#[test]
fn missing_output_dir_is_usage_error() {
    let dir = scratch("no-out");
    let cfg = write_cfg(&dir, CONSTANT_CFG);
    let out = run(&["solve", "-c", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
}
