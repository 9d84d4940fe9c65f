//! End-to-end checks of the `fbsde-lab` binary: exit codes, emitted files,
//! flag precedence, and rerun determinism.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_fbsde-lab")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fbsde-lab-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

const LP_CONFIG: &str = r#"
kind = "lp-verify"
seed = 31

[grid]
n_steps = 32

[monte_carlo]
n_paths = 200

[solver.spatial_grid]
center = 1.0
half_width = 6.0
n_nodes = 41

[problem]
family = "example1"
a = 1.0
c = 1.0
xi = 1.0

[lp]
p = 2.0
xi_ladder = [0.0, 1.0]
"#;

#[test]
fn lp_verify_run_emits_files_and_succeeds() {
    let dir = temp_dir("run");
    let config = write_config(&dir, "lp.toml", LP_CONFIG);
    let out = dir.join("out");
    let status = Command::new(binary())
        .args(["lp-verify", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["report.json", "lp_table.csv", "stability_table.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "lp-verify");
    assert_eq!(report["seed"], 31);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = temp_dir("det");
    let config = write_config(&dir, "lp.toml", LP_CONFIG);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let status = Command::new(binary())
            .args(["lp-verify", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success());
    }
    for name in ["lp_table.csv", "stability_table.csv"] {
        assert_eq!(
            fs::read(out_a.join(name)).unwrap(),
            fs::read(out_b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = temp_dir("bad-config");
    let config = write_config(
        &dir,
        "bad.toml",
        "kind = \"lp-verify\"\nseed = 1\nsigma_z = 0.5\n",
    );
    let output = Command::new(binary())
        .args(["lp-verify", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("sigma_z"), "stderr: {stderr}");
}

#[test]
fn missing_config_file_exits_with_code_4() {
    let output = Command::new(binary())
        .args(["kp-gate", "--config", "/nonexistent/path.toml"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(4));
}

#[test]
fn numerical_failures_exit_with_code_3() {
    let dir = temp_dir("numerical");
    // One-iteration Picard budget with a nonzero driver cannot converge.
    let config = write_config(
        &dir,
        "diverge.toml",
        r#"
kind = "field"
seed = 1

[grid]
n_steps = 2

[solver]
picard_max_iter = 1
picard_tol = 1e-12

[solver.spatial_grid]
center = 0.0
half_width = 1.0
n_nodes = 5

[problem]
family = "affine"
driver_0 = 1.0
"#,
    );
    let out = dir.join("out");
    let output = Command::new(binary())
        .args(["field", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn flags_override_config_values() {
    let dir = temp_dir("flags");
    let config = write_config(&dir, "lp.toml", LP_CONFIG);
    let out = dir.join("out");
    let status = Command::new(binary())
        .args(["lp-verify", "--config"])
        .arg(&config)
        .args(["--seed", "77", "--n-paths", "100", "--n-steps", "16"])
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["seed"], 77);
    assert_eq!(report["config"]["monte_carlo"]["n_paths"], 100);
    assert_eq!(report["config"]["grid"]["n_steps"], 16);
}

#[test]
fn env_var_supplies_default_out_dir() {
    let dir = temp_dir("env");
    let config = write_config(
        &dir,
        "kp.toml",
        r#"
kind = "kp-gate"
seed = 5

[kp_gate]
p = 2.0
k_upper = 1.0
k_lower = 1.0
l_sigma = 0.1
k = 1.0
"#,
    );
    let out = dir.join("from-env");
    let status = Command::new(binary())
        .args(["kp-gate", "--config"])
        .arg(&config)
        .env("FBSDE_LAB_OUT", &out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("report.json").is_file());
    assert!(out.join("kp_table.csv").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let kp = report["outputs"]["kp"].as_f64().unwrap();
    assert_eq!(kp, 20.0 / 3.0);
    assert_eq!(report["outputs"]["gates"]["lipschitz_gate"], true);
}

#[test]
fn lq_run_produces_certificate_and_riccati_table() {
    let dir = temp_dir("lq");
    let config = write_config(
        &dir,
        "lq.toml",
        r#"
kind = "lq"
seed = 8

[grid]
n_steps = 64

[monte_carlo]
n_paths = 400

[solver.spatial_grid]
center = 0.5
half_width = 3.0
n_nodes = 41

[lq]
b = 1.0
q = 1.0
r = 1.0
h = 1.0
x0 = 1.0
r_lower_bound = 0.5
n_perturbations = 4
certificate_samples = 2000
"#,
    );
    let out = dir.join("out");
    let status = Command::new(binary())
        .args(["lq", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for name in ["report.json", "optimality_table.csv", "riccati_table.csv"] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let value = report["outputs"]["riccati_value"].as_f64().unwrap();
    assert!((value - 1.0).abs() < 1e-9);
    let cost = report["outputs"]["base_cost"]["value"].as_f64().unwrap();
    assert!((cost - 1.0).abs() < 0.05);
}
