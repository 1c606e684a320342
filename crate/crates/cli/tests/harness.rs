//! Harness integration tests: schema round trips, config error reporting,
//! CLI exit codes, and plot-data emission.

use std::path::{Path, PathBuf};
use std::process::Command;

use fpklab_cli::config::Scenario;
use fpklab_cli::runner::run_file;

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

#[test]
fn all_bundled_scenarios_roundtrip() {
    let mut count = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let text = std::fs::read_to_string(&path).unwrap();
        let scenario = Scenario::from_toml(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let serialized = scenario.to_toml().unwrap();
        let reparsed = Scenario::from_toml(&serialized)
            .unwrap_or_else(|e| panic!("{} re-parse: {e}", path.display()));
        assert_eq!(scenario, reparsed, "{} does not round trip", path.display());
        count += 1;
    }
    assert!(count >= 9, "expected the bundled scenario set, found {count}");
}

#[test]
fn cli_reports_config_errors_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    // missing the [cost] block entirely
    let text = std::fs::read_to_string(scenario_dir().join("distance_smoke.toml")).unwrap();
    let broken = text.replace("[cost]\nfamily = \"capped_power\"\np = 1.0\n", "");
    std::fs::write(&bad, broken).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args(["distance", bad.to_str().unwrap(), "--out-dir"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("cost"), "{stderr}");
}

#[test]
fn cli_rejects_kind_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args([
            "simulate",
            scenario_dir().join("distance_smoke.toml").to_str().unwrap(),
            "--out-dir",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "{output:?}");
}

#[test]
fn cli_distance_prints_cost_gap_runtime() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args([
            "distance",
            scenario_dir().join("distance_smoke.toml").to_str().unwrap(),
            "--out-dir",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.starts_with("cost,gap,runtime_ms"), "{stdout}");
    // 3-point oracle value
    assert!(stdout.contains("5.666666666666"), "{stdout}");
}

#[test]
fn non_converged_fixed_point_exits_1() {
    // One solve and no corrective iteration cannot certify convergence.
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"
name = "starved"
kind = "fixed-point"
horizon = 0.25
time_nodes = 2
seeds = [1]

[cost]
family = "capped_power"
p = 2.0

[diffusion]
kind = "isotropic"
q = 1.0

[solver]
scheme = "explicit_em"
steps_per_unit_time = 40
particles = 200

[fixed_point]
tol = 1e-9
max_iter = 1

[[case]]
name = "attraction"

[case.drift_mu]
kind = "interaction"
kernel = "linear_attraction"

[case.init_mu]
kind = "gaussian"
mean = [0.5]
std = [1.0]
"#;
    let path = dir.path().join("starved.toml");
    std::fs::write(&path, scenario).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args(["fixed-point", path.to_str().unwrap(), "--out-dir"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1), "{output:?}");
}

#[test]
fn solver_blow_up_exits_3() {
    // Explicit stepping of a cubic drift from a very wide start explodes;
    // the error is numerical, not a configuration problem.
    let dir = tempfile::tempdir().unwrap();
    let scenario = r#"
name = "explodes"
kind = "simulate"
horizon = 1.0
time_nodes = 2
seeds = [1]

[cost]
family = "capped_power"
p = 2.0

[diffusion]
kind = "isotropic"
q = 1.0

[solver]
scheme = "explicit_em"
steps_per_unit_time = 100
particles = 500

[[case]]
name = "wide_cubic"

[case.drift_mu]
kind = "radial_power"
coeff = 1.0
power = 3.0

[case.init_mu]
kind = "gaussian"
mean = [0.0]
std = [20.0]
"#;
    let path = dir.path().join("explodes.toml");
    std::fs::write(&path, scenario).unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args(["simulate", path.to_str().unwrap(), "--out-dir"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3), "{output:?}");
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("blew up"), "{stderr}");
}

#[test]
fn plotdata_reshapes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    run_file(&scenario_dir().join("solver_ou_small.toml"), &out).unwrap();
    let target = fpklab_cli::plotdata::emit_plotdata(&out.join("manifest.json")).unwrap();
    let text = std::fs::read_to_string(target).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("scenario,case,seed,t,series,value"));
    let mut saw_mean = false;
    for line in lines {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 6, "{line}");
        assert_eq!(fields[0], "solver_ou_small");
        if fields[4] == "mean_1" {
            saw_mean = true;
        }
    }
    assert!(saw_mean);
}

#[test]
fn seed_override_narrows_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_fpklab"))
        .args([
            "simulate",
            scenario_dir().join("solver_ou_small.toml").to_str().unwrap(),
            "--seed",
            "7",
            "--out-dir",
        ])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0), "{output:?}");
    let manifest =
        fpklab_cli::manifest::RunManifest::load(&dir.path().join("out/manifest.json")).unwrap();
    assert_eq!(manifest.seeds, vec![7]);
    assert_eq!(manifest.rng_algorithm, "philox4x64-10");
}
