//! Execute scenarios, write their outputs, and replay manifests.
//!
//! Every numeric output file is written with 17 significant digits so a
//! replay of the same scenario and seeds is byte-identical.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use fpklab::analysis::{verify_bound_paired, BoundReport, VerifyOptions};
use fpklab::fpk::{solve_grid_1d, solve_linear, solve_linear_paired};
use fpklab::nonlinear::{
    solve_nonlinear, stability_experiment, uniqueness_check, FixedPointOptions, StabilityReport,
};
use fpklab::transport::{dual_value, kantorovich_with_limit};

use crate::assemble::{
    build_cost, build_diffusion, build_drift, build_gauge, build_grid_init, build_init_pair,
    build_lyapunov, build_sde_config, init_dim,
};
use crate::config::{Backend, CaseConfig, ExperimentKind, Scenario};
use crate::manifest::{hash_text, RunManifest};
use crate::HarnessError;

/// Float formatting used by every output file: 17 significant digits.
pub fn fmt_f(x: f64) -> String {
    format!("{x:.16e}")
}

struct OutputSet {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputSet {
    fn new(root: &Path) -> Self {
        OutputSet { root: root.to_path_buf(), files: Vec::new() }
    }

    fn write(&mut self, rel: &str, contents: &str) -> Result<(), HarnessError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(HarnessError::Io)?;
        }
        std::fs::write(&path, contents).map_err(HarnessError::Io)?;
        self.files.push(rel.to_string());
        Ok(())
    }

    fn register_dir(&mut self, rel_dir: &str) -> Result<(), HarnessError> {
        // record every file under a directory written by core serializers
        let dir = self.root.join(rel_dir);
        let mut entries: Vec<String> = std::fs::read_dir(&dir)
            .map_err(HarnessError::Io)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_file())
            .map(|e| format!("{rel_dir}/{}", e.file_name().to_string_lossy()))
            .collect();
        entries.sort();
        self.files.extend(entries);
        Ok(())
    }
}

/// Load, validate and execute a scenario file.
pub fn run_file(scenario_path: &Path, out_dir: &Path) -> Result<RunManifest, HarnessError> {
    let text = std::fs::read_to_string(scenario_path).map_err(HarnessError::Io)?;
    let scenario = Scenario::from_toml(&text)?;
    let scenario_dir = scenario_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    run_scenario(&scenario, &text, &scenario_dir, out_dir)
}

/// Execute a parsed scenario into `out_dir` and write its manifest.
pub fn run_scenario(
    scenario: &Scenario,
    scenario_text: &str,
    scenario_dir: &Path,
    out_dir: &Path,
) -> Result<RunManifest, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(HarnessError::Io)?;
    let started = Instant::now();
    let mut outputs = OutputSet::new(out_dir);
    outputs.write("scenario.toml", scenario_text)?;

    let (pass, summary) = match scenario.kind {
        ExperimentKind::Simulate => run_simulate(scenario, scenario_dir, &mut outputs)?,
        ExperimentKind::Distance => run_distance(scenario, scenario_dir, &mut outputs)?,
        ExperimentKind::VerifyBound => run_verify_bound(scenario, scenario_dir, &mut outputs)?,
        ExperimentKind::FixedPoint => run_fixed_point(scenario, scenario_dir, &mut outputs)?,
        ExperimentKind::Stability => run_stability(scenario, scenario_dir, &mut outputs)?,
    };

    let manifest = RunManifest {
        scenario_name: scenario.name.clone(),
        experiment_kind: scenario.kind.as_str().to_string(),
        scenario_hash: hash_text(scenario_text),
        scenario_toml: scenario_text.to_string(),
        artifact_version: env!("CARGO_PKG_VERSION").to_string(),
        rng_algorithm: fpklab::rng::ALGORITHM.to_string(),
        seeds: scenario.seeds.clone(),
        outputs: outputs.files.clone(),
        wall_clock_ms: started.elapsed().as_millis(),
        pass,
        summary,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn case_dir(case: &CaseConfig) -> String {
    format!("case_{}", case.name.replace(['/', ' '], "_"))
}

fn moments_csv(flow: &fpklab::measures::MeasureFlow) -> String {
    let d = flow.dim();
    let mut out = String::from("t");
    for k in 1..=d {
        let _ = write!(out, ",mean_{k}");
    }
    for k in 1..=d {
        let _ = write!(out, ",var_{k}");
    }
    out.push('\n');
    for (t, slice) in flow.times().iter().zip(flow.slices()) {
        let _ = write!(out, "{}", fmt_f(*t));
        for m in slice.mean() {
            let _ = write!(out, ",{}", fmt_f(m));
        }
        for v in slice.variance() {
            let _ = write!(out, ",{}", fmt_f(v));
        }
        out.push('\n');
    }
    out
}

fn run_simulate(
    scenario: &Scenario,
    scenario_dir: &Path,
    outputs: &mut OutputSet,
) -> Result<(bool, serde_json::Value), HarnessError> {
    let mut summary = serde_json::Map::new();
    for case in &scenario.cases {
        let cdir = case_dir(case);
        let mut case_summary = serde_json::Map::new();
        match scenario.solver.backend {
            Backend::Particle => {
                let dim = init_dim(&case.init_mu, scenario_dir)?;
                let q = build_diffusion(&scenario.diffusion, dim)?;
                let b = build_drift(&case.drift_mu, dim, "/case/drift_mu")?;
                // seeds are independent; solve them in parallel and write
                // their per-seed files serially afterwards
                let flows: Result<Vec<_>, HarnessError> = scenario
                    .seeds
                    .par_iter()
                    .map(|&seed| {
                        let cfg = build_sde_config(scenario, seed)?;
                        let (init, _) = build_init_pair(
                            case,
                            scenario.solver.particles,
                            seed,
                            scenario_dir,
                        )?;
                        let flow = solve_linear(&q, &b, &init, scenario.horizon, &cfg)
                            .map_err(HarnessError::Core)?;
                        Ok((seed, flow))
                    })
                    .collect();
                for (seed, flow) in flows? {
                    let flow_dir = format!("{cdir}/seed_{seed}/flow");
                    std::fs::create_dir_all(outputs.root.join(&flow_dir))
                        .map_err(HarnessError::Io)?;
                    flow.write_dir(&outputs.root.join(&flow_dir)).map_err(HarnessError::Core)?;
                    outputs.register_dir(&flow_dir)?;
                    outputs.write(&format!("{cdir}/seed_{seed}/moments.csv"), &moments_csv(&flow))?;
                }
                case_summary.insert("backend".into(), "particle".into());
            }
            Backend::Grid1d => {
                let grid_cfg = scenario.solver.grid.as_ref().expect("validated");
                let q = build_diffusion(&scenario.diffusion, 1)?;
                let b = build_drift(&case.drift_mu, 1, "/case/drift_mu")?;
                let init = build_grid_init(&case.init_mu, grid_cfg)?;
                let steps = (scenario.horizon / grid_cfg.dt).round() as usize;
                let stride = (steps / (scenario.time_nodes - 1)).max(1);
                let gf = solve_grid_1d(&q, &b, &init, scenario.horizon, grid_cfg.dt, stride)
                    .map_err(HarnessError::Core)?;
                let mut mass = String::from("step,mass\n");
                for (s, m) in gf.mass_trace.iter().enumerate() {
                    let _ = writeln!(mass, "{s},{}", fmt_f(*m));
                }
                outputs.write(&format!("{cdir}/mass_trace.csv"), &mass)?;
                let last = gf.densities.last().unwrap();
                let mut density = String::from("x,value\n");
                for i in 0..last.cells() {
                    let _ = writeln!(
                        density,
                        "{},{}",
                        fmt_f(last.cell_center(i)),
                        fmt_f(last.values()[i])
                    );
                }
                outputs.write(&format!("{cdir}/final_density.csv"), &density)?;
                let mut moments = String::from("t,mean,var\n");
                for (t, g) in gf.times.iter().zip(&gf.densities) {
                    let _ = writeln!(moments, "{},{},{}", fmt_f(*t), fmt_f(g.mean()), fmt_f(g.variance()));
                }
                outputs.write(&format!("{cdir}/moments.csv"), &moments)?;
                let max_step_drift = gf
                    .mass_trace
                    .windows(2)
                    .map(|w| (w[1] - w[0]).abs())
                    .fold(0.0f64, f64::max);
                case_summary.insert("backend".into(), "grid1d".into());
                case_summary.insert("max_mass_step_drift".into(), max_step_drift.into());
            }
        }
        summary.insert(case.name.clone(), case_summary.into());
    }
    Ok((true, summary.into()))
}

fn run_distance(
    scenario: &Scenario,
    scenario_dir: &Path,
    outputs: &mut OutputSet,
) -> Result<(bool, serde_json::Value), HarnessError> {
    let h = build_cost(&scenario.cost)?;
    let mut summary = serde_json::Map::new();
    for case in &scenario.cases {
        let seed = scenario.seeds[0];
        let (mu, sigma) = build_init_pair(case, scenario.solver.particles, seed, scenario_dir)?;
        let started = Instant::now();
        let (cost, _plan, duals) =
            kantorovich_with_limit(&h, &mu, &sigma, scenario.transport.support_limit)
                .map_err(HarnessError::Core)?;
        let runtime_ms = started.elapsed().as_secs_f64() * 1e3;
        let dv = dual_value(&duals, &h, &mu, &sigma).map_err(HarnessError::Core)?;
        let gap = (cost - dv).abs();
        let cdir = case_dir(case);
        outputs.write(
            &format!("{cdir}/distance.csv"),
            &format!("cost,gap\n{},{}\n", fmt_f(cost), fmt_f(gap)),
        )?;
        summary.insert(
            case.name.clone(),
            serde_json::json!({"cost": cost, "gap": gap, "runtime_ms": runtime_ms}),
        );
    }
    Ok((true, summary.into()))
}

fn bound_report_csv(report: &BoundReport) -> String {
    let mut out = String::from("t,lhs,I,rhs,margin,stderr\n");
    for k in 0..report.times.len() {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            fmt_f(report.times[k]),
            fmt_f(report.lhs[k]),
            fmt_f(report.mismatch_integral[k]),
            fmt_f(report.rhs[k]),
            fmt_f(report.margin[k]),
            fmt_f(report.mc_stderr[k]),
        );
    }
    out
}

fn run_verify_bound(
    scenario: &Scenario,
    scenario_dir: &Path,
    outputs: &mut OutputSet,
) -> Result<(bool, serde_json::Value), HarnessError> {
    let h = build_cost(&scenario.cost)?;
    let mut all_pass = true;
    let mut cases = serde_json::Map::new();
    let mut min_margin = f64::INFINITY;
    for case in &scenario.cases {
        let dim = init_dim(&case.init_mu, scenario_dir)?;
        let q = build_diffusion(&scenario.diffusion, dim)?;
        let b_mu = build_drift(&case.drift_mu, dim, "/case/drift_mu")?;
        let b_sigma = match &case.drift_sigma {
            Some(ds) => build_drift(ds, dim, "/case/drift_sigma")?,
            None => b_mu.clone(),
        };
        let lambda = case.drift_mu.lambda;
        let cdir = case_dir(case);
        let per_seed: Result<Vec<_>, HarnessError> = scenario
            .seeds
            .par_iter()
            .map(|&seed| {
                let cfg = build_sde_config(scenario, seed)?;
                let (init_mu, init_sigma) =
                    build_init_pair(case, scenario.solver.particles, seed, scenario_dir)?;
                let flows = solve_linear_paired(
                    &q,
                    &b_mu,
                    &b_sigma,
                    &init_mu,
                    &init_sigma,
                    scenario.horizon,
                    &cfg,
                )
                .map_err(HarnessError::Core)?;
                let opts = VerifyOptions {
                    ot_support: scenario.transport.ot_support,
                    subsample_seed: seed,
                    ..Default::default()
                };
                let report = verify_bound_paired(&h, &flows, &b_mu, &b_sigma, &q, lambda, &opts)
                    .map_err(HarnessError::Core)?;
                Ok((seed, report))
            })
            .collect();
        let mut reports = Vec::with_capacity(scenario.seeds.len());
        for (seed, report) in per_seed? {
            outputs.write(&format!("{cdir}/seed_{seed}.csv"), &bound_report_csv(&report))?;
            reports.push(report);
        }
        let aggregate = BoundReport::aggregate(&reports).map_err(HarnessError::Core)?;
        outputs.write(&format!("{cdir}/aggregate.csv"), &bound_report_csv(&aggregate))?;
        let case_pass = aggregate.passes();
        let case_summary = serde_json::json!({
            "pass": case_pass,
            "min_margin": aggregate.min_margin(),
            "seeds": aggregate.seeds,
        });
        let text = serde_json::to_string_pretty(&case_summary)
            .map_err(|e| HarnessError::Config(format!("summary serialization failed: {e}")))?;
        outputs.write(&format!("{cdir}/summary.json"), &text)?;
        min_margin = min_margin.min(aggregate.min_margin());
        all_pass &= case_pass;
        cases.insert(case.name.clone(), case_summary);
    }
    let summary = serde_json::json!({
        "pass": all_pass,
        "min_margin": min_margin,
        "seeds": scenario.seeds.len(),
        "cases": cases,
    });
    Ok((all_pass, summary))
}

fn run_fixed_point(
    scenario: &Scenario,
    scenario_dir: &Path,
    outputs: &mut OutputSet,
) -> Result<(bool, serde_json::Value), HarnessError> {
    let h = build_cost(&scenario.cost)?;
    let fp_cfg = scenario.fixed_point.as_ref().expect("validated");
    let mut all_pass = true;
    let mut cases = serde_json::Map::new();
    for case in &scenario.cases {
        let dim = init_dim(&case.init_mu, scenario_dir)?;
        let q = build_diffusion(&scenario.diffusion, dim)?;
        let b = build_drift(&case.drift_mu, dim, "/case/drift_mu")?;
        let opts = FixedPointOptions {
            tol: fp_cfg.tol,
            max_iter: fp_cfg.max_iter,
            ot_support: scenario.transport.ot_support,
            min_horizon_frac: fp_cfg.min_horizon_frac,
            ..Default::default()
        };
        let cdir = case_dir(case);
        let per_seed: Result<Vec<_>, HarnessError> = scenario
            .seeds
            .par_iter()
            .map(|&seed| {
                let cfg = build_sde_config(scenario, seed)?;
                let (init, _) =
                    build_init_pair(case, scenario.solver.particles, seed, scenario_dir)?;
                let trace = solve_nonlinear(&q, &b, &h, &init, scenario.horizon, &cfg, &opts)
                    .map_err(HarnessError::Core)?;
                Ok((seed, trace))
            })
            .collect();
        let mut flows = Vec::new();
        let mut seeds_summary = serde_json::Map::new();
        let mut case_pass = true;
        for (seed, trace) in per_seed? {
            let trace_json = serde_json::json!({
                "iterations": trace.corrections(),
                "residuals": trace.residuals,
                "converged": trace.converged,
                "tau": trace.tau,
                "diverged": trace.diverged,
                "contraction_factor": trace.contraction_factor,
            });
            let text = serde_json::to_string_pretty(&trace_json)
                .map_err(|e| HarnessError::Config(format!("trace serialization failed: {e}")))?;
            outputs.write(&format!("{cdir}/seed_{seed}/trace.json"), &text)?;
            let flow_dir = format!("{cdir}/seed_{seed}/final_flow");
            std::fs::create_dir_all(outputs.root.join(&flow_dir)).map_err(HarnessError::Io)?;
            trace
                .final_flow()
                .write_dir(&outputs.root.join(&flow_dir))
                .map_err(HarnessError::Core)?;
            outputs.register_dir(&flow_dir)?;
            case_pass &= trace.converged;
            seeds_summary.insert(seed.to_string(), trace_json);
            flows.push(trace);
        }
        let mut uniqueness = serde_json::Value::Null;
        if fp_cfg.uniqueness_check && scenario.seeds.len() >= 2 && case.init_sigma.is_none() {
            let a = flows[0].final_flow();
            let b_flow = flows[1].final_flow();
            if a.times() == b_flow.times() {
                let rep =
                    uniqueness_check(&h, a, b_flow, scenario.transport.ot_support, 0x0711)
                        .map_err(HarnessError::Core)?;
                case_pass &= rep.pass;
                uniqueness = serde_json::json!({
                    "pass": rep.pass,
                    "cross": rep.cross,
                    "null_mean": rep.null_mean,
                    "null_sd": rep.null_sd,
                });
            } else {
                case_pass = false;
                uniqueness = serde_json::json!({
                    "pass": false,
                    "note": "runs achieved different horizons",
                });
            }
        }
        let case_summary = serde_json::json!({
            "pass": case_pass,
            "noise": "common across fixed-point iterations",
            "seeds": seeds_summary,
            "uniqueness": uniqueness,
        });
        let text = serde_json::to_string_pretty(&case_summary)
            .map_err(|e| HarnessError::Config(format!("summary serialization failed: {e}")))?;
        outputs.write(&format!("{cdir}/summary.json"), &text)?;
        all_pass &= case_pass;
        cases.insert(case.name.clone(), case_summary);
    }
    Ok((all_pass, serde_json::json!({"pass": all_pass, "cases": cases})))
}

fn stability_csv(report: &StabilityReport) -> String {
    let mut out = String::from("t,measured,envelope,margin,stderr\n");
    for k in 0..report.times.len() {
        let env = report.envelope[k].map(fmt_f).unwrap_or_default();
        let margin = report.margin[k].map(fmt_f).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{env},{margin},{}",
            fmt_f(report.times[k]),
            fmt_f(report.measured[k]),
            fmt_f(report.mc_stderr[k]),
        );
    }
    out
}

fn run_stability(
    scenario: &Scenario,
    scenario_dir: &Path,
    outputs: &mut OutputSet,
) -> Result<(bool, serde_json::Value), HarnessError> {
    let h = build_cost(&scenario.cost)?;
    let st_cfg = scenario.stability.as_ref().expect("validated");
    let gauge = build_gauge(st_cfg)?;
    let fp_defaults = FixedPointOptions::default();
    let mut all_pass = true;
    let mut cases = serde_json::Map::new();
    for case in &scenario.cases {
        let dim = init_dim(&case.init_mu, scenario_dir)?;
        let q = build_diffusion(&scenario.diffusion, dim)?;
        let b = build_drift(&case.drift_mu, dim, "/case/drift_mu")?;
        let lya = build_lyapunov(st_cfg, dim)?;
        let opts = FixedPointOptions {
            tol: scenario.fixed_point.as_ref().map(|f| f.tol).unwrap_or(fp_defaults.tol),
            max_iter: scenario
                .fixed_point
                .as_ref()
                .map(|f| f.max_iter)
                .unwrap_or(fp_defaults.max_iter),
            ot_support: scenario.transport.ot_support,
            ..Default::default()
        };
        let cdir = case_dir(case);
        let per_seed: Result<Vec<_>, HarnessError> = scenario
            .seeds
            .par_iter()
            .map(|&seed| {
                let cfg = build_sde_config(scenario, seed)?;
                let (init_mu, init_sigma) =
                    build_init_pair(case, scenario.solver.particles, seed, scenario_dir)?;
                let report = stability_experiment(
                    &q,
                    &b,
                    &h,
                    &lya,
                    &gauge,
                    &init_mu,
                    &init_sigma,
                    scenario.horizon,
                    &cfg,
                    &opts,
                )
                .map_err(HarnessError::Core)?;
                Ok((seed, report))
            })
            .collect();
        let mut reports = Vec::new();
        for (seed, report) in per_seed? {
            outputs.write(&format!("{cdir}/seed_{seed}.csv"), &stability_csv(&report))?;
            reports.push(report);
        }
        let aggregate = StabilityReport::aggregate(&reports).map_err(HarnessError::Core)?;
        outputs.write(&format!("{cdir}/aggregate.csv"), &stability_csv(&aggregate))?;
        let case_pass = aggregate.passes();
        let case_summary = serde_json::json!({
            "pass": case_pass,
            "c0": aggregate.c0,
            "rate": aggregate.rate,
            "lyapunov_bound": aggregate.lyapunov_bound,
            "expired_at": aggregate.expires_at,
            "seeds": aggregate.seeds,
        });
        let text = serde_json::to_string_pretty(&case_summary)
            .map_err(|e| HarnessError::Config(format!("summary serialization failed: {e}")))?;
        outputs.write(&format!("{cdir}/summary.json"), &text)?;
        all_pass &= case_pass;
        cases.insert(case.name.clone(), case_summary);
    }
    Ok((all_pass, serde_json::json!({"pass": all_pass, "cases": cases})))
}

/// Outcome of replaying a manifest.
#[derive(Debug)]
pub struct ReplayOutcome {
    pub identical: bool,
    pub compared: usize,
    pub mismatches: Vec<String>,
}

/// Re-execute the scenario embedded in a manifest and compare every listed
/// output byte-for-byte against the original run.
pub fn replay(manifest_path: &Path, work_dir: &Path) -> Result<ReplayOutcome, HarnessError> {
    let manifest = RunManifest::load(manifest_path)?;
    let original_dir = manifest_path
        .parent()
        .ok_or_else(|| HarnessError::Config("manifest has no parent directory".into()))?;
    let scenario = Scenario::from_toml(&manifest.scenario_toml)?;
    if work_dir.exists() {
        std::fs::remove_dir_all(work_dir).map_err(HarnessError::Io)?;
    }
    // CSV inits resolve relative to the original run directory, where the
    // scenario file was copied alongside its outputs.
    run_scenario(&scenario, &manifest.scenario_toml, original_dir, work_dir)?;
    let mut mismatches = Vec::new();
    for rel in &manifest.outputs {
        let a = std::fs::read(original_dir.join(rel)).map_err(HarnessError::Io)?;
        let b = std::fs::read(work_dir.join(rel)).map_err(HarnessError::Io)?;
        if a != b {
            mismatches.push(rel.clone());
        }
    }
    Ok(ReplayOutcome {
        identical: mismatches.is_empty(),
        compared: manifest.outputs.len(),
        mismatches,
    })
}
