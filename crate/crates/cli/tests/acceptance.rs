//! Acceptance suite: one test per criterion, each printing a pass line.
//!
//! Run with `cargo test -p fpklab-cli --test acceptance -- --nocapture`
//! to see the per-criterion lines; the suite is also part of the normal
//! workspace test run.

use std::path::{Path, PathBuf};

use fpklab::analysis::{gronwall_envelope, rescale_flow, RescaleMap, StabilityGauge};
use fpklab::cost::CostFunction;
use fpklab::dynamics::DriftSpec;
use fpklab::fpk::{Scheme, SdeConfig};
use fpklab::measures::{MeasureFlow, ParticleCloud};
use fpklab::nonlinear::{solve_nonlinear, FixedPointOptions};
use fpklab::rng::PhiloxStream;
use fpklab::transport::{dual_value, kantorovich, kantorovich_bruteforce};
use fpklab_cli::runner::{replay, run_file};

fn scenario_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn random_uniform_cloud(rng: &mut PhiloxStream, n: usize, d: usize, spread: f64) -> ParticleCloud {
    let pts: Vec<f64> = (0..n * d).map(|_| spread * (rng.next_unit() - 0.5)).collect();
    ParticleCloud::uniform(d, pts).unwrap()
}

fn random_weighted_cloud(rng: &mut PhiloxStream, n: usize, d: usize) -> ParticleCloud {
    let pts: Vec<f64> = (0..n * d).map(|_| 3.0 * (rng.next_unit() - 0.5)).collect();
    let mut w: Vec<f64> = (0..n).map(|_| rng.next_unit() + 0.05).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    ParticleCloud::new(d, pts, w).unwrap()
}

/// Column of a CSV written by the runner, parsed as f64 (empty cells skipped).
fn read_csv_column(path: &Path, column: &str) -> Vec<f64> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().expect("csv header").split(',').collect();
    let idx = header
        .iter()
        .position(|h| *h == column)
        .unwrap_or_else(|| panic!("{}: no column {column}", path.display()));
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let field = l.split(',').nth(idx).unwrap_or("");
            if field.is_empty() { f64::NAN } else { field.parse().unwrap() }
        })
        .collect()
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[test]
fn acceptance_1_transport_oracle_equivalence() {
    let costs = [CostFunction::capped_power(1.0).unwrap(), CostFunction::capped_power(2.0).unwrap()];
    let mut rng = PhiloxStream::new(0xACC1, 0);
    let mut worst_gap = 0.0f64;
    let mut worst_dev = 0.0f64;
    for trial in 0..200 {
        let d = 1 + trial % 2;
        let n = 1 + trial % 6;
        let mu = random_uniform_cloud(&mut rng, n, d, 4.0);
        let sigma = random_uniform_cloud(&mut rng, n, d, 4.0);
        for h in &costs {
            let (cost, _plan, duals) = kantorovich(h, &mu, &sigma).unwrap();
            let brute = kantorovich_bruteforce(h, &mu, &sigma).unwrap();
            let dev = (cost - brute).abs();
            assert!(dev <= 1e-10, "trial {trial}: solver {cost} vs oracle {brute}");
            let dv = dual_value(&duals, h, &mu, &sigma).unwrap();
            let gap = (cost - dv).abs();
            assert!(gap <= 1e-8, "trial {trial}: duality gap {gap}");
            worst_gap = worst_gap.max(gap);
            worst_dev = worst_dev.max(dev);
        }
    }
    println!(
        "[acceptance 1] transport oracle equivalence: PASS \
         (200 pairs, max |solver-oracle| = {worst_dev:.2e}, max gap = {worst_gap:.2e})"
    );
}

#[test]
fn acceptance_2_metric_properties() {
    let h1 = CostFunction::capped_power(1.0).unwrap();
    let h2 = CostFunction::capped_power(2.0).unwrap();
    let mut rng = PhiloxStream::new(0xACC2, 0);
    for trial in 0..500 {
        let d = 1 + trial % 2;
        let a = random_weighted_cloud(&mut rng, 4 + trial % 7, d);
        let b = random_weighted_cloud(&mut rng, 3 + (trial * 7) % 8, d);
        let c = random_weighted_cloud(&mut rng, 2 + (trial * 3) % 9, d);
        let (ab1, _, _) = kantorovich(&h1, &a, &b).unwrap();
        let (bc1, _, _) = kantorovich(&h1, &b, &c).unwrap();
        let (ac1, _, _) = kantorovich(&h1, &a, &c).unwrap();
        assert!(ac1 <= ab1 + bc1 + 1e-8, "trial {trial}: concave triangle violated");
        let (ab2, _, _) = kantorovich(&h2, &a, &b).unwrap();
        let (bc2, _, _) = kantorovich(&h2, &b, &c).unwrap();
        let (ac2, _, _) = kantorovich(&h2, &a, &c).unwrap();
        assert!(
            ac2.sqrt() <= ab2.sqrt() + bc2.sqrt() + 1e-8,
            "trial {trial}: square-root triangle violated"
        );
    }
    println!("[acceptance 2] metric properties: PASS (500 triples, both cost families)");
}

#[test]
fn acceptance_3_rescaling_cost_identity() {
    let h = CostFunction::capped_power(2.0).unwrap();
    let mut rng = PhiloxStream::new(0xACC3, 0);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let d = 1 + trial % 2;
        let n = 15 + trial % 10;
        let mu = random_weighted_cloud(&mut rng, n, d);
        let sigma = random_weighted_cloud(&mut rng, n, d);
        let t = 0.05 + rng.next_unit();
        for &lambda in &[-1.0, 0.0, 0.4] {
            let map = RescaleMap::new(lambda).unwrap();
            let flow_mu = MeasureFlow::new(vec![0.0, t], vec![mu.clone(), mu.clone()]).unwrap();
            let flow_sigma =
                MeasureFlow::new(vec![0.0, t], vec![sigma.clone(), sigma.clone()]).unwrap();
            let rmu = rescale_flow(&map, &flow_mu).unwrap();
            let rsigma = rescale_flow(&map, &flow_sigma).unwrap();
            let (scaled, _, _) = kantorovich(&h, rmu.slice(1), rsigma.slice(1)).unwrap();
            let hs = h.rescaled(lambda * t).unwrap();
            let (original, _, _) = kantorovich(&hs, &mu, &sigma).unwrap();
            let dev = (scaled - original).abs();
            assert!(dev <= 1e-9, "trial {trial}, lambda {lambda}: {scaled} vs {original}");
            worst = worst.max(dev);
        }
    }
    println!("[acceptance 3] rescaling cost identity: PASS (100 slices x 3 lambdas, max dev {worst:.2e})");
}

#[test]
fn acceptance_4_solver_correctness() {
    // Particle solver against the moment ODEs of the linear problem.
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_file(&scenario_path("solver_ou.toml"), &dir.path().join("ou")).unwrap();
    assert!(manifest.pass);
    let mut means: Vec<Vec<f64>> = Vec::new();
    let mut vars: Vec<Vec<f64>> = Vec::new();
    for &seed in &manifest.seeds {
        let path = dir.path().join("ou").join(format!("case_ou_from_dirac/seed_{seed}/moments.csv"));
        means.push(read_csv_column(&path, "mean_1"));
        vars.push(read_csv_column(&path, "var_1"));
    }
    let times = read_csv_column(
        &dir.path().join("ou").join(format!("case_ou_from_dirac/seed_{}/moments.csv", manifest.seeds[0])),
        "t",
    );
    for (k, &t) in times.iter().enumerate() {
        if t == 0.0 {
            continue;
        }
        let mean_samples: Vec<f64> = means.iter().map(|m| m[k]).collect();
        let var_samples: Vec<f64> = vars.iter().map(|v| v[k]).collect();
        let (mean, mean_se) = mean_and_stderr(&mean_samples);
        let (var, var_se) = mean_and_stderr(&var_samples);
        let mean_exact = (-t).exp();
        let var_exact = 1.0 - (-2.0 * t).exp();
        assert!(
            (mean - mean_exact).abs() <= 3.0 * mean_se,
            "t={t}: mean {mean} vs {mean_exact} (3se = {:.2e})",
            3.0 * mean_se
        );
        assert!(
            (var - var_exact).abs() <= 3.0 * var_se,
            "t={t}: var {var} vs {var_exact} (3se = {:.2e})",
            3.0 * var_se
        );
    }
    // Grid solver: per-step mass conservation plus long-time relaxation.
    let gm = run_file(&scenario_path("solver_grid_ou.toml"), &dir.path().join("grid")).unwrap();
    assert!(gm.pass);
    let mass = read_csv_column(&dir.path().join("grid/case_grid_relaxation/mass_trace.csv"), "mass");
    let mut worst_step = 0.0f64;
    for w in mass.windows(2) {
        worst_step = worst_step.max((w[1] - w[0]).abs());
    }
    assert!(worst_step <= 1e-12, "mass step drift {worst_step:.2e}");
    let xs = read_csv_column(&dir.path().join("grid/case_grid_relaxation/final_density.csv"), "x");
    let vals = read_csv_column(&dir.path().join("grid/case_grid_relaxation/final_density.csv"), "value");
    let dx = xs[1] - xs[0];
    let l1: f64 = xs
        .iter()
        .zip(&vals)
        .map(|(x, v)| {
            let gauss = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (v - gauss).abs() * dx
        })
        .sum();
    assert!(l1 <= 0.02, "stationary L1 gap {l1}");
    println!(
        "[acceptance 4] solver correctness: PASS \
         (20-seed moment match, mass drift {worst_step:.1e}/step, stationary L1 {l1:.3})"
    );
}

#[test]
fn acceptance_5_bound_on_shifted_ou() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_file(&scenario_path("theorem1_ou_shift.toml"), dir.path()).unwrap();
    let cases = manifest.summary["cases"].as_object().expect("cases in summary");
    assert_eq!(cases.len(), 4);
    let mut min_margin = f64::INFINITY;
    for (name, case) in cases {
        assert!(
            case["pass"].as_bool().unwrap(),
            "case {name} violated the bound: {case}"
        );
        min_margin = min_margin.min(case["min_margin"].as_f64().unwrap());
        assert_eq!(case["seeds"].as_u64().unwrap(), 20);
    }
    assert!(manifest.pass);
    println!(
        "[acceptance 5] stability bound on shifted flows: PASS \
         (4 configurations x 20 seeds x 21 nodes, min margin {min_margin:.4})"
    );
}

#[test]
fn acceptance_6_drift_approximation_channel() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_file(&scenario_path("remark_drift_approximation.toml"), dir.path()).unwrap();
    assert!(manifest.pass, "bound failed: {}", manifest.summary);
    // Monotonicity in k: per-seed paired comparison of the measured
    // distances between the true flow and the approximant flow.
    let lhs = |case: &str, seed: u64| -> Vec<f64> {
        read_csv_column(&dir.path().join(format!("case_{case}/seed_{seed}.csv")), "lhs")
    };
    let times = read_csv_column(&dir.path().join("case_k10/aggregate.csv"), "t");
    for k in 0..times.len() {
        if times[k] == 0.0 {
            continue;
        }
        let diffs: Vec<f64> = manifest
            .seeds
            .iter()
            .map(|&s| lhs("k10", s)[k] - lhs("k100", s)[k])
            .collect();
        let (mean, se) = mean_and_stderr(&diffs);
        assert!(
            mean >= -3.0 * se,
            "t={}: distance did not decrease with k ({mean:.3e} +- {se:.3e})",
            times[k]
        );
    }
    println!(
        "[acceptance 6] drift approximation channel: PASS \
         (bound holds for k in {{10, 100}}; distance monotone in k within 3 stderr)"
    );
}

#[test]
fn acceptance_7_gronwall_envelope() {
    // Quadrature envelope against the closed form for the identity gauge.
    let gauge = StabilityGauge::identity();
    let grid: Vec<f64> = (0..21).map(|i| 0.025 * i as f64).collect();
    let (c0, rate) = (0.2, 1.3);
    let env = gronwall_envelope(&gauge, c0, rate, &grid).unwrap();
    let mut worst = 0.0f64;
    for (t, v) in grid.iter().zip(&env.values) {
        let exact = 2.0f64.sqrt() * c0 * (rate * rate * t).exp();
        worst = worst.max((v.unwrap() - exact).abs());
    }
    assert!(worst <= 1e-9, "quadrature envelope deviates {worst:.2e}");

    // Measured distances stay below the envelope on the bundled scenario.
    let dir = tempfile::tempdir().unwrap();
    let manifest = run_file(&scenario_path("stability_meanfield_ou.toml"), dir.path()).unwrap();
    assert!(manifest.pass, "envelope experiment failed: {}", manifest.summary);
    let case = &manifest.summary["cases"]["shifted_inits"];
    assert!(case["expired_at"].is_null(), "envelope expired early");
    let agg = dir.path().join("case_shifted_inits/aggregate.csv");
    let margins = read_csv_column(&agg, "margin");
    let stderrs = read_csv_column(&agg, "stderr");
    for (m, s) in margins.iter().zip(&stderrs) {
        assert!(m.is_nan() || *m >= -(3.0 * s + 1e-6), "margin {m} below tolerance");
    }
    println!(
        "[acceptance 7] stability envelope: PASS \
         (closed form matched to {worst:.1e}; measured below envelope on all nodes, 10 seeds)"
    );
}

#[test]
fn acceptance_8_fixed_point_solver() {
    let dir = tempfile::tempdir().unwrap();
    for (scenario, case) in [
        ("example1_meanfield.toml", "attraction"),
        ("example3_convolution.toml", "alpha_half"),
    ] {
        let out = dir.path().join(case);
        let manifest = run_file(&scenario_path(scenario), &out).unwrap();
        assert!(manifest.pass, "{scenario} failed: {}", manifest.summary);
        let summary = &manifest.summary["cases"][case];
        for &seed in &manifest.seeds {
            let trace = &summary["seeds"][seed.to_string()];
            assert!(trace["converged"].as_bool().unwrap(), "{scenario} seed {seed}");
            assert!(trace["iterations"].as_u64().unwrap() <= 15);
            assert_eq!(trace["tau"].as_f64().unwrap(), 0.25);
        }
        assert!(
            summary["uniqueness"]["pass"].as_bool().unwrap(),
            "{scenario}: different-seed runs disagree beyond the null scale"
        );
    }
    // A measure-independent drift converges after a single correction.
    let q = fpklab::dynamics::DiffusionSpec::isotropic(1, 1.0).unwrap();
    let b = DriftSpec::linear(vec![-1.0], vec![0.0], 0.0).unwrap();
    let h = CostFunction::capped_power(2.0).unwrap();
    let init = {
        let mut rng = PhiloxStream::new(0xACC8, 0);
        let pts: Vec<f64> = (0..1000).map(|_| rng.next_normal()).collect();
        ParticleCloud::uniform(1, pts).unwrap()
    };
    let cfg = SdeConfig::new(100, Scheme::ExplicitEm, 1000, 9)
        .unwrap()
        .with_store_stride(20)
        .unwrap();
    let trace =
        solve_nonlinear(&q, &b, &h, &init, 0.25, &cfg, &FixedPointOptions::default()).unwrap();
    assert!(trace.converged);
    assert_eq!(trace.corrections(), 1);
    println!(
        "[acceptance 8] fixed-point solver: PASS \
         (both interaction drifts converged with tol 0.01; frozen drift in 1 correction; \
          two-seed uniqueness within the null scale)"
    );
}

#[test]
fn acceptance_9_replay_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    for (scenario, label) in [
        ("distance_smoke.toml", "distance"),
        ("solver_ou_small.toml", "simulate"),
        ("example2_gated.toml", "fixed-point"),
    ] {
        let out = dir.path().join(label);
        run_file(&scenario_path(scenario), &out).unwrap();
        let outcome = replay(&out.join("manifest.json"), &out.join("replay_check")).unwrap();
        assert!(
            outcome.identical,
            "{label}: {} of {} outputs differ: {:?}",
            outcome.mismatches.len(),
            outcome.compared,
            outcome.mismatches
        );
        assert!(outcome.compared > 0);
    }
    println!(
        "[acceptance 9] reproducibility: PASS \
         (replayed distance, simulate and fixed-point manifests bit-for-bit)"
    );
}
