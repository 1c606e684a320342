//! Turn configuration blocks into core objects.

use std::path::Path;

use fpklab::cost::CostFunction;
use fpklab::dynamics::{approximate_drift, DiffusionSpec, DriftSpec};
use fpklab::fpk::{Scheme, SdeConfig};
use fpklab::measures::{GridDensity1D, ParticleCloud};
use fpklab::nonlinear::LyapunovSpec;
use fpklab::analysis::StabilityGauge;
use fpklab::rng::{domain, stream_id, NormalStream};

use crate::config::{
    CaseConfig, CostConfig, DiffusionConfig, DriftConfig, GridConfig, InitConfig, Scenario,
    StabilityConfig,
};
use crate::HarnessError;

pub fn build_cost(cfg: &CostConfig) -> Result<CostFunction, HarnessError> {
    match cfg.family.as_str() {
        "capped_power" => CostFunction::capped_power(cfg.p.unwrap_or(f64::NAN))
            .map_err(HarnessError::Core),
        other => Err(HarnessError::Config(format!("/cost/family: unknown family `{other}`"))),
    }
}

pub fn build_diffusion(cfg: &DiffusionConfig, dim: usize) -> Result<DiffusionSpec, HarnessError> {
    match cfg.kind.as_str() {
        "isotropic" => {
            let q = cfg.q.unwrap_or(f64::NAN);
            let nu = cfg.nu.unwrap_or(q);
            if (nu - q).abs() > 1e-12 && nu > q {
                return Err(HarnessError::Config(
                    "/diffusion/nu: cannot exceed the isotropic coefficient".into(),
                ));
            }
            DiffusionSpec::constant(
                dim,
                {
                    let mut m = vec![0.0; dim * dim];
                    for i in 0..dim {
                        m[i * dim + i] = q;
                    }
                    m
                },
                nu,
            )
            .map_err(HarnessError::Core)
        }
        "matrix" => {
            let rows = cfg.matrix.as_ref().expect("validated");
            if rows.len() != dim {
                return Err(HarnessError::Config(format!(
                    "/diffusion/matrix: has dimension {}, the case needs {dim}",
                    rows.len()
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let nu = match cfg.nu {
                Some(nu) => nu,
                None => {
                    // default: certified minimum eigenvalue via the
                    // constructor's own check at a slightly slack bound
                    min_symmetric_eigenvalue(&flat, dim)
                }
            };
            DiffusionSpec::constant(dim, flat, nu).map_err(HarnessError::Core)
        }
        other => Err(HarnessError::Config(format!(
            "/diffusion/kind: unknown kind `{other}`"
        ))),
    }
}

fn min_symmetric_eigenvalue(m: &[f64], dim: usize) -> f64 {
    // power iteration on (c I - M) for a crude but safe lower bound
    let trace: f64 = (0..dim).map(|i| m[i * dim + i]).sum();
    let c = trace.abs() + 1.0;
    let mut v = vec![1.0; dim];
    for _ in 0..200 {
        let mut w = vec![0.0; dim];
        for r in 0..dim {
            for col in 0..dim {
                w[r] += (if r == col { c } else { 0.0 } - m[r * dim + col]) * v[col];
            }
        }
        let n = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / n;
        }
    }
    let mut mv = vec![0.0; dim];
    for r in 0..dim {
        for col in 0..dim {
            mv[r] += m[r * dim + col] * v[col];
        }
    }
    let rayleigh: f64 = v.iter().zip(&mv).map(|(a, b)| a * b).sum();
    rayleigh - 1e-9
}

pub fn build_drift(cfg: &DriftConfig, dim: usize, path: &str) -> Result<DriftSpec, HarnessError> {
    match cfg.kind.as_str() {
        "linear" => {
            let rows = cfg.matrix.as_ref().expect("validated");
            if rows.len() != dim {
                return Err(HarnessError::Config(format!(
                    "{path}/matrix: has dimension {}, the case needs {dim}",
                    rows.len()
                )));
            }
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let offset = cfg.offset.clone().unwrap_or_else(|| vec![0.0; dim]);
            DriftSpec::linear(flat, offset, cfg.lambda).map_err(HarnessError::Core)
        }
        "radial_power" => DriftSpec::radial_power(
            dim,
            cfg.coeff.expect("validated"),
            cfg.power.expect("validated"),
            cfg.lambda,
        )
        .map_err(HarnessError::Core),
        "convolution_power" => {
            DriftSpec::convolution_power(dim, cfg.alpha.expect("validated"))
                .map_err(HarnessError::Core)
        }
        "interaction" => match cfg.kernel.as_deref().expect("validated") {
            "linear_attraction" => Ok(DriftSpec::interaction(
                dim,
                "linear_attraction",
                |_| 1.0,
                |x, y, out| {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = -(x[k] - y[k]);
                    }
                },
                cfg.lambda,
            )),
            "gated_mean" => Ok(DriftSpec::interaction(
                dim,
                "gated_mean",
                |_| 1.0,
                |x, y, out| {
                    // -x scaled by a bounded nonnegative kernel of y
                    let w = (-y.iter().map(|v| v * v).sum::<f64>()).exp();
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = -x[k] * w;
                    }
                },
                cfg.lambda,
            )),
            other => Err(HarnessError::Config(format!(
                "{path}/kernel: unknown kernel `{other}`"
            ))),
        },
        "approximated" => {
            let base = build_drift(cfg.base.as_ref().expect("validated"), dim, path)?;
            let approx = approximate_drift(
                &base,
                cfg.k.expect("validated"),
                cfg.epsilon.expect("validated"),
            )
            .map_err(HarnessError::Core)?;
            Ok(approx.as_drift_spec())
        }
        other => Err(HarnessError::Config(format!("{path}/kind: unknown drift kind `{other}`"))),
    }
}

/// Dimension implied by an initial-condition block.
pub fn init_dim(cfg: &InitConfig, scenario_dir: &Path) -> Result<usize, HarnessError> {
    match cfg.kind.as_str() {
        "gaussian" => Ok(cfg.mean.as_ref().expect("validated").len()),
        "dirac" => Ok(cfg.point.as_ref().expect("validated").len()),
        "points" => Ok(cfg.points.as_ref().expect("validated")[0].len()),
        "csv" => {
            let path = scenario_dir.join(cfg.csv.as_ref().expect("validated"));
            let cloud = ParticleCloud::read_csv(&path).map_err(HarnessError::Core)?;
            Ok(cloud.dim())
        }
        other => Err(HarnessError::Config(format!("init kind `{other}`"))),
    }
}

/// Build the initial cloud for one side of a case. Gaussian inits draw
/// their standard normals from `(seed, INIT)` regardless of mean and
/// covariance, so the two sides of a case are comonotonically paired.
pub fn build_init(
    cfg: &InitConfig,
    particles: usize,
    seed: u64,
    scenario_dir: &Path,
) -> Result<ParticleCloud, HarnessError> {
    match cfg.kind.as_str() {
        "gaussian" => {
            let mean = cfg.mean.as_ref().expect("validated");
            let std = cfg.std.as_ref().expect("validated");
            let d = mean.len();
            let mut rng = NormalStream::new(seed, stream_id(domain::INIT, 0));
            let mut pts = Vec::with_capacity(particles * d);
            for _ in 0..particles {
                for k in 0..d {
                    pts.push(mean[k] + std[k] * rng.next());
                }
            }
            ParticleCloud::uniform(d, pts).map_err(HarnessError::Core)
        }
        "dirac" => {
            let point = cfg.point.as_ref().expect("validated");
            let mut pts = Vec::with_capacity(particles * point.len());
            for _ in 0..particles {
                pts.extend_from_slice(point);
            }
            ParticleCloud::uniform(point.len(), pts).map_err(HarnessError::Core)
        }
        "points" => {
            let rows = cfg.points.as_ref().expect("validated");
            let d = rows[0].len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            match &cfg.weights {
                Some(w) => ParticleCloud::new(d, flat, w.clone()).map_err(HarnessError::Core),
                None => ParticleCloud::uniform(d, flat).map_err(HarnessError::Core),
            }
        }
        "csv" => {
            let path = scenario_dir.join(cfg.csv.as_ref().expect("validated"));
            ParticleCloud::read_csv(&path).map_err(HarnessError::Core)
        }
        other => Err(HarnessError::Config(format!("init kind `{other}`"))),
    }
}

/// Initial clouds for both sides of a case (the second defaults to the
/// first).
pub fn build_init_pair(
    case: &CaseConfig,
    particles: usize,
    seed: u64,
    scenario_dir: &Path,
) -> Result<(ParticleCloud, ParticleCloud), HarnessError> {
    let mu = build_init(&case.init_mu, particles, seed, scenario_dir)?;
    let sigma = match &case.init_sigma {
        Some(cfg) => build_init(cfg, particles, seed, scenario_dir)?,
        None => mu.clone(),
    };
    if mu.dim() != sigma.dim() {
        return Err(HarnessError::Config(
            "case initial conditions disagree on dimension".into(),
        ));
    }
    Ok((mu, sigma))
}

/// Discretize an initial condition onto the 1-D grid.
pub fn build_grid_init(
    cfg: &InitConfig,
    grid: &GridConfig,
) -> Result<GridDensity1D, HarnessError> {
    let dx = (grid.x_max - grid.x_min) / grid.cells as f64;
    let mut values = vec![0.0; grid.cells];
    match cfg.kind.as_str() {
        "gaussian" => {
            let mean = cfg.mean.as_ref().expect("validated");
            let std = cfg.std.as_ref().expect("validated");
            if mean.len() != 1 {
                return Err(HarnessError::Config(
                    "grid backend needs a one-dimensional init".into(),
                ));
            }
            let (m, s) = (mean[0], std[0].max(1e-12));
            for (i, v) in values.iter_mut().enumerate() {
                let x = grid.x_min + (i as f64 + 0.5) * dx;
                *v = (-(x - m) * (x - m) / (2.0 * s * s)).exp();
            }
        }
        "dirac" => {
            let p = cfg.point.as_ref().expect("validated");
            if p.len() != 1 {
                return Err(HarnessError::Config(
                    "grid backend needs a one-dimensional init".into(),
                ));
            }
            let cell = (((p[0] - grid.x_min) / dx).floor().max(0.0) as usize)
                .min(grid.cells - 1);
            values[cell] = 1.0;
        }
        other => {
            return Err(HarnessError::Config(format!(
                "grid backend does not support init kind `{other}`"
            )))
        }
    }
    let mass: f64 = values.iter().sum::<f64>() * dx;
    if mass <= 0.0 {
        return Err(HarnessError::Config(
            "grid init has no mass inside the domain".into(),
        ));
    }
    for v in values.iter_mut() {
        *v /= mass;
    }
    GridDensity1D::new(grid.x_min, grid.x_max, values).map_err(HarnessError::Core)
}

pub fn build_sde_config(scenario: &Scenario, seed: u64) -> Result<SdeConfig, HarnessError> {
    let scheme = match scenario.solver.scheme.as_str() {
        "explicit_em" => Scheme::ExplicitEm,
        "split_step_implicit_drift" => Scheme::SplitStepImplicitDrift,
        other => {
            return Err(HarnessError::Config(format!(
                "/solver/scheme: unknown scheme `{other}`"
            )))
        }
    };
    let steps = (scenario.horizon * scenario.solver.steps_per_unit_time as f64).round() as usize;
    let stride = steps / (scenario.time_nodes - 1);
    SdeConfig::new(
        scenario.solver.steps_per_unit_time,
        scheme,
        scenario.solver.particles,
        seed,
    )
    .and_then(|c| c.with_store_stride(stride))
    .map_err(HarnessError::Core)
}

pub fn build_gauge(cfg: &StabilityConfig) -> Result<StabilityGauge, HarnessError> {
    match cfg.gauge.as_str() {
        "identity" => Ok(StabilityGauge::identity()),
        other => Err(HarnessError::Config(format!(
            "/stability/gauge: unknown gauge `{other}`"
        ))),
    }
}

pub fn build_lyapunov(cfg: &StabilityConfig, dim: usize) -> Result<LyapunovSpec, HarnessError> {
    match cfg.lyapunov.as_str() {
        "quadratic" => {
            let growth = cfg.lambda_growth_offset;
            let (a0, a1) = (cfg.alpha_offset, cfg.alpha_slope);
            LyapunovSpec::quadratic(dim, move |a| growth + a, move |t| a0 + a1 * t)
                .map_err(HarnessError::Core)
        }
        other => Err(HarnessError::Config(format!(
            "/stability/lyapunov: unknown Lyapunov function `{other}`"
        ))),
    }
}
