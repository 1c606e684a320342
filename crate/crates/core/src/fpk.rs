//! Linear Cauchy-problem solvers: paired-noise particle simulation and a
//! deterministic mass-conservative 1-D grid scheme.
//!
//! The equation evolved is `d mu/dt = trace(Q D^2 mu) - div(B mu)`. Its
//! probabilistic representation is `dX = B(X, t) dt + sqrt(2 Q(X, t)) dW`:
//! the factor 2 under the square root comes from the `trace(Q D^2)` form of
//! the generator and is fixed here once for the whole crate.
//!
//! Particles evolve independently on counter-based noise streams keyed by
//! `(seed, particle)`, so parallel execution cannot change results.

use rayon::prelude::*;

use crate::dynamics::{resolvent, DiffusionSpec, DriftSpec, TestFunction};
use crate::error::{Error, Result};
use crate::measures::{GridDensity1D, MeasureFlow, ParticleCloud};
use crate::quad::cumulative_trapezoid;
use crate::rng::{domain, stream_id, NormalStream, PhiloxStream};

/// Time stepping scheme for the particle solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// Explicit Euler-Maruyama.
    ExplicitEm,
    /// Implicit (resolvent) drift step followed by the noise increment;
    /// stable for superlinear dissipative drifts.
    SplitStepImplicitDrift,
}

/// Particle solver configuration.
#[derive(Clone, Debug)]
pub struct SdeConfig {
    pub steps_per_unit_time: usize,
    pub scheme: Scheme,
    pub particles: usize,
    pub seed: u64,
    /// Store every `store_stride`-th step (plus the initial and final one).
    pub store_stride: usize,
}

impl SdeConfig {
    pub fn new(
        steps_per_unit_time: usize,
        scheme: Scheme,
        particles: usize,
        seed: u64,
    ) -> Result<Self> {
        if steps_per_unit_time == 0 || particles == 0 {
            return Err(Error::InvalidArgument(
                "steps_per_unit_time and particles must be at least 1".into(),
            ));
        }
        Ok(SdeConfig { steps_per_unit_time, scheme, particles, seed, store_stride: 1 })
    }

    pub fn with_store_stride(mut self, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::InvalidArgument("store stride must be at least 1".into()));
        }
        self.store_stride = stride;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Two flows driven by identical Brownian increments (synchronous coupling).
#[derive(Clone, Debug)]
pub struct PairedFlows {
    pub mu: MeasureFlow,
    pub sigma: MeasureFlow,
}

impl PairedFlows {
    pub fn new(mu: MeasureFlow, sigma: MeasureFlow) -> Result<Self> {
        if mu.times() != sigma.times() {
            return Err(Error::InvalidArgument("paired flows must share their time grid".into()));
        }
        if mu.slice(0).len() != sigma.slice(0).len() {
            return Err(Error::InvalidArgument("paired flows must share the particle count".into()));
        }
        Ok(PairedFlows { mu, sigma })
    }
}

/// Materialize the initial particle state: reuse the cloud when it already
/// has the configured size and uniform weights, otherwise resample.
fn initial_state(init: &ParticleCloud, cfg: &SdeConfig) -> Result<Vec<f64>> {
    let d = init.dim();
    let n = cfg.particles;
    if init.len() == n {
        let uniform = 1.0 / n as f64;
        if init.weights().iter().all(|w| (w - uniform).abs() < 1e-12) {
            return Ok(init.positions().to_vec());
        }
    }
    let mut out = vec![0.0; n * d];
    let mut cdf = Vec::with_capacity(init.len());
    let mut acc = 0.0;
    for &w in init.weights() {
        acc += w;
        cdf.push(acc);
    }
    let mut rng = PhiloxStream::new(cfg.seed, stream_id(domain::RESAMPLE, 0));
    for i in 0..n {
        let u = rng.next_unit() * acc;
        let idx = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(k) | Err(k) => k.min(init.len() - 1),
        };
        out[i * d..(i + 1) * d].copy_from_slice(init.point(idx));
    }
    Ok(out)
}

fn step_count(horizon: f64, cfg: &SdeConfig) -> Result<usize> {
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::InvalidArgument(format!("horizon must be positive, got {horizon}")));
    }
    let steps = (horizon * cfg.steps_per_unit_time as f64).round();
    if steps < 1.0 {
        return Err(Error::InvalidArgument(
            "horizon times steps_per_unit_time must be at least 1".into(),
        ));
    }
    Ok(steps as usize)
}

/// Advance one particle along its full trajectory, appending the state to
/// `snaps` at every marked step. The noise stream is keyed by
/// `(seed, particle)` and consumed sequentially: `d` normals per step,
/// independent of the drift, so paired solves see identical increments.
#[allow(clippy::too_many_arguments)]
fn simulate_trajectory(
    q: &DiffusionSpec,
    b: &DriftSpec,
    scheme: Scheme,
    seed: u64,
    particle: usize,
    x0: &[f64],
    dt: f64,
    steps: usize,
    stored: &[bool],
    snaps: &mut Vec<f64>,
) -> Result<()> {
    let d = x0.len();
    let mut rng = NormalStream::new(seed, stream_id(domain::NOISE, particle as u64));
    let mut x = [0.0; 3];
    let mut z = [0.0; 3];
    let mut factor = [0.0; 9];
    let mut drift = [0.0; 3];
    x[..d].copy_from_slice(x0);
    let sq = dt.sqrt();
    for step_idx in 0..steps {
        let t = step_idx as f64 * dt;
        for zi in z[..d].iter_mut() {
            *zi = rng.next();
        }
        match scheme {
            Scheme::ExplicitEm => {
                b.eval_into(None, &x[..d], t, &mut drift[..d])?;
                q.noise_factor_at(&x[..d], t, &mut factor[..d * d])?;
                for r in 0..d {
                    let mut noise = 0.0;
                    for c in 0..d {
                        noise += factor[r * d + c] * z[c];
                    }
                    x[r] += dt * drift[r] + sq * noise;
                }
            }
            Scheme::SplitStepImplicitDrift => {
                // X* - dt B(X*, t + dt) = X_n, then add noise at X*.
                let j = resolvent(b, None, &x[..d], t + dt, 1.0 / dt)?;
                q.noise_factor_at(&j, t, &mut factor[..d * d])?;
                for r in 0..d {
                    let mut noise = 0.0;
                    for c in 0..d {
                        noise += factor[r * d + c] * z[c];
                    }
                    x[r] = j[r] + sq * noise;
                }
            }
        }
        if !x[..d].iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!(
                "particle state blew up at step {} (t = {:.6}), particle {particle}",
                step_idx + 1,
                t + dt,
            )));
        }
        if stored[step_idx] {
            snaps.extend_from_slice(&x[..d]);
        }
    }
    Ok(())
}

/// Solve the linear equation by particle simulation.
///
/// The drift must not be measure-dependent (freeze it first). Slices are
/// stored every `cfg.store_stride` steps, always including times 0 and `T`.
pub fn solve_linear(
    q: &DiffusionSpec,
    b: &DriftSpec,
    init: &ParticleCloud,
    horizon: f64,
    cfg: &SdeConfig,
) -> Result<MeasureFlow> {
    if b.is_measure_dependent() {
        return Err(Error::InvalidArgument(
            "linear solver requires a frozen drift; freeze the measure argument first".into(),
        ));
    }
    let d = init.dim();
    if d != q.dim() || d != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: init {d}, diffusion {}, drift {}",
            q.dim(),
            b.dim()
        )));
    }
    if d > 3 {
        return Err(Error::Capacity("particle solver supports dimensions up to 3".into()));
    }
    let steps = step_count(horizon, cfg)?;
    let dt = horizon / steps as f64;
    let state = initial_state(init, cfg)?;
    let n = cfg.particles;

    let mut stored = vec![false; steps];
    let mut times = vec![0.0];
    for done in 1..=steps {
        if done % cfg.store_stride == 0 || done == steps {
            stored[done - 1] = true;
            times.push(if done == steps { horizon } else { done as f64 * dt });
        }
    }
    let snap_count = times.len() - 1;

    let trajectories: Result<Vec<Vec<f64>>> = (0..n)
        .into_par_iter()
        .map(|particle| {
            let mut snaps = Vec::with_capacity(snap_count * d);
            simulate_trajectory(
                q,
                b,
                cfg.scheme,
                cfg.seed,
                particle,
                &state[particle * d..(particle + 1) * d],
                dt,
                steps,
                &stored,
                &mut snaps,
            )?;
            Ok(snaps)
        })
        .collect();
    let trajectories = trajectories?;

    let mut slices = Vec::with_capacity(snap_count + 1);
    slices.push(ParticleCloud::uniform(d, state)?);
    for snap in 0..snap_count {
        let mut pts = vec![0.0; n * d];
        for (particle, traj) in trajectories.iter().enumerate() {
            pts[particle * d..(particle + 1) * d]
                .copy_from_slice(&traj[snap * d..(snap + 1) * d]);
        }
        slices.push(ParticleCloud::uniform(d, pts)?);
    }
    MeasureFlow::new(times, slices)
}

/// Solve two linear problems with the same Brownian increments.
pub fn solve_linear_paired(
    q: &DiffusionSpec,
    b_mu: &DriftSpec,
    b_sigma: &DriftSpec,
    init_mu: &ParticleCloud,
    init_sigma: &ParticleCloud,
    horizon: f64,
    cfg: &SdeConfig,
) -> Result<PairedFlows> {
    let mu = solve_linear(q, b_mu, init_mu, horizon, cfg)?;
    let sigma = solve_linear(q, b_sigma, init_sigma, horizon, cfg)?;
    PairedFlows::new(mu, sigma)
}

/// Result of the deterministic 1-D grid solve.
#[derive(Clone, Debug)]
pub struct GridFlow {
    pub times: Vec<f64>,
    pub densities: Vec<GridDensity1D>,
    /// Total mass after every step (length: step count + 1).
    pub mass_trace: Vec<f64>,
}

/// Mass-conservative, positivity-preserving finite-volume scheme for the
/// 1-D equation `du/dt = d^2(q u)/dx^2 - d(b u)/dx` with zero-flux
/// boundaries: centered diffusion on `q u` plus upwind advection.
pub fn solve_grid_1d(
    q: &DiffusionSpec,
    b: &DriftSpec,
    init: &GridDensity1D,
    horizon: f64,
    dt: f64,
    store_stride: usize,
) -> Result<GridFlow> {
    if q.dim() != 1 || b.dim() != 1 {
        return Err(Error::InvalidArgument("grid solver is one-dimensional".into()));
    }
    if b.is_measure_dependent() {
        return Err(Error::InvalidArgument("grid solver requires a frozen drift".into()));
    }
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon and dt must be positive".into()));
    }
    if store_stride == 0 {
        return Err(Error::InvalidArgument("store stride must be at least 1".into()));
    }
    let nc = init.cells();
    let dx = init.cell_width();
    let steps = (horizon / dt).round() as usize;
    if steps == 0 || ((steps as f64 * dt) - horizon).abs() > 1e-9 * horizon.max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} does not divide the horizon {horizon}"
        )));
    }

    // Stability: sample coefficients over the grid to bound the admissible
    // dt. The diffusion bound dx^2 / (2 max q) alone does not preserve
    // positivity once advection is present, so the combined bound is used.
    let mut qbuf = [0.0];
    let mut bbuf = [0.0];
    let mut q_max = 0.0f64;
    let mut b_max = 0.0f64;
    let t_samples = [0.0, 0.5 * horizon, horizon];
    for i in 0..=nc {
        let x = init.x_min() + i as f64 * dx;
        for &t in &t_samples {
            q.matrix_at(&[x], t, &mut qbuf);
            q_max = q_max.max(qbuf[0]);
            b.eval_into(None, &[x], t, &mut bbuf)?;
            b_max = b_max.max(bbuf[0].abs());
        }
    }
    let diffusion_limit = 0.5 * dx * dx / q_max;
    let positivity_limit = 1.0 / (2.0 * q_max / (dx * dx) + b_max / dx);
    let admissible = diffusion_limit.min(positivity_limit);
    if dt > admissible {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt:.6e} violates the stability bound; admissible dt <= {admissible:.6e} \
             (max q = {q_max:.3}, max |b| = {b_max:.3}, dx = {dx:.4e})"
        )));
    }

    let mut u = init.values().to_vec();
    let mut times = vec![0.0];
    let mut densities =
        vec![GridDensity1D::from_evolution(init.x_min(), init.x_max(), u.clone())?];
    let mut mass_trace = vec![u.iter().sum::<f64>() * dx];
    let mut qu = vec![0.0; nc];
    let mut flux = vec![0.0; nc + 1];

    for step in 0..steps {
        let t = step as f64 * dt;
        for (i, qui) in qu.iter_mut().enumerate() {
            let x = init.x_min() + (i as f64 + 0.5) * dx;
            q.matrix_at(&[x], t, &mut qbuf);
            *qui = qbuf[0] * u[i];
        }
        flux[0] = 0.0;
        flux[nc] = 0.0;
        for i in 0..nc - 1 {
            // interface between cells i and i+1
            let x_face = init.x_min() + (i as f64 + 1.0) * dx;
            b.eval_into(None, &[x_face], t, &mut bbuf)?;
            let vel = bbuf[0];
            let upwind = if vel >= 0.0 { u[i] } else { u[i + 1] };
            flux[i + 1] = vel * upwind - (qu[i + 1] - qu[i]) / dx;
        }
        for (i, ui) in u.iter_mut().enumerate() {
            *ui -= dt / dx * (flux[i + 1] - flux[i]);
            if *ui < 0.0 {
                // round-off only: the scheme preserves positivity under the
                // admissible-dt bound
                if *ui < -1e-12 {
                    return Err(Error::Numerical(format!(
                        "negative density {:.3e} in cell {i} at step {step}",
                        *ui
                    )));
                }
                *ui = 0.0;
            }
        }
        mass_trace.push(u.iter().sum::<f64>() * dx);
        let done = step + 1;
        if done % store_stride == 0 || done == steps {
            times.push(if done == steps { horizon } else { done as f64 * dt });
            densities.push(GridDensity1D::from_evolution(init.x_min(), init.x_max(), u.clone())?);
        }
    }
    Ok(GridFlow { times, densities, mass_trace })
}

/// Residual of the weak solution identity at the final time:
/// `| int phi d rho_T - int phi d rho_0 - int_0^T int L phi d rho_s ds |`
/// with trapezoid quadrature over the stored slices.
pub fn weak_identity_residual(
    flow: &MeasureFlow,
    q: &DiffusionSpec,
    b: &DriftSpec,
    phi: &dyn TestFunction,
) -> Result<f64> {
    let series = weak_identity_residual_series(flow, q, b, phi)?;
    Ok(*series.last().unwrap())
}

/// Residuals of the weak identity at every stored time.
pub fn weak_identity_residual_series(
    flow: &MeasureFlow,
    q: &DiffusionSpec,
    b: &DriftSpec,
    phi: &dyn TestFunction,
) -> Result<Vec<f64>> {
    let d = flow.dim();
    let mut generator_means = Vec::with_capacity(flow.len());
    for (k, slice) in flow.slices().iter().enumerate() {
        let t = flow.times()[k];
        let mut acc = 0.0;
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        let mut qm = vec![0.0; d * d];
        let mut drift = vec![0.0; d];
        for (x, w) in slice.iter() {
            phi.gradient(x, &mut grad);
            phi.hessian(x, &mut hess);
            q.matrix_at(x, t, &mut qm);
            b.eval_into(None, x, t, &mut drift)?;
            let mut v = 0.0;
            for r in 0..d {
                for c in 0..d {
                    v += qm[r * d + c] * hess[c * d + r];
                }
                v += drift[r] * grad[r];
            }
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("generator not finite at {x:?}, t = {t}")));
            }
            acc += w * v;
        }
        generator_means.push(acc);
    }
    let integral = cumulative_trapezoid(flow.times(), &generator_means);
    let phi0 = flow.slice(0).integrate(|x| phi.value(x))?;
    let mut out = Vec::with_capacity(flow.len());
    for k in 0..flow.len() {
        let phik = flow.slice(k).integrate(|x| phi.value(x))?;
        out.push((phik - phi0 - integral[k]).abs());
    }
    Ok(out)
}
