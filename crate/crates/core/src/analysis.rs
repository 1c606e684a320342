//! Quantitative stability machinery: time rescaling, verification of the
//! transport-cost bound between two linear flows, and Gronwall/Osgood
//! stability envelopes.
//!
//! The central estimate compares `C_{h_{lambda t}}(mu_t, sigma_t)` against
//! `C_h(mu_0, sigma_0) + |h|_inf sqrt(I(t)) sqrt(1 + I(t))` where
//! `I(t) = int_0^t int nu^{-1} |B_mu - B_sigma|^2 d sigma_s ds` is the
//! drift-mismatch integral over the second flow. All measured quantities
//! are empirical (particle clouds), so pass/fail decisions carry a Monte
//! Carlo tolerance derived from seed spread.

use rayon::prelude::*;

use crate::cost::CostFunction;
use crate::dynamics::{check_dissipativity, DiffusionSpec, DissipativityCheck, DriftSpec};
use crate::error::{Error, Result};
use crate::fpk::PairedFlows;
use crate::measures::{MeasureFlow, ParticleCloud};
use crate::quad::{adaptive_simpson, cumulative_trapezoid};
use crate::transport::kantorovich;

/// Time change `s(t) = (1 - e^{-2 lambda t}) / (2 lambda)` reducing a
/// `lambda`-dissipative problem to a 0-dissipative one.
#[derive(Clone, Copy, Debug)]
pub struct RescaleMap {
    lambda: f64,
}

impl RescaleMap {
    pub fn new(lambda: f64) -> Result<Self> {
        if !lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        Ok(RescaleMap { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Largest admissible rescaled time: `1 / (2 lambda)` for positive
    /// `lambda`, infinite otherwise.
    pub fn s_infinity(&self) -> f64 {
        if self.lambda > 0.0 {
            1.0 / (2.0 * self.lambda)
        } else {
            f64::INFINITY
        }
    }

    pub fn s_of_t(&self, t: f64) -> f64 {
        if self.lambda == 0.0 {
            t
        } else {
            (1.0 - (-2.0 * self.lambda * t).exp()) / (2.0 * self.lambda)
        }
    }

    pub fn t_of_s(&self, s: f64) -> f64 {
        if self.lambda == 0.0 {
            s
        } else {
            -(1.0 - 2.0 * self.lambda * s).ln() / (2.0 * self.lambda)
        }
    }

    /// Spatial contraction factor applied to positions at original time `t`.
    pub fn space_factor(&self, t: f64) -> f64 {
        (-self.lambda * t).exp()
    }
}

/// Rescale a flow: times become `s(t_i)`, points are scaled by
/// `e^{-lambda t_i}`, weights are unchanged.
pub fn rescale_flow(map: &RescaleMap, flow: &MeasureFlow) -> Result<MeasureFlow> {
    let s_inf = map.s_infinity();
    let s_last = map.s_of_t(flow.horizon());
    if s_last >= s_inf * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "rescaled horizon reaches S_infinity = 1/(2 lambda) = {s_inf}; \
             shorten the flow or reduce lambda"
        )));
    }
    let mut times = Vec::with_capacity(flow.len());
    let mut slices = Vec::with_capacity(flow.len());
    for (t, slice) in flow.times().iter().zip(flow.slices()) {
        let factor = map.space_factor(*t);
        times.push(map.s_of_t(*t));
        slices.push(slice.map_points(|x, out| {
            for (o, xi) in out.iter_mut().zip(x) {
                *o = factor * xi;
            }
        })?);
    }
    MeasureFlow::new(times, slices)
}

/// Rescale coefficients: `Q~(y, s) = Q(e^{lambda t(s)} y, t(s))` and
/// `A~(y, s) = e^{lambda t(s)} A(e^{lambda t(s)} y, t(s))` with
/// `A = B - lambda I`. The drift must not be measure-dependent.
pub fn rescale_drift_diffusion(
    map: &RescaleMap,
    q: &DiffusionSpec,
    b: &DriftSpec,
) -> Result<(DiffusionSpec, DriftSpec)> {
    if b.is_measure_dependent() {
        return Err(Error::InvalidArgument(
            "freeze the measure argument before rescaling a drift".into(),
        ));
    }
    let d = q.dim();
    let m = *map;
    let s_cap = m.s_infinity() * (1.0 - 1e-12);
    let q_inner = q.clone();
    let q_tilde = DiffusionSpec::varying(
        d,
        move |y, s, out| {
            let t = m.t_of_s(s.min(s_cap));
            let blow = (m.lambda() * t).exp();
            let x: Vec<f64> = y.iter().map(|v| v * blow).collect();
            q_inner.matrix_at(&x, t, out);
        },
        q.ellipticity(),
        q.deriv_bound(),
    )?;
    let shifted = b.shift_to_dissipative()?;
    let b_tilde = DriftSpec::frozen(
        d,
        "rescaled",
        move |y, s, out| {
            let t = m.t_of_s(s.min(s_cap));
            let blow = (m.lambda() * t).exp();
            let x: Vec<f64> = y.iter().map(|v| v * blow).collect();
            if shifted.eval_into(None, &x, t, out).is_err() {
                out.fill(f64::NAN);
            } else {
                for o in out.iter_mut() {
                    *o *= blow;
                }
            }
        },
        0.0,
    );
    Ok((q_tilde, b_tilde))
}

/// Cumulative drift-mismatch integral along the slices of `flow_sigma`:
/// trapezoid in time of the particle average of
/// `nu^{-1} |B_mu(x, t) - B_sigma(x, t)|^2`.
///
/// Measure-dependent drifts receive the current slice as their measure
/// argument; freeze them to a different flow first when that is intended.
pub fn mismatch_integral(
    flow_sigma: &MeasureFlow,
    b_mu: &DriftSpec,
    b_sigma: &DriftSpec,
    nu: f64,
) -> Result<Vec<f64>> {
    if nu <= 0.0 {
        return Err(Error::InvalidArgument("ellipticity must be positive".into()));
    }
    let d = flow_sigma.dim();
    let mut means = Vec::with_capacity(flow_sigma.len());
    for (k, slice) in flow_sigma.slices().iter().enumerate() {
        let t = flow_sigma.times()[k];
        let measure = if b_mu.is_measure_dependent() || b_sigma.is_measure_dependent() {
            Some(slice)
        } else {
            None
        };
        let mut acc = 0.0;
        let mut bm = vec![0.0; d];
        let mut bs = vec![0.0; d];
        for (x, w) in slice.iter() {
            b_mu.eval_into(measure, x, t, &mut bm)?;
            b_sigma.eval_into(measure, x, t, &mut bs)?;
            let mut gap2 = 0.0;
            for (a, b) in bm.iter().zip(&bs) {
                gap2 += (a - b) * (a - b);
            }
            if !gap2.is_finite() {
                return Err(Error::Numerical(format!(
                    "drift mismatch not finite at {x:?}, t = {t}"
                )));
            }
            acc += w * gap2;
        }
        means.push(acc / nu);
    }
    Ok(cumulative_trapezoid(flow_sigma.times(), &means))
}

/// Per-time-node record of the two sides of the stability bound.
#[derive(Clone, Debug)]
pub struct BoundReport {
    pub times: Vec<f64>,
    /// Measured `C_{h_{lambda t}}(mu_t, sigma_t)`.
    pub lhs: Vec<f64>,
    /// Cumulative drift-mismatch integral `I(t)`.
    pub mismatch_integral: Vec<f64>,
    /// `C_h(mu_0, sigma_0) + |h|_inf sqrt(I) sqrt(1 + I)`.
    pub rhs: Vec<f64>,
    /// `rhs - lhs` per node.
    pub margin: Vec<f64>,
    /// Standard error of the margin across seeds (zero for a single run).
    pub mc_stderr: Vec<f64>,
    /// Number of independent runs aggregated into this report.
    pub seeds: usize,
}

/// Slack added to the statistical tolerance when judging margins.
pub const MARGIN_SLACK: f64 = 1e-6;

impl BoundReport {
    /// Indices where the margin is below `-(3 stderr + slack)`.
    pub fn flagged_nodes(&self) -> Vec<usize> {
        self.margin
            .iter()
            .zip(&self.mc_stderr)
            .enumerate()
            .filter(|(_, (m, s))| **m < -(3.0 * **s + MARGIN_SLACK))
            .map(|(k, _)| k)
            .collect()
    }

    pub fn passes(&self) -> bool {
        self.flagged_nodes().is_empty()
    }

    pub fn min_margin(&self) -> f64 {
        self.margin.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Combine per-seed reports: mean curves plus the standard error of the
    /// margin across seeds.
    pub fn aggregate(reports: &[BoundReport]) -> Result<BoundReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::InvalidArgument("no reports to aggregate".into()))?;
        let nt = first.times.len();
        if reports.iter().any(|r| r.times != first.times) {
            return Err(Error::InvalidArgument("reports disagree on the time grid".into()));
        }
        let s = reports.len() as f64;
        let mean = |get: &dyn Fn(&BoundReport) -> &Vec<f64>| -> Vec<f64> {
            (0..nt)
                .map(|k| reports.iter().map(|r| get(r)[k]).sum::<f64>() / s)
                .collect()
        };
        let lhs = mean(&|r| &r.lhs);
        let rhs = mean(&|r| &r.rhs);
        let mi = mean(&|r| &r.mismatch_integral);
        let margin = mean(&|r| &r.margin);
        let mut stderr = vec![0.0; nt];
        if reports.len() > 1 {
            for (k, se) in stderr.iter_mut().enumerate() {
                let mu = margin[k];
                let var =
                    reports.iter().map(|r| (r.margin[k] - mu).powi(2)).sum::<f64>() / (s - 1.0);
                *se = (var / s).sqrt();
            }
        }
        Ok(BoundReport {
            times: first.times.clone(),
            lhs,
            mismatch_integral: mi,
            rhs,
            margin,
            mc_stderr: stderr,
            seeds: reports.iter().map(|r| r.seeds).sum(),
        })
    }
}

/// Options for [`verify_bound`].
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    /// Slices larger than this are subsampled before the transport solve.
    pub ot_support: usize,
    /// Base seed for the subsampling streams.
    pub subsample_seed: u64,
    /// Subsample both flows with the same indices (valid for flows driven
    /// by common noise from a common initial sampling).
    pub paired: bool,
    /// Sampled certificate run on `b_mu` before verification.
    pub dissipativity: DissipativityCheck,
    pub check_dissipativity: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            ot_support: 300,
            subsample_seed: 0x5EED,
            paired: true,
            dissipativity: DissipativityCheck::default(),
            check_dissipativity: true,
        }
    }
}

pub(crate) fn subsample_pair(
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
    limit: usize,
    seed: u64,
    paired: bool,
) -> Result<(ParticleCloud, ParticleCloud)> {
    let m = mu.len().max(sigma.len());
    if m <= limit {
        return Ok((mu.clone(), sigma.clone()));
    }
    let n = limit;
    if paired {
        if mu.len() != sigma.len() {
            return Err(Error::InvalidArgument(
                "paired subsampling needs equal particle counts".into(),
            ));
        }
        let idx = mu.sample_indices(n, seed)?;
        Ok((mu.take(&idx)?, sigma.take(&idx)?))
    } else {
        let idx_mu = mu.sample_indices(n, seed)?;
        let idx_sigma = sigma.sample_indices(n, seed ^ 0x9E3779B97F4A7C15)?;
        Ok((mu.take(&idx_mu)?, sigma.take(&idx_sigma)?))
    }
}

pub(crate) fn slice_seed(base: u64, k: usize) -> u64 {
    base.wrapping_mul(0x100000001B3).wrapping_add(k as u64)
}

/// Verify the stability bound on a pair of flows over a shared time grid.
///
/// The left side is the measured transport cost with the rescaled cost
/// `h_{lambda t}` per slice; the right side adds the initial cost and the
/// mismatch term. `b_mu` must pass the sampled dissipativity certificate at
/// `lambda`.
#[allow(clippy::too_many_arguments)]
pub fn verify_bound(
    h: &CostFunction,
    flow_mu: &MeasureFlow,
    flow_sigma: &MeasureFlow,
    b_mu: &DriftSpec,
    b_sigma: &DriftSpec,
    q: &DiffusionSpec,
    lambda: f64,
    opts: &VerifyOptions,
) -> Result<BoundReport> {
    if flow_mu.times() != flow_sigma.times() {
        return Err(Error::InvalidArgument("flows disagree on the time grid".into()));
    }
    if opts.check_dissipativity {
        let measure = if b_mu.is_measure_dependent() { Some(flow_mu.slice(0)) } else { None };
        let report = check_dissipativity(b_mu, measure, lambda, &opts.dissipativity)?;
        if !report.passes() {
            return Err(Error::Precondition(format!(
                "first drift fails the sampled dissipativity certificate at lambda = {lambda}: \
                 violation {:.3e} at x={:?}, y={:?}, t={}",
                report.max_violation, report.witness.0, report.witness.1, report.witness.2
            )));
        }
    }
    let mismatch = mismatch_integral(flow_sigma, b_mu, b_sigma, q.ellipticity())?;
    let times = flow_mu.times().to_vec();
    // One index draw shared by all nodes: the subsampled slices then form
    // a single coherent sub-simulation and the per-node margins correlate,
    // which sharpens the seed-averaged test.
    let lhs: Result<Vec<f64>> = (0..times.len())
        .into_par_iter()
        .map(|k| {
            let (a, b) = subsample_pair(
                flow_mu.slice(k),
                flow_sigma.slice(k),
                opts.ot_support,
                slice_seed(opts.subsample_seed, 0),
                opts.paired,
            )?;
            let hk = h.rescaled(lambda * times[k])?;
            let (cost, _, _) = kantorovich(&hk, &a, &b)?;
            Ok(cost)
        })
        .collect();
    let lhs = lhs?;
    let c0 = lhs[0];
    let sup = h.sup_bound();
    let rhs: Vec<f64> = mismatch
        .iter()
        .map(|i| c0 + sup * i.sqrt() * (1.0 + i).sqrt())
        .collect();
    let margin: Vec<f64> = rhs.iter().zip(&lhs).map(|(r, l)| r - l).collect();
    Ok(BoundReport {
        times,
        lhs,
        mismatch_integral: mismatch,
        rhs,
        margin,
        mc_stderr: vec![0.0; flow_mu.len()],
        seeds: 1,
    })
}

/// [`verify_bound`] on synchronously coupled flows.
pub fn verify_bound_paired(
    h: &CostFunction,
    flows: &PairedFlows,
    b_mu: &DriftSpec,
    b_sigma: &DriftSpec,
    q: &DiffusionSpec,
    lambda: f64,
    opts: &VerifyOptions,
) -> Result<BoundReport> {
    let mut opts = opts.clone();
    opts.paired = true;
    verify_bound(h, &flows.mu, &flows.sigma, b_mu, b_sigma, q, lambda, &opts)
}

/// A nonnegative increasing gauge `G` with its Osgood transform
/// `G*(r) = int_r^1 du / G^2(sqrt(u))` (signed continuation for `r > 1`).
#[derive(Clone)]
pub struct StabilityGauge {
    g: std::sync::Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    name: String,
}

impl std::fmt::Debug for StabilityGauge {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "StabilityGauge({})", self.name)
    }
}

/// Quadrature tolerance for the Osgood transform.
const GSTAR_QUAD_TOL: f64 = 1e-10;
/// Relative bisection tolerance for its inverse.
const GSTAR_INV_TOL: f64 = 1e-12;
/// Largest argument the inverse will search; beyond it the envelope is
/// reported as expired.
const GSTAR_MAX_ARG: f64 = 1e12;

impl StabilityGauge {
    pub fn new(name: impl Into<String>, g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        StabilityGauge { g: std::sync::Arc::new(g), name: name.into() }
    }

    /// The identity gauge `G(u) = u`.
    pub fn identity() -> Self {
        StabilityGauge::new("identity", |u| u)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn g(&self, u: f64) -> f64 {
        (self.g)(u)
    }

    /// `G*(r)`, by adaptive quadrature. Decreasing in `r`, zero at 1.
    pub fn g_star(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) || !r.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "Osgood transform needs r > 0, got {r}"
            )));
        }
        let g = self.g.clone();
        let integrand = move |u: f64| {
            let v = g(u.sqrt());
            1.0 / (v * v)
        };
        if r >= 1.0 {
            return adaptive_simpson(integrand, r, 1.0, GSTAR_QUAD_TOL);
        }
        // Integrate toward the possible singularity at 0 in dyadic pieces
        // so the adaptive rule never straddles it.
        let mut total = 0.0;
        let mut hi = 1.0;
        while r < 0.5 * hi {
            let lo = 0.5 * hi;
            total += adaptive_simpson(&integrand, lo, hi, GSTAR_QUAD_TOL)?;
            hi = lo;
        }
        total += adaptive_simpson(&integrand, r, hi, GSTAR_QUAD_TOL)?;
        Ok(total)
    }

    /// Inverse of `G*` by monotone bisection with bracket expansion.
    /// Returns `None` when `y` leaves the computable range.
    pub fn g_star_inverse(&self, y: f64) -> Result<Option<f64>> {
        if !y.is_finite() {
            return Err(Error::InvalidArgument("inverse argument must be finite".into()));
        }
        let (mut lo, mut hi);
        if y >= 0.0 {
            // r in (0, 1]
            hi = 1.0;
            lo = 0.5;
            let mut iter = 0;
            while self.g_star(lo)? < y {
                lo *= 0.5;
                iter += 1;
                if iter > 1020 || lo < 1e-300 {
                    return Ok(None); // transform saturates below y
                }
            }
        } else {
            lo = 1.0;
            hi = 2.0;
            while self.g_star(hi)? > y {
                hi *= 2.0;
                if hi > GSTAR_MAX_ARG {
                    return Ok(None);
                }
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if (hi - lo) <= GSTAR_INV_TOL * mid.max(1e-6) {
                return Ok(Some(mid));
            }
            if self.g_star(mid)? >= y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    }
}

/// Stability envelope evaluated on a time grid.
#[derive(Clone, Debug)]
pub struct Envelope {
    pub times: Vec<f64>,
    /// Envelope values; `None` once the bound has expired.
    pub values: Vec<Option<f64>>,
    /// First time at which the envelope expired, if any.
    pub expires_at: Option<f64>,
    /// Set when `2 c0^2 > 1`, where the Osgood transform is evaluated with
    /// its signed continuation.
    pub initial_sq_above_one: bool,
}

/// Envelope `t -> sqrt((G*)^{-1}(G*(2 c0^2) - 2 K^2 t))`.
///
/// For the identity gauge this is `sqrt(2) c0 e^{K^2 t}`. With `c0 = 0`
/// the envelope is identically zero (uniqueness branch). When the inverse
/// leaves its computable range the envelope is marked expired rather than
/// raising an error.
pub fn gronwall_envelope(
    gauge: &StabilityGauge,
    c0: f64,
    k_rate: f64,
    t_grid: &[f64],
) -> Result<Envelope> {
    if c0 < 0.0 || !c0.is_finite() {
        return Err(Error::InvalidArgument("initial cost must be nonnegative".into()));
    }
    if k_rate < 0.0 || !k_rate.is_finite() {
        return Err(Error::InvalidArgument("rate constant must be nonnegative".into()));
    }
    let times = t_grid.to_vec();
    if c0 == 0.0 {
        return Ok(Envelope {
            values: vec![Some(0.0); times.len()],
            times,
            expires_at: None,
            initial_sq_above_one: false,
        });
    }
    let r0 = 2.0 * c0 * c0;
    let y0 = gauge.g_star(r0)?;
    let mut values = Vec::with_capacity(times.len());
    let mut expires_at = None;
    for &t in &times {
        if expires_at.is_some() {
            values.push(None);
            continue;
        }
        let y = y0 - 2.0 * k_rate * k_rate * t;
        match gauge.g_star_inverse(y)? {
            Some(r) => values.push(Some(r.sqrt())),
            None => {
                expires_at = Some(t);
                values.push(None);
            }
        }
    }
    Ok(Envelope { times, values, expires_at, initial_sq_above_one: r0 > 1.0 })
}

/// Rate constant of the stability envelope:
/// `|h|_inf sqrt(a / nu) sqrt(1 + T G(|h|_inf)^2 / nu)` where `a` bounds
/// the Lyapunov integral along the first flow.
pub fn envelope_rate(
    h: &CostFunction,
    nu: f64,
    a: f64,
    horizon: f64,
    gauge: &StabilityGauge,
) -> Result<f64> {
    if nu <= 0.0 || a <= 0.0 {
        return Err(Error::InvalidArgument(
            "ellipticity and Lyapunov bound must be positive".into(),
        ));
    }
    let sup = h.sup_bound();
    let g_sup = gauge.g(sup);
    Ok(sup * (a / nu).sqrt() * (1.0 + horizon * g_sup * g_sup / nu).sqrt())
}
