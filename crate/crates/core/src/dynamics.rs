//! Drift and diffusion coefficients, dissipativity certification, and the
//! resolvent-based approximation pipeline for dissipative drifts.
//!
//! A drift `B` is `lambda`-dissipative when
//! `<B(x,t) - B(y,t), x - y> <= lambda |x - y|^2` for all `x, y, t`.
//! Dissipativity is certified by sampling, not proof; sample counts and
//! seeds are caller-visible so failures are reproducible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{dist, dot, norm, solve_dense, sqrt_two_q, sym_eigen};
use crate::measures::{MeasureFlow, ParticleCloud};
use crate::rng::{normals_at, philox4x64, stream_id, domain};

/// Slack allowed when certifying dissipativity by sampling.
pub const DISSIPATIVITY_TOL: f64 = 1e-8;

type MatrixFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
type GateFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type KernelFn = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Diffusion coefficient `Q(x, t)` with certified strict ellipticity.
#[derive(Clone)]
pub struct DiffusionSpec {
    kind: DiffusionKind,
    dim: usize,
    ellipticity: f64,
    deriv_bound: f64,
}

#[derive(Clone)]
enum DiffusionKind {
    /// Constant symmetric matrix; the noise factor sqrt(2Q) is precomputed.
    Constant { q: Vec<f64>, sqrt2q: Vec<f64> },
    /// Position/time dependent coefficient given by a closure.
    Varying { q: MatrixFn },
}

impl std::fmt::Debug for DiffusionSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DiffusionSpec(dim={}, nu={})", self.dim, self.ellipticity)
    }
}

impl DiffusionSpec {
    /// Constant isotropic diffusion `Q = q I`.
    pub fn isotropic(dim: usize, q: f64) -> Result<Self> {
        if q <= 0.0 || !q.is_finite() {
            return Err(Error::ContractViolation(format!(
                "isotropic diffusion must be positive, got {q}"
            )));
        }
        let mut m = vec![0.0; dim * dim];
        for i in 0..dim {
            m[i * dim + i] = q;
        }
        DiffusionSpec::constant(dim, m, q)
    }

    /// Constant symmetric matrix diffusion with declared ellipticity `nu`.
    pub fn constant(dim: usize, q: Vec<f64>, nu: f64) -> Result<Self> {
        if q.len() != dim * dim {
            return Err(Error::InvalidArgument("diffusion matrix has wrong shape".into()));
        }
        for r in 0..dim {
            for c in 0..dim {
                if (q[r * dim + c] - q[c * dim + r]).abs() > 1e-10 {
                    return Err(Error::ContractViolation(format!(
                        "diffusion matrix not symmetric at ({r},{c})"
                    )));
                }
            }
        }
        let (eig, _) = sym_eigen(&q, dim);
        let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_eig < nu - 1e-10 {
            return Err(Error::ContractViolation(format!(
                "matrix violates declared ellipticity: min eigenvalue {min_eig} < nu = {nu}"
            )));
        }
        let sqrt2q = sqrt_two_q(&q, dim)?;
        Ok(DiffusionSpec {
            kind: DiffusionKind::Constant { q, sqrt2q },
            dim,
            ellipticity: nu,
            deriv_bound: 0.0,
        })
    }

    /// Varying coefficient from a closure writing the row-major matrix.
    /// Symmetry and ellipticity are certified on sampled `(x, t, y)`.
    pub fn varying(
        dim: usize,
        q: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        nu: f64,
        deriv_bound: f64,
    ) -> Result<Self> {
        let spec = DiffusionSpec {
            kind: DiffusionKind::Varying { q: Arc::new(q) },
            dim,
            ellipticity: nu,
            deriv_bound,
        };
        spec.certify_sampled(200, 0xD1FF)?;
        Ok(spec)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Ellipticity lower bound `nu`.
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn deriv_bound(&self) -> f64 {
        self.deriv_bound
    }

    /// Evaluate `Q(x, t)` into a row-major buffer.
    pub fn matrix_at(&self, x: &[f64], t: f64, out: &mut [f64]) {
        match &self.kind {
            DiffusionKind::Constant { q, .. } => out.copy_from_slice(q),
            DiffusionKind::Varying { q } => q(x, t, out),
        }
    }

    /// Evaluate the SDE noise factor `sqrt(2 Q(x, t))`.
    pub fn noise_factor_at(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match &self.kind {
            DiffusionKind::Constant { sqrt2q, .. } => {
                out.copy_from_slice(sqrt2q);
                Ok(())
            }
            DiffusionKind::Varying { q } => {
                let d = self.dim;
                let mut m = vec![0.0; d * d];
                q(x, t, &mut m);
                let s = sqrt_two_q(&m, d)?;
                out.copy_from_slice(&s);
                Ok(())
            }
        }
    }

    /// Sampled symmetry and ellipticity certificate.
    pub fn certify_sampled(&self, samples: usize, seed: u64) -> Result<()> {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for s in 0..samples {
            let z = normals_at(seed, stream_id(domain::SAMPLING_CHECK, s as u64), 0);
            let x: Vec<f64> = (0..d).map(|k| 3.0 * z[k.min(3)]).collect();
            let t = 0.5 + 0.5 * z[3].tanh();
            self.matrix_at(&x, t, &mut m);
            for r in 0..d {
                for c in 0..d {
                    if (m[r * d + c] - m[c * d + r]).abs() > 1e-10 {
                        return Err(Error::ContractViolation(format!(
                            "diffusion not symmetric at sampled point {x:?}, t={t}"
                        )));
                    }
                }
            }
            let y = normals_at(seed ^ 0xABCD, stream_id(domain::SAMPLING_CHECK, s as u64), 1);
            let yv: Vec<f64> = (0..d).map(|k| y[k.min(3)]).collect();
            let mut qy = vec![0.0; d];
            for r in 0..d {
                qy[r] = (0..d).map(|c| m[r * d + c] * yv[c]).sum();
            }
            let lhs = dot(&qy, &yv);
            let rhs = self.ellipticity * dot(&yv, &yv);
            if lhs < rhs - 1e-10 {
                return Err(Error::ContractViolation(format!(
                    "ellipticity violated at sampled point {x:?}: {lhs} < nu |y|^2 = {rhs}"
                )));
            }
        }
        Ok(())
    }
}

/// Drift coefficient, possibly measure-dependent, with a declared
/// dissipativity constant `lambda`.
#[derive(Clone)]
pub struct DriftSpec {
    kind: DriftKind,
    dim: usize,
    lambda: f64,
}

#[derive(Clone)]
pub enum DriftKind {
    /// `B(x) = A x + b`.
    Linear { matrix: Vec<f64>, offset: Vec<f64> },
    /// `B(x) = -c |x|^{p-1} x` (radial, dissipative for c >= 0, p >= 1).
    RadialPower { coeff: f64, power: f64 },
    /// Arbitrary `B(x, t)` closure.
    Frozen { f: VectorFn, label: String },
    /// `B(mu, x) = H(x) * sum_j v_j k(x, y_j)`.
    Interaction { gate: GateFn, kernel: KernelFn, label: String },
    /// `B(mu, x) = -sum_j v_j |x - y_j|^{alpha - 1} (x - y_j)`.
    ConvolutionPower { alpha: f64 },
    /// Sum of drifts.
    Composite { parts: Vec<DriftSpec> },
    /// A measure-dependent drift with its measure argument frozen to the
    /// nearest slice of a flow.
    FrozenFlow { base: Box<DriftSpec>, flow: Arc<MeasureFlow> },
}

impl std::fmt::Debug for DriftSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DriftSpec(dim={}, lambda={})", self.dim, self.lambda)
    }
}

impl DriftSpec {
    pub fn linear(matrix: Vec<f64>, offset: Vec<f64>, lambda: f64) -> Result<Self> {
        let d = offset.len();
        if matrix.len() != d * d {
            return Err(Error::InvalidArgument("linear drift matrix has wrong shape".into()));
        }
        Ok(DriftSpec { kind: DriftKind::Linear { matrix, offset }, dim: d, lambda })
    }

    pub fn radial_power(dim: usize, coeff: f64, power: f64, lambda: f64) -> Result<Self> {
        if coeff < 0.0 || power < 1.0 {
            return Err(Error::InvalidArgument(
                "radial power drift requires coeff >= 0 and power >= 1".into(),
            ));
        }
        Ok(DriftSpec { kind: DriftKind::RadialPower { coeff, power }, dim, lambda })
    }

    pub fn frozen(
        dim: usize,
        label: impl Into<String>,
        f: impl Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static,
        lambda: f64,
    ) -> Self {
        DriftSpec {
            kind: DriftKind::Frozen { f: Arc::new(f), label: label.into() },
            dim,
            lambda,
        }
    }

    pub fn interaction(
        dim: usize,
        label: impl Into<String>,
        gate: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        kernel: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        lambda: f64,
    ) -> Self {
        DriftSpec {
            kind: DriftKind::Interaction {
                gate: Arc::new(gate),
                kernel: Arc::new(kernel),
                label: label.into(),
            },
            dim,
            lambda,
        }
    }

    pub fn convolution_power(dim: usize, alpha: f64) -> Result<Self> {
        if !(0.0 < alpha && alpha < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "convolution power drift requires alpha in (0, 1), got {alpha}"
            )));
        }
        Ok(DriftSpec { kind: DriftKind::ConvolutionPower { alpha }, dim, lambda: 0.0 })
    }

    pub fn composite(parts: Vec<DriftSpec>, lambda: f64) -> Result<Self> {
        let dim = parts
            .first()
            .map(|p| p.dim)
            .ok_or_else(|| Error::InvalidArgument("composite drift needs at least one part".into()))?;
        if parts.iter().any(|p| p.dim != dim) {
            return Err(Error::InvalidArgument("composite drift parts disagree on dimension".into()));
        }
        Ok(DriftSpec { kind: DriftKind::Composite { parts }, dim, lambda })
    }

    /// Freeze the measure argument to the time-nearest slice of `flow`.
    pub fn frozen_to_flow(&self, flow: Arc<MeasureFlow>) -> Result<Self> {
        if flow.dim() != self.dim {
            return Err(Error::InvalidArgument("flow dimension does not match drift".into()));
        }
        Ok(DriftSpec {
            kind: DriftKind::FrozenFlow { base: Box::new(self.clone()), flow },
            dim: self.dim,
            lambda: self.lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Declared dissipativity constant.
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kind(&self) -> &DriftKind {
        &self.kind
    }

    /// True when evaluation requires a measure argument.
    pub fn is_measure_dependent(&self) -> bool {
        match &self.kind {
            DriftKind::Interaction { .. } | DriftKind::ConvolutionPower { .. } => true,
            DriftKind::Composite { parts } => parts.iter().any(|p| p.is_measure_dependent()),
            _ => false,
        }
    }

    /// Evaluate the drift into `out`.
    pub fn eval_into(
        &self,
        measure: Option<&ParticleCloud>,
        x: &[f64],
        t: f64,
        out: &mut [f64],
    ) -> Result<()> {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        match &self.kind {
            DriftKind::Linear { matrix, offset } => {
                let d = self.dim;
                for r in 0..d {
                    let mut acc = offset[r];
                    for c in 0..d {
                        acc += matrix[r * d + c] * x[c];
                    }
                    out[r] = acc;
                }
                Ok(())
            }
            DriftKind::RadialPower { coeff, power } => {
                let r = norm(x);
                let factor = if r == 0.0 { 0.0 } else { -coeff * r.powf(power - 1.0) };
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = factor * xi;
                }
                Ok(())
            }
            DriftKind::Frozen { f, .. } => {
                f(x, t, out);
                Ok(())
            }
            DriftKind::Interaction { gate, kernel, .. } => {
                let cloud = measure.ok_or_else(|| {
                    Error::InvalidArgument("interaction drift needs a measure argument".into())
                })?;
                let g = gate(x);
                out.fill(0.0);
                let d = self.dim;
                let mut buf = vec![0.0; d];
                for (y, w) in cloud.iter() {
                    kernel(x, y, &mut buf);
                    for (o, b) in out.iter_mut().zip(&buf) {
                        *o += w * b;
                    }
                }
                for o in out.iter_mut() {
                    *o *= g;
                }
                Ok(())
            }
            DriftKind::ConvolutionPower { alpha } => {
                let cloud = measure.ok_or_else(|| {
                    Error::InvalidArgument("convolution drift needs a measure argument".into())
                })?;
                out.fill(0.0);
                for (y, w) in cloud.iter() {
                    let r = dist(x, y);
                    if r > 1e-300 {
                        let factor = w * r.powf(alpha - 1.0);
                        for (k, o) in out.iter_mut().enumerate() {
                            *o -= factor * (x[k] - y[k]);
                        }
                    }
                }
                Ok(())
            }
            DriftKind::Composite { parts } => {
                out.fill(0.0);
                let mut buf = vec![0.0; self.dim];
                for p in parts {
                    p.eval_into(measure, x, t, &mut buf)?;
                    for (o, b) in out.iter_mut().zip(&buf) {
                        *o += b;
                    }
                }
                Ok(())
            }
            DriftKind::FrozenFlow { base, flow } => {
                let slice = flow.slice(flow.nearest_slice(t));
                base.eval_into(Some(slice), x, t, out)
            }
        }
    }

    /// Convenience allocation-returning evaluation.
    pub fn eval(&self, measure: Option<&ParticleCloud>, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(measure, x, t, &mut out)?;
        for v in &out {
            if !v.is_finite() {
                return Err(Error::Evaluation(format!("drift not finite at {x:?}, t={t}")));
            }
        }
        Ok(out)
    }

    /// The shifted drift `x -> B(x, t) - lambda x`, declared 0-dissipative.
    pub fn shift_to_dissipative(&self) -> Result<Self> {
        let d = self.dim;
        let lam = self.lambda;
        if lam == 0.0 {
            return Ok(self.clone());
        }
        let mut shift_matrix = vec![0.0; d * d];
        for i in 0..d {
            shift_matrix[i * d + i] = -lam;
        }
        let shift = DriftSpec::linear(shift_matrix, vec![0.0; d], 0.0)?;
        DriftSpec::composite(vec![self.clone(), shift], 0.0)
    }
}

/// Options for the sampled dissipativity certificate.
#[derive(Clone, Debug)]
pub struct DissipativityCheck {
    pub samples: usize,
    pub seed: u64,
    /// Points are drawn from `radius * N(0, I)`.
    pub radius: f64,
    /// Times are drawn uniformly on `[0, horizon]`.
    pub horizon: f64,
}

impl Default for DissipativityCheck {
    fn default() -> Self {
        DissipativityCheck { samples: 10_000, seed: 0x0D15, radius: 3.0, horizon: 1.0 }
    }
}

/// Outcome of a sampled dissipativity check.
#[derive(Clone, Debug)]
pub struct DissipativityReport {
    /// Max over samples of `<B(x,t) - B(y,t), x - y> - lambda |x - y|^2`.
    pub max_violation: f64,
    /// Sample attaining the maximum.
    pub witness: (Vec<f64>, Vec<f64>, f64),
    pub samples: usize,
}

impl DissipativityReport {
    pub fn passes(&self) -> bool {
        self.max_violation <= DISSIPATIVITY_TOL
    }
}

/// Certify `lambda`-dissipativity of a drift by sampling point pairs.
pub fn check_dissipativity(
    b: &DriftSpec,
    measure: Option<&ParticleCloud>,
    lambda: f64,
    opts: &DissipativityCheck,
) -> Result<DissipativityReport> {
    if opts.samples == 0 {
        return Err(Error::InvalidArgument("dissipativity check needs at least one sample".into()));
    }
    let d = b.dim();
    let mut worst = f64::NEG_INFINITY;
    let mut witness = (vec![0.0; d], vec![0.0; d], 0.0);
    let mut bx = vec![0.0; d];
    let mut by = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut y = vec![0.0; d];
    for s in 0..opts.samples {
        let zx = normals_at(opts.seed, stream_id(domain::SAMPLING_CHECK, s as u64), 0);
        let zy = normals_at(opts.seed, stream_id(domain::SAMPLING_CHECK, s as u64), 1);
        for k in 0..d {
            x[k] = opts.radius * zx[k.min(3)];
            y[k] = opts.radius * zy[k.min(3)];
        }
        let u = philox4x64([s as u64, 2, 0, 0], [opts.seed, 0])[0];
        let t = opts.horizon * (u >> 11) as f64 / (1u64 << 53) as f64;
        b.eval_into(measure, &x, t, &mut bx)?;
        b.eval_into(measure, &y, t, &mut by)?;
        let mut inner = 0.0;
        let mut gap2 = 0.0;
        for k in 0..d {
            let dx = x[k] - y[k];
            inner += (bx[k] - by[k]) * dx;
            gap2 += dx * dx;
        }
        let violation = inner - lambda * gap2;
        if violation > worst {
            worst = violation;
            witness = (x.clone(), y.clone(), t);
        }
    }
    Ok(DissipativityReport { max_violation: worst, witness, samples: opts.samples })
}

/// Tolerance of the per-point resolvent solve.
const RESOLVENT_TOL: f64 = 1e-10;

/// Solve `J - (1/k) B(J, t) = x` for a sampled-dissipative drift.
///
/// One-dimensional drifts use safeguarded Newton-bisection on the strictly
/// increasing residual; higher dimensions use damped Newton with a
/// finite-difference Jacobian.
pub fn resolvent(
    b: &DriftSpec,
    measure: Option<&ParticleCloud>,
    x: &[f64],
    t: f64,
    k: f64,
) -> Result<Vec<f64>> {
    let d = b.dim();
    if k <= 0.0 {
        return Err(Error::InvalidArgument("resolvent index must be positive".into()));
    }
    let inv_k = 1.0 / k;
    let mut bx = vec![0.0; d];
    b.eval_into(measure, x, t, &mut bx)?;
    if d == 1 {
        let g = |j: f64, buf: &mut [f64]| -> Result<f64> {
            b.eval_into(measure, &[j], t, buf)?;
            Ok(j - inv_k * buf[0] - x[0])
        };
        // |J - x| <= |B(x)|/k for a dissipative drift, pad the bracket.
        let pad = inv_k * bx[0].abs() + 1e-6;
        let (mut lo, mut hi) = (x[0] - pad, x[0] + pad);
        let mut buf = [0.0];
        let mut glo = g(lo, &mut buf)?;
        let mut ghi = g(hi, &mut buf)?;
        let mut expand = 0;
        while glo > 0.0 || ghi < 0.0 {
            expand += 1;
            if expand > 64 {
                return Err(Error::Numerical(format!(
                    "resolvent bracket failed at x={}, t={t}, k={k}",
                    x[0]
                )));
            }
            let w = hi - lo;
            lo -= w;
            hi += w;
            glo = g(lo, &mut buf)?;
            ghi = g(hi, &mut buf)?;
        }
        let mut j = x[0] + inv_k * bx[0]; // first fixed-point guess
        j = j.clamp(lo, hi);
        for _ in 0..200 {
            let gj = g(j, &mut buf)?;
            if gj.abs() <= RESOLVENT_TOL {
                return Ok(vec![j]);
            }
            if gj > 0.0 {
                hi = j;
            } else {
                lo = j;
            }
            // Newton step with finite-difference slope, bisection fallback.
            let h = 1e-7 * (1.0 + j.abs());
            let slope = (g(j + h, &mut buf)? - gj) / h;
            let newton = if slope > 0.0 { j - gj / slope } else { f64::NAN };
            j = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
        }
        return Err(Error::Numerical(format!(
            "resolvent solve did not converge at x={}, t={t}, k={k}",
            x[0]
        )));
    }
    // Damped Newton on F(J) = J - B(J, t)/k - x.
    let mut j = x.to_vec();
    let mut drift_buf = vec![0.0; d];
    let mut res = vec![0.0; d];
    let residual = |j: &[f64], bj: &mut [f64], res: &mut [f64]| -> Result<f64> {
        b.eval_into(measure, j, t, bj)?;
        for i in 0..d {
            res[i] = j[i] - inv_k * bj[i] - x[i];
        }
        Ok(norm(res))
    };
    let mut rnorm = residual(&j, &mut drift_buf, &mut res)?;
    for _ in 0..100 {
        if rnorm <= RESOLVENT_TOL {
            return Ok(j);
        }
        // Finite-difference Jacobian of F.
        let mut jac = vec![0.0; d * d];
        let mut jp = j.clone();
        let mut bp = vec![0.0; d];
        for c in 0..d {
            let h = 1e-6 * (1.0 + j[c].abs());
            jp[c] = j[c] + h;
            b.eval_into(measure, &jp, t, &mut bp)?;
            for r in 0..d {
                let fr_p = jp[r] - inv_k * bp[r] - x[r];
                jac[r * d + c] = (fr_p - res[r]) / h;
            }
            jp[c] = j[c];
        }
        let mut step = res.clone();
        solve_dense(&mut jac, &mut step, d)?;
        let mut damping = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = j.iter().zip(&step).map(|(a, s)| a - damping * s).collect();
            let mut trial_b = vec![0.0; d];
            let mut trial_res = vec![0.0; d];
            let trial_norm = residual(&trial, &mut trial_b, &mut trial_res)?;
            if trial_norm < rnorm {
                j = trial;
                res = trial_res;
                rnorm = trial_norm;
                accepted = true;
                break;
            }
            damping *= 0.5;
        }
        if !accepted {
            return Err(Error::Numerical(format!(
                "resolvent Newton stalled at x={x:?}, t={t}, k={k}, residual={rnorm:.3e}"
            )));
        }
    }
    if rnorm <= RESOLVENT_TOL * 10.0 {
        Ok(j)
    } else {
        Err(Error::Numerical(format!(
            "resolvent solve did not converge at x={x:?}, t={t}, k={k}, residual={rnorm:.3e}"
        )))
    }
}

/// Bounded Lipschitz dissipative approximation of a 0-dissipative drift.
///
/// Spatial stage: `A_k(x, t) = k (J_k(x, t) - x)` with `J_k` the resolvent,
/// truncated radially to norm `k + 1`. Temporal stage: convolution with a
/// smooth bump mollifier of width `epsilon` (constant extension at `t = 0`).
#[derive(Clone)]
pub struct ApproximatedDrift {
    base: DriftSpec,
    k: f64,
    epsilon: f64,
    bound: f64,
    /// Mollifier quadrature nodes (offsets in [0, 1]) and weights summing
    /// to exactly one, so time-independent drifts are fixed points.
    moll_nodes: Vec<f64>,
    moll_weights: Vec<f64>,
}

impl std::fmt::Debug for ApproximatedDrift {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ApproximatedDrift(k={}, epsilon={}, bound={})", self.k, self.epsilon, self.bound)
    }
}

fn bump(u: f64) -> f64 {
    if u <= 0.0 || u >= 1.0 {
        0.0
    } else {
        (-1.0 / (u * (1.0 - u))).exp()
    }
}

/// Build the approximant. The drift must pass the sampled dissipativity
/// certificate at `lambda = 0` (shift first if it does not).
pub fn approximate_drift(b: &DriftSpec, k: f64, epsilon: f64) -> Result<ApproximatedDrift> {
    if k < 1.0 || !k.is_finite() {
        return Err(Error::InvalidArgument(format!("approximation index must be >= 1, got {k}")));
    }
    if epsilon < 0.0 || !epsilon.is_finite() {
        return Err(Error::InvalidArgument("mollification width must be nonnegative".into()));
    }
    if b.is_measure_dependent() {
        return Err(Error::InvalidArgument(
            "approximate a measure-dependent drift after freezing its measure argument".into(),
        ));
    }
    let check = check_dissipativity(b, None, 0.0, &DissipativityCheck { samples: 2000, ..Default::default() })?;
    if !check.passes() {
        return Err(Error::Precondition(format!(
            "drift is not sampled-dissipative at lambda = 0 (violation {:.3e} at x={:?}, y={:?}, t={})",
            check.max_violation, check.witness.0, check.witness.1, check.witness.2
        )));
    }
    // Simpson nodes on [0, 1], weights normalized against the bump mass.
    let nodes_n = 33usize;
    let mut nodes = Vec::with_capacity(nodes_n);
    let mut weights = Vec::with_capacity(nodes_n);
    let h = 1.0 / (nodes_n - 1) as f64;
    for i in 0..nodes_n {
        let u = i as f64 * h;
        let simpson = if i == 0 || i == nodes_n - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        nodes.push(u);
        weights.push(simpson * bump(u));
    }
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
    Ok(ApproximatedDrift {
        base: b.clone(),
        k,
        epsilon,
        bound: k + 1.0,
        moll_nodes: nodes,
        moll_weights: weights,
    })
}

impl ApproximatedDrift {
    pub fn index(&self) -> f64 {
        self.k
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Norm bound `k + 1` enforced by radial truncation.
    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn base(&self) -> &DriftSpec {
        &self.base
    }

    /// Spatial-only approximant (before time mollification).
    pub fn eval_spatial_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let j = resolvent(&self.base, None, x, t, self.k)?;
        for (o, (ji, xi)) in out.iter_mut().zip(j.iter().zip(x)) {
            *o = self.k * (ji - xi);
        }
        let n = norm(out);
        if n > self.bound {
            let scale = self.bound / n;
            for o in out.iter_mut() {
                *o *= scale;
            }
        }
        Ok(())
    }

    /// Fully mollified approximant.
    pub fn eval_into(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        if self.epsilon == 0.0 {
            return self.eval_spatial_into(x, t, out);
        }
        out.fill(0.0);
        let mut buf = vec![0.0; x.len()];
        for (u, w) in self.moll_nodes.iter().zip(&self.moll_weights) {
            if *w == 0.0 {
                continue;
            }
            let s = (t - self.epsilon * u).max(0.0);
            self.eval_spatial_into(x, s, &mut buf)?;
            for (o, b) in out.iter_mut().zip(&buf) {
                *o += w * b;
            }
        }
        Ok(())
    }

    /// View the approximant as a frozen drift usable by the solvers.
    pub fn as_drift_spec(&self) -> DriftSpec {
        let inner = self.clone();
        DriftSpec::frozen(
            self.base.dim(),
            format!("approximant(k={})", self.k),
            move |x, t, out| {
                // Resolvent failures surface as non-finite states in the
                // solver, which reports them with a step index.
                if inner.eval_into(x, t, out).is_err() {
                    out.fill(f64::NAN);
                }
            },
            0.0,
        )
    }
}

/// A twice-differentiable scalar test function.
pub trait TestFunction: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;

    /// Gradient; the default uses central differences with step 1e-5.
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let mut xp = x.to_vec();
        for k in 0..x.len() {
            let h = 1e-5;
            xp[k] = x[k] + h;
            let fp = self.value(&xp);
            xp[k] = x[k] - h;
            let fm = self.value(&xp);
            xp[k] = x[k];
            out[k] = (fp - fm) / (2.0 * h);
        }
    }

    /// Hessian (row-major); the default uses central differences with a
    /// wider step than the gradient (second differences lose ~eps/h^2 to
    /// rounding, so h ~ eps^(1/4) keeps entries accurate to ~1e-8).
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let d = x.len();
        let h = 2e-4;
        let mut xp = x.to_vec();
        let f0 = self.value(x);
        for r in 0..d {
            for c in 0..d {
                if r == c {
                    xp[r] = x[r] + h;
                    let fp = self.value(&xp);
                    xp[r] = x[r] - h;
                    let fm = self.value(&xp);
                    xp[r] = x[r];
                    out[r * d + r] = (fp - 2.0 * f0 + fm) / (h * h);
                } else {
                    xp[r] = x[r] + h;
                    xp[c] = x[c] + h;
                    let fpp = self.value(&xp);
                    xp[c] = x[c] - h;
                    let fpm = self.value(&xp);
                    xp[r] = x[r] - h;
                    let fmm = self.value(&xp);
                    xp[c] = x[c] + h;
                    let fmp = self.value(&xp);
                    xp[r] = x[r];
                    xp[c] = x[c];
                    out[r * d + c] = (fpp - fpm - fmp + fmm) / (4.0 * h * h);
                }
            }
        }
    }
}

/// Test function built from explicit value/gradient/hessian closures.
pub struct AnalyticTestFunction {
    pub value: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    pub gradient: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
    pub hessian: Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>,
}

impl TestFunction for AnalyticTestFunction {
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        (self.gradient)(x, out)
    }
    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        (self.hessian)(x, out)
    }
}

/// Test function with derivatives by central differences only.
pub struct NumericTestFunction<F: Fn(&[f64]) -> f64 + Send + Sync>(pub F);

impl<F: Fn(&[f64]) -> f64 + Send + Sync> TestFunction for NumericTestFunction<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Gaussian bump `exp(-|x - c|^2 / (2 w^2))` with analytic derivatives.
pub fn gaussian_bump(center: Vec<f64>, width: f64) -> AnalyticTestFunction {
    let c1 = center.clone();
    let c2 = center.clone();
    let c3 = center;
    let w2 = width * width;
    AnalyticTestFunction {
        value: Arc::new(move |x| {
            let q: f64 = x.iter().zip(&c1).map(|(a, b)| (a - b) * (a - b)).sum();
            (-q / (2.0 * w2)).exp()
        }),
        gradient: Arc::new(move |x, out| {
            let q: f64 = x.iter().zip(&c2).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = (-q / (2.0 * w2)).exp();
            for (k, o) in out.iter_mut().enumerate() {
                *o = -v * (x[k] - c2[k]) / w2;
            }
        }),
        hessian: Arc::new(move |x, out| {
            let d = x.len();
            let q: f64 = x.iter().zip(&c3).map(|(a, b)| (a - b) * (a - b)).sum();
            let v = (-q / (2.0 * w2)).exp();
            for r in 0..d {
                for c in 0..d {
                    let gr = (x[r] - c3[r]) / w2;
                    let gc = (x[c] - c3[c]) / w2;
                    out[r * d + c] = v * (gr * gc - if r == c { 1.0 / w2 } else { 0.0 });
                }
            }
        }),
    }
}

/// Apply the generator: `trace(Q D^2 phi) + <B, grad phi>` at `(x, t)`.
pub fn apply_generator(
    q: &DiffusionSpec,
    b: &DriftSpec,
    measure: Option<&ParticleCloud>,
    phi: &dyn TestFunction,
    x: &[f64],
    t: f64,
) -> Result<f64> {
    let d = q.dim();
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    phi.gradient(x, &mut grad);
    phi.hessian(x, &mut hess);
    let mut qm = vec![0.0; d * d];
    q.matrix_at(x, t, &mut qm);
    let mut acc = 0.0;
    for r in 0..d {
        for c in 0..d {
            acc += qm[r * d + c] * hess[c * d + r];
        }
    }
    let mut drift = vec![0.0; d];
    b.eval_into(measure, x, t, &mut drift)?;
    Ok(acc + dot(&drift, &grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minus_x(d: usize) -> DriftSpec {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = -1.0;
        }
        DriftSpec::linear(m, vec![0.0; d], 0.0).unwrap()
    }

    #[test]
    fn linear_drift_eval() {
        let b = minus_x(2);
        let v = b.eval(None, &[2.0, 0.0], 0.0).unwrap();
        assert_eq!(v, vec![-2.0, 0.0]);
    }

    #[test]
    fn convolution_power_against_dirac() {
        // alpha = 1/2 against a Dirac at 0, evaluated at x = 4:
        // -|4|^{-1/2} * 4 = -2.
        let b = DriftSpec::convolution_power(1, 0.5).unwrap();
        let dirac = ParticleCloud::dirac(&[0.0]).unwrap();
        let v = b.eval(Some(&dirac), &[4.0], 0.0).unwrap();
        assert!((v[0] + 2.0).abs() < 1e-14, "{v:?}");
        // coincident point contributes zero
        let at_zero = b.eval(Some(&dirac), &[0.0], 0.0).unwrap();
        assert_eq!(at_zero[0], 0.0);
    }

    #[test]
    fn interaction_linear_attraction_toward_mean() {
        let b = DriftSpec::interaction(
            1,
            "attraction",
            |_| 1.0,
            |x, y, out| out[0] = -(x[0] - y[0]),
            0.0,
        );
        let dirac = ParticleCloud::dirac(&[2.5]).unwrap();
        let v = b.eval(Some(&dirac), &[1.0], 0.0).unwrap();
        assert!((v[0] - 1.5).abs() < 1e-14);
        assert!(b.eval(None, &[1.0], 0.0).is_err());
    }

    #[test]
    fn dissipativity_check_reports() {
        let opts = DissipativityCheck { samples: 5000, ..Default::default() };
        let b = minus_x(1);
        let r = check_dissipativity(&b, None, 0.0, &opts).unwrap();
        assert!(r.passes(), "violation {}", r.max_violation);

        let expanding = DriftSpec::linear(vec![1.0], vec![0.0], 1.0).unwrap();
        let r = check_dissipativity(&expanding, None, 1.0, &opts).unwrap();
        assert!(r.max_violation.abs() <= 1e-8, "equality case: {}", r.max_violation);
        let r = check_dissipativity(&expanding, None, 0.0, &opts).unwrap();
        assert!(!r.passes());

        let cubic = DriftSpec::radial_power(1, 1.0, 3.0, 0.0).unwrap();
        let r = check_dissipativity(&cubic, None, 0.0, &opts).unwrap();
        assert!(r.passes(), "cubic violation {}", r.max_violation);
    }

    #[test]
    fn shift_to_dissipative_cancels_linear_part() {
        let opts = DissipativityCheck::default();
        // B(x) = -x with lambda = -1 shifts to A = 0.
        let b = DriftSpec::linear(vec![-1.0], vec![0.0], -1.0).unwrap();
        let a = b.shift_to_dissipative().unwrap();
        let v = a.eval(None, &[3.7], 0.2).unwrap();
        assert!(v[0].abs() < 1e-14);
        assert_eq!(a.lambda(), 0.0);
        // B(x) = x with lambda = 1 shifts to zero as well.
        let b = DriftSpec::linear(vec![1.0], vec![0.0], 1.0).unwrap();
        let a = b.shift_to_dissipative().unwrap();
        assert!(a.eval(None, &[-2.0], 0.0).unwrap()[0].abs() < 1e-14);
        // B(x) = -x^3 + x with lambda = 1 shifts to -x^3.
        let b = DriftSpec::frozen(1, "cubic+x", |x, _, out| out[0] = -x[0].powi(3) + x[0], 1.0);
        let a = b.shift_to_dissipative().unwrap();
        let v = a.eval(None, &[1.5], 0.0).unwrap();
        assert!((v[0] + 1.5f64.powi(3)).abs() < 1e-12);
        let r = check_dissipativity(&a, None, 0.0, &opts).unwrap();
        assert!(r.passes());
    }

    #[test]
    fn resolvent_of_linear_drift_is_exact() {
        // J - (1/k)(-J) = x  =>  J = x / (1 + 1/k); A_1(x) = -x/2.
        let b = minus_x(1);
        let approx = approximate_drift(&b, 1.0, 0.0).unwrap();
        let mut out = [0.0];
        approx.eval_into(&[2.0], 0.0, &mut out).unwrap();
        assert!((out[0] + 1.0).abs() < 1e-9, "{}", out[0]);
    }

    #[test]
    fn resolvent_multidimensional_linear() {
        let b = minus_x(3);
        let x = [1.0, -2.0, 0.5];
        let j = resolvent(&b, None, &x, 0.0, 4.0).unwrap();
        for (ji, xi) in j.iter().zip(&x) {
            assert!((ji - xi / 1.25).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_drift_has_zero_approximant() {
        let b = DriftSpec::frozen(2, "zero", |_, _, out| out.fill(0.0), 0.0);
        let approx = approximate_drift(&b, 10.0, 0.1).unwrap();
        let mut out = [9.9, 9.9];
        approx.eval_into(&[1.0, 2.0], 0.5, &mut out).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12), "{out:?}");
    }

    #[test]
    fn approximant_converges_pointwise_to_cubic() {
        let b = DriftSpec::radial_power(1, 1.0, 3.0, 0.0).unwrap();
        let xs = [-2.0, -1.2, -0.4, 0.3, 1.1, 1.9];
        let mut prev_err = f64::INFINITY;
        for &k in &[10.0, 100.0, 1000.0, 10_000.0] {
            let approx = approximate_drift(&b, k, 0.0).unwrap();
            let mut worst: f64 = 0.0;
            let mut out = [0.0];
            for &x in &xs {
                approx.eval_into(&[x], 0.0, &mut out).unwrap();
                let err = (out[0] + x.powi(3)).abs();
                assert!(
                    err <= 10.0 * x.abs().powi(5) / k + 1e-9,
                    "k={k}, x={x}: err {err}"
                );
                worst = worst.max(err);
            }
            assert!(worst < prev_err + 1e-12, "error not decreasing at k={k}");
            prev_err = worst;
        }
    }

    #[test]
    fn approximant_is_bounded_lipschitz_dissipative() {
        let b = DriftSpec::radial_power(1, 1.0, 3.0, 0.0).unwrap();
        let k = 5.0;
        let approx = approximate_drift(&b, k, 0.05).unwrap();
        let spec = approx.as_drift_spec();
        let r = check_dissipativity(
            &spec,
            None,
            0.0,
            &DissipativityCheck { samples: 3000, radius: 4.0, ..Default::default() },
        )
        .unwrap();
        assert!(r.passes(), "violation {}", r.max_violation);
        // norm bound k + 1 and sampled Lipschitz constant <= 2k
        let mut out_a = [0.0];
        let mut out_b = [0.0];
        for i in 0..500 {
            let x = -8.0 + 16.0 * (i as f64) / 499.0;
            approx.eval_into(&[x], 0.3, &mut out_a).unwrap();
            assert!(out_a[0].abs() <= k + 1.0 + 1e-12);
            let y = x + 0.01;
            approx.eval_into(&[y], 0.3, &mut out_b).unwrap();
            let lip = (out_b[0] - out_a[0]).abs() / 0.01;
            assert!(lip <= 2.0 * k + 1e-6, "x={x}: lip {lip}");
        }
    }

    #[test]
    fn mollification_is_identity_for_autonomous_drifts() {
        let b = minus_x(1);
        let a0 = approximate_drift(&b, 7.0, 0.0).unwrap();
        let a1 = approximate_drift(&b, 7.0, 0.3).unwrap();
        let mut u = [0.0];
        let mut v = [0.0];
        for &x in &[-1.0, 0.2, 2.4] {
            a0.eval_into(&[x], 0.7, &mut u).unwrap();
            a1.eval_into(&[x], 0.7, &mut v).unwrap();
            assert!((u[0] - v[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn approximate_rejects_non_dissipative() {
        let b = DriftSpec::linear(vec![1.0], vec![0.0], 1.0).unwrap();
        assert!(matches!(
            approximate_drift(&b, 10.0, 0.0),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn generator_on_squared_norm() {
        // Q = I, B = 0, phi = |x|^2 in d = 2: L phi = 2 d = 4.
        let q = DiffusionSpec::isotropic(2, 1.0).unwrap();
        let b = DriftSpec::linear(vec![0.0; 4], vec![0.0; 2], 0.0).unwrap();
        let phi = AnalyticTestFunction {
            value: Arc::new(|x: &[f64]| x.iter().map(|v| v * v).sum()),
            gradient: Arc::new(|x, out| {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = 2.0 * xi;
                }
            }),
            hessian: Arc::new(|x, out| {
                let d = x.len();
                out.fill(0.0);
                for i in 0..d {
                    out[i * d + i] = 2.0;
                }
            }),
        };
        let v = apply_generator(&q, &b, None, &phi, &[0.3, -0.7], 0.0).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        // with B = -x at x = (1,1): 4 - 2 * 2 = 0
        let v = apply_generator(&q, &minus_x(2), None, &phi, &[1.0, 1.0], 0.0).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn generator_anisotropic_vs_finite_differences() {
        // Q = diag(2, 1), B = 0, phi = x1^2: trace(Q D^2 phi) = 4.
        let q = DiffusionSpec::constant(2, vec![2.0, 0.0, 0.0, 1.0], 1.0).unwrap();
        let b = DriftSpec::linear(vec![0.0; 4], vec![0.0; 2], 0.0).unwrap();
        let phi = NumericTestFunction(|x: &[f64]| x[0] * x[0]);
        let v = apply_generator(&q, &b, None, &phi, &[0.4, 1.3], 0.0).unwrap();
        assert!((v - 4.0).abs() < 1e-5, "{v}");
    }

    #[test]
    fn numeric_and_analytic_generators_agree() {
        let q = DiffusionSpec::isotropic(2, 0.7).unwrap();
        let b = minus_x(2);
        let phi_a = gaussian_bump(vec![0.3, -0.2], 1.2);
        let phi_n = NumericTestFunction(move |x: &[f64]| {
            let q: f64 = x
                .iter()
                .zip(&[0.3, -0.2])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (-q / (2.0 * 1.44)).exp()
        });
        for pt in [[0.0, 0.0], [1.0, -1.0], [0.5, 2.0]] {
            let va = apply_generator(&q, &b, None, &phi_a, &pt, 0.0).unwrap();
            let vn = apply_generator(&q, &b, None, &phi_n, &pt, 0.0).unwrap();
            assert!((va - vn).abs() < 1e-6, "{va} vs {vn}");
        }
    }

    #[test]
    fn diffusion_validation() {
        assert!(DiffusionSpec::constant(2, vec![1.0, 0.5, -0.5, 1.0], 0.1).is_err());
        // declared nu above the true minimum eigenvalue
        assert!(DiffusionSpec::constant(1, vec![0.5], 1.0).is_err());
        let ok = DiffusionSpec::constant(2, vec![2.0, 0.5, 0.5, 1.0], 0.5).unwrap();
        assert_eq!(ok.ellipticity(), 0.5);
        let mut buf = vec![0.0; 4];
        ok.noise_factor_at(&[0.0, 0.0], 0.0, &mut buf).unwrap();
        // buf * buf = 2 Q
        let mut sq = [0.0; 4];
        for r in 0..2 {
            for c in 0..2 {
                sq[r * 2 + c] = (0..2).map(|k| buf[r * 2 + k] * buf[k * 2 + c]).sum();
            }
        }
        assert!((sq[0] - 4.0).abs() < 1e-10 && (sq[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn frozen_flow_uses_nearest_slice() {
        let d0 = ParticleCloud::dirac(&[0.0]).unwrap();
        let d1 = ParticleCloud::dirac(&[10.0]).unwrap();
        let flow = MeasureFlow::new(vec![0.0, 1.0], vec![d0, d1]).unwrap();
        let b = DriftSpec::interaction(
            1,
            "attraction",
            |_| 1.0,
            |x, y, out| out[0] = -(x[0] - y[0]),
            0.0,
        );
        let frozen = b.frozen_to_flow(Arc::new(flow)).unwrap();
        assert!(!frozen.is_measure_dependent());
        // near t = 0 the slice mean is 0, near t = 1 it is 10
        let v0 = frozen.eval(None, &[0.0], 0.1).unwrap();
        let v1 = frozen.eval(None, &[0.0], 0.9).unwrap();
        assert_eq!(v0[0], 0.0);
        assert_eq!(v1[0], 10.0);
    }
}
