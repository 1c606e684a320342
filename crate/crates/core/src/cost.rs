//! Bounded monotone cost functions `h` and their time-rescaled variants
//! `h_s(r) = h(r e^{-s})`.
//!
//! Boundedness is a hard constructor requirement: the transport functional
//! and the stability machinery both assume a finite sup norm, so unbounded
//! costs are rejected rather than truncated.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Number of probe points used for sampled monotonicity / bound checks.
const PROBE_POINTS: usize = 1000;

type CostFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

#[derive(Clone)]
enum Family {
    /// `h(r) = min(r^p, 1)` with `p >= 1`.
    CappedPower { p: f64 },
    /// Arbitrary bounded monotone closure, validated by sampling.
    Custom { f: CostFn, label: String },
}

/// A bounded monotone cost `r -> h(r e^{-s})`; `s` accumulates under
/// [`CostFunction::rescaled`].
#[derive(Clone)]
pub struct CostFunction {
    family: Family,
    sup_bound: f64,
    /// Multiplicative argument factor `e^{-s}`.
    rate: f64,
    /// Radius at which the base cost is considered saturated; probe grids
    /// extend to ten times this value.
    probe_radius: f64,
}

impl std::fmt::Debug for CostFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.family {
            Family::CappedPower { p } => write!(
                f,
                "CostFunction(capped_power p={p}, rate={}, sup={})",
                self.rate, self.sup_bound
            ),
            Family::Custom { label, .. } => write!(
                f,
                "CostFunction(custom {label}, rate={}, sup={})",
                self.rate, self.sup_bound
            ),
        }
    }
}

impl CostFunction {
    /// `h(r) = min(r^p, 1)`.
    pub fn capped_power(p: f64) -> Result<Self> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "capped_power exponent must satisfy p >= 1, got {p}"
            )));
        }
        Ok(CostFunction {
            family: Family::CappedPower { p },
            sup_bound: 1.0,
            rate: 1.0,
            probe_radius: 1.0,
        })
    }

    /// Cost from a closure. The closure is validated on a geometric probe
    /// grid: `h(0) = 0`, monotone non-decreasing, bounded by `sup_bound`.
    pub fn custom(
        label: impl Into<String>,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        sup_bound: f64,
        probe_radius: f64,
    ) -> Result<Self> {
        if !sup_bound.is_finite() || sup_bound <= 0.0 {
            return Err(Error::ContractViolation(format!(
                "sup bound must be finite and positive, got {sup_bound}"
            )));
        }
        if !probe_radius.is_finite() || probe_radius <= 0.0 {
            return Err(Error::InvalidArgument("probe radius must be positive".into()));
        }
        let f: CostFn = Arc::new(f);
        let at_zero = f(0.0);
        if at_zero.abs() > 1e-12 {
            return Err(Error::ContractViolation(format!(
                "cost must vanish at 0, found h(0) = {at_zero}"
            )));
        }
        let mut prev = 0.0;
        for r in geometric_probe_grid(probe_radius) {
            let v = f(r);
            if !v.is_finite() {
                return Err(Error::ContractViolation(format!("cost not finite at r = {r}")));
            }
            if v > sup_bound + 1e-12 {
                return Err(Error::ContractViolation(format!(
                    "cost exceeds its declared sup bound at r = {r}: {v} > {sup_bound}"
                )));
            }
            if v < prev - 1e-12 {
                return Err(Error::ContractViolation(format!(
                    "cost is decreasing near r = {r}"
                )));
            }
            prev = prev.max(v);
        }
        Ok(CostFunction {
            family: Family::Custom { f, label: label.into() },
            sup_bound,
            rate: 1.0,
            probe_radius,
        })
    }

    /// Sup norm of the cost.
    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    /// Evaluate `h` at a nonnegative radius.
    pub fn eval(&self, r: f64) -> Result<f64> {
        if !(r >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "cost argument must be nonnegative, got {r}"
            )));
        }
        Ok(self.eval_unchecked(r))
    }

    /// Evaluation without the sign check; used in solver inner loops where
    /// the argument is a norm by construction.
    #[inline]
    pub fn eval_unchecked(&self, r: f64) -> f64 {
        let z = r * self.rate;
        match &self.family {
            Family::CappedPower { p } => {
                let v = if *p == 1.0 {
                    z
                } else if *p == 2.0 {
                    z * z
                } else {
                    z.powf(*p)
                };
                v.min(1.0)
            }
            Family::Custom { f, .. } => f(z).min(self.sup_bound),
        }
    }

    /// The time-rescaled cost `r -> h(r e^{-s})`. Same sup bound.
    pub fn rescaled(&self, s: f64) -> Result<Self> {
        if !s.is_finite() {
            return Err(Error::InvalidArgument(format!("rescale parameter must be finite, got {s}")));
        }
        let mut out = self.clone();
        out.rate *= (-s).exp();
        Ok(out)
    }

    /// Sampled check that the cost is concave with `h(r) > 0` for `r > 0`,
    /// i.e. that the transport functional it induces is a distance.
    pub fn is_concave_metric_family(&self) -> bool {
        let hi = 2.0 * self.probe_radius / self.rate.max(1e-300);
        let n = PROBE_POINTS;
        let step = hi / n as f64;
        let vals: Vec<f64> = (0..=n).map(|i| self.eval_unchecked(i as f64 * step)).collect();
        let scale = self.sup_bound.max(1.0);
        for w in vals.windows(3) {
            if w[2] - 2.0 * w[1] + w[0] > 1e-9 * scale {
                return false;
            }
        }
        // positivity away from zero
        vals.iter().skip(1).all(|v| *v > 0.0)
    }
}

fn geometric_probe_grid(probe_radius: f64) -> impl Iterator<Item = f64> {
    let lo: f64 = probe_radius * 1e-6;
    let hi: f64 = probe_radius * 10.0;
    let ratio = (hi / lo).powf(1.0 / (PROBE_POINTS - 1) as f64);
    (0..PROBE_POINTS).map(move |i| lo * ratio.powi(i as i32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn capped_power_examples() {
        let h2 = CostFunction::capped_power(2.0).unwrap();
        assert_eq!(h2.eval(0.5).unwrap(), 0.25);
        assert_eq!(h2.eval(3.0).unwrap(), 1.0);
        let h1 = CostFunction::capped_power(1.0).unwrap();
        assert_eq!(h1.eval(1.0).unwrap(), 1.0);
        assert!(h1.eval(-0.1).is_err());
    }

    #[test]
    fn rescaled_examples() {
        let h1 = CostFunction::capped_power(1.0).unwrap();
        let same = h1.rescaled(0.0).unwrap();
        for r in [0.0, 0.3, 1.0, 5.0] {
            assert_eq!(h1.eval(r).unwrap(), same.eval(r).unwrap());
        }
        let halved = h1.rescaled(2.0f64.ln()).unwrap();
        assert!((halved.eval(1.0).unwrap() - 0.5).abs() < 1e-15);
        // s = -ln 2 doubles the radius: h2((0.6 * 2)^2) caps at 1.
        let h2 = CostFunction::capped_power(2.0).unwrap();
        let doubled = h2.rescaled(-(2.0f64.ln())).unwrap();
        assert_eq!(doubled.eval(0.6).unwrap(), 1.0);
        assert_eq!(doubled.sup_bound(), 1.0);
    }

    #[test]
    fn rescaling_composes_additively() {
        let h = CostFunction::capped_power(2.0).unwrap();
        let a = h.rescaled(0.7).unwrap().rescaled(-1.3).unwrap();
        let b = h.rescaled(0.7 - 1.3).unwrap();
        for i in 0..100 {
            let r = 0.05 * i as f64;
            assert!((a.eval(r).unwrap() - b.eval(r).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn monotone_on_random_pairs() {
        let h = CostFunction::capped_power(1.5).unwrap();
        let mut prev_r = 0.0;
        for i in 1..200 {
            let r = i as f64 * 0.031;
            assert!(h.eval(r).unwrap() >= h.eval(prev_r).unwrap());
            prev_r = r;
        }
    }

    #[test]
    fn capped_power_is_exactly_min() {
        let h = CostFunction::capped_power(3.0).unwrap();
        for i in 0..50 {
            let r = 0.07 * i as f64;
            assert_eq!(h.eval(r).unwrap(), (r.powf(3.0)).min(1.0));
        }
    }

    #[test]
    fn concavity_classification() {
        assert!(CostFunction::capped_power(1.0).unwrap().is_concave_metric_family());
        assert!(!CostFunction::capped_power(2.0).unwrap().is_concave_metric_family());
        let sqrt_cost = CostFunction::custom("sqrt", |r| r.sqrt().min(1.0), 1.0, 1.0).unwrap();
        assert!(sqrt_cost.is_concave_metric_family());
    }

    #[test]
    fn custom_validation_rejects_bad_costs() {
        // decreasing
        assert!(CostFunction::custom("bad", |r| (-r).exp() - 1.0 + r * 0.0, 1.0, 1.0).is_err());
        // violates the declared sup bound
        assert!(CostFunction::custom("unbounded", |r| r, 1.0, 1.0).is_err());
        // nonzero at the origin
        assert!(CostFunction::custom("offset", |_| 0.5, 1.0, 1.0).is_err());
        // infinite sup bound is not a bounded cost
        assert!(CostFunction::custom("inf", |r| r.min(1.0), f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn plateaus_are_accepted() {
        // monotone but not strictly increasing
        let h = CostFunction::custom("plateau", |r| r.min(0.4).min(1.0) / 0.4, 2.5, 1.0);
        assert!(h.is_ok());
    }
}
