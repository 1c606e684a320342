//! Scenario configuration: one TOML file per experiment.
//!
//! A scenario names the experiment kind, the shared coefficients (cost,
//! diffusion, solver) and a list of cases, each holding one or two drifts
//! and one or two initial conditions. Validation errors carry a
//! JSON-pointer-style path into the offending field.

use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub kind: ExperimentKind,
    pub horizon: f64,
    /// Number of stored time nodes (including 0 and the horizon).
    pub time_nodes: usize,
    pub seeds: Vec<u64>,
    pub cost: CostConfig,
    pub diffusion: DiffusionConfig,
    pub solver: SolverConfig,
    #[serde(default)]
    pub transport: TransportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_point: Option<FixedPointConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stability: Option<StabilityConfig>,
    #[serde(rename = "case")]
    pub cases: Vec<CaseConfig>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Simulate,
    Distance,
    VerifyBound,
    FixedPoint,
    Stability,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::Simulate => "simulate",
            ExperimentKind::Distance => "distance",
            ExperimentKind::VerifyBound => "verify-bound",
            ExperimentKind::FixedPoint => "fixed-point",
            ExperimentKind::Stability => "stability",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub family: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub kind: String,
    /// Isotropic coefficient (kind = "isotropic").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q: Option<f64>,
    /// Row-major matrix (kind = "matrix").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    /// Declared ellipticity; defaults to the isotropic coefficient or the
    /// matrix minimum eigenvalue.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nu: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: String,
    pub steps_per_unit_time: usize,
    pub particles: usize,
    #[serde(default)]
    pub backend: Backend,
    /// Grid backend parameters (backend = "grid1d").
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    #[default]
    Particle,
    Grid1d,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub cells: usize,
    pub dt: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    /// Slices above this size are subsampled before transport solves.
    #[serde(default = "default_ot_support")]
    pub ot_support: usize,
    /// Hard cap on transport problem size.
    #[serde(default = "default_support_limit")]
    pub support_limit: usize,
}

fn default_ot_support() -> usize {
    300
}

fn default_support_limit() -> usize {
    4096
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            ot_support: default_ot_support(),
            support_limit: default_support_limit(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    pub tol: f64,
    pub max_iter: usize,
    #[serde(default = "default_min_horizon_frac")]
    pub min_horizon_frac: f64,
    /// Run the two-seed same-law check when at least two seeds are listed
    /// and the case has a single initial condition.
    #[serde(default)]
    pub uniqueness_check: bool,
}

fn default_min_horizon_frac() -> f64 {
    0.125
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct StabilityConfig {
    /// Gauge name: "identity" is the only built-in.
    pub gauge: String,
    /// Lyapunov function: "quadratic" is `1 + |x|^2`.
    pub lyapunov: String,
    /// `Lambda(a) = lambda_growth_offset + a`.
    #[serde(default = "default_lambda_growth_offset")]
    pub lambda_growth_offset: f64,
    /// Class bound `alpha(t) = alpha_offset + alpha_slope t`.
    pub alpha_offset: f64,
    #[serde(default)]
    pub alpha_slope: f64,
}

fn default_lambda_growth_offset() -> f64 {
    2.0
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CaseConfig {
    pub name: String,
    pub drift_mu: DriftConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift_sigma: Option<DriftConfig>,
    pub init_mu: InitConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init_sigma: Option<InitConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DriftConfig {
    pub kind: String,
    /// Declared dissipativity constant.
    #[serde(default)]
    pub lambda: f64,
    /// kind = "linear": row-major matrix and offset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<Vec<f64>>,
    /// kind = "radial_power": `B(x) = -coeff |x|^{power-1} x`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coeff: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub power: Option<f64>,
    /// kind = "convolution_power": exponent in (0, 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// kind = "interaction": named kernel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<String>,
    /// kind = "approximated": resolvent approximation of `base`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<Box<DriftConfig>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct InitConfig {
    pub kind: String,
    /// kind = "gaussian": per-coordinate mean and standard deviation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
    /// kind = "dirac": the point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<Vec<f64>>,
    /// kind = "points": explicit support and optional weights.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    /// kind = "csv": path to a cloud file, relative to the scenario file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, HarnessError> {
        let scenario: Scenario = toml::from_str(text)
            .map_err(|e| HarnessError::Config(format!("scenario parse error: {e}")))?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string_pretty(self)
            .map_err(|e| HarnessError::Config(format!("scenario serialization failed: {e}")))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |path: &str, msg: &str| {
            Err(HarnessError::Config(format!("{path}: {msg}")))
        };
        if self.name.trim().is_empty() {
            return fail("/name", "must not be empty");
        }
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return fail("/horizon", "must be positive and finite");
        }
        if self.time_nodes < 2 {
            return fail("/time_nodes", "need at least the initial and final node");
        }
        if self.seeds.is_empty() {
            return fail("/seeds", "must list at least one seed");
        }
        if self.cases.is_empty() {
            return fail("/case", "must list at least one case");
        }
        match self.cost.family.as_str() {
            "capped_power" => {
                let p = self.cost.p.unwrap_or(f64::NAN);
                if !(p >= 1.0) {
                    return fail("/cost/p", "capped_power needs p >= 1");
                }
            }
            other => {
                return fail("/cost/family", &format!("unknown cost family `{other}`"));
            }
        }
        match self.diffusion.kind.as_str() {
            "isotropic" => {
                if !self.diffusion.q.map(|q| q > 0.0).unwrap_or(false) {
                    return fail("/diffusion/q", "isotropic diffusion needs q > 0");
                }
            }
            "matrix" => {
                let m = match &self.diffusion.matrix {
                    Some(m) if !m.is_empty() => m,
                    _ => return fail("/diffusion/matrix", "matrix diffusion needs rows"),
                };
                if m.iter().any(|row| row.len() != m.len()) {
                    return fail("/diffusion/matrix", "matrix must be square");
                }
            }
            other => {
                return fail("/diffusion/kind", &format!("unknown diffusion kind `{other}`"));
            }
        }
        if !matches!(self.solver.scheme.as_str(), "explicit_em" | "split_step_implicit_drift") {
            return fail("/solver/scheme", "expected explicit_em or split_step_implicit_drift");
        }
        if self.solver.steps_per_unit_time == 0 || self.solver.particles == 0 {
            return fail("/solver", "steps_per_unit_time and particles must be positive");
        }
        let steps = (self.horizon * self.solver.steps_per_unit_time as f64).round() as usize;
        if steps == 0 {
            return fail("/solver/steps_per_unit_time", "horizon resolves to zero steps");
        }
        if steps % (self.time_nodes - 1) != 0 {
            return fail(
                "/time_nodes",
                &format!(
                    "the {} steps over the horizon are not divisible into {} intervals",
                    steps,
                    self.time_nodes - 1
                ),
            );
        }
        if self.solver.backend == Backend::Grid1d && self.solver.grid.is_none() {
            return fail("/solver/grid", "grid backend needs a [solver.grid] block");
        }
        if self.kind == ExperimentKind::FixedPoint && self.fixed_point.is_none() {
            return fail("/fixed_point", "fixed-point scenarios need a [fixed_point] block");
        }
        if self.kind == ExperimentKind::Stability && self.stability.is_none() {
            return fail("/stability", "stability scenarios need a [stability] block");
        }
        for (idx, case) in self.cases.iter().enumerate() {
            let base = format!("/case/{idx}");
            if case.name.trim().is_empty() {
                return fail(&format!("{base}/name"), "must not be empty");
            }
            validate_drift(&case.drift_mu, &format!("{base}/drift_mu"))?;
            if let Some(ds) = &case.drift_sigma {
                validate_drift(ds, &format!("{base}/drift_sigma"))?;
            }
            validate_init(&case.init_mu, &format!("{base}/init_mu"))?;
            if let Some(is) = &case.init_sigma {
                validate_init(is, &format!("{base}/init_sigma"))?;
            }
        }
        let names: std::collections::HashSet<&str> =
            self.cases.iter().map(|c| c.name.as_str()).collect();
        if names.len() != self.cases.len() {
            return fail("/case", "case names must be unique");
        }
        Ok(())
    }
}

fn validate_drift(d: &DriftConfig, path: &str) -> Result<(), HarnessError> {
    let fail = |field: &str, msg: &str| {
        Err(HarnessError::Config(format!("{path}/{field}: {msg}")))
    };
    match d.kind.as_str() {
        "linear" => {
            let m = match &d.matrix {
                Some(m) if !m.is_empty() => m,
                _ => return fail("matrix", "linear drift needs a matrix"),
            };
            if m.iter().any(|row| row.len() != m.len()) {
                return fail("matrix", "matrix must be square");
            }
            if let Some(off) = &d.offset {
                if off.len() != m.len() {
                    return fail("offset", "offset length must match the matrix");
                }
            }
        }
        "radial_power" => {
            if !d.coeff.map(|c| c >= 0.0).unwrap_or(false) {
                return fail("coeff", "radial_power needs coeff >= 0");
            }
            if !d.power.map(|p| p >= 1.0).unwrap_or(false) {
                return fail("power", "radial_power needs power >= 1");
            }
        }
        "convolution_power" => {
            if !d.alpha.map(|a| 0.0 < a && a < 1.0).unwrap_or(false) {
                return fail("alpha", "convolution_power needs alpha in (0, 1)");
            }
        }
        "interaction" => match d.kernel.as_deref() {
            Some("linear_attraction") | Some("gated_mean") => {}
            Some(other) => {
                return fail("kernel", &format!("unknown interaction kernel `{other}`"))
            }
            None => return fail("kernel", "interaction drift needs a kernel name"),
        },
        "approximated" => {
            match &d.base {
                Some(base) => validate_drift(base, &format!("{path}/base"))?,
                None => return fail("base", "approximated drift needs a base drift"),
            }
            if !d.k.map(|k| k >= 1.0).unwrap_or(false) {
                return fail("k", "approximated drift needs k >= 1");
            }
            if !d.epsilon.map(|e| e >= 0.0).unwrap_or(false) {
                return fail("epsilon", "approximated drift needs epsilon >= 0");
            }
        }
        other => return fail("kind", &format!("unknown drift kind `{other}`")),
    }
    Ok(())
}

fn validate_init(i: &InitConfig, path: &str) -> Result<(), HarnessError> {
    let fail = |field: &str, msg: &str| {
        Err(HarnessError::Config(format!("{path}/{field}: {msg}")))
    };
    match i.kind.as_str() {
        "gaussian" => {
            let mean = match &i.mean {
                Some(m) if !m.is_empty() => m,
                _ => return fail("mean", "gaussian init needs a mean vector"),
            };
            match &i.std {
                Some(s) if s.len() == mean.len() && s.iter().all(|v| *v >= 0.0) => {}
                _ => return fail("std", "gaussian init needs nonnegative std per coordinate"),
            }
        }
        "dirac" => {
            if i.point.as_ref().map(|p| p.is_empty()).unwrap_or(true) {
                return fail("point", "dirac init needs a point");
            }
        }
        "points" => {
            let pts = match &i.points {
                Some(p) if !p.is_empty() => p,
                _ => return fail("points", "points init needs a support"),
            };
            let dim = pts[0].len();
            if dim == 0 || pts.iter().any(|p| p.len() != dim) {
                return fail("points", "all points must share a positive dimension");
            }
            if let Some(w) = &i.weights {
                if w.len() != pts.len() {
                    return fail("weights", "weights must match the number of points");
                }
            }
        }
        "csv" => {
            if i.csv.as_ref().map(|p| p.trim().is_empty()).unwrap_or(true) {
                return fail("csv", "csv init needs a path");
            }
        }
        other => return fail("kind", &format!("unknown init kind `{other}`")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
name = "smoke"
kind = "distance"
horizon = 1.0
time_nodes = 2
seeds = [1]

[cost]
family = "capped_power"
p = 1.0

[diffusion]
kind = "isotropic"
q = 1.0

[solver]
scheme = "explicit_em"
steps_per_unit_time = 10
particles = 100

[[case]]
name = "only"
[case.drift_mu]
kind = "linear"
matrix = [[-1.0]]
offset = [0.0]
[case.init_mu]
kind = "points"
points = [[0.0], [1.0]]
"#;

    #[test]
    fn minimal_scenario_parses_and_roundtrips() {
        let s = Scenario::from_toml(MINIMAL).unwrap();
        assert_eq!(s.kind, ExperimentKind::Distance);
        let text = s.to_toml().unwrap();
        let back = Scenario::from_toml(&text).unwrap();
        assert_eq!(s, back);
    }

    #[test]
    fn inline_table_and_integer_literals_parse() {
        // the documented one-line form: cost = { family = "capped_power", p = 2 }
        let inline = MINIMAL
            .replace("[cost]\nfamily = \"capped_power\"\np = 1.0\n", "")
            .replace(
                "name = \"smoke\"",
                "name = \"smoke\"\ncost = { family = \"capped_power\", p = 2 }",
            );
        let s = Scenario::from_toml(&inline).unwrap();
        assert_eq!(s.cost.p, Some(2.0));
    }

    #[test]
    fn missing_cost_block_names_cost() {
        let broken = MINIMAL.replace("[cost]\nfamily = \"capped_power\"\np = 1.0\n", "");
        let err = Scenario::from_toml(&broken).unwrap_err();
        assert!(err.to_string().contains("cost"), "{err}");
    }

    #[test]
    fn bad_fields_carry_paths() {
        let bad_p = MINIMAL.replace("p = 1.0", "p = 0.5");
        let err = Scenario::from_toml(&bad_p).unwrap_err();
        assert!(err.to_string().contains("/cost/p"), "{err}");

        let bad_nodes = MINIMAL.replace("time_nodes = 2", "time_nodes = 4");
        let err = Scenario::from_toml(&bad_nodes).unwrap_err();
        assert!(err.to_string().contains("/time_nodes"), "{err}");

        let bad_drift = MINIMAL.replace("kind = \"linear\"", "kind = \"quadratic\"");
        let err = Scenario::from_toml(&bad_drift).unwrap_err();
        assert!(err.to_string().contains("/case/0/drift_mu"), "{err}");
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let extra = format!("{MINIMAL}\nbogus_field = 3\n");
        assert!(Scenario::from_toml(&extra).is_err());
    }
}
