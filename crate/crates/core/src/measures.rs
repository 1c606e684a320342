//! Probability measures as weighted particle clouds, flows of clouds over a
//! time grid, and a deterministic 1-D grid density backend.
//!
//! All types are immutable after construction; operations are pure functions.
//! Cross-module APIs exchange clouds only — the grid backend converts at the
//! boundary via [`grid_to_cloud`].

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{domain, stream_id, PhiloxStream};

/// Weight deviations below this are silently renormalized at construction;
/// larger deviations are rejected so that solver bugs stay visible.
const RENORMALIZE_BELOW: f64 = 1e-9;

/// A weighted empirical probability measure on R^d.
///
/// Positions are stored row-major (`n * dim` scalars); weights are
/// nonnegative and sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    points: Vec<f64>,
    weights: Vec<f64>,
    dim: usize,
}

impl ParticleCloud {
    /// Build a cloud from row-major positions and weights.
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dimension must be positive".into()));
        }
        if points.len() != weights.len() * dim {
            return Err(Error::InvalidArgument(format!(
                "point storage has {} scalars, expected {} ({} points of dimension {})",
                points.len(),
                weights.len() * dim,
                weights.len(),
                dim
            )));
        }
        if weights.is_empty() {
            return Err(Error::InvalidArgument("cloud must contain at least one point".into()));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::ContractViolation("non-finite particle position".into()));
        }
        if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
            return Err(Error::ContractViolation(format!("invalid weight {w}")));
        }
        let sum: f64 = weights.iter().sum();
        let mut weights = weights;
        if (sum - 1.0).abs() > RENORMALIZE_BELOW {
            return Err(Error::ContractViolation(format!(
                "weights sum to {sum:.17} (deviation {:.3e} exceeds renormalization band {RENORMALIZE_BELOW:.0e})",
                (sum - 1.0).abs()
            )));
        }
        if sum != 1.0 {
            for w in weights.iter_mut() {
                *w /= sum;
            }
        }
        Ok(ParticleCloud { points, weights, dim })
    }

    /// Equal-weight cloud from row-major positions.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(Error::InvalidArgument(
                "point storage length must be a multiple of the dimension".into(),
            ));
        }
        let n = points.len() / dim;
        ParticleCloud::new(dim, points, vec![1.0 / n as f64; n])
    }

    /// A single unit-mass point.
    pub fn dirac(point: &[f64]) -> Result<Self> {
        ParticleCloud::new(point.len(), point.to_vec(), vec![1.0])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        false // constructor rejects empty clouds
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn positions(&self) -> &[f64] {
        &self.points
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points.chunks(self.dim).zip(self.weights.iter().copied())
    }

    /// Expectation of a scalar function: sum of `w_i f(x_i)`.
    pub fn integrate(&self, f: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in self.iter() {
            let v = f(x);
            if !v.is_finite() {
                return Err(Error::Evaluation(format!(
                    "test function returned {v} at point {x:?}"
                )));
            }
            acc += w * v;
        }
        Ok(acc)
    }

    /// Integral of a nonnegative Lyapunov function; rejects negative samples.
    pub fn lyapunov_integral(&self, v: impl Fn(&[f64]) -> f64) -> Result<f64> {
        let mut acc = 0.0;
        for (x, w) in self.iter() {
            let val = v(x);
            if !val.is_finite() {
                return Err(Error::Evaluation(format!(
                    "Lyapunov function returned {val} at point {x:?}"
                )));
            }
            if val < 0.0 {
                return Err(Error::ContractViolation(format!(
                    "Lyapunov function is negative ({val}) at point {x:?}"
                )));
            }
            acc += w * val;
        }
        Ok(acc)
    }

    /// Barycenter of the cloud.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    /// Per-coordinate variance about the barycenter.
    pub fn variance(&self) -> Vec<f64> {
        let m = self.mean();
        let mut v = vec![0.0; self.dim];
        for (x, w) in self.iter() {
            for k in 0..self.dim {
                let c = x[k] - m[k];
                v[k] += w * c * c;
            }
        }
        v
    }

    /// Draw `n` indices with replacement, proportionally to the weights.
    /// Deterministic per seed.
    pub fn sample_indices(&self, n: usize, seed: u64) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::InvalidArgument("subsample size must be at least 1".into()));
        }
        let mut cdf = Vec::with_capacity(self.len());
        let mut acc = 0.0;
        for &w in &self.weights {
            acc += w;
            cdf.push(acc);
        }
        let mut rng = PhiloxStream::new(seed, stream_id(domain::SUBSAMPLE, 0));
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            let u = rng.next_unit() * acc;
            let i = match cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
                Ok(i) | Err(i) => i.min(self.len() - 1),
            };
            idx.push(i);
        }
        Ok(idx)
    }

    /// Equal-weight cloud made of the selected points (repeats allowed).
    pub fn take(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidArgument("empty selection".into()));
        }
        let mut pts = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            pts.extend_from_slice(self.point(i));
        }
        ParticleCloud::uniform(self.dim, pts)
    }

    /// `n` equally weighted points drawn with replacement proportionally to
    /// the weights; deterministic per seed.
    pub fn subsample(&self, n: usize, seed: u64) -> Result<Self> {
        let idx = self.sample_indices(n, seed)?;
        self.take(&idx)
    }

    /// Image of the cloud under a pointwise map (weights unchanged).
    pub fn map_points(&self, f: impl Fn(&[f64], &mut [f64])) -> Result<Self> {
        let mut pts = vec![0.0; self.points.len()];
        for (i, (x, _)) in self.iter().enumerate() {
            f(x, &mut pts[i * self.dim..(i + 1) * self.dim]);
        }
        ParticleCloud::new(self.dim, pts, self.weights.clone())
    }

    /// Write as CSV with header `x1,...,xd,weight`, 17 significant digits.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for k in 1..=self.dim {
            let _ = write!(out, "x{k},");
        }
        out.push_str("weight\n");
        for (x, w) in self.iter() {
            for xi in x {
                let _ = write!(out, "{xi:.16e},");
            }
            let _ = writeln!(out, "{w:.16e}");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    /// Read a cloud written by [`ParticleCloud::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse(format!("{}: empty file", path.display())))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols.last() != Some(&"weight") {
            return Err(Error::Parse(format!(
                "{}: expected header x1,...,xd,weight",
                path.display()
            )));
        }
        let dim = cols.len() - 1;
        let mut points = Vec::new();
        let mut weights = Vec::new();
        for (lineno, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(Error::Parse(format!(
                    "{}:{}: expected {} fields, found {}",
                    path.display(),
                    lineno + 2,
                    dim + 1,
                    fields.len()
                )));
            }
            for f in &fields[..dim] {
                points.push(parse_float(f, path, lineno + 2)?);
            }
            weights.push(parse_float(fields[dim], path, lineno + 2)?);
        }
        ParticleCloud::new(dim, points, weights)
    }
}

fn parse_float(s: &str, path: &Path, lineno: usize) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), lineno)))
}

/// A time-indexed family of clouds: the discrete stand-in for a measure flow
/// `(mu_t)_{t in [0, T]}`.
#[derive(Clone, Debug)]
pub struct MeasureFlow {
    times: Vec<f64>,
    slices: Vec<ParticleCloud>,
    horizon: f64,
}

impl MeasureFlow {
    pub fn new(times: Vec<f64>, slices: Vec<ParticleCloud>) -> Result<Self> {
        if times.len() != slices.len() {
            return Err(Error::InvalidArgument(format!(
                "{} times but {} slices",
                times.len(),
                slices.len()
            )));
        }
        if times.is_empty() {
            return Err(Error::InvalidArgument("flow must contain at least one slice".into()));
        }
        if times[0] != 0.0 {
            return Err(Error::ContractViolation(format!(
                "time grid must start at 0, found {}",
                times[0]
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::ContractViolation("time grid must be strictly increasing".into()));
        }
        let dim = slices[0].dim();
        if slices.iter().any(|s| s.dim() != dim) {
            return Err(Error::ContractViolation("all slices must share one dimension".into()));
        }
        let horizon = *times.last().unwrap();
        Ok(MeasureFlow { times, slices, horizon })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn slices(&self) -> &[ParticleCloud] {
        &self.slices
    }

    pub fn slice(&self, k: usize) -> &ParticleCloud {
        &self.slices[k]
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.slices[0].dim()
    }

    /// Index of the slice whose time is nearest to `t` (ties go left).
    pub fn nearest_slice(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (k, &tk) in self.times.iter().enumerate() {
            let gap = (tk - t).abs();
            if gap < best_gap {
                best_gap = gap;
                best = k;
            }
        }
        best
    }

    /// Constant-in-time flow: the same cloud at every node of `times`.
    pub fn constant(times: Vec<f64>, cloud: ParticleCloud) -> Result<Self> {
        let n = times.len();
        MeasureFlow::new(times, vec![cloud; n])
    }

    /// Write the flow as a directory of per-slice CSVs plus a `times.csv` index.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut index = String::from("index,time,file\n");
        for (k, (t, slice)) in self.times.iter().zip(&self.slices).enumerate() {
            let file = format!("slice_{k:05}.csv");
            slice.write_csv(&dir.join(&file))?;
            let _ = writeln!(index, "{k},{t:.16e},{file}");
        }
        std::fs::write(dir.join("times.csv"), index)?;
        Ok(())
    }

    /// Read a flow written by [`MeasureFlow::write_dir`].
    pub fn read_dir(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("times.csv"))?;
        let mut times = Vec::new();
        let mut slices = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse(format!(
                    "times.csv:{}: expected index,time,file",
                    lineno + 1
                )));
            }
            times.push(parse_float(fields[1], &dir.join("times.csv"), lineno + 1)?);
            slices.push(ParticleCloud::read_csv(&dir.join(fields[2].trim()))?);
        }
        MeasureFlow::new(times, slices)
    }
}

/// Piecewise-constant probability density on a uniform 1-D grid.
#[derive(Clone, Debug)]
pub struct GridDensity1D {
    x_min: f64,
    x_max: f64,
    values: Vec<f64>,
}

impl GridDensity1D {
    /// Build and normalize-check a density; small deviations are rescaled,
    /// large ones rejected.
    pub fn new(x_min: f64, x_max: f64, values: Vec<f64>) -> Result<Self> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(Error::InvalidArgument("invalid grid interval".into()));
        }
        if values.is_empty() {
            return Err(Error::InvalidArgument("grid needs at least one cell".into()));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::ContractViolation("density values must be finite and nonnegative".into()));
        }
        let dx = (x_max - x_min) / values.len() as f64;
        let mass: f64 = values.iter().sum::<f64>() * dx;
        let mut values = values;
        if (mass - 1.0).abs() > RENORMALIZE_BELOW {
            return Err(Error::ContractViolation(format!(
                "density mass is {mass:.17}, deviation exceeds {RENORMALIZE_BELOW:.0e}"
            )));
        }
        if mass != 1.0 {
            for v in values.iter_mut() {
                *v /= mass;
            }
        }
        Ok(GridDensity1D { x_min, x_max, values })
    }

    /// Internal constructor for solver output: validates sign and rough
    /// normalization but leaves the values untouched so that conservation
    /// properties of the scheme remain observable.
    pub(crate) fn from_evolution(x_min: f64, x_max: f64, values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite grid density".into()));
        }
        let dx = (x_max - x_min) / values.len() as f64;
        let mass: f64 = values.iter().sum::<f64>() * dx;
        if (mass - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "grid evolution lost mass (total {mass:.12})"
            )));
        }
        Ok(GridDensity1D { x_min, x_max, values })
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.values.len() as f64
    }

    pub fn cell_center(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.cell_width()
    }

    /// Total mass (cell sum times cell width).
    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_width()
    }

    pub fn mean(&self) -> f64 {
        let dx = self.cell_width();
        (0..self.cells())
            .map(|i| self.cell_center(i) * self.values[i] * dx)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let dx = self.cell_width();
        (0..self.cells())
            .map(|i| {
                let c = self.cell_center(i) - m;
                c * c * self.values[i] * dx
            })
            .sum()
    }

    /// L1 distance to another density function, cell-midpoint rule.
    pub fn l1_distance_to(&self, f: impl Fn(f64) -> f64) -> f64 {
        let dx = self.cell_width();
        (0..self.cells())
            .map(|i| (self.values[i] - f(self.cell_center(i))).abs() * dx)
            .sum()
    }
}

/// Convert a grid density to a particle cloud.
///
/// With `n == g.cells()` the cloud consists of the cell centers weighted by
/// cell mass; otherwise `n` equally weighted points are placed at the
/// quantile midpoints `(i + 1/2) / n` of the piecewise-linear CDF.
pub fn grid_to_cloud(g: &GridDensity1D, n: usize) -> Result<ParticleCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("cloud size must be at least 1".into()));
    }
    if (g.mass() - 1.0).abs() > 1e-10 {
        return Err(Error::ContractViolation(format!(
            "grid density is not normalized (mass {:.12})",
            g.mass()
        )));
    }
    let dx = g.cell_width();
    if n == g.cells() {
        let points: Vec<f64> = (0..n).map(|i| g.cell_center(i)).collect();
        let weights: Vec<f64> = g.values().iter().map(|v| v * dx).collect();
        // Guard against an all-zero weight row being the only mass carrier.
        return ParticleCloud::new(1, points, weights);
    }
    // Quantile sampling from the piecewise-linear CDF.
    let mut cdf = Vec::with_capacity(g.cells() + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for v in g.values() {
        acc += v * dx;
        cdf.push(acc);
    }
    let total = *cdf.last().unwrap();
    let mut points = Vec::with_capacity(n);
    let mut cell = 0usize;
    for i in 0..n {
        let target = (i as f64 + 0.5) / n as f64 * total;
        while cell + 1 < cdf.len() - 1 && cdf[cell + 1] < target {
            cell += 1;
        }
        let lo = cdf[cell];
        let hi = cdf[cell + 1];
        let frac = if hi > lo { (target - lo) / (hi - lo) } else { 0.5 };
        points.push(g.x_min + (cell as f64 + frac) * dx);
    }
    ParticleCloud::uniform(1, points)
}
