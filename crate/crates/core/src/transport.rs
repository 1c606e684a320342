//! Exact Kantorovich h-cost between particle clouds.
//!
//! The functional is computed as a dense transportation problem solved by
//! successive shortest augmenting paths with node potentials (min-cost flow
//! on the complete bipartite graph). The solver is exact up to floating
//! point round-off, returns an optimal coupling and feasible dual
//! potentials, and is deterministic. Entropic solvers are deliberately
//! absent: verifying inequalities needs unbiased values.

use rayon::prelude::*;

use crate::cost::CostFunction;
use crate::error::{Error, Result};
use crate::linalg::dist;
use crate::measures::ParticleCloud;

/// Default cap on the support size of each marginal.
pub const DEFAULT_SUPPORT_LIMIT: usize = 4096;

/// Tolerance used when validating marginals and dual feasibility.
pub const MARGINAL_TOL: f64 = 1e-9;

/// An explicit coupling between two clouds, stored sparsely.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    m: usize,
    n: usize,
    entries: Vec<(usize, usize, f64)>,
    row_marginal: Vec<f64>,
    col_marginal: Vec<f64>,
    cost_value: f64,
}

impl TransportPlan {
    pub fn cost_value(&self) -> f64 {
        self.cost_value
    }

    pub fn entries(&self) -> &[(usize, usize, f64)] {
        &self.entries
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.m, self.n)
    }

    pub fn row_marginal(&self) -> &[f64] {
        &self.row_marginal
    }

    pub fn col_marginal(&self) -> &[f64] {
        &self.col_marginal
    }

    /// Materialize the dense m x n coupling matrix.
    pub fn dense_matrix(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.n];
        for &(i, j, f) in &self.entries {
            out[i * self.n + j] += f;
        }
        out
    }

    /// Check the coupling contract: nonnegative entries, marginals matching
    /// the clouds, and a consistent cost value.
    pub fn validate(&self, h: &CostFunction, mu: &ParticleCloud, sigma: &ParticleCloud) -> Result<()> {
        let mut rows = vec![0.0; self.m];
        let mut cols = vec![0.0; self.n];
        let mut cost = 0.0;
        for &(i, j, f) in &self.entries {
            if f < -1e-15 {
                return Err(Error::ContractViolation(format!("negative plan entry at ({i},{j})")));
            }
            rows[i] += f;
            cols[j] += f;
            cost += f * h.eval_unchecked(dist(mu.point(i), sigma.point(j)));
        }
        for (i, (&r, &w)) in rows.iter().zip(mu.weights()).enumerate() {
            if (r - w).abs() > MARGINAL_TOL {
                return Err(Error::ContractViolation(format!(
                    "row {i} marginal {r} differs from weight {w}"
                )));
            }
        }
        for (j, (&c, &w)) in cols.iter().zip(sigma.weights()).enumerate() {
            if (c - w).abs() > MARGINAL_TOL {
                return Err(Error::ContractViolation(format!(
                    "column {j} marginal {c} differs from weight {w}"
                )));
            }
        }
        if (cost - self.cost_value).abs() > MARGINAL_TOL {
            return Err(Error::ContractViolation(format!(
                "plan cost {cost} differs from recorded value {}",
                self.cost_value
            )));
        }
        Ok(())
    }
}

/// Kantorovich dual variables: one potential per source and target point.
#[derive(Clone, Debug)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

/// Value of the dual objective after verifying feasibility
/// `phi_i + psi_j <= h(|x_i - y_j|) + tol` on every pair.
pub fn dual_value(
    duals: &DualPotentials,
    h: &CostFunction,
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
) -> Result<f64> {
    if duals.phi.len() != mu.len() || duals.psi.len() != sigma.len() {
        return Err(Error::InvalidArgument(format!(
            "potential sizes ({}, {}) do not match cloud sizes ({}, {})",
            duals.phi.len(),
            duals.psi.len(),
            mu.len(),
            sigma.len()
        )));
    }
    let mut worst = f64::NEG_INFINITY;
    let mut worst_pair = (0usize, 0usize);
    for i in 0..mu.len() {
        for j in 0..sigma.len() {
            let slack = duals.phi[i] + duals.psi[j]
                - h.eval_unchecked(dist(mu.point(i), sigma.point(j)));
            if slack > worst {
                worst = slack;
                worst_pair = (i, j);
            }
        }
    }
    if worst > MARGINAL_TOL {
        return Err(Error::ContractViolation(format!(
            "dual pair infeasible: phi[{}] + psi[{}] exceeds the cost by {worst:.3e}",
            worst_pair.0, worst_pair.1
        )));
    }
    let mut v = 0.0;
    for (p, w) in duals.phi.iter().zip(mu.weights()) {
        v += p * w;
    }
    for (p, w) in duals.psi.iter().zip(sigma.weights()) {
        v += p * w;
    }
    Ok(v)
}

/// Exact Kantorovich cost with the default support limit.
pub fn kantorovich(
    h: &CostFunction,
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
) -> Result<(f64, TransportPlan, DualPotentials)> {
    kantorovich_with_limit(h, mu, sigma, DEFAULT_SUPPORT_LIMIT)
}

/// Exact Kantorovich cost, optimal coupling and feasible duals.
pub fn kantorovich_with_limit(
    h: &CostFunction,
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
    limit: usize,
) -> Result<(f64, TransportPlan, DualPotentials)> {
    if mu.dim() != sigma.dim() {
        return Err(Error::InvalidArgument(format!(
            "dimension mismatch: {} vs {}",
            mu.dim(),
            sigma.dim()
        )));
    }
    if mu.len() > limit || sigma.len() > limit {
        return Err(Error::Capacity(format!(
            "support sizes {} x {} exceed the configured limit {limit}",
            mu.len(),
            sigma.len()
        )));
    }
    let m = mu.len();
    let n = sigma.len();
    // Dense cost matrix; rows assembled in parallel, result order fixed.
    let cost: Vec<f64> = (0..m)
        .into_par_iter()
        .flat_map_iter(|i| {
            let xi = mu.point(i);
            (0..n).map(move |j| h.eval_unchecked(dist(xi, sigma.point(j))))
        })
        .collect();
    let mcf = solve_transport(&cost, mu.weights(), sigma.weights())?;

    let mut row = vec![0.0; m];
    let mut col = vec![0.0; n];
    let mut total = 0.0;
    for &(i, j, f) in &mcf.entries {
        row[i] += f;
        col[j] += f;
        total += f * cost[i * n + j];
    }
    let total = total.max(0.0);
    let plan = TransportPlan {
        m,
        n,
        entries: mcf.entries,
        row_marginal: row,
        col_marginal: col,
        cost_value: total,
    };
    let duals = DualPotentials { phi: mcf.phi, psi: mcf.psi };
    Ok((total, plan, duals))
}

/// Exact minimum over all permutation couplings of two equal-size,
/// uniform-weight clouds. Optimal by Birkhoff extremality, usable as an
/// independent oracle for [`kantorovich`] up to n = 8.
pub fn kantorovich_bruteforce(
    h: &CostFunction,
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
) -> Result<f64> {
    let n = mu.len();
    if n != sigma.len() || n > 8 {
        return Err(Error::Capacity(format!(
            "brute force requires equal supports of size <= 8, got {} x {}",
            n,
            sigma.len()
        )));
    }
    if mu.dim() != sigma.dim() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let uniform = 1.0 / n as f64;
    let is_uniform = |c: &ParticleCloud| c.weights().iter().all(|w| (w - uniform).abs() < 1e-12);
    if !is_uniform(mu) || !is_uniform(sigma) {
        return Err(Error::Capacity("brute force requires uniform weights".into()));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = h.eval_unchecked(dist(mu.point(i), sigma.point(j)));
        }
    }
    // Heap's algorithm over all permutations.
    let mut perm: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    let eval = |p: &[usize]| -> f64 { p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum() };
    let mut best = eval(&perm);
    let mut i = 0;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(stack[i], i);
            }
            best = best.min(eval(&perm));
            stack[i] += 1;
            i = 0;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
    Ok(best * uniform)
}

/// Cost of the index-paired coupling of two clouds with identical weight
/// vectors. Any explicit coupling bounds the Kantorovich cost from above.
pub fn synchronous_upper_bound(
    h: &CostFunction,
    mu: &ParticleCloud,
    sigma: &ParticleCloud,
) -> Result<f64> {
    if mu.len() != sigma.len() || mu.dim() != sigma.dim() {
        return Err(Error::InvalidArgument(
            "paired bound requires clouds of equal size and dimension".into(),
        ));
    }
    for (i, (a, b)) in mu.weights().iter().zip(sigma.weights()).enumerate() {
        if (a - b).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "weight vectors differ at index {i}: {a} vs {b}"
            )));
        }
    }
    let mut acc = 0.0;
    for i in 0..mu.len() {
        acc += mu.weight(i) * h.eval_unchecked(dist(mu.point(i), sigma.point(i)));
    }
    Ok(acc)
}

struct McfSolution {
    entries: Vec<(usize, usize, f64)>,
    phi: Vec<f64>,
    psi: Vec<f64>,
}

/// Successive shortest augmenting paths with Johnson potentials on the
/// complete bipartite transportation graph. Supplies and demands are the
/// cloud weights; arc costs are the entries of `cost` (row-major m x n).
fn solve_transport(cost: &[f64], supply_in: &[f64], demand_in: &[f64]) -> Result<McfSolution> {
    let m = supply_in.len();
    let n = demand_in.len();
    debug_assert_eq!(cost.len(), m * n);
    let nv = m + n;

    let mut supply = supply_in.to_vec();
    let mut demand = demand_in.to_vec();
    let mut remaining: f64 = supply.iter().sum::<f64>().min(demand.iter().sum());
    // flow arcs grouped per sink: flows[j] = list of (source, amount)
    let mut flows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut potential = vec![0.0; nv];

    let mut distv = vec![0.0f64; nv];
    let mut visited = vec![false; nv];
    let mut parent = vec![usize::MAX; nv];

    let max_augmentations = 64 * nv + 4096;
    let mut augmentations = 0usize;

    while remaining > 1e-14 {
        augmentations += 1;
        if augmentations > max_augmentations {
            return Err(Error::Numerical(format!(
                "transport solver exceeded {max_augmentations} augmentations"
            )));
        }
        // Multi-source Dijkstra under reduced costs.
        for v in 0..nv {
            distv[v] = f64::INFINITY;
            visited[v] = false;
            parent[v] = usize::MAX;
        }
        for (i, &s) in supply.iter().enumerate() {
            if s > 0.0 {
                distv[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        let mut target_dist = f64::INFINITY;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..nv {
                if !visited[v] && distv[v] < best {
                    best = distv[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            visited[u] = true;
            if u >= m && demand[u - m] > 0.0 {
                target = u;
                target_dist = distv[u];
                break;
            }
            if u < m {
                // forward arcs to every sink
                let base = u * n;
                let du = distv[u];
                let pu = potential[u];
                for j in 0..n {
                    let v = m + j;
                    if visited[v] {
                        continue;
                    }
                    let rc = (cost[base + j] + pu - potential[v]).max(0.0);
                    let nd = du + rc;
                    if nd < distv[v] {
                        distv[v] = nd;
                        parent[v] = u;
                    }
                }
            } else {
                // backward arcs along existing flow
                let j = u - m;
                let du = distv[u];
                let pu = potential[u];
                for &(i, f) in &flows[j] {
                    if f <= 0.0 || visited[i] {
                        continue;
                    }
                    let rc = (-cost[i * n + j] + pu - potential[i]).max(0.0);
                    let nd = du + rc;
                    if nd < distv[i] {
                        distv[i] = nd;
                        parent[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            // No sink with demand is reachable; with a complete bipartite
            // graph this only happens when demands are exhausted by
            // round-off. The residue is below the marginal tolerance.
            break;
        }
        for v in 0..nv {
            potential[v] += distv[v].min(target_dist);
        }
        // Find bottleneck along the augmenting path.
        let mut delta = demand[target - m];
        let mut v = target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if v < m {
                // backward arc (sink u -> source v) reduces flow on (v, u-m)
                let j = u - m;
                let f = flows[j]
                    .iter()
                    .find(|(i, _)| *i == v)
                    .map(|(_, f)| *f)
                    .unwrap_or(0.0);
                delta = delta.min(f);
            }
            v = u;
        }
        delta = delta.min(supply[v]);
        if delta <= 0.0 {
            break; // exhausted by rounding; residue below tolerance
        }
        let root = v;
        // Apply the augmentation.
        let mut v = target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if v >= m {
                let j = v - m;
                match flows[j].iter_mut().find(|(i, _)| *i == u) {
                    Some(entry) => entry.1 += delta,
                    None => flows[j].push((u, delta)),
                }
            } else {
                let j = u - m;
                if let Some(pos) = flows[j].iter().position(|(i, _)| *i == v) {
                    flows[j][pos].1 -= delta;
                    if flows[j][pos].1 <= 0.0 {
                        flows[j].swap_remove(pos);
                    }
                }
            }
            v = u;
        }
        supply[root] -= delta;
        demand[target - m] -= delta;
        remaining -= delta;
    }

    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for (j, arcs) in flows.iter().enumerate() {
        for &(i, f) in arcs {
            if f > 0.0 {
                entries.push((i, j, f));
            }
        }
    }
    entries.sort_unstable_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));

    let phi = (0..m).map(|i| -potential[i]).collect();
    let psi = (0..n).map(|j| potential[m + j]).collect();
    Ok(McfSolution { entries, phi, psi })
}
