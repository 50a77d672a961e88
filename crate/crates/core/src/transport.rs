//! Quadratic transport costs to the standard Gaussian, empirical
//! assignment and entropic solvers, Kantorovich dual pairs, and the
//! transport-entropy checks built on them.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::measures::{batch_id, Combination, Estimate, TiltedMeasure};
use crate::potentials::{dot, Family, Potential};
use crate::report::{CheckName, Diagnostic, InequalityReport, Term};
use crate::samplers::{SampleBatch, SampleSource};
use crate::stats;

/// Largest batch the exact assignment solver accepts.
pub const MAX_ASSIGNMENT: usize = 4096;
/// Default feasibility slack for dual pairs.
pub const DEFAULT_SLACK: f64 = 1e-9;

fn is_psd(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let scale = m.amax().max(1.0);
    if (m - m.transpose()).amax() > 1e-12 * scale {
        return Err(Error::Parameter("covariance is not symmetric".into()));
    }
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < -1e-12 * scale {
        return Err(Error::Parameter(format!(
            "covariance is not positive semidefinite (eigenvalue {min:e})"
        )));
    }
    Ok(eig)
}

fn psd_sqrt(eig: &SymmetricEigen<f64, nalgebra::Dyn>) -> DMatrix<f64> {
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// `W₂²` between `N(m₁, C₁)` and `N(m₂, C₂)`; covariances are row-major
/// `n × n`.
pub fn w2_gaussian_closed_form(mean1: &[f64], cov1: &[f64], mean2: &[f64], cov2: &[f64]) -> Result<f64> {
    let n = mean1.len();
    check_dim(n, mean2.len())?;
    check_dim(n * n, cov1.len())?;
    check_dim(n * n, cov2.len())?;
    let shift: f64 = mean1.iter().zip(mean2).map(|(a, b)| (a - b) * (a - b)).sum();
    let c1 = DMatrix::from_row_slice(n, n, cov1);
    let c2 = DMatrix::from_row_slice(n, n, cov2);
    is_psd(&c1)?;
    let e2 = is_psd(&c2)?;
    let diagonal = |c: &DMatrix<f64>| (0..n).all(|i| (0..n).all(|j| i == j || c[(i, j)] == 0.0));
    if diagonal(&c1) && diagonal(&c2) {
        let spread: f64 = (0..n)
            .map(|i| (c1[(i, i)].max(0.0).sqrt() - c2[(i, i)].max(0.0).sqrt()).powi(2))
            .sum();
        return Ok(shift + spread);
    }
    let s2 = psd_sqrt(&e2);
    let middle = &s2 * &c1 * &s2;
    let middle = (&middle + middle.transpose()) * 0.5;
    let root_trace: f64 = middle.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((shift + c1.trace() + c2.trace() - 2.0 * root_trace).max(0.0))
}

/// `W₂²` between two one-dimensional empirical measures of equal size via
/// the monotone rearrangement.
pub fn sorted_coupling_cost(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    Ok(stats::pairwise_sum(&d) / a.len() as f64)
}

/// Minimum-cost perfect matching on a dense row-major `n × n` cost matrix
/// by successive shortest augmenting paths with dual potentials.
/// Returns the column assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.fill(inf);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = row[j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

fn cost_matrix(left: &SampleBatch, right: &SampleBatch) -> Vec<f64> {
    let m = right.count();
    let mut cost = vec![0.0; left.count() * m];
    cost.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        let x = left.point(i);
        for (j, c) in row.iter_mut().enumerate() {
            *c = x.iter().zip(right.point(j)).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    });
    cost
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum W2Method {
    ExactAssignment,
    Entropic { epsilon: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Assignment {
    /// `perm[i]` is the right point matched to left point `i`.
    Permutation(Vec<usize>),
    /// Row-major `count × count` transport plan.
    Dense { count: usize, mass: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingPlan {
    pub dim: usize,
    pub left: Vec<f64>,
    pub right: Vec<f64>,
    pub assignment: Assignment,
    /// `∫ |x − y|² dπ` under the plan.
    pub cost: f64,
    /// Sinkhorn divergence `OT_ε(x,y) − ½OT_ε(x,x) − ½OT_ε(y,y)`.
    pub debiased_cost: Option<f64>,
    pub epsilon: Option<f64>,
    /// Largest deviation of a row or column sum from `1/count`.
    pub marginal_error: f64,
}

impl CouplingPlan {
    pub fn count(&self) -> usize {
        self.left.len() / self.dim
    }

    /// Writes `i j mass` lines for every entry with at least `min_mass`.
    pub fn write_triples<W: Write>(&self, mut out: W, min_mass: f64) -> Result<()> {
        let n = self.count();
        match &self.assignment {
            Assignment::Permutation(perm) => {
                for (i, j) in perm.iter().enumerate() {
                    writeln!(out, "{i} {j} {:.17e}", 1.0 / n as f64)?;
                }
            }
            Assignment::Dense { count, mass } => {
                for (k, m) in mass.iter().enumerate() {
                    if *m >= min_mass {
                        writeln!(out, "{} {} {m:.17e}", k / count, k % count)?;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let n = self.count();
        match &self.assignment {
            Assignment::Permutation(_) => vec![1.0 / n as f64; n],
            Assignment::Dense { count, mass } => mass.chunks(*count).map(|r| r.iter().sum()).collect(),
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let n = self.count();
        match &self.assignment {
            Assignment::Permutation(_) => vec![1.0 / n as f64; n],
            Assignment::Dense { count, mass } => {
                let mut cols = vec![0.0; *count];
                for r in mass.chunks(*count) {
                    for (c, m) in cols.iter_mut().zip(r) {
                        *c += m;
                    }
                }
                cols
            }
        }
    }
}

/// Empirical `W₂²` between two equal-size batches, returned with the plan.
/// For the entropic method the returned value is the debiased cost.
pub fn w2_empirical(left: &SampleBatch, right: &SampleBatch, method: W2Method) -> Result<(f64, CouplingPlan)> {
    check_dim(left.dim(), right.dim())?;
    let n = left.count();
    if n != right.count() {
        return Err(Error::Parameter(format!(
            "batches have {n} and {} points",
            right.count()
        )));
    }
    if n == 0 {
        return Err(Error::Parameter("empty batches".into()));
    }
    match method {
        W2Method::ExactAssignment => {
            if n > MAX_ASSIGNMENT {
                return Err(Error::Parameter(format!(
                    "exact assignment is limited to {MAX_ASSIGNMENT} points, got {n}"
                )));
            }
            let cost = cost_matrix(left, right);
            let perm = solve_assignment(&cost, n);
            let terms: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).collect();
            let value = stats::pairwise_sum(&terms) / n as f64;
            Ok((
                value,
                CouplingPlan {
                    dim: left.dim(),
                    left: left.as_flat().to_vec(),
                    right: right.as_flat().to_vec(),
                    assignment: Assignment::Permutation(perm),
                    cost: value,
                    debiased_cost: None,
                    epsilon: None,
                    marginal_error: 0.0,
                },
            ))
        }
        W2Method::Entropic { epsilon } => {
            if !(epsilon > 0.0) {
                return Err(Error::Parameter(format!("epsilon must be positive, got {epsilon}")));
            }
            let cost = cost_matrix(left, right);
            let xy = sinkhorn(&cost, n, epsilon, SINKHORN_TOLERANCE)?;
            let xx = sinkhorn_symmetric(&cost_matrix(left, left), n, epsilon, SINKHORN_TOLERANCE)?;
            let yy = sinkhorn_symmetric(&cost_matrix(right, right), n, epsilon, SINKHORN_TOLERANCE)?;
            let debiased = xy.dual_value - 0.5 * (xx + yy);
            let mass = xy.plan(&cost, n);
            let plan_cost = mass.iter().zip(&cost).map(|(p, c)| p * c).sum();
            let mut plan = CouplingPlan {
                dim: left.dim(),
                left: left.as_flat().to_vec(),
                right: right.as_flat().to_vec(),
                assignment: Assignment::Dense { count: n, mass },
                cost: plan_cost,
                debiased_cost: Some(debiased),
                epsilon: Some(epsilon),
                marginal_error: 0.0,
            };
            let target = 1.0 / n as f64;
            plan.marginal_error = plan
                .row_sums()
                .into_iter()
                .chain(plan.column_sums())
                .map(|s| (s - target).abs())
                .fold(0.0, f64::max);
            Ok((debiased, plan))
        }
    }
}

/// Marginal accuracy required of the entropic solver.
pub const SINKHORN_TOLERANCE: f64 = 1e-8;
const SINKHORN_MAX_ITERATIONS: usize = 200_000;

struct SinkhornSolution {
    f: Vec<f64>,
    g: Vec<f64>,
    epsilon: f64,
    /// `Σ a_i f_i + Σ b_j g_j`, the entropic transport value.
    dual_value: f64,
}

impl SinkhornSolution {
    fn plan(&self, cost: &[f64], n: usize) -> Vec<f64> {
        let w = 1.0 / (n * n) as f64;
        let mut mass = vec![0.0; n * n];
        mass.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
            for (j, m) in row.iter_mut().enumerate() {
                *m = w * ((self.f[i] + self.g[j] - cost[i * n + j]) / self.epsilon).exp();
            }
        });
        mass
    }
}

/// `−ε log Σ_j (1/n) exp((h_j − C_ij)/ε)` for every row `i`, reading the
/// cost transposed when `transposed` is set.
fn soft_min(cost: &[f64], n: usize, h: &[f64], eps: f64, transposed: bool, out: &mut [f64]) {
    let log_n = (n as f64).ln();
    out.par_iter_mut().with_min_len(32).enumerate().for_each(|(i, o)| {
        let c = |j: usize| if transposed { cost[j * n + i] } else { cost[i * n + j] };
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            max = max.max((h[j] - c(j)) / eps);
        }
        let mut s = 0.0;
        for j in 0..n {
            s += ((h[j] - c(j)) / eps - max).exp();
        }
        *o = -eps * (max + s.ln() - log_n);
    });
}

/// Log-domain Sinkhorn with uniform marginals and an ε-scaling schedule
/// that starts at 1 and halves down to the target.
fn sinkhorn(cost: &[f64], n: usize, epsilon: f64, tolerance: f64) -> Result<SinkhornSolution> {
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut f_new = vec![0.0; n];
    let mut eps = epsilon.max(1.0);
    let mut iterations = 0;
    let a = 1.0 / n as f64;
    loop {
        let last = eps <= epsilon;
        let stage_tol = if last { tolerance } else { tolerance.max(1e-5) };
        loop {
            soft_min(cost, n, &f, eps, true, &mut g);
            soft_min(cost, n, &g, eps, false, &mut f_new);
            // row sums of the plan built from (f, g) are a·exp((f − f_new)/ε)
            let residual = f
                .iter()
                .zip(&f_new)
                .map(|(old, new)| a * (((old - new) / eps).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            iterations += 1;
            if residual <= stage_tol {
                break;
            }
            std::mem::swap(&mut f, &mut f_new);
            if iterations >= SINKHORN_MAX_ITERATIONS {
                return Err(Error::NotConverged { iterations, residual });
            }
        }
        if last {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }
    let dual_value = a * (stats::pairwise_sum(&f) + stats::pairwise_sum(&g));
    Ok(SinkhornSolution {
        f,
        g,
        epsilon,
        dual_value,
    })
}

/// Entropic self-transport value `OT_ε(x, x)`. The symmetric problem has a
/// single potential; the averaged update `f ← ½(f + T(f))` converges far
/// faster than alternating updates, which oscillate on it.
fn sinkhorn_symmetric(cost: &[f64], n: usize, epsilon: f64, tolerance: f64) -> Result<f64> {
    let mut f = vec![0.0; n];
    let mut t = vec![0.0; n];
    let mut eps = epsilon.max(1.0);
    let mut iterations = 0;
    let a = 1.0 / n as f64;
    loop {
        let last = eps <= epsilon;
        let stage_tol = if last { tolerance } else { tolerance.max(1e-5) };
        loop {
            soft_min(cost, n, &f, eps, false, &mut t);
            let residual = f
                .iter()
                .zip(&t)
                .map(|(old, new)| a * (((old - new) / eps).exp() - 1.0).abs())
                .fold(0.0, f64::max);
            iterations += 1;
            if residual <= stage_tol {
                break;
            }
            if iterations >= SINKHORN_MAX_ITERATIONS {
                return Err(Error::NotConverged { iterations, residual });
            }
            for (fi, ti) in f.iter_mut().zip(&t) {
                *fi = 0.5 * (*fi + ti);
            }
        }
        if last {
            break;
        }
        eps = (eps * 0.5).max(epsilon);
    }
    Ok(2.0 * a * stats::pairwise_sum(&f))
}

/// Collinear-center reduction of a Gaussian mixture `Σ p_i N(α_i, Id)`:
/// positions `s_i` of the centers along a unit direction and the squared
/// norm of their common component orthogonal to it.
fn collinear_reduction(centers: &[Vec<f64>]) -> Option<(Vec<f64>, f64)> {
    let base = &centers[0];
    let diffs: Vec<Vec<f64>> = centers
        .iter()
        .map(|a| a.iter().zip(base).map(|(x, y)| x - y).collect())
        .collect();
    let far = diffs
        .iter()
        .max_by(|a, b| dot(a, a).total_cmp(&dot(b, b)))
        .unwrap();
    let len = dot(far, far).sqrt();
    let scale = 1.0 + centers.iter().map(|a| dot(a, a).sqrt()).fold(0.0, f64::max);
    if len <= 1e-14 * scale {
        return Some((vec![0.0], dot(base, base)));
    }
    let u: Vec<f64> = far.iter().map(|v| v / len).collect();
    for d in &diffs {
        let along = dot(d, &u);
        let off: f64 = d.iter().zip(&u).map(|(x, y)| (x - along * y).powi(2)).sum();
        if off.sqrt() > 1e-10 * scale {
            return None;
        }
    }
    let positions = centers.iter().map(|a| dot(a, &u)).collect();
    let b_along = dot(base, &u);
    let perp: f64 = base.iter().zip(&u).map(|(x, y)| (x - b_along * y).powi(2)).sum();
    Some((positions, perp))
}

/// Quantile of `Σ p_i N(s_i, 1)` at probability `Φ(z)`. The root is
/// bracketed by `z + min s_i` and `z + max s_i`; bisection runs on the tail
/// nearer to `x` so that probabilities far from the median keep their
/// relative accuracy.
fn mixture_quantile(weights: &[f64], positions: &[f64], z: f64) -> f64 {
    let lo_s = positions.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi_s = positions.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let upper = z > 0.0;
    let target = stats::normal_cdf(-z.abs());
    // lower tail F(x) or upper tail 1 − F(x), each computed without cancellation
    let tail = |x: f64| -> f64 {
        weights
            .iter()
            .zip(positions)
            .map(|(p, s)| p * if upper { stats::normal_cdf(s - x) } else { stats::normal_cdf(x - s) })
            .sum()
    };
    let (mut a, mut b) = (z + lo_s, z + hi_s);
    loop {
        let mid = 0.5 * (a + b);
        if mid <= a || mid >= b {
            return mid;
        }
        // F is increasing; the upper tail is decreasing
        if (tail(mid) < target) != upper {
            a = mid;
        } else {
            b = mid;
        }
    }
}

/// `W₂²(Σ p_i N(s_i, 1), N(0, 1))` as `∫ (q(z) − z)² φ(z) dz` with `q` the
/// mixture quantile at `Φ(z)`.
pub fn w2_squared_mixture_1d(weights: &[f64], positions: &[f64]) -> f64 {
    const HALF_WIDTH: f64 = 12.0;
    const NODES: usize = 4801;
    let h = 2.0 * HALF_WIDTH / (NODES - 1) as f64;
    let values: Vec<f64> = (0..NODES)
        .into_par_iter()
        .map(|k| {
            let z = -HALF_WIDTH + k as f64 * h;
            let d = mixture_quantile(weights, positions, z) - z;
            let w = if k == 0 || k == NODES - 1 { 0.5 } else { 1.0 };
            w * d * d * stats::normal_pdf(z)
        })
        .collect();
    h * stats::pairwise_sum(&values)
}

/// `W₂²(ν, γ)` from a closed form (Linear, ScaledQuadratic) or the 1-d
/// quantile quadrature (LogSumExp with affinely collinear centers);
/// `None` when neither applies.
pub fn w2_squared_to_gamma(p: &Potential) -> Option<Estimate> {
    let n = p.dim() as f64;
    match p.family() {
        Family::Linear { alpha } => Some(Estimate::analytic(dot(alpha, alpha))),
        Family::ScaledQuadratic { s } => {
            let sigma = (1.0 / (1.0 + s)).sqrt();
            Some(Estimate::analytic(n * (1.0 - sigma).powi(2)))
        }
        Family::LogSumExp { weights, centers, .. } => {
            let (positions, perp) = collinear_reduction(centers)?;
            if positions.len() == 1 {
                return Some(Estimate::analytic(perp));
            }
            Some(Estimate::quadrature(w2_squared_mixture_1d(weights, &positions) + perp))
        }
        Family::BlackBox(_) => None,
    }
}

/// Empirical `W₂²` between a batch from `ν` and a batch from `γ`, with an
/// SE from the matched squared displacements and an upward-bias allowance
/// equal to the empirical cost between two independent `γ` batches of the
/// same size (the finite-sample inflation seen when the true cost is zero).
pub fn w2_squared_empirical_to_gamma(
    nu: &SampleBatch,
    gamma: &SampleBatch,
    gamma_null: &SampleBatch,
) -> Result<Estimate> {
    for b in [gamma, gamma_null] {
        if b.source() != SampleSource::Gamma {
            return Err(Error::WrongMeasure("reference batches must come from γ".into()));
        }
    }
    let matched = |a: &SampleBatch, b: &SampleBatch| -> Result<Vec<f64>> {
        if a.dim() == 1 {
            let mut x = a.as_flat().to_vec();
            let mut y = b.as_flat().to_vec();
            check_dim(x.len(), y.len())?;
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            Ok(x.iter().zip(&y).map(|(u, v)| (u - v) * (u - v)).collect())
        } else {
            let (_, plan) = w2_empirical(a, b, W2Method::ExactAssignment)?;
            let Assignment::Permutation(perm) = plan.assignment else { unreachable!() };
            Ok(perm
                .iter()
                .enumerate()
                .map(|(i, &j)| a.point(i).iter().zip(b.point(j)).map(|(u, v)| (u - v) * (u - v)).sum())
                .collect())
        }
    };
    let d = matched(nu, gamma)?;
    let null = matched(gamma, gamma_null)?;
    let m = stats::mean_se(&d);
    Ok(Estimate::monte_carlo(m.mean, m.se, m.count).with_upward_bias(stats::mean_se(&null).mean))
}

/// `(1/2C) W₂² ≤ D_KL` for `μ = γ`; `C = 1` is Talagrand's inequality.
pub fn check_transport_general(m: &TiltedMeasure, kl: &Estimate, w2sq: &Estimate, c: f64) -> Result<InequalityReport> {
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }
    let lhs = Combination::new().add(0.5 / c, w2sq);
    let rhs = Combination::new().add(1.0, kl);
    let terms = vec![Term::new("W2sq", w2sq), Term::new("KL", kl)];
    let mut r = InequalityReport::assess(CheckName::Talagrand, &lhs, &rhs, terms, 0.0);
    if c != 1.0 {
        r = r.with_note(format!("constant C = {c}"));
    }
    if c < 1.0 {
        r = r.with_note("γ is only known to satisfy the inequality for C ≥ 1");
    }
    Ok(r.with_note(format!("measure {} (n = {})", m.name, m.dim())))
}

/// `½W₂²(ν, γ) ≤ D_KL(ν‖γ)`.
pub fn check_talagrand(m: &TiltedMeasure, kl: &Estimate, w2sq: &Estimate) -> InequalityReport {
    check_transport_general(m, kl, w2sq, 1.0).expect("C = 1 is valid")
}

type Field = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Candidate Kantorovich potentials `(φ, ψ)` for the cost `½|x − y|²`.
#[derive(Clone)]
pub struct DualPair {
    pub phi: Field,
    pub psi: Field,
    pub slack_tolerance: f64,
}

impl std::fmt::Debug for DualPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DualPair")
            .field("slack_tolerance", &self.slack_tolerance)
            .finish_non_exhaustive()
    }
}

impl DualPair {
    pub fn new(
        phi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        psi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        DualPair {
            phi: Arc::new(phi),
            psi: Arc::new(psi),
            slack_tolerance: DEFAULT_SLACK,
        }
    }

    /// `φ(x) = sup_{t∈K} [⟨x,t⟩ − ½|t|²]`, `ψ(y) = −sup_{t∈K} ⟨y,t⟩` for the
    /// gradient set `K` of `p`, which must admit exact evaluation.
    pub fn from_gradient_set(p: &Potential) -> Result<Self> {
        let set = p.gradient_set();
        if !set.is_exact() {
            return Err(Error::NotApplicable(
                "dual candidate needs an exactly described gradient set".into(),
            ));
        }
        let s1 = set.clone();
        Ok(DualPair::new(
            move |x| s1.z_value(x).unwrap(),
            move |y| -set.support(y).unwrap(),
        ))
    }

    /// The same pair with `φ` raised by `delta`.
    pub fn shifted(self, delta: f64) -> Self {
        let phi = self.phi.clone();
        DualPair {
            phi: Arc::new(move |x| phi(x) + delta),
            ..self
        }
    }

    pub fn with_slack(mut self, slack: f64) -> Self {
        self.slack_tolerance = slack;
        self
    }
}

/// Largest `φ(x) + ψ(y) − ½|x − y|²` over all pairs drawn from the two
/// batches; passes when it does not exceed the pair's slack.
pub fn check_dual_feasibility(pair: &DualPair, left: &SampleBatch, right: &SampleBatch) -> Result<Diagnostic> {
    check_dim(left.dim(), right.dim())?;
    let phi: Vec<f64> = left.rows().map(|x| (pair.phi)(x)).collect();
    let psi: Vec<f64> = right.rows().map(|y| (pair.psi)(y)).collect();
    let (worst, wi, wj) = (0..left.count())
        .into_par_iter()
        .map(|i| {
            let x = left.point(i);
            let mut best = (f64::NEG_INFINITY, i, 0);
            for (j, y) in right.rows().enumerate() {
                let d: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
                let v = phi[i] + psi[j] - 0.5 * d;
                if v > best.0 {
                    best = (v, i, j);
                }
            }
            best
        })
        .reduce(|| (f64::NEG_INFINITY, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
    Ok(Diagnostic::new("dual_feasibility", worst, pair.slack_tolerance)
        .detail("pairs", (left.count() * right.count()) as f64)
        .detail("worst_left", wi as f64)
        .detail("worst_right", wj as f64))
}

/// `∫φ dν + ∫ψ dγ`, a lower bound on `½W₂²(ν, γ)` for a feasible pair.
pub fn dual_lower_bound(pair: &DualPair, nu: &SampleBatch, gamma: &SampleBatch) -> Result<Estimate> {
    check_dim(nu.dim(), gamma.dim())?;
    let phi = Estimate::from_draws(batch_id(nu), nu.rows().map(|x| (pair.phi)(x)).collect(), 0.0, 0.0);
    let psi = Estimate::from_draws(batch_id(gamma), gamma.rows().map(|y| (pair.psi)(y)).collect(), 0.0, 0.0);
    Ok(Combination::new().add(1.0, &phi).add(1.0, &psi).estimate())
}

/// `C log ∫ e^{Z/C} dγ ≤ ∫ sup_{t∈K} ⟨y,t⟩ dγ` with
/// `Z(x) = sup_{t∈K} [⟨x,t⟩ − ½|t|²]`; `C = 1` is the Gaussian case.
/// Both sides are estimated on the same γ batch and compared draw-by-draw.
pub fn check_vitale(p: &Potential, gamma_batch: &SampleBatch, c: f64) -> Result<InequalityReport> {
    check_dim(p.dim(), gamma_batch.dim())?;
    if gamma_batch.source() != SampleSource::Gamma {
        return Err(Error::WrongMeasure("check needs draws from γ".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(Error::Parameter(format!("C must be positive, got {c}")));
    }
    let set = p.gradient_set();
    if !set.is_exact() {
        let why = match set {
            crate::potentials::GradientSet::Unbounded => "gradient set is unbounded",
            _ => "gradient set has no exact description",
        };
        return Ok(InequalityReport::not_applicable(CheckName::Vitale, why, vec![]));
    }
    let id = batch_id(gamma_batch);
    let scaled: Vec<f64> = gamma_batch.rows().map(|y| set.z_value(y).unwrap() / c).collect();
    let (lme, _) = stats::log_mean_exp(&scaled);
    let lhs_value = c * lme;
    // influence function of C·log(mean e^{Z/C}): C·(w_i/w̄ − 1)
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let w_mean = stats::pairwise_sum(&w) / w.len() as f64;
    let influence: Vec<f64> = w.iter().map(|wi| c * (wi / w_mean - 1.0)).collect();
    let lhs = Estimate::from_draws(id, influence, lhs_value, 0.0);
    let width = Estimate::from_draws(id, gamma_batch.rows().map(|y| set.support(y).unwrap()).collect(), 0.0, 0.0);
    let terms = vec![Term::new("log_mgf_Z", &lhs), Term::new("D", &width)];
    let mut r = InequalityReport::assess(
        CheckName::Vitale,
        &Combination::new().add(1.0, &lhs),
        &Combination::new().add(1.0, &width),
        terms,
        0.0,
    );
    if c != 1.0 {
        r = r.with_note(format!("constant C = {c}"));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{make_linear, make_logsumexp, make_scaled_quadratic};
    use crate::report::Verdict;
    use crate::samplers::{quadrature_oracle, sample_gamma, sample_nu_exact, Functional, QuadratureGrid, RngStream};
    use proptest::prelude::*;

    fn identity(n: usize) -> Vec<f64> {
        let mut m = vec![0.0; n * n];
        for i in 0..n {
            m[i * n + i] = 1.0;
        }
        m
    }

    fn batch1(values: Vec<f64>) -> SampleBatch {
        SampleBatch::from_points(1, values, SampleSource::Gamma).unwrap()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn gaussian_closed_form_cases() {
        let i2 = identity(2);
        assert_eq!(w2_gaussian_closed_form(&[0.3, 1.0], &i2, &[0.3, 1.0], &i2).unwrap(), 0.0);
        let w = w2_gaussian_closed_form(&[0.6, 0.8], &i2, &[0.0, 0.0], &i2).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
        let w = w2_gaussian_closed_form(&[0.0], &[0.5], &[0.0], &[1.0]).unwrap();
        assert!((w - (1.0 - 0.5f64.sqrt()).powi(2)).abs() < 1e-15);
        assert!((w - 0.085_786_437_626_904_9).abs() < 1e-15);
        assert!(w2_gaussian_closed_form(&[0.0], &[-1.0], &[0.0], &[1.0]).is_err());
        assert!(w2_gaussian_closed_form(&[0.0, 0.0], &[1.0, 0.5, 0.4, 1.0], &[0.0, 0.0], &i2).is_err());
    }

    #[test]
    fn general_covariances_match_commuting_formula() {
        // rotate diag(2, 0.5) and diag(1, 3) by the same angle: they commute
        let (c, s) = (0.6f64, 0.8f64);
        let rot = |a: f64, b: f64| vec![a * c * c + b * s * s, (a - b) * c * s, (a - b) * c * s, a * s * s + b * c * c];
        let w = w2_gaussian_closed_form(&[1.0, 0.0], &rot(2.0, 0.5), &[0.0, 0.0], &rot(1.0, 3.0)).unwrap();
        let expected = 1.0 + (2f64.sqrt() - 1.0).powi(2) + (0.5f64.sqrt() - 3f64.sqrt()).powi(2);
        assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
    }

    #[test]
    fn identical_batches_have_zero_cost_and_identity_assignment() {
        let b = sample_gamma(3, 50, &RngStream::new(1, 0)).unwrap();
        let (w, plan) = w2_empirical(&b, &b, W2Method::ExactAssignment).unwrap();
        assert_eq!(w, 0.0);
        assert_eq!(plan.assignment, Assignment::Permutation((0..50).collect()));
    }

    #[test]
    fn assignment_matches_brute_force() {
        for trial in 0..30 {
            let n = 1 + trial % 8;
            let dim = 1 + trial % 3;
            let a = sample_gamma(dim, n, &RngStream::new(trial as u64, 1)).unwrap();
            let b = sample_gamma(dim, n, &RngStream::new(trial as u64, 2)).unwrap();
            let cost = cost_matrix(&a, &b);
            let best = permutations(n)
                .into_iter()
                .map(|p| p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            let perm = solve_assignment(&cost, n);
            let got: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
            assert!((got - best).abs() < 1e-12, "n={n}: {got} vs {best}");
        }
    }

    #[test]
    fn shifted_normal_w2_within_bias_band() {
        let g = sample_gamma(1, 2048, &RngStream::new(3, 0)).unwrap();
        let shifted = batch1(sample_gamma(1, 2048, &RngStream::new(3, 1)).unwrap().as_flat().iter().map(|v| v + 1.0).collect());
        let (w, _) = w2_empirical(&shifted, &g, W2Method::ExactAssignment).unwrap();
        assert!((w - 1.0).abs() < 0.08, "{w}");
        let sorted = sorted_coupling_cost(shifted.as_flat(), g.as_flat()).unwrap();
        assert!((w - sorted).abs() <= 1e-12 * sorted, "{w} vs {sorted}");
    }

    #[test]
    fn entropic_plan_has_uniform_marginals_and_dominates_exact() {
        let a = sample_gamma(2, 64, &RngStream::new(4, 0)).unwrap();
        let b = sample_gamma(2, 64, &RngStream::new(4, 1)).unwrap();
        let (exact, _) = w2_empirical(&a, &b, W2Method::ExactAssignment).unwrap();
        let (_, plan) = w2_empirical(&a, &b, W2Method::Entropic { epsilon: 0.1 }).unwrap();
        assert!(plan.marginal_error <= 1e-8, "{}", plan.marginal_error);
        assert!(plan.cost >= exact - 1e-7);
        let mut out = Vec::new();
        plan.write_triples(&mut out, 1e-12).unwrap();
        let text = String::from_utf8(out).unwrap();
        let first = text.lines().next().unwrap();
        assert_eq!(first.split_whitespace().count(), 3);
    }

    #[test]
    fn entropic_rejects_bad_epsilon() {
        let a = sample_gamma(1, 4, &RngStream::new(5, 0)).unwrap();
        assert!(w2_empirical(&a, &a, W2Method::Entropic { epsilon: 0.0 }).is_err());
        let b = sample_gamma(1, 5, &RngStream::new(5, 0)).unwrap();
        assert!(w2_empirical(&a, &b, W2Method::ExactAssignment).is_err());
    }

    #[test]
    fn mixture_quadrature_reduces_to_shift() {
        assert!((w2_squared_mixture_1d(&[1.0], &[0.7]) - 0.49).abs() < 1e-12);
        let p = make_logsumexp(vec![1.0, 1.0], vec![vec![1.0, 2.0, 0.0], vec![1.0, 2.0, 0.0]]).unwrap();
        assert!((w2_squared_to_gamma(&p).unwrap().value - 5.0).abs() < 1e-12);
    }

    #[test]
    fn mixture_quadrature_agrees_with_large_sorted_coupling() {
        let p = make_logsumexp(vec![1.0, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        let exact = w2_squared_to_gamma(&p).unwrap();
        assert_eq!(exact.method, crate::measures::Method::Quadrature);
        let nu = sample_nu_exact(&p, 1_000_000, &RngStream::new(6, 0)).unwrap();
        let g = sample_gamma(1, 1_000_000, &RngStream::new(6, 1)).unwrap();
        let emp = sorted_coupling_cost(nu.as_flat(), g.as_flat()).unwrap();
        assert!((emp - exact.value).abs() < 5e-3, "{emp} vs {}", exact.value);
        // talagrand against the quadrature KL
        let kl = quadrature_oracle(&p, Functional::Kl, &QuadratureGrid::default()).unwrap();
        assert!(0.5 * exact.value < kl);
    }

    #[test]
    fn collinear_centers_in_higher_dimension_reduce_to_one_axis() {
        let d = [0.4; 5];
        let a0 = [0.0, 0.0, 0.0, 0.0, 0.3];
        let centers: Vec<Vec<f64>> = [-1.0, 0.5, 2.0]
            .iter()
            .map(|s| a0.iter().zip(&d).map(|(a, b)| a + s * b).collect())
            .collect();
        let p = make_logsumexp(vec![1.0, 2.0, 1.0], centers).unwrap();
        let w = w2_squared_to_gamma(&p).unwrap().value;
        let nu = sample_nu_exact(&p, 2000, &RngStream::new(7, 0)).unwrap();
        let g = sample_gamma(5, 2000, &RngStream::new(7, 1)).unwrap();
        let g2 = sample_gamma(5, 2000, &RngStream::new(7, 2)).unwrap();
        let emp = w2_squared_empirical_to_gamma(&nu, &g, &g2).unwrap();
        // empirical cost is inflated by roughly the null cost
        assert!(emp.value > w - 3.0 * emp.std_error);
        assert!(emp.value < w + 2.0 * emp.upward_bias + 3.0 * emp.std_error, "{emp:?} vs {w}");
        let off = make_logsumexp(vec![1.0; 3], vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(w2_squared_to_gamma(&off).is_none());
    }

    #[test]
    fn talagrand_cases() {
        let lin = make_linear(vec![0.6, 0.8]).unwrap();
        let m = TiltedMeasure::new("lin", lin.clone());
        let w = w2_squared_to_gamma(&lin).unwrap();
        let kl = Estimate::analytic(0.5);
        let r = check_talagrand(&m, &kl, &w);
        assert_eq!(r.verdict, Verdict::Holds);
        assert!(r.margin.unwrap().abs() < 1e-12);
        let r2 = check_transport_general(&m, &kl, &w, 2.0).unwrap();
        assert!((r2.margin.unwrap() - 0.25).abs() < 1e-12);
        let r4 = check_transport_general(&m, &kl, &w, 0.4).unwrap();
        assert_eq!(r4.verdict, Verdict::Fails);
        assert!(check_transport_general(&m, &kl, &w, 0.0).is_err());
        let r1 = check_transport_general(&m, &kl, &w, 1.0).unwrap();
        assert_eq!(r1, r);

        let zero = TiltedMeasure::new("zero", make_linear(vec![0.0]).unwrap());
        let r = check_talagrand(&zero, &Estimate::analytic(0.0), &Estimate::analytic(0.0));
        assert_eq!((r.verdict, r.margin), (Verdict::Holds, Some(0.0)));
    }

    #[test]
    fn dual_candidate_is_feasible_and_shift_is_detected() {
        let p = make_logsumexp(vec![1.0, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        let pair = DualPair::from_gradient_set(&p).unwrap();
        let nu = sample_nu_exact(&p, 10_000, &RngStream::new(8, 0)).unwrap();
        let g = sample_gamma(1, 10_000, &RngStream::new(8, 1)).unwrap();
        let d = check_dual_feasibility(&pair, &nu, &g).unwrap();
        assert!(d.pass && d.statistic <= 1e-12, "{d:?}");
        let bad = check_dual_feasibility(&pair.clone().shifted(0.1), &nu, &g).unwrap();
        assert!(!bad.pass);
        assert!((bad.statistic - 0.1).abs() < 1e-6 + d.statistic.abs(), "{bad:?}");
        assert!(DualPair::from_gradient_set(&make_scaled_quadratic(1.0, 1).unwrap()).is_err());
    }

    #[test]
    fn vitale_cases() {
        let g = sample_gamma(2, 100_000, &RngStream::new(9, 0)).unwrap();
        let lin = make_linear(vec![0.3, -0.4]).unwrap();
        let r = check_vitale(&lin, &g, 1.0).unwrap();
        assert_eq!(r.verdict, Verdict::Holds);
        assert!(r.margin.unwrap().abs() <= 3.0 * r.margin_se.unwrap(), "{r:?}");
        let zero = check_vitale(&make_linear(vec![0.0, 0.0]).unwrap(), &g, 1.0).unwrap();
        assert_eq!(zero.margin, Some(0.0));

        let g1 = sample_gamma(1, 100_000, &RngStream::new(9, 1)).unwrap();
        let pm = make_logsumexp(vec![1.0, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap();
        let r = check_vitale(&pm, &g1, 1.0).unwrap();
        assert!(r.margin.unwrap() > 3.0 * r.margin_se.unwrap(), "{r:?}");
        // 1-d quadrature of both sides: log ∫ e^{|y| − ½} dγ versus √(2/π)
        let lhs = (2.0 * (0.5f64).exp() * stats::normal_cdf(1.0)).ln() - 0.5;
        assert!((r.lhs.as_ref().unwrap().value - lhs).abs() < 4.0 * r.lhs.as_ref().unwrap().std_error);
        let na = check_vitale(&make_scaled_quadratic(1.0, 1).unwrap(), &g1, 1.0).unwrap();
        assert_eq!(na.verdict, Verdict::NotApplicable);
    }

    #[test]
    fn weak_duality_on_sample_level() {
        let p = make_logsumexp(vec![1.0, 3.0], vec![vec![1.0, 0.5], vec![-0.5, 0.0]]).unwrap();
        let pair = DualPair::from_gradient_set(&p).unwrap();
        for seed in 0..5 {
            let nu = sample_nu_exact(&p, 300, &RngStream::new(seed, 0)).unwrap();
            let g = sample_gamma(2, 300, &RngStream::new(seed, 1)).unwrap();
            let lb = dual_lower_bound(&pair, &nu, &g).unwrap();
            let (w, _) = w2_empirical(&nu, &g, W2Method::ExactAssignment).unwrap();
            assert!(lb.value <= 0.5 * w + 1e-8, "{} vs {}", lb.value, 0.5 * w);
        }
    }

    #[test]
    fn entropic_cost_approaches_exact_as_epsilon_shrinks() {
        let a = sample_gamma(1, 256, &RngStream::new(10, 0)).unwrap();
        let b = batch1(sample_gamma(1, 256, &RngStream::new(10, 1)).unwrap().as_flat().iter().map(|v| 0.5 * v + 1.0).collect());
        let (exact, _) = w2_empirical(&a, &b, W2Method::ExactAssignment).unwrap();
        let mut gaps = Vec::new();
        for eps in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01] {
            let (debiased, plan) = w2_empirical(&a, &b, W2Method::Entropic { epsilon: eps }).unwrap();
            gaps.push(((debiased - exact).abs(), (plan.cost - exact).abs()));
        }
        assert!(gaps.last().unwrap().0 < 1e-3, "{gaps:?}");
        assert!(gaps.windows(2).all(|w| w[1].0 <= w[0].0 + 1e-12), "{gaps:?}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn one_dimensional_assignment_is_the_sorted_coupling(
            a in prop::collection::vec(-5.0f64..5.0, 1..40),
            seed in 0u64..1000,
        ) {
            let n = a.len();
            let b = sample_gamma(1, n, &RngStream::new(seed, 0)).unwrap();
            let (w, _) = w2_empirical(&batch1(a.clone()), &b, W2Method::ExactAssignment).unwrap();
            let sorted = sorted_coupling_cost(&a, b.as_flat()).unwrap();
            prop_assert!((w - sorted).abs() <= 1e-12 * (1.0 + sorted));
        }

        #[test]
        fn dual_candidate_never_violates_feasibility(
            centers in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 1..6),
            seed in 0u64..1000,
        ) {
            let p = make_logsumexp(vec![1.0; centers.len()], centers).unwrap();
            let pair = DualPair::from_gradient_set(&p).unwrap();
            let a = sample_gamma(2, 200, &RngStream::new(seed, 0)).unwrap();
            let b = sample_gamma(2, 200, &RngStream::new(seed, 1)).unwrap();
            prop_assert!(check_dual_feasibility(&pair, &a, &b).unwrap().pass);
        }
    }
}
