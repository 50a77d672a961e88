//! The Föllmer process `dX_t = dB_t + v(t, X_t) dt`, `X_0 = 0`, with drift
//! `v(t,x) = ∇ log Z(t,x)` and `Z(t,x) = E e^{f(x + B_{1−t})}`. Its terminal
//! value has law `ν`; this module simulates it with Euler–Maruyama and
//! checks the properties of the exact process on the simulated paths.

use std::io::{Read, Write};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::measures::Estimate;
use crate::potentials::{dot, Family, Potential};
use crate::report::Diagnostic;
use crate::samplers::{RngStream, SampleBatch, SampleSource};
use crate::stats;

pub const SCHEME_EULER: &str = "euler-maruyama-uniform";
const MAGIC: &[u8; 8] = b"TLFOLLMR";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DriftMode {
    /// Closed-form drift (Linear, LogSumExp, ScaledQuadratic).
    Analytic,
    /// Self-normalized Monte Carlo over `inner_count` Gaussian draws.
    NestedMc { inner_count: usize },
}

#[derive(Clone, Debug)]
pub struct DriftSpec {
    pub mode: DriftMode,
    pub potential: Potential,
}

/// A drift value; `std_error` is zero for the closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct DriftValue {
    pub v: Vec<f64>,
    pub std_error: Vec<f64>,
}

impl DriftSpec {
    pub fn analytic(potential: Potential) -> Result<Self> {
        if !potential.capabilities().analytic_drift {
            return Err(Error::Unsupported(format!(
                "no closed-form drift for the {} family",
                potential.kind().name()
            )));
        }
        Ok(DriftSpec {
            mode: DriftMode::Analytic,
            potential,
        })
    }

    pub fn nested(potential: Potential, inner_count: usize) -> Result<Self> {
        if inner_count < 2 {
            return Err(Error::Parameter("nested drift needs at least two inner draws".into()));
        }
        Ok(DriftSpec {
            mode: DriftMode::NestedMc { inner_count },
            potential,
        })
    }

    /// `v(t, x)` for `t ∈ [0, 1)`. The generator is only drawn from in
    /// nested mode.
    pub fn drift(&self, t: f64, x: &[f64], rng: &mut ChaCha8Rng) -> Result<DriftValue> {
        check_dim(self.potential.dim(), x.len())?;
        if !(0.0..1.0).contains(&t) {
            return Err(Error::Parameter(format!(
                "drift time must lie in [0, 1), got {t}; use ∇f at t = 1"
            )));
        }
        match self.mode {
            DriftMode::Analytic => {
                let v = analytic_drift(&self.potential, t, x);
                let n = v.len();
                Ok(DriftValue {
                    v,
                    std_error: vec![0.0; n],
                })
            }
            DriftMode::NestedMc { inner_count } => nested_drift(&self.potential, t, x, inner_count, rng),
        }
    }

    fn tag(&self) -> String {
        match self.mode {
            DriftMode::Analytic => "analytic".into(),
            DriftMode::NestedMc { inner_count } => format!("nested-mc-{inner_count}"),
        }
    }
}

/// Closed-form drift. For a mixture the heat semigroup keeps the mixture
/// form with exponents `⟨α_i,x⟩ + (1−t)|α_i|²/2 − |α_i|²/2 + log p_i`; for
/// `f = −(s/2)|x|² + c` it gives `v = −s x / (1 + s(1−t))`.
fn analytic_drift(p: &Potential, t: f64, x: &[f64]) -> Vec<f64> {
    match p.family() {
        Family::Linear { alpha } => alpha.clone(),
        Family::ScaledQuadratic { s } => {
            let k = -s / (1.0 + s * (1.0 - t));
            x.iter().map(|v| k * v).collect()
        }
        Family::LogSumExp {
            centers, offsets, ..
        } => {
            let logits: Vec<f64> = centers
                .iter()
                .zip(offsets)
                .map(|(a, o)| o + dot(a, x) + 0.5 * (1.0 - t) * dot(a, a))
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = w.iter().sum();
            let mut v = vec![0.0; x.len()];
            for (wi, a) in w.iter().zip(centers) {
                for (vj, aj) in v.iter_mut().zip(a) {
                    *vj += wi / total * aj;
                }
            }
            v
        }
        Family::BlackBox(_) => unreachable!("analytic drift requested for a black box"),
    }
}

/// `E[e^{f(y)} ∇f(y)] / E[e^{f(y)}]` with `y = x + √(1−t) ξ`, `ξ ~ γ`, using
/// one set of draws for numerator and denominator. The SE is the delta
/// method for a ratio estimator.
fn nested_drift(p: &Potential, t: f64, x: &[f64], count: usize, rng: &mut ChaCha8Rng) -> Result<DriftValue> {
    let n = x.len();
    let scale = (1.0 - t).sqrt();
    let mut log_w = Vec::with_capacity(count);
    let mut grads = Vec::with_capacity(count * n);
    let mut y = vec![0.0; n];
    let mut g = vec![0.0; n];
    for _ in 0..count {
        for (yj, xj) in y.iter_mut().zip(x) {
            let xi: f64 = rng.sample(StandardNormal);
            *yj = xj + scale * xi;
        }
        log_w.push(p.f(&y));
        p.grad_into(&y, &mut g);
        grads.extend_from_slice(&g);
    }
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if log_w.iter().any(|l| l.is_nan() || *l == f64::INFINITY) || !max.is_finite() || grads.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("non-finite potential value in nested drift".into()));
    }
    let w: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
    let total = stats::pairwise_sum(&w);
    let mut v = vec![0.0; n];
    for (k, wk) in w.iter().enumerate() {
        for j in 0..n {
            v[j] += wk * grads[k * n + j];
        }
    }
    for vj in v.iter_mut() {
        *vj /= total;
    }
    let mut var = vec![0.0; n];
    for (k, wk) in w.iter().enumerate() {
        for j in 0..n {
            var[j] += (wk * (grads[k * n + j] - v[j])).powi(2);
        }
    }
    let std_error = var.iter().map(|s| s.sqrt() / total).collect();
    Ok(DriftValue { v, std_error })
}

/// Simulated paths on a uniform grid. Arrays are path-major with
/// `steps + 1` nodes per path and `dim` coordinates per node.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    pub dim: usize,
    pub steps: usize,
    pub paths: usize,
    pub time_grid: Vec<f64>,
    pub x: Vec<f64>,
    pub b: Vec<f64>,
    /// Drift along `X`; the last node holds `∇f(X₁)`.
    pub v: Vec<f64>,
    pub rng: RngStream,
    pub scheme: String,
    pub drift: String,
}

impl PathEnsemble {
    fn at<'a>(&self, data: &'a [f64], path: usize, step: usize) -> &'a [f64] {
        let start = (path * (self.steps + 1) + step) * self.dim;
        &data[start..start + self.dim]
    }

    pub fn x_at(&self, path: usize, step: usize) -> &[f64] {
        self.at(&self.x, path, step)
    }

    pub fn b_at(&self, path: usize, step: usize) -> &[f64] {
        self.at(&self.b, path, step)
    }

    pub fn v_at(&self, path: usize, step: usize) -> &[f64] {
        self.at(&self.v, path, step)
    }

    /// Terminal states `X₁` as a batch from `ν`.
    pub fn terminal(&self) -> SampleBatch {
        let points = (0..self.paths).flat_map(|i| self.x_at(i, self.steps).to_vec()).collect();
        SampleBatch::from_points(self.dim, points, SampleSource::NuFollmer).expect("consistent shape")
    }

    /// The same paths with the drift replaced by `∇f(X_t)` at every node.
    /// This breaks the martingale property and serves as a negative
    /// control for [`diag_martingale`].
    pub fn with_gradient_drift(&self, p: &Potential) -> Result<PathEnsemble> {
        check_dim(self.dim, p.dim())?;
        let mut out = self.clone();
        let n = self.dim;
        out.v.par_chunks_mut(n).zip(self.x.par_chunks(n)).for_each(|(v, x)| p.grad_into(x, v));
        out.drift = "gradient-control".into();
        Ok(out)
    }

    /// Binary container: magic, version, shape, rng provenance, scheme and
    /// drift tags, then little-endian `f64` arrays (grid, X, B, v).
    pub fn write_binary<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        for v in [self.dim, self.steps, self.paths] {
            out.write_all(&(v as u64).to_le_bytes())?;
        }
        out.write_all(&self.rng.seed.to_le_bytes())?;
        out.write_all(&self.rng.stream_id.to_le_bytes())?;
        for tag in [&self.scheme, &self.drift] {
            out.write_all(&(tag.len() as u32).to_le_bytes())?;
            out.write_all(tag.as_bytes())?;
        }
        for array in [&self.time_grid, &self.x, &self.b, &self.v] {
            for v in array.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut input: R) -> Result<PathEnsemble> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a path ensemble container".into()));
        }
        let version = u32::from_le_bytes(read_array(&mut input)?);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let mut word = || -> Result<u64> { Ok(u64::from_le_bytes(read_array(&mut input)?)) };
        let (dim, steps, paths) = (word()? as usize, word()? as usize, word()? as usize);
        let rng = RngStream::new(word()?, word()?);
        let mut tags = Vec::new();
        for _ in 0..2 {
            let len = u32::from_le_bytes(read_array(&mut input)?) as usize;
            if len > 1 << 16 {
                return Err(Error::Format("tag too long".into()));
            }
            let mut buf = vec![0u8; len];
            input.read_exact(&mut buf)?;
            tags.push(String::from_utf8(buf).map_err(|_| Error::Format("tag is not UTF-8".into()))?);
        }
        let nodes = paths
            .checked_mul(steps + 1)
            .and_then(|v| v.checked_mul(dim))
            .ok_or_else(|| Error::Format("shape overflows".into()))?;
        let mut floats = |count: usize| -> Result<Vec<f64>> {
            let mut bytes = vec![0u8; count * 8];
            input.read_exact(&mut bytes)?;
            Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let time_grid = floats(steps + 1)?;
        let x = floats(nodes)?;
        let b = floats(nodes)?;
        let v = floats(nodes)?;
        let drift = tags.pop().unwrap();
        let scheme = tags.pop().unwrap();
        Ok(PathEnsemble {
            dim,
            steps,
            paths,
            time_grid,
            x,
            b,
            v,
            rng,
            scheme,
            drift,
        })
    }

    /// One line per path: the path index followed by the coordinates of `X₁`.
    pub fn write_terminal_text<W: Write>(&self, mut out: W) -> Result<()> {
        for i in 0..self.paths {
            let coords: Vec<String> = self.x_at(i, self.steps).iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{i} {}", coords.join(" "))?;
        }
        Ok(())
    }
}

fn read_array<R: Read, const N: usize>(input: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    input.read_exact(&mut buf)?;
    Ok(buf)
}

/// Euler–Maruyama simulation on a uniform grid of `steps` intervals.
pub fn simulate(spec: &DriftSpec, steps: usize, paths: usize, rng: &RngStream) -> Result<PathEnsemble> {
    Ok(simulate_levels(spec, &[steps], paths, rng)?.pop().unwrap())
}

/// Simulates the same Brownian paths at several resolutions: increments
/// are drawn on the finest grid and summed for the coarser ones, so
/// refinement comparisons are not masked by independent noise. Every
/// entry of `steps` must divide the largest.
pub fn simulate_levels(spec: &DriftSpec, steps: &[usize], paths: usize, rng: &RngStream) -> Result<Vec<PathEnsemble>> {
    if paths == 0 {
        return Err(Error::Parameter("at least one path is required".into()));
    }
    let finest = steps.iter().cloned().max().unwrap_or(0);
    if steps.iter().any(|&s| s < 2 || finest % s != 0) {
        return Err(Error::Parameter(format!(
            "step counts must be at least 2 and divide the finest ({steps:?})"
        )));
    }
    let n = spec.potential.dim();
    let per_path: Vec<Result<Vec<PathArrays>>> = (0..paths)
        .into_par_iter()
        .map(|i| {
            let stream = rng.child(i as u64);
            let mut noise = stream.child(0).generator();
            let dt = 1.0 / finest as f64;
            let increments: Vec<f64> = (0..finest * n)
                .map(|_| dt.sqrt() * noise.sample::<f64, _>(StandardNormal))
                .collect();
            let mut inner = stream.child(1).generator();
            steps
                .iter()
                .map(|&s| integrate_path(spec, &increments, finest / s, s, &mut inner).map_err(|(step, message)| Error::Drift {
                    path: i,
                    step,
                    message,
                }))
                .collect()
        })
        .collect();
    let per_path: Vec<Vec<PathArrays>> = per_path.into_iter().collect::<Result<_>>()?;
    Ok(steps
        .iter()
        .enumerate()
        .map(|(level, &s)| {
            let mut x = Vec::with_capacity(paths * (s + 1) * n);
            let mut b = Vec::with_capacity(paths * (s + 1) * n);
            let mut v = Vec::with_capacity(paths * (s + 1) * n);
            for arrays in &per_path {
                x.extend_from_slice(&arrays[level].x);
                b.extend_from_slice(&arrays[level].b);
                v.extend_from_slice(&arrays[level].v);
            }
            PathEnsemble {
                dim: n,
                steps: s,
                paths,
                time_grid: (0..=s).map(|k| k as f64 / s as f64).collect(),
                x,
                b,
                v,
                rng: *rng,
                scheme: SCHEME_EULER.into(),
                drift: spec.tag(),
            }
        })
        .collect())
}

struct PathArrays {
    x: Vec<f64>,
    b: Vec<f64>,
    v: Vec<f64>,
}

fn integrate_path(
    spec: &DriftSpec,
    increments: &[f64],
    group: usize,
    steps: usize,
    inner: &mut ChaCha8Rng,
) -> std::result::Result<PathArrays, (usize, String)> {
    let n = spec.potential.dim();
    let dt = 1.0 / steps as f64;
    let mut x = vec![0.0; (steps + 1) * n];
    let mut b = vec![0.0; (steps + 1) * n];
    let mut v = vec![0.0; (steps + 1) * n];
    for k in 0..steps {
        let t = k as f64 * dt;
        let drift = spec
            .drift(t, &x[k * n..(k + 1) * n], inner)
            .map_err(|e| (k, e.to_string()))?;
        if drift.v.iter().any(|d| !d.is_finite()) {
            return Err((k, "non-finite drift".into()));
        }
        v[k * n..(k + 1) * n].copy_from_slice(&drift.v);
        for j in 0..n {
            let db: f64 = (0..group).map(|r| increments[(k * group + r) * n + j]).sum();
            b[(k + 1) * n + j] = b[k * n + j] + db;
            x[(k + 1) * n + j] = (x[k * n + j] + db) + drift.v[j] * dt;
        }
    }
    spec.potential.grad_into(&x[steps * n..], &mut v[steps * n..]);
    Ok(PathArrays { x, b, v })
}

/// Number of random directions used by [`diag_terminal_law`] in dimension `n`.
pub fn default_projections(n: usize) -> usize {
    if n == 1 {
        1
    } else {
        (2 * n).max(4)
    }
}

/// Compares `X₁` with an exact batch from `ν` along random 1-d projections:
/// two-sample KS against the 1% critical value (Bonferroni over
/// projections) plus an Euler allowance of `0.5/steps`, and a permutation
/// test on the summed 1-d energy distances at the same level.
pub fn diag_terminal_law(ens: &PathEnsemble, exact: &SampleBatch, projections: usize, rng: &RngStream) -> Result<Diagnostic> {
    check_dim(ens.dim, exact.dim())?;
    let terminal = ens.terminal();
    let mut g = rng.generator();
    let dirs: Vec<Vec<f64>> = (0..projections.max(1))
        .map(|k| {
            if ens.dim == 1 {
                return vec![1.0];
            }
            if k < ens.dim {
                let mut e = vec![0.0; ens.dim];
                e[k] = 1.0;
                return e;
            }
            let u: Vec<f64> = (0..ens.dim).map(|_| g.sample(StandardNormal)).collect();
            let len = dot(&u, &u).sqrt();
            u.into_iter().map(|c| c / len).collect()
        })
        .collect();
    let alpha = 0.01 / dirs.len() as f64;
    let crit = stats::ks_critical(alpha, terminal.count(), Some(exact.count())) + 0.5 / ens.steps as f64;
    let left: Vec<Vec<f64>> = dirs.iter().map(|u| terminal.project(u)).collect();
    let right: Vec<Vec<f64>> = dirs.iter().map(|u| exact.project(u)).collect();
    let ks = left
        .iter()
        .zip(&right)
        .map(|(a, b)| stats::ks_two_sample(a, b))
        .fold(0.0, f64::max);
    let energy = |l: &[Vec<f64>], r: &[Vec<f64>]| -> f64 {
        l.iter().zip(r).map(|(a, b)| stats::energy_distance_1d(a, b)).sum()
    };
    let observed = energy(&left, &right);
    // permutation null: relabel the pooled points
    const PERMUTATIONS: usize = 199;
    let na = terminal.count();
    let pooled: Vec<Vec<f64>> = left.iter().zip(&right).map(|(a, b)| [a.as_slice(), b].concat()).collect();
    let exceed = (0..PERMUTATIONS)
        .into_par_iter()
        .filter(|&k| {
            let mut idx: Vec<usize> = (0..pooled[0].len()).collect();
            let mut pg = rng.child(k as u64 + 1).generator();
            for i in (1..idx.len()).rev() {
                idx.swap(i, pg.random_range(0..=i));
            }
            let l: Vec<Vec<f64>> = pooled.iter().map(|p| idx[..na].iter().map(|&i| p[i]).collect()).collect();
            let r: Vec<Vec<f64>> = pooled.iter().map(|p| idx[na..].iter().map(|&i| p[i]).collect()).collect();
            energy(&l, &r) >= observed
        })
        .count();
    let p_value = (1 + exceed) as f64 / (1 + PERMUTATIONS) as f64;
    let mut d = Diagnostic::new("terminal_law", ks, crit)
        .detail("ks_max", ks)
        .detail("ks_critical", crit)
        .detail("energy_distance", observed)
        .detail("energy_p_value", p_value)
        .detail("projections", dirs.len() as f64);
    d.pass = d.pass && p_value >= 0.01;
    Ok(d)
}

/// Grid pairs `(s, u)` as fractions of the horizon.
pub const MARTINGALE_PAIRS: [(f64, f64); 10] = [
    (0.0, 0.25),
    (0.0, 0.5),
    (0.0, 1.0),
    (0.1, 0.9),
    (0.25, 0.5),
    (0.25, 1.0),
    (0.5, 0.75),
    (0.5, 1.0),
    (0.75, 1.0),
    (0.9, 1.0),
];

/// `max |mean(v_u − v_s)| / SE` over [`MARTINGALE_PAIRS`] and coordinates;
/// passes when at most 4.
pub fn diag_martingale(ens: &PathEnsemble) -> Diagnostic {
    let mut worst: f64 = 0.0;
    let mut d_out = Vec::new();
    for &(s, u) in &MARTINGALE_PAIRS {
        let ks = (s * ens.steps as f64).round() as usize;
        let ku = (u * ens.steps as f64).round() as usize;
        let mut pair_worst: f64 = 0.0;
        for j in 0..ens.dim {
            let diffs: Vec<f64> = (0..ens.paths).map(|i| ens.v_at(i, ku)[j] - ens.v_at(i, ks)[j]).collect();
            let m = stats::mean_se(&diffs);
            let z = if m.mean == 0.0 {
                0.0
            } else if m.se == 0.0 {
                f64::INFINITY
            } else {
                m.mean.abs() / m.se
            };
            pair_worst = pair_worst.max(z);
        }
        d_out.push((format!("z[{s},{u}]"), pair_worst));
        worst = worst.max(pair_worst);
    }
    let mut d = Diagnostic::new("martingale", worst, 4.0);
    d.details = d_out;
    d
}

/// Relative tolerance of the path identities.
pub const IDENTITY_RELATIVE_TOLERANCE: f64 = 0.05;

fn identity_diagnostic(name: &str, per_path: Vec<f64>, kl: &Estimate) -> (Diagnostic, Estimate) {
    let m = stats::mean_se(&per_path);
    let target = 2.0 * kl.value;
    let se = (m.se * m.se + 4.0 * kl.std_error * kl.std_error).sqrt();
    let gap = m.mean - target;
    let threshold = IDENTITY_RELATIVE_TOLERANCE * target.abs() + 3.0 * se;
    // exact agreement must pass even when every tolerance is zero
    let statistic = if gap == 0.0 { 0.0 } else { gap.abs() };
    let d = Diagnostic::new(name, statistic, threshold)
        .detail("path_mean", m.mean)
        .detail("path_se", m.se)
        .detail("two_kl", target)
        .detail("gap", gap)
        .detail("combined_se", se);
    (d, Estimate::monte_carlo(m.mean, m.se, m.count))
}

/// Per-path `∫₀¹ |v_t|² dt` by the trapezoid rule.
pub fn energy_per_path(ens: &PathEnsemble) -> Vec<f64> {
    let dt = 1.0 / ens.steps as f64;
    (0..ens.paths)
        .map(|i| {
            let sq: Vec<f64> = (0..=ens.steps)
                .map(|k| {
                    let v = ens.v_at(i, k);
                    let w = if k == 0 || k == ens.steps { 0.5 } else { 1.0 };
                    w * dot(v, v)
                })
                .collect();
            dt * stats::pairwise_sum(&sq)
        })
        .collect()
}

/// Per-path `⟨X₁ − B₁, ∇f(X₁)⟩`.
pub fn coupling_per_path(ens: &PathEnsemble) -> Vec<f64> {
    (0..ens.paths)
        .map(|i| {
            let x = ens.x_at(i, ens.steps);
            let b = ens.b_at(i, ens.steps);
            let v = ens.v_at(i, ens.steps);
            x.iter().zip(b).zip(v).map(|((x, b), v)| (x - b) * v).sum()
        })
        .collect()
}

/// `E ∫₀¹ |v_t|² dt` against `2 D_KL`, within 5% plus 3 combined SE.
pub fn diag_energy_identity(ens: &PathEnsemble, kl: &Estimate) -> (Diagnostic, Estimate) {
    identity_diagnostic("energy_identity", energy_per_path(ens), kl)
}

/// `E ⟨X₁ − B₁, ∇f(X₁)⟩` against `2 D_KL`, within 5% plus 3 combined SE.
pub fn diag_coupling_identity(ens: &PathEnsemble, kl: &Estimate) -> (Diagnostic, Estimate) {
    identity_diagnostic("coupling_identity", coupling_per_path(ens), kl)
}
