//! Draws from `γ` and `ν`, plus a deterministic quadrature oracle for
//! dimensions one and two.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::potentials::{dot, Family, GradientSet, Potential};
use crate::stats;

/// A reproducible random stream: the same `(seed, stream_id)` always
/// produces the same draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        RngStream { seed, stream_id }
    }

    pub fn generator(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }

    /// An independent child stream, e.g. one per path or per lane.
    pub fn child(&self, index: u64) -> RngStream {
        RngStream {
            seed: splitmix64(self.seed ^ splitmix64(self.stream_id)),
            stream_id: index,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleSource {
    Gamma,
    NuExact,
    NuMala,
    /// Terminal states of a simulated Föllmer process.
    NuFollmer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MalaDiagnostics {
    pub acceptance_rate: f64,
    pub step_size: f64,
    /// Integrated autocorrelation time of `f` along the kept states.
    pub autocorr_time: f64,
    pub effective_sample_size: f64,
    pub warning: Option<String>,
}

/// `count` points in `ℝⁿ`, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    dim: usize,
    points: Vec<f64>,
    source: SampleSource,
    diagnostics: Option<MalaDiagnostics>,
}

impl SampleBatch {
    pub fn from_points(dim: usize, points: Vec<f64>, source: SampleSource) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::Parameter(format!(
                "{} values do not form a non-empty batch of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("sample batch contains non-finite values".into()));
        }
        Ok(SampleBatch {
            dim,
            points,
            source,
            diagnostics: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn source(&self) -> SampleSource {
        self.source
    }

    pub fn diagnostics(&self) -> Option<&MalaDiagnostics> {
        self.diagnostics.as_ref()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.points.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.points
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// Values of `⟨u, x⟩` over the batch.
    pub fn project(&self, u: &[f64]) -> Vec<f64> {
        self.rows().map(|r| dot(r, u)).collect()
    }

    /// First `count` points (or all of them).
    pub fn head(&self, count: usize) -> SampleBatch {
        let count = count.min(self.count()).max(1);
        SampleBatch {
            dim: self.dim,
            points: self.points[..count * self.dim].to_vec(),
            source: self.source,
            diagnostics: self.diagnostics.clone(),
        }
    }

    /// Columnar text export: one point per line, space separated, 17
    /// significant digits.
    pub fn write_columnar<W: Write>(&self, mut out: W) -> Result<()> {
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn read_columnar(text: &str, source: SampleSource) -> Result<SampleBatch> {
        let mut dim = None;
        let mut points = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| Error::Parse {
                        line: i + 1,
                        message: format!("`{t}` is not a number"),
                    })
                })
                .collect::<Result<_>>()?;
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(Error::Parse {
                        line: i + 1,
                        message: format!("expected {d} columns, got {}", row.len()),
                    })
                }
                _ => {}
            }
            points.extend(row);
        }
        SampleBatch::from_points(dim.unwrap_or(0), points, source)
    }
}

fn require_count(count: usize) -> Result<()> {
    if count == 0 {
        Err(Error::Parameter("sample count must be at least 1".into()))
    } else {
        Ok(())
    }
}

/// I.i.d. standard normal vectors.
pub fn sample_gamma(dim: usize, count: usize, rng: &RngStream) -> Result<SampleBatch> {
    require_count(count)?;
    let mut g = rng.generator();
    let points = (0..dim * count).map(|_| g.sample(StandardNormal)).collect();
    SampleBatch::from_points(dim, points, SampleSource::Gamma)
}

/// Same as [`sample_gamma`] but split over `lanes` child streams that run in
/// parallel; output depends only on `(rng, lanes)`.
pub fn sample_gamma_lanes(dim: usize, count: usize, rng: &RngStream, lanes: usize) -> Result<SampleBatch> {
    require_count(count)?;
    let lanes = lanes.clamp(1, count);
    let chunks: Vec<Vec<f64>> = (0..lanes)
        .into_par_iter()
        .map(|lane| {
            let lo = lane * count / lanes;
            let hi = (lane + 1) * count / lanes;
            let mut g = rng.child(lane as u64).generator();
            (0..dim * (hi - lo)).map(|_| g.sample(StandardNormal)).collect()
        })
        .collect();
    SampleBatch::from_points(dim, chunks.concat(), SampleSource::Gamma)
}

/// Exact draws from `ν` for the closed-form families.
pub fn sample_nu_exact(p: &Potential, count: usize, rng: &RngStream) -> Result<SampleBatch> {
    require_count(count)?;
    let dim = p.dim();
    let mut g = rng.generator();
    let mut points = Vec::with_capacity(dim * count);
    match p.family() {
        Family::Linear { alpha } => {
            for _ in 0..count {
                points.extend(alpha.iter().map(|a| a + g.sample::<f64, _>(StandardNormal)));
            }
        }
        Family::ScaledQuadratic { s } => {
            let sigma = (1.0 / (1.0 + s)).sqrt();
            points.extend((0..dim * count).map(|_| sigma * g.sample::<f64, _>(StandardNormal)));
        }
        Family::LogSumExp {
            weights, centers, ..
        } => {
            let mut cumulative = Vec::with_capacity(weights.len());
            let mut acc = 0.0;
            for w in weights {
                acc += w;
                cumulative.push(acc);
            }
            for _ in 0..count {
                let u: f64 = g.random::<f64>() * acc;
                let i = cumulative.partition_point(|c| *c <= u).min(centers.len() - 1);
                points.extend(centers[i].iter().map(|a| a + g.sample::<f64, _>(StandardNormal)));
            }
        }
        Family::BlackBox(_) => {
            return Err(Error::Unsupported(
                "no exact sampler for black-box potentials; use sample_nu_mala".into(),
            ))
        }
    }
    SampleBatch::from_points(dim, points, SampleSource::NuExact)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MalaConfig {
    pub burn_in: usize,
    /// Initial step size; tuned during burn-in.
    pub step_size: f64,
    pub thin: usize,
    pub target_acceptance: f64,
}

impl Default for MalaConfig {
    fn default() -> Self {
        MalaConfig {
            burn_in: 10_000,
            step_size: 0.5,
            thin: 5,
            target_acceptance: 0.574,
        }
    }
}

struct MalaState {
    x: Vec<f64>,
    log_target: f64,
    drift: Vec<f64>,
}

fn mala_state(p: &Potential, x: Vec<f64>) -> MalaState {
    let mut drift = vec![0.0; x.len()];
    p.grad_into(&x, &mut drift);
    for (d, xi) in drift.iter_mut().zip(&x) {
        *d -= xi;
    }
    let log_target = p.f(&x) - 0.5 * dot(&x, &x);
    MalaState { x, log_target, drift }
}

/// `log q(to | from)` up to a constant for the Langevin proposal.
fn log_proposal(to: &[f64], from: &MalaState, h: f64) -> f64 {
    let mut s = 0.0;
    for ((t, x), d) in to.iter().zip(&from.x).zip(&from.drift) {
        let r = t - x - h * d;
        s += r * r;
    }
    -s / (4.0 * h)
}

/// Metropolis-adjusted Langevin chain targeting `e^{f(x) − |x|²/2}`.
pub fn sample_nu_mala(p: &Potential, count: usize, config: &MalaConfig, rng: &RngStream) -> Result<SampleBatch> {
    require_count(count)?;
    if !(config.step_size > 0.0) {
        return Err(Error::Parameter("MALA step size must be positive".into()));
    }
    let dim = p.dim();
    let thin = config.thin.max(1);
    let mut g = rng.generator();
    let start: Vec<f64> = (0..dim).map(|_| g.sample(StandardNormal)).collect();
    let mut state = mala_state(p, start);
    let mut log_h = config.step_size.ln();
    let step = |state: &mut MalaState, h: f64, g: &mut ChaCha8Rng| -> bool {
        let noise = (2.0 * h).sqrt();
        let proposal: Vec<f64> = state
            .x
            .iter()
            .zip(&state.drift)
            .map(|(x, d)| x + h * d + noise * g.sample::<f64, _>(StandardNormal))
            .collect();
        let candidate = mala_state(p, proposal);
        let log_ratio = candidate.log_target - state.log_target + log_proposal(&state.x, &candidate, h)
            - log_proposal(&candidate.x, state, h);
        let accept = log_ratio >= 0.0 || g.random::<f64>().ln() < log_ratio;
        if accept && candidate.log_target.is_finite() {
            *state = candidate;
            true
        } else {
            false
        }
    };
    for k in 0..config.burn_in {
        let accepted = step(&mut state, log_h.exp(), &mut g);
        let rate = 1.0 / ((k + 10) as f64).powf(0.6);
        log_h += rate * (f64::from(u8::from(accepted)) - config.target_acceptance);
    }
    let h = log_h.exp();
    let mut points = Vec::with_capacity(count * dim);
    let mut f_trace = Vec::with_capacity(count);
    let mut target_trace = Vec::with_capacity(count);
    let mut accepted = 0usize;
    for _ in 0..count {
        for _ in 0..thin {
            accepted += usize::from(step(&mut state, h, &mut g));
        }
        points.extend_from_slice(&state.x);
        f_trace.push(p.f(&state.x));
        target_trace.push(state.log_target);
    }
    let acceptance_rate = accepted as f64 / (count * thin) as f64;
    let series = if stats::mean_se(&f_trace).sd > 0.0 {
        &f_trace
    } else {
        &target_trace
    };
    let autocorr_time = stats::integrated_autocorr_time(series);
    let warning = if !(0.1..=0.9).contains(&acceptance_rate) {
        Some(format!(
            "acceptance rate {acceptance_rate:.3} outside [0.1, 0.9] after tuning"
        ))
    } else {
        None
    };
    let mut batch = SampleBatch::from_points(dim, points, SampleSource::NuMala)?;
    batch.diagnostics = Some(MalaDiagnostics {
        acceptance_rate,
        step_size: h,
        autocorr_time,
        effective_sample_size: count as f64 / autocorr_time,
        warning,
    });
    Ok(batch)
}

/// Functionals the quadrature oracle can integrate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Functional {
    /// `∫ f dν − log ∫ e^f dγ`
    Kl,
    /// `∫ |∇f|² dν`
    Fisher,
    /// `∫ |x|² dν`
    SecondMoment,
    /// `H(ν) − H(γ)`
    EntropyGap,
    /// `∫ sup_{t∈K} ⟨y, t⟩ dγ(y)`
    Width,
    /// `log ∫ e^f dγ`
    LogNormalizer,
    /// `∫ Δf dν`
    MeanLaplacian,
    /// `∫ ⟨x, ∇f⟩ dν`
    XDotGrad,
}

/// Trapezoid grid on `[−radius, radius]` per axis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureGrid {
    /// Forced odd so that the origin is a node.
    pub points_per_axis: usize,
    /// `None` puts at least 8 standard deviations between every mixture
    /// center and the boundary.
    pub radius: Option<f64>,
}

impl Default for QuadratureGrid {
    fn default() -> Self {
        QuadratureGrid {
            points_per_axis: 2001,
            radius: None,
        }
    }
}

impl QuadratureGrid {
    pub fn refined(&self) -> QuadratureGrid {
        QuadratureGrid {
            points_per_axis: 2 * self.points_per_axis - 1,
            radius: self.radius,
        }
    }
}

fn default_radius(p: &Potential) -> f64 {
    match p.family() {
        Family::Linear { alpha } => 8.0 + dot(alpha, alpha).sqrt(),
        Family::LogSumExp { centers, .. } => {
            let max = centers.iter().map(|a| dot(a, a).sqrt()).fold(0.0, f64::max);
            8.0 + max
        }
        Family::ScaledQuadratic { s } => 8f64.max(8.0 / (1.0 + s).sqrt()),
        Family::BlackBox(_) => 8.0,
    }
}

/// Deterministic evaluation of a defining integral on a tensor-product
/// trapezoid grid (`n ≤ 2`).
pub fn quadrature_oracle(p: &Potential, functional: Functional, grid: &QuadratureGrid) -> Result<f64> {
    let dim = p.dim();
    if dim > 2 {
        return Err(Error::Unsupported(format!(
            "quadrature oracle supports dimension ≤ 2, got {dim}"
        )));
    }
    if functional == Functional::Width {
        return width_oracle(&p.gradient_set(), dim);
    }
    let radius = grid.radius.unwrap_or_else(|| default_radius(p));
    let n_axis = grid.points_per_axis.max(3) | 1;
    let h = 2.0 * radius / (n_axis - 1) as f64;
    let nodes: Vec<f64> = (0..n_axis).map(|i| -radius + i as f64 * h).collect();
    let edge = |i: usize| if i == 0 || i == n_axis - 1 { 0.5 } else { 1.0 };
    let norm = (2.0 * std::f64::consts::PI).powf(-0.5 * dim as f64);

    // accumulate [∫ e^f dγ, ∫ g e^f dγ] row by row; rows are independent
    let rows: Vec<(f64, f64, f64)> = (0..if dim == 1 { 1 } else { n_axis })
        .into_par_iter()
        .map(|row| {
            let mut x = vec![0.0; dim];
            let mut grad = vec![0.0; dim];
            let (mut mass, mut moment, mut f_moment) = (0.0, 0.0, 0.0);
            for (i, xi) in nodes.iter().enumerate() {
                x[0] = *xi;
                let mut w = edge(i) * h;
                if dim == 2 {
                    x[1] = nodes[row];
                    w *= edge(row) * h;
                }
                let f = p.f(&x);
                let sq = dot(&x, &x);
                let density = w * norm * (f - 0.5 * sq).exp();
                if density == 0.0 {
                    continue;
                }
                let g = match functional {
                    Functional::Kl | Functional::LogNormalizer => f,
                    Functional::Fisher => {
                        p.grad_into(&x, &mut grad);
                        dot(&grad, &grad)
                    }
                    Functional::SecondMoment | Functional::EntropyGap => sq,
                    Functional::MeanLaplacian => p.laplacian(&x),
                    Functional::XDotGrad => {
                        p.grad_into(&x, &mut grad);
                        dot(&x, &grad)
                    }
                    Functional::Width => unreachable!(),
                };
                mass += density;
                moment += density * g;
                f_moment += density * f;
            }
            (mass, moment, f_moment)
        })
        .collect();
    let mass: f64 = rows.iter().map(|r| r.0).sum();
    let moment: f64 = rows.iter().map(|r| r.1).sum::<f64>() / mass;
    let f_mean: f64 = rows.iter().map(|r| r.2).sum::<f64>() / mass;
    let log_z = mass.ln();
    Ok(match functional {
        Functional::LogNormalizer => log_z,
        Functional::Kl => moment - log_z,
        Functional::EntropyGap => -(f_mean - log_z) + 0.5 * (moment - dim as f64),
        _ => moment,
    })
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; order];
    let mut weights = vec![0.0; order];
    for i in 0..order {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (order as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=order {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = order as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = x;
        weights[i] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

/// Gaussian width by exact reduction: in 1-d the support function is
/// piecewise linear with its only kink at the origin; in 2-d the radial part
/// integrates in closed form and the angular part is smooth between the
/// switching angles of the support function.
fn width_oracle(set: &GradientSet, dim: usize) -> Result<f64> {
    if !set.is_exact() {
        return Err(Error::NotApplicable(
            "gradient set has no exact support function".into(),
        ));
    }
    let support = |y: &[f64]| set.support(y).unwrap();
    if dim == 1 {
        // E[y⁺]·h(1) + E[y⁻]·h(−1) with E[y⁺] = 1/√(2π)
        let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        return Ok(c * (support(&[1.0]) + support(&[-1.0])));
    }
    let tau = 2.0 * std::f64::consts::PI;
    let mut breaks = vec![0.0, tau];
    let mut push_normal = |d: [f64; 2]| {
        if d[0] != 0.0 || d[1] != 0.0 {
            let theta = d[1].atan2(d[0]) + 0.5 * std::f64::consts::PI;
            for t in [theta, theta + std::f64::consts::PI] {
                breaks.push(t.rem_euclid(tau));
            }
        }
    };
    match set {
        GradientSet::FiniteExtremePoints(pts) => {
            for i in 0..pts.len() {
                for j in i + 1..pts.len() {
                    push_normal([pts[i][0] - pts[j][0], pts[i][1] - pts[j][1]]);
                }
            }
        }
        GradientSet::IntervalBox { .. } => {
            push_normal([1.0, 0.0]);
            push_normal([0.0, 1.0]);
        }
        _ => {}
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let (gx, gw) = gauss_legendre(20);
    let mut angular = 0.0;
    for pair in breaks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let half = 0.5 * (b - a);
        for (x, w) in gx.iter().zip(&gw) {
            let t = a + half * (1.0 + x);
            angular += half * w * support(&[t.cos(), t.sin()]);
        }
    }
    Ok(angular * (0.5 * std::f64::consts::PI).sqrt() / tau)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{make_linear, make_logsumexp, make_scaled_quadratic};

    fn pm(a: f64) -> Potential {
        make_logsumexp(vec![1.0, 1.0], vec![vec![a], vec![-a]]).unwrap()
    }

    #[test]
    fn gamma_moments_within_clt_band() {
        let b = sample_gamma(1, 100_000, &RngStream::new(3, 0)).unwrap();
        let x = b.column(0);
        let m = stats::mean_se(&x).mean;
        assert!(m.abs() < 3.0 / (1e5f64).sqrt(), "mean {m}");
        let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
        let m2 = stats::mean_se(&sq).mean;
        assert!((m2 - 1.0).abs() < 3.0 * (2.0 / 1e5f64).sqrt(), "second moment {m2}");
    }

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = sample_gamma(2, 50, &RngStream::new(7, 0)).unwrap();
        let b = sample_gamma(2, 50, &RngStream::new(7, 0)).unwrap();
        let c = sample_gamma(2, 50, &RngStream::new(7, 1)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let l1 = sample_gamma_lanes(2, 1000, &RngStream::new(7, 0), 4).unwrap();
        let l2 = sample_gamma_lanes(2, 1000, &RngStream::new(7, 0), 4).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1.count(), 1000);
        assert!(sample_gamma(1, 0, &RngStream::new(1, 0)).is_err());
    }

    #[test]
    fn exact_samplers_match_analytic_moments() {
        let rng = RngStream::new(11, 0);
        let lin = sample_nu_exact(&make_linear(vec![1.0, 0.0]).unwrap(), 100_000, &rng).unwrap();
        let m = stats::mean_se(&lin.column(0));
        assert!((m.mean - 1.0).abs() < 3.0 * m.se);

        let mix = sample_nu_exact(&pm(1.0), 100_000, &rng).unwrap();
        let m = stats::mean_se(&mix.column(0));
        assert!(m.mean.abs() < 3.0 * m.se);

        let quad = sample_nu_exact(&make_scaled_quadratic(1.0, 1).unwrap(), 100_000, &rng).unwrap();
        let sq: Vec<f64> = quad.column(0).iter().map(|v| v * v).collect();
        let m = stats::mean_se(&sq);
        assert!((m.mean - 0.5).abs() < 3.0 * m.se, "variance {}", m.mean);
    }

    #[test]
    fn exact_sampler_marginals_pass_ks() {
        let rng = RngStream::new(5, 2);
        let n = 100_000;
        let crit = stats::ks_critical(0.01, n, None);
        let p = make_logsumexp(vec![1.0, 3.0], vec![vec![1.5, 0.0], vec![-0.5, 1.0]]).unwrap();
        let b = sample_nu_exact(&p, n, &rng).unwrap();
        for j in 0..2 {
            let d = stats::ks_one_sample(&b.column(j), |x| {
                0.25 * stats::normal_cdf(x - [1.5, 0.0][j]) + 0.75 * stats::normal_cdf(x - [-0.5, 1.0][j])
            });
            assert!(d < crit, "coordinate {j}: D = {d}, critical {crit}");
        }
        let q = sample_nu_exact(&make_scaled_quadratic(3.0, 1).unwrap(), n, &rng).unwrap();
        let d = stats::ks_one_sample(&q.column(0), |x| stats::normal_cdf(2.0 * x));
        assert!(d < crit);
    }

    #[test]
    fn black_box_has_no_exact_sampler() {
        let p = crate::potentials::black_box(1, |x| 0.0 * x[0]).build().unwrap();
        assert!(matches!(
            sample_nu_exact(&p, 10, &RngStream::new(1, 0)),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn mala_on_zero_potential_targets_gamma() {
        let p = make_linear(vec![0.0]).unwrap();
        let b = sample_nu_mala(&p, 100_000, &MalaConfig::default(), &RngStream::new(9, 0)).unwrap();
        let x = b.column(0);
        let m = stats::mean_se(&x);
        let tau = stats::integrated_autocorr_time(&x);
        assert!(m.mean.abs() < 4.0 * m.se * tau.sqrt(), "mean {} se {} tau {tau}", m.mean, m.se);
        let d = b.diagnostics().unwrap();
        assert!(d.warning.is_none(), "{:?}", d);
        assert!((d.acceptance_rate - 0.574).abs() < 0.1);
    }

    #[test]
    fn mala_on_black_box_linear_matches_exact_mean() {
        let p = crate::potentials::black_box(2, |x| x[0] - 0.5)
            .gradient(|_| vec![1.0, 0.0])
            .build()
            .unwrap();
        let b = sample_nu_mala(&p, 100_000, &MalaConfig::default(), &RngStream::new(10, 0)).unwrap();
        let x = b.column(0);
        let m = stats::mean_se(&x);
        let tau = stats::integrated_autocorr_time(&x);
        assert!((m.mean - 1.0).abs() < 4.0 * m.se * tau.sqrt(), "mean {}", m.mean);
    }

    #[test]
    fn mala_visits_both_modes() {
        let p = pm(2.0);
        let config = MalaConfig {
            thin: 1,
            ..MalaConfig::default()
        };
        let b = sample_nu_mala(&p, 1_000_000, &config, &RngStream::new(12, 0)).unwrap();
        let positive = b.column(0).iter().filter(|v| **v > 0.0).count() as f64 / 1e6;
        assert!((0.45..=0.55).contains(&positive), "occupancy {positive}");
    }

    #[test]
    fn mala_and_exact_agree_on_bounded_statistics() {
        let p = make_logsumexp(vec![2.0, 1.0], vec![vec![1.0, 0.5], vec![-1.0, 0.0]]).unwrap();
        let exact = sample_nu_exact(&p, 100_000, &RngStream::new(21, 0)).unwrap();
        let mala = sample_nu_mala(&p, 100_000, &MalaConfig::default(), &RngStream::new(21, 1)).unwrap();
        // 20 bounded statistics: tanh and cos of projections on fixed directions
        for k in 0..10 {
            let angle = k as f64 * 0.3;
            let u = [angle.cos(), angle.sin()];
            let stat = |b: &SampleBatch, which: usize| -> Vec<f64> {
                b.project(&u)
                    .into_iter()
                    .map(|v| if which == 0 { v.tanh() } else { v.cos() })
                    .collect()
            };
            for which in 0..2 {
                let se = stats::mean_se(&stat(&exact, which));
                let sm_vals = stat(&mala, which);
                let sm = stats::mean_se(&sm_vals);
                let tau = stats::integrated_autocorr_time(&sm_vals);
                let combined = (se.se.powi(2) + sm.se.powi(2) * tau).sqrt();
                assert!(
                    (se.mean - sm.mean).abs() < 4.0 * combined,
                    "statistic {k}/{which}: exact {} mala {}",
                    se.mean,
                    sm.mean
                );
            }
        }
    }

    #[test]
    fn quadrature_reference_values() {
        let g = QuadratureGrid::default();
        let zero = make_linear(vec![0.0]).unwrap();
        assert!(quadrature_oracle(&zero, Functional::Kl, &g).unwrap().abs() < 1e-10);
        let lin = make_linear(vec![1.0]).unwrap();
        assert!((quadrature_oracle(&lin, Functional::Kl, &g).unwrap() - 0.5).abs() < 1e-10);
        let w = quadrature_oracle(&pm(1.0), Functional::Width, &g).unwrap();
        assert!((w - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        let sq = make_scaled_quadratic(1.0, 1).unwrap();
        let kl = quadrature_oracle(&sq, Functional::Kl, &g).unwrap();
        assert!((kl - 0.5 * (2f64.ln() - 0.5)).abs() < 1e-10, "kl {kl}");
        let gap = quadrature_oracle(&sq, Functional::EntropyGap, &g).unwrap();
        assert!((gap + 0.5 * 2f64.ln()).abs() < 1e-10);
        let m2 = quadrature_oracle(&sq, Functional::SecondMoment, &g).unwrap();
        assert!((m2 - 0.5).abs() < 1e-10);
        let lz = quadrature_oracle(&pm(1.5), Functional::LogNormalizer, &g).unwrap();
        assert!(lz.abs() < 1e-12);
    }

    #[test]
    fn quadrature_width_of_two_orthogonal_units() {
        // E max(y1, y2) = 1/√π for independent standard normals
        let p = make_logsumexp(vec![1.0, 1.0], vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let w = quadrature_oracle(&p, Functional::Width, &QuadratureGrid::default()).unwrap();
        assert!((w - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-13, "{w}");
        // box [-1,1]²: E|y1| + E|y2|
        let b = GradientSet::IntervalBox {
            lower: vec![-1.0, -1.0],
            upper: vec![1.0, 1.0],
        };
        let w = width_oracle(&b, 2).unwrap();
        assert!((w - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-13);
        assert!(width_oracle(&GradientSet::Unbounded, 2).is_err());
    }

    #[test]
    fn quadrature_is_stable_under_refinement() {
        let g = QuadratureGrid::default();
        let cases = vec![
            make_linear(vec![2.0]).unwrap(),
            pm(2.0),
            make_logsumexp(vec![1.0, 2.0], vec![vec![1.0, -1.0], vec![0.5, 1.5]]).unwrap(),
        ];
        let functionals = [
            Functional::Kl,
            Functional::Fisher,
            Functional::SecondMoment,
            Functional::EntropyGap,
            Functional::LogNormalizer,
            Functional::MeanLaplacian,
            Functional::XDotGrad,
        ];
        for p in &cases {
            let g = if p.dim() == 2 {
                QuadratureGrid { points_per_axis: 601, radius: None }
            } else {
                g
            };
            for f in functionals {
                let a = quadrature_oracle(p, f, &g).unwrap();
                let b = quadrature_oracle(p, f, &g.refined()).unwrap();
                assert!((a - b).abs() < 1e-8, "{f:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn quadrature_rejects_high_dimension() {
        let p = make_linear(vec![0.0; 3]).unwrap();
        assert!(matches!(
            quadrature_oracle(&p, Functional::Kl, &QuadratureGrid::default()),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn columnar_export_round_trips() {
        let b = sample_gamma(3, 20, &RngStream::new(1, 0)).unwrap();
        let mut buf = Vec::new();
        b.write_columnar(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 20);
        let back = SampleBatch::read_columnar(&text, SampleSource::Gamma).unwrap();
        assert_eq!(back, b);
    }
}
