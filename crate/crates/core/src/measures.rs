//! Estimators for the scalar functionals of a tilted measure.
//!
//! Every estimator returns an [`Estimate`]. Monte Carlo estimates keep their
//! per-draw values so that several estimates computed on one batch can be
//! combined draw-by-draw ([`Combination`]); algebraic identities between
//! estimators then hold exactly on shared batches instead of only up to
//! sampling noise.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::potentials::{dot, Family, GradientSet, Potential, SearchConfig};
use crate::samplers::{sample_nu_exact, Functional, RngStream, SampleBatch, SampleSource};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Analytic,
    MonteCarlo,
    Quadrature,
    HeuristicBound,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundDirection {
    /// The true value is at least the reported value.
    Lower,
    /// The true value is at most the reported value.
    Upper,
}

/// Per-draw values behind a Monte Carlo estimate.
#[derive(Clone, Debug, PartialEq)]
pub struct Draws {
    batch_id: u64,
    values: Vec<f64>,
    /// Deterministic-in-batch shift (e.g. `−log_normalizer`) and its SE.
    offset: f64,
    offset_se: f64,
}

/// A value with its standard error, sample count and provenance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
    pub sample_count: usize,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundDirection>,
    /// Largest amount by which the estimator may systematically overstate
    /// the true value (finite-sample transport bias); zero when unbiased.
    #[serde(skip_serializing_if = "is_zero")]
    pub upward_bias: f64,
    #[serde(skip)]
    draws: Option<Arc<Draws>>,
}

fn is_zero(x: &f64) -> bool {
    *x == 0.0
}

impl Estimate {
    pub fn analytic(value: f64) -> Self {
        Estimate::deterministic(value, Method::Analytic)
    }

    pub fn quadrature(value: f64) -> Self {
        Estimate::deterministic(value, Method::Quadrature)
    }

    fn deterministic(value: f64, method: Method) -> Self {
        Estimate {
            value,
            std_error: 0.0,
            sample_count: 0,
            method,
            bound: None,
            upward_bias: 0.0,
            draws: None,
        }
    }

    /// Monte Carlo estimate with a known SE but no per-draw values.
    pub fn monte_carlo(value: f64, std_error: f64, sample_count: usize) -> Self {
        Estimate {
            value,
            std_error,
            sample_count,
            method: Method::MonteCarlo,
            bound: None,
            upward_bias: 0.0,
            draws: None,
        }
    }

    pub fn heuristic(value: f64, direction: BoundDirection, sample_count: usize) -> Self {
        Estimate {
            value,
            std_error: 0.0,
            sample_count,
            method: Method::HeuristicBound,
            bound: Some(direction),
            upward_bias: 0.0,
            draws: None,
        }
    }

    /// Sample mean of `values` plus `offset`, keeping the draws for pairing.
    pub fn from_draws(batch_id: u64, values: Vec<f64>, offset: f64, offset_se: f64) -> Self {
        let m = stats::mean_se(&values);
        Estimate {
            value: m.mean + offset,
            std_error: (m.se * m.se + offset_se * offset_se).sqrt(),
            sample_count: m.count,
            method: Method::MonteCarlo,
            bound: None,
            upward_bias: 0.0,
            draws: Some(Arc::new(Draws {
                batch_id,
                values,
                offset,
                offset_se,
            })),
        }
    }

    pub fn with_upward_bias(mut self, bias: f64) -> Self {
        self.upward_bias = bias;
        self
    }

    pub fn draws(&self) -> Option<&[f64]> {
        self.draws.as_deref().map(|d| d.values.as_slice())
    }

    pub fn batch_id(&self) -> Option<u64> {
        self.draws.as_deref().map(|d| d.batch_id)
    }

    /// Same estimate scaled by `c` (draws included).
    pub fn scaled(&self, c: f64) -> Estimate {
        let mut out = self.clone();
        out.value *= c;
        out.std_error *= c.abs();
        out.upward_bias *= c.abs();
        if let Some(d) = &self.draws {
            out.draws = Some(Arc::new(Draws {
                batch_id: d.batch_id,
                values: d.values.iter().map(|v| v * c).collect(),
                offset: d.offset * c,
                offset_se: d.offset_se * c.abs(),
            }));
        }
        out
    }
}

/// A linear combination `Σ c_j · estimate_j` whose standard error pairs
/// estimates computed on the same batch draw-by-draw and treats distinct
/// batches (and deterministic terms) as independent.
#[derive(Clone, Debug, Default)]
pub struct Combination {
    terms: Vec<(f64, Estimate)>,
}

impl Combination {
    pub fn new() -> Self {
        Combination::default()
    }

    pub fn add(mut self, coef: f64, e: &Estimate) -> Self {
        self.terms.push((coef, e.clone()));
        self
    }

    pub fn constant(self, c: f64) -> Self {
        self.add(1.0, &Estimate::analytic(c))
    }

    /// `self − other`, term by term.
    pub fn subtract(mut self, other: &Combination) -> Self {
        for (c, e) in &other.terms {
            self.terms.push((-c, e.clone()));
        }
        self
    }

    /// `self + coef · other`, term by term.
    pub fn add_all(mut self, coef: f64, other: &Combination) -> Self {
        for (c, e) in &other.terms {
            self.terms.push((coef * c, e.clone()));
        }
        self
    }

    pub fn value(&self) -> f64 {
        self.terms.iter().map(|(c, e)| c * e.value).sum()
    }

    pub fn std_error(&self) -> f64 {
        let mut var = 0.0;
        let mut groups: Vec<(u64, Vec<f64>)> = Vec::new();
        for (c, e) in &self.terms {
            match &e.draws {
                Some(d) => {
                    var += (c * d.offset_se).powi(2);
                    match groups.iter_mut().find(|(id, v)| *id == d.batch_id && v.len() == d.values.len()) {
                        Some((_, acc)) => {
                            for (a, v) in acc.iter_mut().zip(&d.values) {
                                *a += c * v;
                            }
                        }
                        None => groups.push((d.batch_id, d.values.iter().map(|v| c * v).collect())),
                    }
                }
                None => var += (c * e.std_error).powi(2),
            }
        }
        for (_, acc) in &groups {
            var += stats::mean_se(acc).se.powi(2);
        }
        var.sqrt()
    }

    /// Sum of the systematic allowances of the terms entering with a
    /// positive coefficient (those are the ones that can inflate the value).
    pub fn upward_bias(&self) -> f64 {
        self.terms
            .iter()
            .filter(|(c, _)| *c > 0.0)
            .map(|(c, e)| c * e.upward_bias)
            .sum()
    }

    pub fn sample_count(&self) -> usize {
        self.terms.iter().map(|(_, e)| e.sample_count).max().unwrap_or(0)
    }

    pub fn method(&self) -> Method {
        let methods: Vec<Method> = self.terms.iter().map(|(_, e)| e.method).collect();
        for m in [Method::HeuristicBound, Method::MonteCarlo, Method::Quadrature] {
            if methods.contains(&m) {
                return m;
            }
        }
        Method::Analytic
    }

    pub fn estimate(&self) -> Estimate {
        let mut e = Estimate::monte_carlo(self.value(), self.std_error(), self.sample_count());
        e.method = self.method();
        e.upward_bias = self.upward_bias();
        e
    }
}

/// `dν = e^f dγ` for a named potential.
#[derive(Clone, Debug)]
pub struct TiltedMeasure {
    pub name: String,
    pub potential: Potential,
}

impl TiltedMeasure {
    pub fn new(name: impl Into<String>, potential: Potential) -> Self {
        TiltedMeasure {
            name: name.into(),
            potential,
        }
    }

    pub fn dim(&self) -> usize {
        self.potential.dim()
    }
}

/// Content fingerprint of a batch (FNV-1a over the raw bits).
pub fn batch_id(batch: &SampleBatch) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in batch.as_flat() {
        h ^= v.to_bits();
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ batch.dim() as u64
}

fn require_nu(m: &TiltedMeasure, batch: &SampleBatch) -> Result<()> {
    check_dim(m.dim(), batch.dim())?;
    if batch.source() == SampleSource::Gamma {
        return Err(Error::WrongMeasure(
            "estimator needs draws from ν, got a batch from γ".into(),
        ));
    }
    Ok(())
}

fn over_nu(
    m: &TiltedMeasure,
    batch: &SampleBatch,
    offset: f64,
    offset_se: f64,
    integrand: impl Fn(&Potential, &[f64], &mut [f64]) -> f64,
) -> Result<Estimate> {
    require_nu(m, batch)?;
    let p = &m.potential;
    let mut scratch = vec![0.0; p.dim()];
    let values = batch.rows().map(|x| integrand(p, x, &mut scratch)).collect();
    Ok(Estimate::from_draws(batch_id(batch), values, offset, offset_se))
}

/// `D_KL(ν‖γ) = ∫ f dν − log ∫ e^f dγ`.
pub fn estimate_kl(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    let p = &m.potential;
    over_nu(m, batch, -p.log_normalizer(), p.log_normalizer_se(), |p, x, _| p.f(x))
}

/// `I(ν) = ∫ |∇f|² dν`.
pub fn estimate_fisher(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    over_nu(m, batch, 0.0, 0.0, |p, x, g| {
        p.grad_into(x, g);
        dot(g, g)
    })
}

/// `I(ν)` through Gaussian integration by parts: `∫ (⟨x,∇f⟩ − Δf) dν`.
pub fn estimate_fisher_ibp(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    over_nu(m, batch, 0.0, 0.0, |p, x, g| {
        p.grad_into(x, g);
        dot(x, g) - p.laplacian(x)
    })
}

/// `∫ ⟨x, ∇f⟩ dν`.
pub fn estimate_x_dot_grad(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    over_nu(m, batch, 0.0, 0.0, |p, x, g| {
        p.grad_into(x, g);
        dot(x, g)
    })
}

/// `∫ Δf dν`.
pub fn estimate_mean_laplacian(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    over_nu(m, batch, 0.0, 0.0, |p, x, _| p.laplacian(x))
}

/// `∫ |x|² dν`.
pub fn estimate_second_moment(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    over_nu(m, batch, 0.0, 0.0, |_, x, _| dot(x, x))
}

/// `H(ν) − H(γ) = −∫ (f − log Z) dν + ½(∫|x|² dν − n)`.
pub fn estimate_entropy_gap(m: &TiltedMeasure, batch: &SampleBatch) -> Result<Estimate> {
    let p = &m.potential;
    let n = p.dim() as f64;
    over_nu(m, batch, p.log_normalizer(), p.log_normalizer_se(), |p, x, _| {
        -p.f(x) + 0.5 * (dot(x, x) - n)
    })
}

/// `log ∫ e^f dγ` from draws of `γ`, with a delta-method SE.
pub fn estimate_log_normalizer(p: &Potential, gamma_batch: &SampleBatch) -> Result<Estimate> {
    check_dim(p.dim(), gamma_batch.dim())?;
    if gamma_batch.source() != SampleSource::Gamma {
        return Err(Error::WrongMeasure("log-normalizer needs draws from γ".into()));
    }
    let values: Vec<f64> = gamma_batch.rows().map(|y| p.f(y)).collect();
    let (value, se) = stats::log_mean_exp(&values);
    Ok(Estimate::monte_carlo(value, se, values.len()))
}

/// Gaussian width `D(ν) = ∫ sup_{t∈K} ⟨y, t⟩ dγ(y)`.
///
/// Exact support functions give a Monte Carlo estimate; a heuristic gradient
/// set gives a lower bound from multi-start ascent of `x ↦ ⟨y, ∇f(x)⟩`.
pub fn estimate_width(p: &Potential, gamma_batch: &SampleBatch) -> Result<Estimate> {
    check_dim(p.dim(), gamma_batch.dim())?;
    if gamma_batch.source() != SampleSource::Gamma {
        return Err(Error::WrongMeasure("width needs draws from γ".into()));
    }
    let set = p.gradient_set();
    match &set {
        GradientSet::Unbounded => Err(Error::NotApplicable(
            "gradient set is unbounded; the Gaussian width is infinite".into(),
        )),
        GradientSet::HeuristicSearch(config) => {
            let values: Vec<f64> = gamma_batch
                .rows()
                .enumerate()
                .map(|(i, y)| heuristic_support(p, y, config, i as u64))
                .collect();
            let m = stats::mean_se(&values);
            let mut e = Estimate::heuristic(m.mean, BoundDirection::Lower, m.count);
            e.std_error = m.se;
            Ok(e)
        }
        _ => {
            let values = gamma_batch.rows().map(|y| set.support(y).unwrap()).collect();
            Ok(Estimate::from_draws(batch_id(gamma_batch), values, 0.0, 0.0))
        }
    }
}

/// Best value of `⟨y, ∇f(x)⟩` found by gradient ascent over `x` from
/// several random starts. The ascent direction `∇²f(x) y` is a central
/// difference of `∇f` along `y`.
fn heuristic_support(p: &Potential, y: &[f64], config: &SearchConfig, index: u64) -> f64 {
    let n = p.dim();
    let mut rng = RngStream::new(0x5eed_0f_5ea2c4, index).generator();
    let mut grad = vec![0.0; n];
    let mut gp = vec![0.0; n];
    let mut gm = vec![0.0; n];
    let norm_y = dot(y, y).sqrt().max(1e-300);
    let h = crate::potentials::FD_STEP / norm_y;
    let mut best = f64::NEG_INFINITY;
    for restart in 0..config.restarts.max(1) {
        let mut x: Vec<f64> = if restart == 0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| config.radius * (2.0 * rng.random::<f64>() - 1.0)).collect()
        };
        let mut step = config.step_size;
        p.grad_into(&x, &mut grad);
        let mut current = dot(y, &grad);
        for _ in 0..config.steps {
            let xp: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - h * b).collect();
            p.grad_into(&xp, &mut gp);
            p.grad_into(&xm, &mut gm);
            let direction: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let len = dot(&direction, &direction).sqrt();
            if len < 1e-14 {
                break;
            }
            let trial: Vec<f64> = x.iter().zip(&direction).map(|(a, d)| a + step * d / len).collect();
            p.grad_into(&trial, &mut grad);
            let value = dot(y, &grad);
            if value > current {
                x = trial;
                current = value;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-10 {
                    break;
                }
            }
        }
        best = best.max(current);
    }
    best
}

/// `M = −inf_x Δf(x)`.
///
/// Closed forms for Linear and ScaledQuadratic; otherwise a multi-start
/// minimization of `Δf` whose result is a lower bound on `M`.
pub fn estimate_m(p: &Potential) -> Estimate {
    let n = p.dim();
    match p.family() {
        Family::Linear { .. } => Estimate::analytic(0.0),
        Family::ScaledQuadratic { s } => Estimate::analytic(s * n as f64),
        Family::LogSumExp { centers, .. } if centers.len() == 1 => Estimate::analytic(0.0),
        Family::LogSumExp { centers, .. } => {
            let reach = centers.iter().map(|a| dot(a, a).sqrt()).fold(0.0, f64::max);
            let min = minimize_laplacian(p, 10.0 + reach, 20);
            Estimate::heuristic(-min, BoundDirection::Lower, 20)
        }
        Family::BlackBox(_) => {
            let min = minimize_laplacian(p, 10.0, 20);
            Estimate::heuristic(-min, BoundDirection::Lower, 20)
        }
    }
}

/// An upper bound on `M` usable on the right-hand side of an inequality,
/// or `None` when no certified bound is known.
///
/// For LogSumExp the Hessian of `f` is the covariance of the centers under
/// the softmax weights, hence positive semidefinite: `Δf ≥ 0` and `M ≤ 0`.
pub fn m_upper_bound(p: &Potential) -> Option<Estimate> {
    match p.family() {
        Family::Linear { .. } | Family::ScaledQuadratic { .. } => Some(estimate_m(p)),
        Family::LogSumExp { .. } => Some(Estimate::analytic(0.0)),
        Family::BlackBox(_) => None,
    }
}

/// Compass search for `min Δf` over the box `[-radius, radius]^n`.
fn minimize_laplacian(p: &Potential, radius: f64, starts: usize) -> f64 {
    let n = p.dim();
    let mut rng = RngStream::new(0x1a91_ac1a, n as u64).generator();
    let mut best = f64::INFINITY;
    for s in 0..starts {
        let mut x: Vec<f64> = if s == 0 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| radius * (2.0 * rng.random::<f64>() - 1.0)).collect()
        };
        let mut value = p.laplacian(&x);
        let mut step = radius / 4.0;
        while step > 1e-8 {
            let mut improved = false;
            for j in 0..n {
                for sign in [1.0, -1.0] {
                    let old = x[j];
                    x[j] = (old + sign * step).clamp(-radius, radius);
                    let v = p.laplacian(&x);
                    if v < value {
                        value = v;
                        improved = true;
                    } else {
                        x[j] = old;
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        best = best.min(value);
    }
    best
}

/// Closed-form value of a functional, when the family has one.
pub fn analytic_value(p: &Potential, functional: Functional) -> Option<f64> {
    let n = p.dim() as f64;
    let gaussian_shift = |alpha: &[f64]| {
        let a2 = dot(alpha, alpha);
        match functional {
            Functional::Kl => Some(0.5 * a2),
            Functional::Fisher | Functional::XDotGrad => Some(a2),
            Functional::SecondMoment => Some(a2 + n),
            Functional::EntropyGap | Functional::Width => Some(0.0),
            Functional::LogNormalizer | Functional::MeanLaplacian => Some(0.0),
        }
    };
    match p.family() {
        Family::Linear { alpha } => gaussian_shift(alpha),
        Family::LogSumExp { centers, .. } if centers.len() == 1 => gaussian_shift(&centers[0]),
        Family::ScaledQuadratic { s } => {
            let var = 1.0 / (1.0 + s);
            match functional {
                Functional::Kl => Some(0.5 * n * (var - 1.0 - var.ln())),
                Functional::Fisher => Some(s * s * n * var),
                Functional::SecondMoment => Some(n * var),
                Functional::EntropyGap => Some(0.5 * n * var.ln()),
                Functional::Width => (*s == 0.0).then_some(0.0),
                Functional::LogNormalizer => Some(0.0),
                Functional::MeanLaplacian => Some(-s * n),
                Functional::XDotGrad => Some(-s * n * var),
            }
        }
        _ => None,
    }
}

/// Grows an exact-sampler batch until the estimate's SE is at most
/// `tolerance` or `cap` draws are used.
pub fn estimate_to_tolerance(
    m: &TiltedMeasure,
    estimator: fn(&TiltedMeasure, &SampleBatch) -> Result<Estimate>,
    tolerance: f64,
    cap: usize,
    rng: &RngStream,
) -> Result<Estimate> {
    let mut count = 10_000usize.min(cap.max(1));
    loop {
        let batch = sample_nu_exact(&m.potential, count, rng)?;
        let e = estimator(m, &batch)?;
        if e.std_error <= tolerance || count >= cap {
            return Ok(e);
        }
        count = (count * 4).min(cap);
    }
}
