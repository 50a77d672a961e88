//! Potentials `f` defining tilted Gaussian measures `dν = e^f dγ`.
//!
//! A [`Potential`] carries `f`, its gradient and Laplacian, the description
//! of its gradient set `K = {∇f(x)}`, and flags saying which functionals
//! have closed forms. Structured families are normalized at construction so
//! that `log ∫ e^f dγ = 0`.

use std::fmt;
use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::hexfloat;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Largest number of mixture components a product potential may expand to.
pub const MAX_PRODUCT_CENTERS: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FamilyKind {
    Linear,
    ScaledQuadratic,
    LogSumExp,
    BlackBox,
}

impl FamilyKind {
    pub fn name(self) -> &'static str {
        match self {
            FamilyKind::Linear => "linear",
            FamilyKind::ScaledQuadratic => "scaled_quadratic",
            FamilyKind::LogSumExp => "logsumexp",
            FamilyKind::BlackBox => "black_box",
        }
    }
}

/// Which functionals of a potential are available without simulation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Capabilities {
    pub exact_sampler: bool,
    pub analytic_kl: bool,
    pub analytic_fisher: bool,
    pub analytic_width: bool,
    pub analytic_m: bool,
    pub analytic_drift: bool,
    pub finite_extreme_points: bool,
    /// The gradient set is unbounded, so its Gaussian width is infinite.
    pub infinite_width: bool,
}

/// Parameters of the multi-start inner maximization used when `K` has no
/// tractable description.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SearchConfig {
    pub restarts: usize,
    pub steps: usize,
    pub step_size: f64,
    /// Starting points are drawn uniformly from `[-radius, radius]^n`.
    pub radius: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            restarts: 8,
            steps: 200,
            step_size: 0.5,
            radius: 4.0,
        }
    }
}

/// Description of the gradient set `K = {∇f(x) : x ∈ ℝⁿ}`.
#[derive(Clone, Debug, PartialEq)]
pub enum GradientSet {
    Singleton(Vec<f64>),
    /// The closed convex hull of `K` is the convex hull of these points.
    FiniteExtremePoints(Vec<Vec<f64>>),
    /// The closed convex hull of `K` is the box `[lower, upper]`.
    IntervalBox { lower: Vec<f64>, upper: Vec<f64> },
    HeuristicSearch(SearchConfig),
    Unbounded,
}

impl GradientSet {
    /// Support function `sup_{t∈K} ⟨y, t⟩`, or `None` when it cannot be
    /// evaluated exactly.
    pub fn support(&self, y: &[f64]) -> Option<f64> {
        match self {
            GradientSet::Singleton(a) => Some(dot(a, y)),
            GradientSet::FiniteExtremePoints(pts) => {
                Some(pts.iter().map(|a| dot(a, y)).fold(f64::NEG_INFINITY, f64::max))
            }
            GradientSet::IntervalBox { lower, upper } => Some(
                y.iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(yi, (l, u))| (yi * l).max(yi * u))
                    .sum(),
            ),
            GradientSet::HeuristicSearch(_) | GradientSet::Unbounded => None,
        }
    }

    /// `sup_{t∈T} [⟨x, t⟩ − ½|t|²]` where `T` is the described point set:
    /// the point itself, the finite point list, or the box.
    pub fn z_value(&self, x: &[f64]) -> Option<f64> {
        match self {
            GradientSet::Singleton(a) => Some(dot(a, x) - 0.5 * dot(a, a)),
            GradientSet::FiniteExtremePoints(pts) => Some(
                pts.iter()
                    .map(|a| dot(a, x) - 0.5 * dot(a, a))
                    .fold(f64::NEG_INFINITY, f64::max),
            ),
            GradientSet::IntervalBox { lower, upper } => Some(
                x.iter()
                    .zip(lower.iter().zip(upper))
                    .map(|(xi, (l, u))| {
                        let t = xi.clamp(*l, *u);
                        xi * t - 0.5 * t * t
                    })
                    .sum(),
            ),
            GradientSet::HeuristicSearch(_) | GradientSet::Unbounded => None,
        }
    }

    pub fn is_exact(&self) -> bool {
        !matches!(self, GradientSet::HeuristicSearch(_) | GradientSet::Unbounded)
    }
}

type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type VectorFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// User-supplied potential. Missing derivatives fall back to central
/// finite differences.
#[derive(Clone)]
pub struct BlackBox {
    f: ScalarFn,
    grad: Option<VectorFn>,
    laplacian: Option<ScalarFn>,
    gradient_set: GradientSet,
}

#[derive(Clone)]
pub enum Family {
    Linear {
        alpha: Vec<f64>,
    },
    ScaledQuadratic {
        s: f64,
    },
    LogSumExp {
        /// Normalized mixture weights `p_i`.
        weights: Vec<f64>,
        /// Weights as supplied, kept so serialization round-trips exactly.
        raw_weights: Vec<f64>,
        centers: Vec<Vec<f64>>,
        /// `log p_i − |α_i|²/2`, the constant part of each exponent.
        offsets: Vec<f64>,
    },
    BlackBox(BlackBox),
}

/// A twice-differentiable potential `f : ℝⁿ → ℝ`.
#[derive(Clone)]
pub struct Potential {
    family: Family,
    dim: usize,
    log_normalizer: f64,
    log_normalizer_se: f64,
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Potential")
            .field("family", &self.kind())
            .field("dim", &self.dim)
            .field("log_normalizer", &self.log_normalizer)
            .finish_non_exhaustive()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Parameter(format!("{what} must be finite")))
    }
}

/// `f(x) = ⟨α,x⟩ − |α|²/2`, so that `ν = N(α, Id)`.
pub fn make_linear(alpha: Vec<f64>) -> Result<Potential> {
    if alpha.is_empty() {
        return Err(Error::Parameter("dimension must be positive".into()));
    }
    check_finite(&alpha, "alpha")?;
    Ok(Potential {
        dim: alpha.len(),
        family: Family::Linear { alpha },
        log_normalizer: 0.0,
        log_normalizer_se: 0.0,
    })
}

/// `f(x) = log Σ p_i exp(⟨α_i,x⟩ − |α_i|²/2)`, so that `ν = Σ p_i N(α_i, Id)`.
/// Weights are renormalized to sum to one.
pub fn make_logsumexp(weights: Vec<f64>, centers: Vec<Vec<f64>>) -> Result<Potential> {
    if centers.is_empty() {
        return Err(Error::Parameter("at least one center is required".into()));
    }
    if weights.len() != centers.len() {
        return Err(Error::Parameter(format!(
            "{} weights for {} centers",
            weights.len(),
            centers.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return Err(Error::Parameter(format!("weights must be positive, got {w}")));
    }
    let dim = centers[0].len();
    if dim == 0 {
        return Err(Error::Parameter("dimension must be positive".into()));
    }
    for c in &centers {
        check_dim(dim, c.len())?;
        check_finite(c, "center")?;
    }
    let total: f64 = weights.iter().sum();
    let raw_weights = weights;
    let weights: Vec<f64> = raw_weights.iter().map(|w| w / total).collect();
    let offsets = weights
        .iter()
        .zip(&centers)
        .map(|(p, a)| p.ln() - 0.5 * dot(a, a))
        .collect();
    Ok(Potential {
        dim,
        family: Family::LogSumExp {
            weights,
            raw_weights,
            centers,
            offsets,
        },
        log_normalizer: 0.0,
        log_normalizer_se: 0.0,
    })
}

/// `f(x) = −(s/2)|x|² + (n/2) log(1+s)`, so that `ν = N(0, Id/(1+s))`.
pub fn make_scaled_quadratic(s: f64, dim: usize) -> Result<Potential> {
    if !(s > -1.0) || !s.is_finite() {
        return Err(Error::Parameter(format!("s must exceed -1, got {s}")));
    }
    if dim == 0 {
        return Err(Error::Parameter("dimension must be positive".into()));
    }
    Ok(Potential {
        dim,
        family: Family::ScaledQuadratic { s },
        log_normalizer: 0.0,
        log_normalizer_se: 0.0,
    })
}

/// Product potential `f(x_1, …, x_k) = Σ f_j(x_j)` over Linear and
/// LogSumExp blocks. The product of Gaussian mixtures is again a Gaussian
/// mixture, so the result is a single LogSumExp (or Linear) potential.
pub fn make_product(blocks: &[Potential]) -> Result<Potential> {
    if blocks.is_empty() {
        return Err(Error::Parameter("product of zero blocks".into()));
    }
    let mut weights = vec![1.0];
    let mut centers: Vec<Vec<f64>> = vec![Vec::new()];
    let mut all_linear = true;
    for block in blocks {
        let (bw, bc): (Vec<f64>, Vec<Vec<f64>>) = match &block.family {
            Family::Linear { alpha } => (vec![1.0], vec![alpha.clone()]),
            Family::LogSumExp {
                weights, centers, ..
            } => {
                all_linear = false;
                (weights.clone(), centers.clone())
            }
            _ => {
                return Err(Error::Unsupported(format!(
                    "product blocks must be linear or logsumexp, got {}",
                    block.kind().name()
                )))
            }
        };
        if centers.len() * bc.len() > MAX_PRODUCT_CENTERS {
            return Err(Error::Parameter(format!(
                "product expands to more than {MAX_PRODUCT_CENTERS} components"
            )));
        }
        let mut next_w = Vec::with_capacity(weights.len() * bw.len());
        let mut next_c = Vec::with_capacity(weights.len() * bw.len());
        for (w, c) in weights.iter().zip(&centers) {
            for (v, d) in bw.iter().zip(&bc) {
                next_w.push(w * v);
                next_c.push(c.iter().chain(d).cloned().collect::<Vec<f64>>());
            }
        }
        weights = next_w;
        centers = next_c;
    }
    if all_linear {
        make_linear(centers.pop().unwrap())
    } else {
        make_logsumexp(weights, centers)
    }
}

/// Builder for [`Family::BlackBox`] potentials.
pub struct BlackBoxBuilder {
    dim: usize,
    inner: BlackBox,
    log_normalizer: f64,
    log_normalizer_se: f64,
}

impl BlackBoxBuilder {
    pub fn gradient(mut self, g: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static) -> Self {
        self.inner.grad = Some(Arc::new(g));
        self
    }

    pub fn laplacian(mut self, l: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.inner.laplacian = Some(Arc::new(l));
        self
    }

    pub fn gradient_set(mut self, set: GradientSet) -> Self {
        self.inner.gradient_set = set;
        self
    }

    /// Records `log ∫ e^f dγ` (typically estimated) with its standard error.
    pub fn log_normalizer(mut self, value: f64, se: f64) -> Self {
        self.log_normalizer = value;
        self.log_normalizer_se = se;
        self
    }

    pub fn build(self) -> Result<Potential> {
        if self.dim == 0 {
            return Err(Error::Parameter("dimension must be positive".into()));
        }
        match &self.inner.gradient_set {
            GradientSet::Singleton(a) => check_dim(self.dim, a.len())?,
            GradientSet::FiniteExtremePoints(pts) => {
                if pts.is_empty() {
                    return Err(Error::Parameter("empty extreme point list".into()));
                }
                for p in pts {
                    check_dim(self.dim, p.len())?;
                }
            }
            GradientSet::IntervalBox { lower, upper } => {
                check_dim(self.dim, lower.len())?;
                check_dim(self.dim, upper.len())?;
                if lower.iter().zip(upper).any(|(l, u)| l > u) {
                    return Err(Error::Parameter("box lower bound exceeds upper".into()));
                }
            }
            GradientSet::HeuristicSearch(_) | GradientSet::Unbounded => {}
        }
        Ok(Potential {
            dim: self.dim,
            family: Family::BlackBox(self.inner),
            log_normalizer: self.log_normalizer,
            log_normalizer_se: self.log_normalizer_se,
        })
    }
}

/// Starts a black-box potential from a user callable `f`.
pub fn black_box(dim: usize, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> BlackBoxBuilder {
    BlackBoxBuilder {
        dim,
        inner: BlackBox {
            f: Arc::new(f),
            grad: None,
            laplacian: None,
            gradient_set: GradientSet::HeuristicSearch(SearchConfig::default()),
        },
        log_normalizer: 0.0,
        log_normalizer_se: 0.0,
    }
}

impl Potential {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    pub fn kind(&self) -> FamilyKind {
        match self.family {
            Family::Linear { .. } => FamilyKind::Linear,
            Family::ScaledQuadratic { .. } => FamilyKind::ScaledQuadratic,
            Family::LogSumExp { .. } => FamilyKind::LogSumExp,
            Family::BlackBox(_) => FamilyKind::BlackBox,
        }
    }

    /// `log ∫ e^f dγ`; zero for the structured families.
    pub fn log_normalizer(&self) -> f64 {
        self.log_normalizer
    }

    pub fn log_normalizer_se(&self) -> f64 {
        self.log_normalizer_se
    }

    pub fn with_log_normalizer(mut self, value: f64, se: f64) -> Self {
        self.log_normalizer = value;
        self.log_normalizer_se = se;
        self
    }

    pub fn capabilities(&self) -> Capabilities {
        match &self.family {
            Family::Linear { .. } => Capabilities {
                exact_sampler: true,
                analytic_kl: true,
                analytic_fisher: true,
                analytic_width: true,
                analytic_m: true,
                analytic_drift: true,
                finite_extreme_points: true,
                infinite_width: false,
            },
            Family::ScaledQuadratic { s } => Capabilities {
                exact_sampler: true,
                analytic_kl: true,
                analytic_fisher: true,
                analytic_width: *s == 0.0,
                analytic_m: true,
                analytic_drift: true,
                finite_extreme_points: *s == 0.0,
                infinite_width: *s != 0.0,
            },
            Family::LogSumExp { centers, .. } => Capabilities {
                exact_sampler: true,
                analytic_kl: centers.len() == 1,
                analytic_fisher: centers.len() == 1,
                analytic_width: centers.len() == 1,
                analytic_m: centers.len() == 1,
                analytic_drift: true,
                finite_extreme_points: true,
                infinite_width: false,
            },
            Family::BlackBox(bb) => Capabilities {
                finite_extreme_points: matches!(
                    bb.gradient_set,
                    GradientSet::Singleton(_) | GradientSet::FiniteExtremePoints(_)
                ),
                infinite_width: matches!(bb.gradient_set, GradientSet::Unbounded),
                ..Capabilities::default()
            },
        }
    }

    pub fn gradient_set(&self) -> GradientSet {
        match &self.family {
            Family::Linear { alpha } => GradientSet::Singleton(alpha.clone()),
            Family::ScaledQuadratic { s } if *s == 0.0 => GradientSet::Singleton(vec![0.0; self.dim]),
            Family::ScaledQuadratic { .. } => GradientSet::Unbounded,
            Family::LogSumExp { centers, .. } if centers.len() == 1 => {
                GradientSet::Singleton(centers[0].clone())
            }
            Family::LogSumExp { centers, .. } => GradientSet::FiniteExtremePoints(centers.clone()),
            Family::BlackBox(bb) => bb.gradient_set.clone(),
        }
    }

    pub fn eval_f(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.f(x))
    }

    pub fn eval_grad(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut g = vec![0.0; self.dim];
        self.grad_into(x, &mut g);
        Ok(g)
    }

    pub fn eval_laplacian(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.laplacian(x))
    }

    /// Softmax weights of the mixture components at `x` together with the
    /// log-sum-exp value; only meaningful for LogSumExp.
    fn mixture_weights(offsets: &[f64], centers: &[Vec<f64>], x: &[f64], out: &mut Vec<f64>) -> f64 {
        out.clear();
        out.extend(offsets.iter().zip(centers).map(|(o, a)| o + dot(a, x)));
        let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for e in out.iter_mut() {
            *e = (*e - max).exp();
            total += *e;
        }
        for e in out.iter_mut() {
            *e /= total;
        }
        max + total.ln()
    }

    pub(crate) fn f(&self, x: &[f64]) -> f64 {
        match &self.family {
            Family::Linear { alpha } => dot(alpha, x) - 0.5 * dot(alpha, alpha),
            Family::ScaledQuadratic { s } => {
                -0.5 * s * dot(x, x) + 0.5 * self.dim as f64 * s.ln_1p()
            }
            Family::LogSumExp {
                offsets, centers, ..
            } => {
                let mut w = Vec::with_capacity(centers.len());
                Self::mixture_weights(offsets, centers, x, &mut w)
            }
            Family::BlackBox(bb) => (bb.f)(x),
        }
    }

    pub(crate) fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        match &self.family {
            Family::Linear { alpha } => out.copy_from_slice(alpha),
            Family::ScaledQuadratic { s } => {
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = -s * xi;
                }
            }
            Family::LogSumExp {
                offsets, centers, ..
            } => {
                let mut w = Vec::with_capacity(centers.len());
                Self::mixture_weights(offsets, centers, x, &mut w);
                out.fill(0.0);
                for (wi, a) in w.iter().zip(centers) {
                    for (o, aj) in out.iter_mut().zip(a) {
                        *o += wi * aj;
                    }
                }
            }
            Family::BlackBox(bb) => match &bb.grad {
                Some(g) => out.copy_from_slice(&g(x)),
                None => fd_gradient(&*bb.f, x, out),
            },
        }
    }

    pub(crate) fn laplacian(&self, x: &[f64]) -> f64 {
        match &self.family {
            Family::Linear { .. } => 0.0,
            Family::ScaledQuadratic { s } => -s * self.dim as f64,
            Family::LogSumExp {
                offsets, centers, ..
            } => {
                // Hessian is the covariance of α under the softmax weights;
                // its trace is Σ σ_i |α_i − mean|².
                let mut w = Vec::with_capacity(centers.len());
                Self::mixture_weights(offsets, centers, x, &mut w);
                let mut mean = vec![0.0; self.dim];
                for (wi, a) in w.iter().zip(centers) {
                    for (m, aj) in mean.iter_mut().zip(a) {
                        *m += wi * aj;
                    }
                }
                w.iter()
                    .zip(centers)
                    .map(|(wi, a)| {
                        wi * a.iter().zip(&mean).map(|(aj, m)| (aj - m) * (aj - m)).sum::<f64>()
                    })
                    .sum()
            }
            Family::BlackBox(bb) => match (&bb.laplacian, &bb.grad) {
                (Some(l), _) => l(x),
                (None, Some(g)) => fd_laplacian_from_gradient(&**g, x),
                (None, None) => fd_laplacian(&*bb.f, x),
            },
        }
    }

    /// Serializes to the plain-text potential block. Black-box potentials
    /// wrap callables and cannot be serialized.
    pub fn to_text(&self) -> Result<String> {
        let list = |v: &[f64]| v.iter().map(|x| hexfloat::format(*x)).collect::<Vec<_>>().join(" ");
        let mut out = format!("family {}\ndim {}\n", self.kind().name(), self.dim);
        match &self.family {
            Family::Linear { alpha } => out.push_str(&format!("alpha {}\n", list(alpha))),
            Family::ScaledQuadratic { s } => out.push_str(&format!("s {}\n", hexfloat::format(*s))),
            Family::LogSumExp {
                raw_weights, centers, ..
            } => {
                out.push_str(&format!("weights {}\n", list(raw_weights)));
                for c in centers {
                    out.push_str(&format!("center {}\n", list(c)));
                }
            }
            Family::BlackBox(_) => {
                return Err(Error::Unsupported("black-box potentials are not serializable".into()))
            }
        }
        Ok(out)
    }

    /// Parses a potential block. Numbers may be hexadecimal or decimal
    /// float literals; blank lines and `#` comments are ignored.
    pub fn from_text(text: &str) -> Result<Potential> {
        let mut family: Option<(usize, String)> = None;
        let mut dim: Option<usize> = None;
        let mut alpha = None;
        let mut s = None;
        let mut weights = None;
        let mut centers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap();
            let rest: Vec<&str> = parts.collect();
            let numbers = || -> Result<Vec<f64>> {
                rest.iter()
                    .map(|t| {
                        hexfloat::parse(t).ok_or_else(|| Error::Parse {
                            line: line_no,
                            message: format!("`{t}` is not a float literal"),
                        })
                    })
                    .collect()
            };
            let parse_err = |message: String| Error::Parse { line: line_no, message };
            match key {
                "family" => {
                    let name = rest.first().ok_or_else(|| parse_err("missing family name".into()))?;
                    family = Some((line_no, name.to_string()));
                }
                "dim" => {
                    let n = rest
                        .first()
                        .and_then(|t| t.parse::<usize>().ok())
                        .ok_or_else(|| parse_err("dim must be a positive integer".into()))?;
                    dim = Some(n);
                }
                "alpha" => alpha = Some(numbers()?),
                "s" => {
                    let v = numbers()?;
                    if v.len() != 1 {
                        return Err(parse_err("s takes exactly one value".into()));
                    }
                    s = Some(v[0]);
                }
                "weights" => weights = Some(numbers()?),
                "center" => centers.push((line_no, numbers()?)),
                other => return Err(parse_err(format!("unknown key `{other}`"))),
            }
        }
        let (family_line, family) = family.ok_or(Error::Parse {
            line: 0,
            message: "missing `family` line".into(),
        })?;
        let dim = dim.ok_or(Error::Parse {
            line: 0,
            message: "missing `dim` line".into(),
        })?;
        let located = |line: usize, e: Error| match e {
            Error::Parameter(m) | Error::Unsupported(m) => Error::Parse { line, message: m },
            Error::DimensionMismatch { expected, got } => Error::Parse {
                line,
                message: format!("expected {expected} coordinates, got {got}"),
            },
            other => other,
        };
        match family.as_str() {
            "linear" => {
                let alpha = alpha.ok_or(Error::Parse {
                    line: family_line,
                    message: "linear family needs an `alpha` line".into(),
                })?;
                check_dim(dim, alpha.len()).map_err(|e| located(family_line, e))?;
                make_linear(alpha).map_err(|e| located(family_line, e))
            }
            "scaled_quadratic" => {
                let s = s.ok_or(Error::Parse {
                    line: family_line,
                    message: "scaled_quadratic family needs an `s` line".into(),
                })?;
                make_scaled_quadratic(s, dim).map_err(|e| located(family_line, e))
            }
            "logsumexp" => {
                if centers.is_empty() {
                    return Err(Error::Parse {
                        line: family_line,
                        message: "logsumexp family needs `center` lines".into(),
                    });
                }
                for (line, c) in &centers {
                    check_dim(dim, c.len()).map_err(|e| located(*line, e))?;
                }
                let k = centers.len();
                let weights = weights.unwrap_or_else(|| vec![1.0; k]);
                make_logsumexp(weights, centers.into_iter().map(|(_, c)| c).collect())
                    .map_err(|e| located(family_line, e))
            }
            other => Err(Error::Parse {
                line: family_line,
                message: format!("unknown family `{other}`"),
            }),
        }
    }
}

fn fd_gradient(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), x: &[f64], out: &mut [f64]) {
    let mut xp = x.to_vec();
    for j in 0..x.len() {
        xp[j] = x[j] + FD_STEP;
        let up = f(&xp);
        xp[j] = x[j] - FD_STEP;
        let down = f(&xp);
        xp[j] = x[j];
        out[j] = (up - down) / (2.0 * FD_STEP);
    }
}

/// Trace of the Hessian from `2n + 1` evaluations of `f`.
fn fd_laplacian(f: &(dyn Fn(&[f64]) -> f64 + Send + Sync), x: &[f64]) -> f64 {
    let centre = f(x);
    let mut xp = x.to_vec();
    let mut total = 0.0;
    for j in 0..x.len() {
        xp[j] = x[j] + FD_STEP;
        let up = f(&xp);
        xp[j] = x[j] - FD_STEP;
        let down = f(&xp);
        xp[j] = x[j];
        total += (up - 2.0 * centre + down) / (FD_STEP * FD_STEP);
    }
    total
}

fn fd_laplacian_from_gradient(g: &(dyn Fn(&[f64]) -> Vec<f64> + Send + Sync), x: &[f64]) -> f64 {
    let mut xp = x.to_vec();
    let mut total = 0.0;
    for j in 0..x.len() {
        xp[j] = x[j] + FD_STEP;
        let up = g(&xp)[j];
        xp[j] = x[j] - FD_STEP;
        let down = g(&xp)[j];
        xp[j] = x[j];
        total += (up - down) / (2.0 * FD_STEP);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pm_one() -> Potential {
        make_logsumexp(vec![1.0, 1.0], vec![vec![1.0], vec![-1.0]]).unwrap()
    }

    #[test]
    fn zero_linear_is_identically_zero() {
        let p = make_linear(vec![0.0, 0.0]).unwrap();
        for x in [[0.0, 0.0], [3.0, -1.0]] {
            assert_eq!(p.eval_f(&x).unwrap(), 0.0);
            assert_eq!(p.eval_grad(&x).unwrap(), vec![0.0, 0.0]);
        }
    }

    #[test]
    fn linear_unit_vector_has_constant_gradient() {
        let p = make_linear(vec![1.0, 0.0]).unwrap();
        assert_eq!(p.eval_grad(&[0.3, -2.0]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(p.eval_laplacian(&[5.0, 1.0]).unwrap(), 0.0);
        assert_eq!(p.log_normalizer(), 0.0);
        assert_eq!(p.gradient_set(), GradientSet::Singleton(vec![1.0, 0.0]));
    }

    #[test]
    fn single_center_logsumexp_equals_linear() {
        let a = vec![0.7, -1.3];
        let l = make_linear(a.clone()).unwrap();
        let m = make_logsumexp(vec![3.0], vec![a]).unwrap();
        for x in [[0.0, 0.0], [1.5, 2.0], [-4.0, 0.25]] {
            assert!((l.eval_f(&x).unwrap() - m.eval_f(&x).unwrap()).abs() < 1e-14);
            let (gl, gm) = (l.eval_grad(&x).unwrap(), m.eval_grad(&x).unwrap());
            assert!(gl.iter().zip(&gm).all(|(a, b)| (a - b).abs() < 1e-14));
            assert!(m.eval_laplacian(&x).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn symmetric_pair_is_log_cosh() {
        let p = pm_one();
        for x in [-3.0, -0.5, 0.0, 0.8, 2.0] {
            let f = p.eval_f(&[x]).unwrap();
            assert!((f - (x.cosh().ln() - 0.5)).abs() < 1e-13);
            assert!((p.eval_grad(&[x]).unwrap()[0] - x.tanh()).abs() < 1e-14);
            let sech2 = 1.0 / (x.cosh() * x.cosh());
            assert!((p.eval_laplacian(&[x]).unwrap() - sech2).abs() < 1e-14);
        }
        assert_eq!(p.eval_grad(&[0.0]).unwrap(), vec![0.0]);
    }

    #[test]
    fn symmetric_pair_gradient_at_two_matches_finite_difference() {
        let p = pm_one();
        let h = FD_STEP;
        let fd = (p.eval_f(&[2.0 + h]).unwrap() - p.eval_f(&[2.0 - h]).unwrap()) / (2.0 * h);
        let g = p.eval_grad(&[2.0]).unwrap()[0];
        assert!((g - 0.964_027_580_075_817).abs() < 1e-12);
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn symmetric_pair_laplacian_infimum_is_zero_on_a_grid() {
        // grid minimization oracle: sech² is positive with infimum 0 at ±∞
        let p = pm_one();
        let min = (-3000..=3000)
            .map(|i| p.eval_laplacian(&[i as f64 * 0.01]).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert!(min > 0.0 && min < 1e-11);
        assert!((p.eval_laplacian(&[0.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scaled_quadratic_closed_forms() {
        let p = make_scaled_quadratic(1.0, 1).unwrap();
        assert_eq!(p.eval_laplacian(&[0.3]).unwrap(), -1.0);
        assert!(p.capabilities().infinite_width);
        assert_eq!(p.gradient_set(), GradientSet::Unbounded);
        let z = make_scaled_quadratic(0.0, 3).unwrap();
        assert_eq!(z.eval_f(&[1.0, 2.0, 3.0]).unwrap(), 0.0);
        assert!(!z.capabilities().infinite_width);
        assert!(matches!(make_scaled_quadratic(-1.0, 1), Err(Error::Parameter(_))));
        assert!(matches!(make_scaled_quadratic(-2.0, 1), Err(Error::Parameter(_))));
    }

    #[test]
    fn parameter_errors() {
        assert!(make_logsumexp(vec![1.0, 0.0], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(make_logsumexp(vec![1.0, -1.0], vec![vec![1.0], vec![2.0]]).is_err());
        assert!(make_logsumexp(vec![], vec![]).is_err());
        assert!(make_linear(vec![f64::NAN]).is_err());
        let p = make_linear(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            p.eval_f(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn product_of_blocks_is_a_mixture_over_the_cartesian_product() {
        let blocks = vec![pm_one(), make_linear(vec![0.5]).unwrap(), pm_one()];
        let p = make_product(&blocks).unwrap();
        assert_eq!(p.dim(), 3);
        match p.family() {
            Family::LogSumExp { centers, weights, .. } => {
                assert_eq!(centers.len(), 4);
                assert!(weights.iter().all(|w| (w - 0.25).abs() < 1e-15));
            }
            _ => panic!("expected a mixture"),
        }
        let x = [0.3, -1.0, 2.0];
        let sum: f64 = blocks
            .iter()
            .zip(x)
            .map(|(b, xi)| b.eval_f(&[xi]).unwrap())
            .sum();
        assert!((p.eval_f(&x).unwrap() - sum).abs() < 1e-13);
        let lin = make_product(&[make_linear(vec![1.0]).unwrap(), make_linear(vec![2.0]).unwrap()]).unwrap();
        assert_eq!(lin.kind(), FamilyKind::Linear);
    }

    #[test]
    fn black_box_uses_finite_differences() {
        let p = black_box(2, |x| x[0].cosh().ln() + 0.25 * x[1] * x[1])
            .gradient_set(GradientSet::Unbounded)
            .build()
            .unwrap();
        let x = [0.4, -0.8];
        let g = p.eval_grad(&x).unwrap();
        assert!((g[0] - 0.4f64.tanh()).abs() < 1e-8);
        assert!((g[1] + 0.4).abs() < 1e-8);
        let lap = p.eval_laplacian(&x).unwrap();
        let exact = 1.0 / 0.4f64.cosh().powi(2) + 0.5;
        assert!((lap - exact).abs() < 1e-5 * exact);
        assert!(p.to_text().is_err());
    }

    #[test]
    fn text_block_parses_decimal_and_reports_lines() {
        let p = Potential::from_text("family logsumexp\ndim 1\n# two modes\ncenter 1\ncenter -1\n").unwrap();
        assert_eq!(p.kind(), FamilyKind::LogSumExp);
        let err = Potential::from_text("family linear\ndim 2\nalpha 1 2 3\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
        let err = Potential::from_text("family logsumexp\ndim 2\ncenter 1 0\ncenter 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 4, .. }), "{err}");
        let err = Potential::from_text("family linear\ndim 1\nalpha x\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(Potential::from_text("family cubic\ndim 1\n").is_err());
    }

    fn arb_point(dim: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0..3.0f64, dim)
    }

    fn arb_potential() -> impl Strategy<Value = Potential> {
        let linear = arb_point(3).prop_map(|a| make_linear(a).unwrap());
        let quad = (-0.9..3.0f64).prop_map(|s| make_scaled_quadratic(s, 3).unwrap());
        let lse = proptest::collection::vec((0.1..2.0f64, arb_point(3)), 1..5).prop_map(|wc| {
            let (w, c): (Vec<_>, Vec<_>) = wc.into_iter().unzip();
            make_logsumexp(w, c).unwrap()
        });
        prop_oneof![linear, quad, lse]
    }

    proptest! {
        #[test]
        fn serialization_round_trip_is_bit_exact(p in arb_potential()) {
            let text = p.to_text().unwrap();
            let q = Potential::from_text(&text).unwrap();
            prop_assert_eq!(&q.to_text().unwrap(), &text);
            let x = [0.3, -0.2, 1.1];
            prop_assert_eq!(p.eval_f(&x).unwrap().to_bits(), q.eval_f(&x).unwrap().to_bits());
        }

        #[test]
        fn gradient_matches_central_difference(p in arb_potential(), x in arb_point(3), v in arb_point(3)) {
            let h = FD_STEP;
            let xp: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - h * b).collect();
            let fd = (p.eval_f(&xp).unwrap() - p.eval_f(&xm).unwrap()) / (2.0 * h);
            let an = dot(&p.eval_grad(&x).unwrap(), &v);
            let scale = an.abs().max(dot(&v, &v).sqrt()).max(1.0);
            prop_assert!((fd - an).abs() <= 1e-5 * scale, "fd {} analytic {}", fd, an);
        }

        #[test]
        fn laplacian_matches_hessian_trace(p in arb_potential(), x in arb_point(3)) {
            let h = FD_STEP;
            let mut trace = 0.0;
            let mut xp = x.clone();
            for j in 0..3 {
                xp[j] = x[j] + h;
                let up = p.eval_grad(&xp).unwrap()[j];
                xp[j] = x[j] - h;
                let down = p.eval_grad(&xp).unwrap()[j];
                xp[j] = x[j];
                trace += (up - down) / (2.0 * h);
            }
            let lap = p.eval_laplacian(&x).unwrap();
            prop_assert!((trace - lap).abs() <= 1e-4 * lap.abs().max(1.0), "trace {} lap {}", trace, lap);
        }

        #[test]
        fn logsumexp_gradient_lies_in_center_hull(
            wc in proptest::collection::vec((0.1..2.0f64, -3.0..3.0f64), 1..6),
            x in -10.0..10.0f64,
        ) {
            let (w, c): (Vec<_>, Vec<_>) = wc.into_iter().unzip();
            let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let p = make_logsumexp(w, c.into_iter().map(|a| vec![a]).collect()).unwrap();
            let g = p.eval_grad(&[x]).unwrap()[0];
            prop_assert!(g >= lo - 1e-12 && g <= hi + 1e-12);
        }
    }
}
