//! Named inequality checks over a configurable matrix of measures, with
//! deterministic machine-readable reports and a console table.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foellmer::{self, DriftSpec};
use crate::measures::{self, analytic_value, Combination, Estimate, TiltedMeasure};
use crate::potentials::{GradientSet, Potential};
use crate::report::{CheckName, Diagnostic, InequalityReport, Term, Verdict};
use crate::samplers::{
    quadrature_oracle, sample_gamma, sample_nu_exact, sample_nu_mala, Functional, MalaConfig, QuadratureGrid,
    RngStream, SampleBatch,
};
use crate::transport;

/// Where the integrals over `ν` and `γ` come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TermSource {
    /// Closed form, then quadrature (n ≤ 2), then Monte Carlo.
    #[default]
    Best,
    /// Monte Carlo for every integral; closed forms only for `M` and `W₂`.
    MonteCarlo,
}

#[derive(Clone, Debug)]
pub struct MeasureSpec {
    pub measure: TiltedMeasure,
    /// Simulate the Föllmer process for this measure and attach its
    /// diagnostics.
    pub follmer: bool,
    /// Test hook: added to the width term before the checks use it.
    pub inject_width_offset: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub gamma_samples: usize,
    /// Batch size for empirical `W₂` when no closed form applies.
    pub w2_samples: usize,
    pub follmer_paths: usize,
    pub follmer_steps: usize,
    pub checks: Vec<CheckName>,
    pub term_source: TermSource,
    pub output: Option<PathBuf>,
    pub measures: Vec<MeasureSpec>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seeds: Vec<u64>,
    samples: Option<usize>,
    gamma_samples: Option<usize>,
    w2_samples: Option<usize>,
    follmer_paths: Option<usize>,
    follmer_steps: Option<usize>,
    checks: Option<Vec<String>>,
    term_source: Option<TermSource>,
    output: Option<PathBuf>,
    #[serde(default, rename = "measure")]
    measures: Vec<RawMeasure>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMeasure {
    name: String,
    potential: String,
    #[serde(default)]
    follmer: bool,
    #[serde(default)]
    inject_width_offset: f64,
}

pub const DEFAULT_SAMPLES: usize = 100_000;
pub const DEFAULT_W2_SAMPLES: usize = 1024;
pub const DEFAULT_FOLLMER_PATHS: usize = 10_000;
pub const DEFAULT_FOLLMER_STEPS: usize = 400;

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl SuiteConfig {
    /// Parses the TOML configuration. Syntax and schema errors carry the
    /// line; semantic errors name the field.
    pub fn from_toml(text: &str) -> Result<SuiteConfig> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let config_err = |field: &str, message: String| Error::Config {
            field: field.into(),
            message,
        };
        if raw.seeds.is_empty() {
            return Err(config_err("seeds", "at least one explicit seed is required".into()));
        }
        let samples = raw.samples.unwrap_or(DEFAULT_SAMPLES);
        if samples < 2 {
            return Err(config_err("samples", format!("need at least 2 samples, got {samples}")));
        }
        let checks = match raw.checks {
            None => CheckName::ALL.to_vec(),
            Some(names) => names
                .iter()
                .map(|n| n.parse().map_err(|_| config_err("checks", format!("unknown check `{n}`"))))
                .collect::<Result<_>>()?,
        };
        let mut seen = BTreeSet::new();
        let mut measures = Vec::new();
        for (i, m) in raw.measures.into_iter().enumerate() {
            let field = format!("measure[{i}]");
            if !seen.insert(m.name.clone()) {
                return Err(config_err(&field, format!("duplicate measure name `{}`", m.name)));
            }
            let potential = Potential::from_text(&m.potential).map_err(|e| config_err(&format!("{field}.potential"), e.to_string()))?;
            if !m.inject_width_offset.is_finite() {
                return Err(config_err(&format!("{field}.inject_width_offset"), "must be finite".into()));
            }
            measures.push(MeasureSpec {
                measure: TiltedMeasure::new(m.name, potential),
                follmer: m.follmer,
                inject_width_offset: m.inject_width_offset,
            });
        }
        let steps = raw.follmer_steps.unwrap_or(DEFAULT_FOLLMER_STEPS);
        if steps < 2 {
            return Err(config_err("follmer_steps", "need at least 2 steps".into()));
        }
        let w2_samples = raw.w2_samples.unwrap_or(DEFAULT_W2_SAMPLES);
        if w2_samples < 2 || w2_samples > transport::MAX_ASSIGNMENT {
            return Err(config_err(
                "w2_samples",
                format!("must lie in 2..={}", transport::MAX_ASSIGNMENT),
            ));
        }
        Ok(SuiteConfig {
            seeds: raw.seeds,
            samples,
            gamma_samples: raw.gamma_samples.unwrap_or(samples).max(2),
            w2_samples,
            follmer_paths: raw.follmer_paths.unwrap_or(DEFAULT_FOLLMER_PATHS).max(1),
            follmer_steps: steps,
            checks,
            term_source: raw.term_source.unwrap_or_default(),
            output: raw.output,
            measures,
        })
    }

    pub fn from_file(path: &std::path::Path) -> Result<SuiteConfig> {
        SuiteConfig::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Keeps only the measures of dimension `dim`.
    pub fn restrict_dim(&mut self, dim: usize) {
        self.measures.retain(|m| m.measure.dim() == dim);
    }
}

/// Every integral and bound a check may need, computed once per measure.
#[derive(Clone, Debug)]
pub struct TermSet {
    pub kl: Estimate,
    pub fisher: Estimate,
    pub x_dot_grad: Estimate,
    pub mean_laplacian: Estimate,
    pub entropy_gap: Estimate,
    pub second_moment: Estimate,
    /// Certified width, or why none is available.
    pub width: std::result::Result<Estimate, String>,
    /// Heuristic lower bound on the width, kept for the breakdown only.
    pub width_heuristic: Option<Estimate>,
    /// An upper bound on `M`, when one is certified.
    pub m_upper: Option<Estimate>,
    pub m_estimate: Estimate,
    pub w2sq: std::result::Result<Estimate, String>,
    /// `E⟨X₁ − B₁, ∇f(X₁)⟩` from a simulated Föllmer coupling.
    pub coupling: Option<Estimate>,
}

/// Named scalar quantities the CLI can estimate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Kl,
    Fisher,
    FisherIbp,
    Width,
    M,
    SecondMoment,
    EntropyGap,
    MeanLaplacian,
    XDotGrad,
    LogNormalizer,
    W2sq,
}

impl Quantity {
    pub const ALL: [Quantity; 11] = [
        Quantity::Kl,
        Quantity::Fisher,
        Quantity::FisherIbp,
        Quantity::Width,
        Quantity::M,
        Quantity::SecondMoment,
        Quantity::EntropyGap,
        Quantity::MeanLaplacian,
        Quantity::XDotGrad,
        Quantity::LogNormalizer,
        Quantity::W2sq,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Kl => "kl",
            Quantity::Fisher => "fisher",
            Quantity::FisherIbp => "fisher_ibp",
            Quantity::Width => "width",
            Quantity::M => "m",
            Quantity::SecondMoment => "second_moment",
            Quantity::EntropyGap => "entropy_gap",
            Quantity::MeanLaplacian => "mean_laplacian",
            Quantity::XDotGrad => "x_dot_grad",
            Quantity::LogNormalizer => "log_normalizer",
            Quantity::W2sq => "w2sq",
        }
    }
}

impl FromStr for Quantity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Quantity::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = Quantity::ALL.iter().map(|q| q.name()).collect();
                Error::Parameter(format!("unknown functional `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Batches shared by every check on one measure and seed.
pub struct Batches {
    pub nu: SampleBatch,
    pub gamma: SampleBatch,
    pub gamma_null: SampleBatch,
}

impl Batches {
    pub fn draw(p: &Potential, samples: usize, gamma_samples: usize, base: &RngStream) -> Result<Batches> {
        let nu = if p.capabilities().exact_sampler {
            sample_nu_exact(p, samples, &base.child(0))?
        } else {
            sample_nu_mala(p, samples, &MalaConfig::default(), &base.child(0))?
        };
        Ok(Batches {
            nu,
            gamma: sample_gamma(p.dim(), gamma_samples, &base.child(1))?,
            gamma_null: sample_gamma(p.dim(), gamma_samples, &base.child(2))?,
        })
    }
}

fn monte_carlo(m: &TiltedMeasure, f: Functional, b: &Batches) -> Result<Estimate> {
    match f {
        Functional::Kl => measures::estimate_kl(m, &b.nu),
        Functional::Fisher => measures::estimate_fisher(m, &b.nu),
        Functional::SecondMoment => measures::estimate_second_moment(m, &b.nu),
        Functional::EntropyGap => measures::estimate_entropy_gap(m, &b.nu),
        Functional::Width => measures::estimate_width(&m.potential, &b.gamma),
        Functional::LogNormalizer => measures::estimate_log_normalizer(&m.potential, &b.gamma),
        Functional::MeanLaplacian => measures::estimate_mean_laplacian(m, &b.nu),
        Functional::XDotGrad => measures::estimate_x_dot_grad(m, &b.nu),
    }
}

/// One functional under the given term-source policy.
pub fn estimate_functional(m: &TiltedMeasure, f: Functional, b: &Batches, source: TermSource) -> Result<Estimate> {
    if source == TermSource::Best {
        if let Some(v) = analytic_value(&m.potential, f) {
            return Ok(Estimate::analytic(v));
        }
        if m.dim() <= 2 {
            return Ok(Estimate::quadrature(quadrature_oracle(&m.potential, f, &QuadratureGrid::default())?));
        }
    }
    monte_carlo(m, f, b)
}

/// `W₂²(ν, γ)`: closed form or quadrature when available, otherwise the
/// empirical cost on the heads of the shared batches.
pub fn w2_term(m: &TiltedMeasure, b: &Batches, w2_samples: usize) -> Result<Estimate> {
    if let Some(e) = transport::w2_squared_to_gamma(&m.potential) {
        return Ok(e);
    }
    let k = w2_samples.min(b.nu.count()).min(b.gamma.count());
    transport::w2_squared_empirical_to_gamma(&b.nu.head(k), &b.gamma.head(k), &b.gamma_null.head(k))
}

/// Any single quantity for one measure.
pub fn estimate_quantity(m: &TiltedMeasure, q: Quantity, b: &Batches, source: TermSource, w2_samples: usize) -> Result<Estimate> {
    let f = match q {
        Quantity::Kl => Functional::Kl,
        Quantity::Fisher => Functional::Fisher,
        Quantity::FisherIbp => return measures::estimate_fisher_ibp(m, &b.nu),
        Quantity::Width => Functional::Width,
        Quantity::M => return Ok(measures::estimate_m(&m.potential)),
        Quantity::SecondMoment => Functional::SecondMoment,
        Quantity::EntropyGap => Functional::EntropyGap,
        Quantity::MeanLaplacian => Functional::MeanLaplacian,
        Quantity::XDotGrad => Functional::XDotGrad,
        Quantity::LogNormalizer => Functional::LogNormalizer,
        Quantity::W2sq => return w2_term(m, b, w2_samples),
    };
    if f == Functional::Width {
        if let GradientSet::Unbounded = m.potential.gradient_set() {
            return Err(Error::NotApplicable("gradient set is unbounded".into()));
        }
    }
    estimate_functional(m, f, b, source)
}

/// Computes the term set for one measure.
pub fn compute_terms(spec: &MeasureSpec, b: &Batches, source: TermSource, w2_samples: usize) -> Result<TermSet> {
    let m = &spec.measure;
    let get = |f| estimate_functional(m, f, b, source);
    let (width, width_heuristic) = match m.potential.gradient_set() {
        GradientSet::Unbounded => (Err("gradient set is unbounded, so D(ν) = ∞".to_string()), None),
        GradientSet::HeuristicSearch(_) => {
            let h = measures::estimate_width(&m.potential, &b.gamma.head(b.gamma.count().min(2000)))?;
            (Err("only a heuristic lower bound on D(ν) is available".to_string()), Some(h))
        }
        _ => {
            let mut w = get(Functional::Width)?;
            w.value += spec.inject_width_offset;
            (Ok(w), None)
        }
    };
    Ok(TermSet {
        kl: get(Functional::Kl)?,
        fisher: get(Functional::Fisher)?,
        x_dot_grad: get(Functional::XDotGrad)?,
        mean_laplacian: get(Functional::MeanLaplacian)?,
        entropy_gap: get(Functional::EntropyGap)?,
        second_moment: get(Functional::SecondMoment)?,
        width,
        width_heuristic,
        m_upper: measures::m_upper_bound(&m.potential),
        m_estimate: measures::estimate_m(&m.potential),
        w2sq: w2_term(m, b, w2_samples).map_err(|e| e.to_string()),
        coupling: None,
    })
}

fn c() -> Combination {
    Combination::new()
}

/// `D^{2/3} I^{1/3}` linearized around the estimates so that its SE
/// propagates through [`Combination`].
fn mixed_power(d: &Estimate, i: &Estimate) -> Combination {
    let (dv, iv) = (d.value.max(0.0), i.value.max(0.0));
    let value = dv.powf(2.0 / 3.0) * iv.powf(1.0 / 3.0);
    if dv == 0.0 || iv == 0.0 {
        return c().constant(value);
    }
    let gd = (2.0 / 3.0) * value / dv;
    let gi = (1.0 / 3.0) * value / iv;
    c().add(gd, d).add(gi, i).constant(value - gd * d.value - gi * i.value)
}

/// Assembles one named check from the term set.
pub fn check(name: CheckName, m: &TiltedMeasure, t: &TermSet, gamma: &SampleBatch) -> InequalityReport {
    let width = t.width.as_ref();
    let w2 = t.w2sq.as_ref();
    let breakdown = |names: &[&str]| -> Vec<Term> {
        let mut out = Vec::new();
        for n in names {
            let e = match *n {
                "KL" => Some(&t.kl),
                "I" => Some(&t.fisher),
                "D" => width.ok(),
                "D_heuristic" => t.width_heuristic.as_ref(),
                "M" => Some(&t.m_estimate),
                "M_upper" => t.m_upper.as_ref(),
                "W2sq" => w2.ok(),
                "entropy_gap" => Some(&t.entropy_gap),
                "mean_laplacian" => Some(&t.mean_laplacian),
                "x_dot_grad" => Some(&t.x_dot_grad),
                "coupling" => t.coupling.as_ref(),
                _ => None,
            };
            if let Some(e) = e {
                out.push(Term::new(*n, e));
            }
        }
        out
    };
    let need_width = || width.map_err(|r| r.clone());
    let need_m = || {
        t.m_upper
            .clone()
            .ok_or_else(|| "no certified upper bound on M".to_string())
    };
    let need_w2 = || w2.map_err(|r| r.clone());

    let outcome: std::result::Result<InequalityReport, String> = (|| {
        Ok(match name {
            CheckName::LogSobolev => InequalityReport::assess(
                name,
                &c().add(1.0, &t.kl),
                &c().add(0.5, &t.fisher),
                breakdown(&["KL", "I"]),
                0.0,
            ),
            CheckName::ReverseLsiE18 => {
                let d = need_width()?;
                let m_up = need_m()?;
                let mut m_plus = m_up;
                m_plus.value = m_plus.value.max(0.0);
                let rhs = c().add(1.0, &t.kl).add(0.5, &m_plus).add_all(1.0, &mixed_power(d, &t.fisher));
                InequalityReport::assess(
                    name,
                    &c().add(0.5, &t.fisher),
                    &rhs,
                    breakdown(&["KL", "I", "M", "M_upper", "D"]),
                    0.0,
                )
            }
            CheckName::ReverseLsiThm1 => {
                let d = need_width()?;
                let m_up = need_m()?;
                let rhs = c().add(1.0, &t.kl).add(1.0, &m_up).add(1.0, d);
                let eq13 = c().add(1.0, &t.kl).add(-0.5, &t.mean_laplacian).add(0.5, d);
                let tighter = if eq13.value() < rhs.value() { "ReverseLSI_Eq13" } else { "ReverseLSI_Thm1" };
                InequalityReport::assess(
                    name,
                    &c().add(0.5, &t.fisher),
                    &rhs,
                    breakdown(&["KL", "I", "M", "M_upper", "D", "mean_laplacian"]),
                    0.0,
                )
                .with_note(format!("tighter right-hand side: {tighter}"))
            }
            CheckName::IntermediateEq4 => {
                let d = need_width()?;
                let m_up = need_m()?;
                let w = need_w2()?;
                InequalityReport::assess(
                    name,
                    &c().add(0.5, &t.fisher),
                    &c().add(1.0, &m_up).add(1.0, d).add(0.5, w),
                    breakdown(&["I", "M", "M_upper", "D", "W2sq"]),
                    0.0,
                )
            }
            CheckName::Talagrand => {
                let w = need_w2()?;
                let mut r = transport::check_talagrand(m, &t.kl, w);
                r.notes.retain(|n| !n.starts_with("measure "));
                r
            }
            CheckName::ReverseTransport => {
                let d = need_width()?;
                let m_up = need_m()?;
                let w = need_w2()?;
                InequalityReport::assess(
                    name,
                    &c().add(1.0, &t.kl),
                    &c().add(0.5, w).add(1.0, &m_up).add(1.0, d),
                    breakdown(&["KL", "W2sq", "M", "M_upper", "D"]),
                    0.0,
                )
            }
            CheckName::Vitale => transport::check_vitale(&m.potential, gamma, 1.0).map_err(|e| e.to_string())?,
            CheckName::Thm2SecondMoment => {
                let d = need_width()?;
                InequalityReport::assess(
                    name,
                    &c().add(1.0, &t.x_dot_grad),
                    &c().add(2.0, &t.kl).add(1.0, d),
                    breakdown(&["x_dot_grad", "KL", "D", "coupling"]),
                    0.0,
                )
            }
            CheckName::EntropyForm => {
                let d = need_width()?;
                InequalityReport::assess(
                    name,
                    &c().add(1.0, &t.entropy_gap),
                    &c().add(0.5, d),
                    breakdown(&["entropy_gap", "D"]),
                    0.0,
                )
            }
            CheckName::ReverseLsiEq13 | CheckName::ReverseLsiEq14 => {
                let d = need_width()?;
                let k = if name == CheckName::ReverseLsiEq13 { 0.5 } else { 1.0 };
                let dominance = d.value >= t.mean_laplacian.value;
                InequalityReport::assess(
                    name,
                    &c().add(0.5, &t.fisher),
                    &c().add(1.0, &t.kl).add(-k, &t.mean_laplacian).add(k, d),
                    breakdown(&["KL", "I", "mean_laplacian", "D"]),
                    0.0,
                )
                .with_note(format!(
                    "D ≥ ∫Δf dν: {dominance} (ReverseLSI_Eq13 right-hand side {} ReverseLSI_Eq14)",
                    if dominance { "≤" } else { ">" }
                ))
            }
        })
    })();
    match outcome {
        Ok(r) => r,
        Err(reason) => {
            let terms = breakdown(&["KL", "I", "M", "D_heuristic"]);
            InequalityReport::not_applicable(name, reason, terms)
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MeasureReport {
    pub name: String,
    pub family: &'static str,
    pub dim: usize,
    pub checks: Vec<InequalityReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub measures: Vec<MeasureReport>,
}

#[derive(Clone, Debug, Default, Serialize, PartialEq, Eq)]
pub struct Summary {
    pub holds: usize,
    pub fails: usize,
    pub not_applicable: usize,
    pub diagnostics_failed: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteSettings {
    pub seeds: Vec<u64>,
    pub samples: usize,
    pub gamma_samples: usize,
    pub w2_samples: usize,
    pub follmer_paths: usize,
    pub follmer_steps: usize,
    pub term_source: TermSource,
    pub checks: Vec<CheckName>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub settings: SuiteSettings,
    pub runs: Vec<SeedReport>,
    pub summary: Summary,
}

impl SuiteReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// True iff some applicable check failed.
    pub fn any_fails(&self) -> bool {
        self.summary.fails > 0
    }

    pub fn table(&self) -> String {
        render_table(&serde_json::to_value(self).expect("report serializes"))
    }
}

/// Seeded stream for one measure: independent of thread scheduling and of
/// which other measures are in the suite.
pub fn measure_stream(seed: u64, name: &str) -> RngStream {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    RngStream::new(seed, h)
}

/// Every configured check and diagnostic for one measure and seed.
pub fn evaluate_measure(spec: &MeasureSpec, config: &SuiteConfig, seed: u64) -> MeasureReport {
    let m = &spec.measure;
    let mut report = MeasureReport {
        name: m.name.clone(),
        family: m.potential.kind().name(),
        dim: m.dim(),
        checks: Vec::new(),
        diagnostics: Vec::new(),
        errors: Vec::new(),
    };
    if config.checks.is_empty() && !spec.follmer {
        return report;
    }
    let base = measure_stream(seed, &m.name);
    let batches = match Batches::draw(&m.potential, config.samples, config.gamma_samples, &base) {
        Ok(b) => b,
        Err(e) => {
            report.errors.push(format!("sampling failed: {e}"));
            return report;
        }
    };
    let mut terms = match compute_terms(spec, &batches, config.term_source, config.w2_samples) {
        Ok(t) => t,
        Err(e) => {
            report.errors.push(format!("term estimation failed: {e}"));
            return report;
        }
    };
    if spec.follmer {
        match follmer_diagnostics(m, &terms.kl, config, &base.child(3)) {
            Ok((diags, coupling)) => {
                report.diagnostics = diags;
                terms.coupling = Some(coupling);
            }
            Err(e) => report.errors.push(format!("Föllmer simulation failed: {e}")),
        }
    }
    report.checks = config
        .checks
        .iter()
        .map(|&name| check(name, m, &terms, &batches.gamma))
        .collect();
    report
}

/// Simulates the Föllmer process for `m` and runs the four path
/// diagnostics; returns them with the coupling estimate.
pub fn follmer_diagnostics(m: &TiltedMeasure, kl: &Estimate, config: &SuiteConfig, rng: &RngStream) -> Result<(Vec<Diagnostic>, Estimate)> {
    let spec = DriftSpec::analytic(m.potential.clone())?;
    let ens = foellmer::simulate(&spec, config.follmer_steps, config.follmer_paths, &rng.child(0))?;
    let exact = sample_nu_exact(&m.potential, config.follmer_paths, &rng.child(1))?;
    let (energy, _) = foellmer::diag_energy_identity(&ens, kl);
    let (coupling_diag, coupling) = foellmer::diag_coupling_identity(&ens, kl);
    let law = foellmer::diag_terminal_law(&ens, &exact, foellmer::default_projections(m.dim()), &rng.child(2))?;
    Ok((vec![energy, coupling_diag, foellmer::diag_martingale(&ens), law], coupling))
}

/// Runs every configured check on every measure for every seed.
pub fn run_suite(config: &SuiteConfig) -> Result<SuiteReport> {
    let mut runs = Vec::new();
    let mut summary = Summary::default();
    for &seed in &config.seeds {
        let measures: Vec<MeasureReport> = config
            .measures
            .par_iter()
            .map(|spec| evaluate_measure(spec, config, seed))
            .collect();
        for m in &measures {
            for r in &m.checks {
                match r.verdict {
                    Verdict::Holds => summary.holds += 1,
                    Verdict::Fails => summary.fails += 1,
                    Verdict::NotApplicable => summary.not_applicable += 1,
                }
            }
            summary.diagnostics_failed += m.diagnostics.iter().filter(|d| !d.pass).count();
        }
        runs.push(SeedReport { seed, measures });
    }
    Ok(SuiteReport {
        settings: SuiteSettings {
            seeds: config.seeds.clone(),
            samples: config.samples,
            gamma_samples: config.gamma_samples,
            w2_samples: config.w2_samples,
            follmer_paths: config.follmer_paths,
            follmer_steps: config.follmer_steps,
            term_source: config.term_source,
            checks: config.checks.clone(),
        },
        runs,
        summary,
    })
}

fn number(v: &serde_json::Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{x:>12.5e}"),
        None => format!("{:>12}", "-"),
    }
}

/// Fixed-width console table of a serialized suite report.
pub fn render_table(report: &serde_json::Value) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:<24} {:<18} {:>12} {:>12} {:>12} {:>12}  {}",
        "seed", "measure", "check", "lhs", "rhs", "margin", "margin_se", "verdict"
    );
    let empty = Vec::new();
    for run in report["runs"].as_array().unwrap_or(&empty) {
        let seed = run["seed"].to_string();
        for m in run["measures"].as_array().unwrap_or(&empty) {
            let name = m["name"].as_str().unwrap_or("?");
            for c in m["checks"].as_array().unwrap_or(&empty) {
                let _ = writeln!(
                    out,
                    "{:>6}  {:<24} {:<18} {} {} {} {}  {}",
                    seed,
                    name,
                    c["name"].as_str().unwrap_or("?"),
                    number(&c["lhs"]["value"]),
                    number(&c["rhs"]["value"]),
                    number(&c["margin"]),
                    number(&c["margin_se"]),
                    c["verdict"].as_str().unwrap_or("?"),
                );
            }
            for d in m["diagnostics"].as_array().unwrap_or(&empty) {
                let _ = writeln!(
                    out,
                    "{:>6}  {:<24} {:<18} {} {} {} {:>12}  {}",
                    seed,
                    name,
                    d["name"].as_str().unwrap_or("?"),
                    number(&d["statistic"]),
                    number(&d["threshold"]),
                    format!("{:>12}", ""),
                    "",
                    if d["pass"].as_bool() == Some(true) { "PASS" } else { "FAIL" },
                );
            }
            for e in m["errors"].as_array().unwrap_or(&empty) {
                let _ = writeln!(out, "{:>6}  {:<24} error: {}", seed, name, e.as_str().unwrap_or("?"));
            }
        }
    }
    let s = &report["summary"];
    let _ = writeln!(
        out,
        "holds {}  fails {}  not applicable {}  failed diagnostics {}",
        s["holds"], s["fails"], s["not_applicable"], s["diagnostics_failed"]
    );
    out
}

/// The default matrix shipped in `configs/default.toml`.
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

pub fn default_config() -> SuiteConfig {
    SuiteConfig::from_toml(DEFAULT_CONFIG).expect("shipped config parses")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{make_linear, make_logsumexp, make_product};

    fn spec(name: &str, p: Potential) -> MeasureSpec {
        MeasureSpec {
            measure: TiltedMeasure::new(name, p),
            follmer: false,
            inject_width_offset: 0.0,
        }
    }

    fn small(measures: Vec<MeasureSpec>, checks: Vec<CheckName>) -> SuiteConfig {
        SuiteConfig {
            seeds: vec![7],
            samples: 20_000,
            gamma_samples: 20_000,
            w2_samples: 256,
            follmer_paths: 2000,
            follmer_steps: 50,
            checks,
            term_source: TermSource::MonteCarlo,
            output: None,
            measures,
        }
    }

    fn verdict(r: &SuiteReport, measure: &str, name: CheckName) -> Verdict {
        r.runs[0]
            .measures
            .iter()
            .find(|m| m.name == measure)
            .unwrap()
            .checks
            .iter()
            .find(|c| c.name == name)
            .unwrap()
            .verdict
    }

    #[test]
    fn default_config_matrix() {
        let c = default_config();
        assert_eq!(c.measures.len(), 8);
        assert_eq!(c.seeds.len(), 5);
        assert_eq!(c.checks.len(), 11);
        let dims: BTreeSet<usize> = c.measures.iter().map(|m| m.measure.dim()).collect();
        assert_eq!(dims, BTreeSet::from([1, 2, 5]));
        let linear_n5 = &c.measures[2].measure.potential;
        assert!((analytic_value(linear_n5, Functional::Fisher).unwrap() - 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_errors_are_located() {
        let e = SuiteConfig::from_toml("seeds = [1]\nsamples = \"many\"\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = SuiteConfig::from_toml("seeds = []\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "seeds"), "{e}");
        let e = SuiteConfig::from_toml("samples = 10\n").unwrap_err();
        assert!(matches!(e, Error::Parse { .. }), "{e}");
        let text = "seeds = [1]\n[[measure]]\nname = \"a\"\npotential = \"family linear\\ndim 2\\nalpha 1\"\n";
        let e = SuiteConfig::from_toml(text).unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "measure[0].potential"), "{e}");
        let e = SuiteConfig::from_toml("seeds = [1]\nchecks = [\"Gross\"]\n").unwrap_err();
        assert!(matches!(e, Error::Config { ref field, .. } if field == "checks"), "{e}");
        let e = SuiteConfig::from_toml("seeds = [1]\nbogus = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn empty_check_selection_gives_empty_report() {
        let text = "seeds = [3]\nchecks = []\n[[measure]]\nname = \"a\"\npotential = \"family linear\\ndim 1\\nalpha 1\"\n";
        let r = run_suite(&SuiteConfig::from_toml(text).unwrap()).unwrap();
        assert!(r.runs[0].measures[0].checks.is_empty());
        assert_eq!(r.summary, Summary::default());
        assert!(!r.any_fails());
    }

    #[test]
    fn zero_potential_holds_everywhere() {
        let c = small(vec![spec("zero", make_linear(vec![0.0, 0.0]).unwrap())], CheckName::ALL.to_vec());
        let r = run_suite(&c).unwrap();
        for chk in &r.runs[0].measures[0].checks {
            assert_eq!(chk.verdict, Verdict::Holds, "{}", chk.name);
            assert!(chk.margin.unwrap() > -1e-2, "{} {:?}", chk.name, chk.margin);
        }
    }

    #[test]
    fn linear_thm1_is_sharp() {
        let mut c = small(vec![spec("lin", make_linear(vec![1.0]).unwrap())], vec![CheckName::ReverseLsiThm1]);
        c.term_source = TermSource::Best;
        let r = run_suite(&c).unwrap();
        let chk = &r.runs[0].measures[0].checks[0];
        assert_eq!(chk.lhs.as_ref().unwrap().value, 0.5);
        assert_eq!(chk.rhs.as_ref().unwrap().value, 0.5);
        assert_eq!(chk.verdict, Verdict::Holds);
    }

    #[test]
    fn unbounded_gradient_set_is_not_applicable() {
        let p = crate::potentials::make_scaled_quadratic(1.0, 1).unwrap();
        let r = run_suite(&small(vec![spec("q", p)], CheckName::ALL.to_vec())).unwrap();
        for chk in &r.runs[0].measures[0].checks {
            let expected = match chk.name {
                CheckName::LogSobolev | CheckName::Talagrand => Verdict::Holds,
                _ => Verdict::NotApplicable,
            };
            assert_eq!(chk.verdict, expected, "{}", chk.name);
        }
    }

    #[test]
    fn injected_width_error_is_caught() {
        let mut lin = spec("lin", make_linear(vec![0.6, 0.8]).unwrap());
        lin.inject_width_offset = -0.2;
        let mut lse = spec("lse", make_logsumexp(vec![1.0, 1.0], vec![vec![-1.0], vec![1.0]]).unwrap());
        lse.inject_width_offset = -2.0;
        let r = run_suite(&small(vec![lin, lse], vec![CheckName::ReverseLsiThm1])).unwrap();
        assert_eq!(verdict(&r, "lin", CheckName::ReverseLsiThm1), Verdict::Fails);
        assert_eq!(verdict(&r, "lse", CheckName::ReverseLsiThm1), Verdict::Fails);
        assert!(r.any_fails());
        assert_eq!(r.summary.fails, 2);
    }

    #[test]
    fn deterministic_json() {
        let lse = make_logsumexp(vec![1.0, 3.0], vec![vec![0.5, -1.0], vec![-1.0, 0.2]]).unwrap();
        let c = small(
            vec![spec("lse", lse), spec("lin", make_linear(vec![0.3, 0.4]).unwrap())],
            CheckName::ALL.to_vec(),
        );
        let a = run_suite(&c).unwrap().to_json();
        let b = run_suite(&c).unwrap().to_json();
        assert_eq!(a, b);
        let v: serde_json::Value = serde_json::from_str(&a).unwrap();
        assert_eq!(v["runs"][0]["measures"][1]["name"], "lin");
    }

    #[test]
    fn eq13_eq14_dominance_matches_width_comparison() {
        let lse = make_logsumexp(vec![1.0, 1.0], vec![vec![3.0], vec![-3.0]]).unwrap();
        let c = small(vec![spec("lse", lse)], vec![CheckName::ReverseLsiEq13, CheckName::ReverseLsiEq14]);
        let r = run_suite(&c).unwrap();
        let checks = &r.runs[0].measures[0].checks;
        let (r13, r14) = (&checks[0], &checks[1]);
        let d = r13.term("D").unwrap().value;
        let lap = r13.term("mean_laplacian").unwrap().value;
        let gap = r14.rhs.as_ref().unwrap().value - r13.rhs.as_ref().unwrap().value;
        assert!((gap - 0.5 * (d - lap)).abs() < 1e-12);
        assert!(r13.notes[0].contains(if d >= lap { "true" } else { "false" }));
    }

    #[test]
    fn product_terms_add() {
        let block = make_logsumexp(vec![1.0, 1.0], vec![vec![-1.0], vec![1.0]]).unwrap();
        let prod = make_product(&[block.clone(), block.clone()]).unwrap();
        let c = small(vec![spec("one", block), spec("two", prod)], vec![CheckName::ReverseLsiThm1]);
        let r = run_suite(&c).unwrap();
        let m = &r.runs[0].measures;
        let (one, two) = (&m[0].checks[0], &m[1].checks[0]);
        for name in ["KL", "I"] {
            let (a, b) = (one.term(name).unwrap(), two.term(name).unwrap());
            let se = (4.0 * a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
            assert!((b.value - 2.0 * a.value).abs() < 3.0 * se, "{name}");
        }
        let se = (4.0 * one.margin_se.unwrap().powi(2) + two.margin_se.unwrap().powi(2)).sqrt();
        assert!((two.margin.unwrap() - 2.0 * one.margin.unwrap()).abs() < 3.0 * se);
    }

    #[test]
    fn follmer_diagnostics_attach() {
        let mut s = spec("lse", make_logsumexp(vec![1.0, 1.0], vec![vec![-1.0], vec![1.0]]).unwrap());
        s.follmer = true;
        let r = run_suite(&small(vec![s], vec![CheckName::Thm2SecondMoment])).unwrap();
        let m = &r.runs[0].measures[0];
        assert_eq!(m.diagnostics.len(), 4);
        assert!(m.checks[0].term("coupling").is_some());
        assert!(r.table().contains("Thm2_SecondMoment"));
    }

    #[test]
    fn quantity_names_round_trip() {
        for q in Quantity::ALL {
            assert_eq!(q.name().parse::<Quantity>().unwrap(), q);
        }
        assert!("nope".parse::<Quantity>().is_err());
    }
}
