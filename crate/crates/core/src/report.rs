//! Inequality reports and diagnostic verdicts shared by the transport,
//! Föllmer and harness modules.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::measures::{Combination, Estimate};

/// Standard errors of slack granted to every stochastic comparison.
pub const SE_MULTIPLIER: f64 = 3.0;
/// Relative floating-point slack, scaled by `|lhs| + |rhs| + 1`.
pub const FP_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CheckName {
    LogSobolev,
    #[serde(rename = "ReverseLSI_E18")]
    ReverseLsiE18,
    #[serde(rename = "ReverseLSI_Thm1")]
    ReverseLsiThm1,
    #[serde(rename = "Intermediate_Eq4")]
    IntermediateEq4,
    Talagrand,
    ReverseTransport,
    Vitale,
    #[serde(rename = "Thm2_SecondMoment")]
    Thm2SecondMoment,
    EntropyForm,
    #[serde(rename = "ReverseLSI_Eq13")]
    ReverseLsiEq13,
    #[serde(rename = "ReverseLSI_Eq14")]
    ReverseLsiEq14,
}

impl CheckName {
    pub const ALL: [CheckName; 11] = [
        CheckName::LogSobolev,
        CheckName::ReverseLsiE18,
        CheckName::ReverseLsiThm1,
        CheckName::IntermediateEq4,
        CheckName::Talagrand,
        CheckName::ReverseTransport,
        CheckName::Vitale,
        CheckName::Thm2SecondMoment,
        CheckName::EntropyForm,
        CheckName::ReverseLsiEq13,
        CheckName::ReverseLsiEq14,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckName::LogSobolev => "LogSobolev",
            CheckName::ReverseLsiE18 => "ReverseLSI_E18",
            CheckName::ReverseLsiThm1 => "ReverseLSI_Thm1",
            CheckName::IntermediateEq4 => "Intermediate_Eq4",
            CheckName::Talagrand => "Talagrand",
            CheckName::ReverseTransport => "ReverseTransport",
            CheckName::Vitale => "Vitale",
            CheckName::Thm2SecondMoment => "Thm2_SecondMoment",
            CheckName::EntropyForm => "EntropyForm",
            CheckName::ReverseLsiEq13 => "ReverseLSI_Eq13",
            CheckName::ReverseLsiEq14 => "ReverseLSI_Eq14",
        }
    }

    /// The inequality in words, `lhs ≤ rhs`.
    pub fn statement(self) -> &'static str {
        match self {
            CheckName::LogSobolev => "KL ≤ ½I",
            CheckName::ReverseLsiE18 => "½I ≤ KL + ½M₊ + D^(2/3) I^(1/3)",
            CheckName::ReverseLsiThm1 => "½I ≤ KL + M + D",
            CheckName::IntermediateEq4 => "½I ≤ M + D + ½W₂²",
            CheckName::Talagrand => "½W₂² ≤ KL",
            CheckName::ReverseTransport => "KL ≤ ½W₂² + M + D",
            CheckName::Vitale => "log ∫e^Z dγ ≤ D",
            CheckName::Thm2SecondMoment => "∫⟨x,∇f⟩dν ≤ 2KL + D",
            CheckName::EntropyForm => "H(ν) − H(γ) ≤ ½D",
            CheckName::ReverseLsiEq13 => "½I ≤ KL − ½∫Δf dν + ½D",
            CheckName::ReverseLsiEq14 => "½I ≤ KL − ∫Δf dν + D",
        }
    }
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        CheckName::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Parameter(format!("unknown check `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Holds,
    Fails,
    NotApplicable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Holds => "HOLDS",
            Verdict::Fails => "FAILS",
            Verdict::NotApplicable => "NOT_APPLICABLE",
        })
    }
}

/// The slack a verdict was decided with.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub se_multiplier: f64,
    pub bias_allowance: f64,
    pub fp_allowance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Term {
    pub name: String,
    #[serde(flatten)]
    pub estimate: Estimate,
}

impl Term {
    pub fn new(name: impl Into<String>, estimate: &Estimate) -> Self {
        Term {
            name: name.into(),
            estimate: estimate.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InequalityReport {
    pub name: CheckName,
    pub statement: &'static str,
    pub lhs: Option<Estimate>,
    pub rhs: Option<Estimate>,
    pub terms: Vec<Term>,
    pub margin: Option<f64>,
    pub margin_se: Option<f64>,
    pub verdict: Verdict,
    pub tolerance: Option<Tolerance>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl InequalityReport {
    /// Decides `lhs ≤ rhs`. The margin `rhs − lhs` pairs terms computed on
    /// shared batches; the allowance covers the known upward bias of terms
    /// on the left side plus `extra_allowance`.
    pub fn assess(
        name: CheckName,
        lhs: &Combination,
        rhs: &Combination,
        terms: Vec<Term>,
        extra_allowance: f64,
    ) -> Self {
        let margin = rhs.clone().subtract(lhs);
        let bias = lhs.upward_bias() + extra_allowance;
        let (l, r) = (lhs.estimate(), rhs.estimate());
        let fp = FP_SLACK * (l.value.abs() + r.value.abs() + 1.0);
        let se = margin.std_error();
        let value = margin.value();
        let verdict = if value >= -(SE_MULTIPLIER * se + bias + fp) {
            Verdict::Holds
        } else {
            Verdict::Fails
        };
        InequalityReport {
            name,
            statement: name.statement(),
            lhs: Some(l),
            rhs: Some(r),
            terms,
            margin: Some(value),
            margin_se: Some(se),
            verdict,
            tolerance: Some(Tolerance {
                se_multiplier: SE_MULTIPLIER,
                bias_allowance: bias,
                fp_allowance: fp,
            }),
            notes: Vec::new(),
        }
    }

    pub fn not_applicable(name: CheckName, reason: impl Into<String>, terms: Vec<Term>) -> Self {
        InequalityReport {
            name,
            statement: name.statement(),
            lhs: None,
            rhs: None,
            terms,
            margin: None,
            margin_se: None,
            verdict: Verdict::NotApplicable,
            tolerance: None,
            notes: vec![reason.into()],
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.notes.push(note.into());
        self
    }

    pub fn term(&self, name: &str) -> Option<&Estimate> {
        self.terms.iter().find(|t| t.name == name).map(|t| &t.estimate)
    }
}

/// Outcome of a pass/fail diagnostic that is not an inequality between
/// named functionals (dual feasibility, Föllmer path properties).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Diagnostic {
    pub name: String,
    /// The quantity compared against `threshold`; passing means
    /// `statistic ≤ threshold`.
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub details: Vec<(String, f64)>,
}

impl Diagnostic {
    pub fn new(name: impl Into<String>, statistic: f64, threshold: f64) -> Self {
        Diagnostic {
            name: name.into(),
            statistic,
            threshold,
            pass: statistic <= threshold,
            details: Vec::new(),
        }
    }

    pub fn detail(mut self, key: impl Into<String>, value: f64) -> Self {
        self.details.push((key.into(), value));
        self
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.details.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}
