//! Token-probability uncertainty estimators for a single reasoning step.
//!
//! All estimators are oriented so that larger means more uncertain and
//! all-certain tokens (p = 1) score zero:
//!
//! | kind               | value                                   |
//! |--------------------|-----------------------------------------|
//! | `base`             | `-Σ ln p_j`                             |
//! | `ln`               | `-(1/L) Σ ln p_j`                       |
//! | `maxnlp`           | `max_j -ln p_j`                         |
//! | `scw`              | `-Σ w_j ln p_j`                         |
//! | `adaptive`         | `max_j -ln p_j + α (L_R - i)`           |
//!
//! The adaptive estimator adds a positional term that grows for earlier
//! steps of a chain of `L_R` steps, so an uncertain token early in the chain
//! is flagged at a lower raw probability than the same token near the end.
//!
//! Under [`SignConvention::Mirrored`] every reported value and the threshold
//! are negated (log-probability orientation, e.g. θ = -1.5, α = -0.08); the
//! flag decisions are identical to the canonical orientation with |θ|, |α|.
//!
//! `scw` weights come from a [`WeightProvider`]; the default
//! [`HeuristicWeights`] keys on surface features of chemical notation.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::ReasoningChain;
use crate::gateway::{ModelResponse, TokenObservation};
use crate::scalar::Real;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
pub const DEFAULT_ALPHA: f64 = 0.08;
pub const DEFAULT_THETA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "base")]
    Base,
    #[serde(rename = "ln")]
    LengthNormalized,
    #[serde(rename = "maxnlp")]
    MaxNegLogprob,
    #[serde(rename = "scw")]
    Scw,
    #[serde(rename = "adaptive")]
    Adaptive,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 5] = [
        EstimatorKind::Base,
        EstimatorKind::LengthNormalized,
        EstimatorKind::MaxNegLogprob,
        EstimatorKind::Scw,
        EstimatorKind::Adaptive,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Base => "base",
            EstimatorKind::LengthNormalized => "ln",
            EstimatorKind::MaxNegLogprob => "maxnlp",
            EstimatorKind::Scw => "scw",
            EstimatorKind::Adaptive => "adaptive",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown estimator {s:?} (base|ln|maxnlp|scw|adaptive)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignConvention {
    #[default]
    NegLog,
    Mirrored,
}

impl FromStr for SignConvention {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "neg-log" | "neg_log" => Ok(SignConvention::NegLog),
            "mirrored" => Ok(SignConvention::Mirrored),
            _ => Err(format!("unknown sign convention {s:?} (neg-log|mirrored)")),
        }
    }
}

impl fmt::Display for SignConvention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignConvention::NegLog => f.write_str("neg-log"),
            SignConvention::Mirrored => f.write_str("mirrored"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimatorError {
    #[error("empty probability list")]
    Empty,
    #[error("probability {value} at token {index} outside (0, 1]")]
    Domain { index: usize, value: f64 },
    #[error("weight {value} at token {index} outside [0, 1]")]
    Weight { index: usize, value: f64 },
    #[error("{probs} probabilities but {weights} weights")]
    Shape { probs: usize, weights: usize },
    #[error("step index {index} outside 1..={len}")]
    Bounds { index: usize, len: usize },
    #[error("invalid estimator configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct EstimatorParams<T> {
    pub kind: EstimatorKind,
    /// Positional coefficient (adaptive only).
    pub alpha: T,
    pub theta: T,
    #[serde(default)]
    pub convention: SignConvention,
}

impl<T: Real> Default for EstimatorParams<T> {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Adaptive,
            alpha: T::lit(DEFAULT_ALPHA),
            theta: T::lit(DEFAULT_THETA),
            convention: SignConvention::NegLog,
        }
    }
}

impl<T: Real> EstimatorParams<T> {
    pub fn new(kind: EstimatorKind, alpha: T, theta: T) -> Self {
        Self {
            kind,
            alpha,
            theta,
            convention: SignConvention::NegLog,
        }
    }

    /// Log-probability orientation with θ = -1.5 and α = -0.08.
    pub fn mirrored_defaults(kind: EstimatorKind) -> Self {
        Self {
            kind,
            alpha: T::lit(-DEFAULT_ALPHA),
            theta: T::lit(-DEFAULT_THETA),
            convention: SignConvention::Mirrored,
        }
    }

    pub fn validate(&self) -> Result<(), EstimatorError> {
        if !self.alpha.is_finite() || !self.theta.is_finite() {
            return Err(EstimatorError::Config("alpha and theta must be finite".into()));
        }
        let zero = T::zero();
        match self.convention {
            SignConvention::NegLog if self.alpha < zero || self.theta < zero => Err(
                EstimatorError::Config("neg-log convention needs alpha >= 0 and theta >= 0".into()),
            ),
            SignConvention::Mirrored if self.alpha > zero || self.theta > zero => Err(
                EstimatorError::Config("mirrored convention needs alpha <= 0 and theta <= 0".into()),
            ),
            _ => Ok(()),
        }
    }

    /// α in canonical (non-negative) orientation.
    pub fn canonical_alpha(&self) -> T {
        self.alpha.abs()
    }

    /// θ in canonical (non-negative) orientation.
    pub fn canonical_theta(&self) -> T {
        self.theta.abs()
    }

    /// Converts a canonical score into this convention's reported value.
    pub fn orient(&self, canonical: T) -> T {
        match self.convention {
            SignConvention::NegLog => canonical,
            SignConvention::Mirrored => -canonical,
        }
    }

    /// Strict threshold test on a value in this convention's orientation.
    pub fn flag(&self, value: T) -> bool {
        flag(value, self)
    }
}

/// `value > θ` under neg-log; `value < θ` under mirrored.
pub fn flag<T: Real>(value: T, params: &EstimatorParams<T>) -> bool {
    match params.convention {
        SignConvention::NegLog => value > params.theta,
        SignConvention::Mirrored => value < params.theta,
    }
}

fn check_probs<T: Real>(probs: &[T]) -> Result<(), EstimatorError> {
    if probs.is_empty() {
        return Err(EstimatorError::Empty);
    }
    for (index, &p) in probs.iter().enumerate() {
        if !(p > T::zero() && p <= T::one()) {
            return Err(EstimatorError::Domain {
                index,
                value: p.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(())
}

/// `-ln p` with the probability floor applied; never returns `-0.0`.
#[inline]
fn surprisal<T: Real>(p: T) -> T {
    let floor = T::lit(PROB_FLOOR);
    T::zero() - p.max(floor).ln()
}

/// Number of probabilities that fall under [`PROB_FLOOR`].
pub fn clamped_count<T: Real>(probs: &[T]) -> usize {
    let floor = T::lit(PROB_FLOOR);
    probs.iter().filter(|&&p| p < floor).count()
}

pub fn base_score<T: Real>(probs: &[T]) -> Result<T, EstimatorError> {
    check_probs(probs)?;
    Ok(probs.iter().fold(T::zero(), |acc, &p| acc + surprisal(p)))
}

pub fn length_normalized_score<T: Real>(probs: &[T]) -> Result<T, EstimatorError> {
    let total = base_score(probs)?;
    Ok(total / T::from_count(probs.len()))
}

pub fn max_neg_logprob<T: Real>(probs: &[T]) -> Result<T, EstimatorError> {
    check_probs(probs)?;
    Ok(probs
        .iter()
        .map(|&p| surprisal(p))
        .fold(T::zero(), |acc, s| if s > acc { s } else { acc }))
}

pub fn scw_score<T: Real>(probs: &[T], weights: &[T]) -> Result<T, EstimatorError> {
    if probs.len() != weights.len() {
        return Err(EstimatorError::Shape {
            probs: probs.len(),
            weights: weights.len(),
        });
    }
    check_probs(probs)?;
    for (index, &w) in weights.iter().enumerate() {
        if !(w >= T::zero() && w <= T::one()) {
            return Err(EstimatorError::Weight {
                index,
                value: w.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    Ok(probs
        .iter()
        .zip(weights)
        .fold(T::zero(), |acc, (&p, &w)| acc + w * surprisal(p)))
}

/// Canonical adaptive score of step `step` (one-based) in a chain of
/// `chain_len` steps, using |α| from `params`.
pub fn adaptive_score<T: Real>(
    probs: &[T],
    step: usize,
    chain_len: usize,
    params: &EstimatorParams<T>,
) -> Result<T, EstimatorError> {
    if step == 0 || step > chain_len {
        return Err(EstimatorError::Bounds {
            index: step,
            len: chain_len,
        });
    }
    let peak = max_neg_logprob(probs)?;
    let distance = T::from_count(chain_len - step);
    Ok(peak + params.canonical_alpha() * distance)
}

/// Score of one step for `params.kind`, in canonical orientation.
pub fn canonical_score<T: Real>(
    params: &EstimatorParams<T>,
    probs: &[T],
    weights: Option<&[T]>,
    step: usize,
    chain_len: usize,
) -> Result<T, EstimatorError> {
    match params.kind {
        EstimatorKind::Base => base_score(probs),
        EstimatorKind::LengthNormalized => length_normalized_score(probs),
        EstimatorKind::MaxNegLogprob => max_neg_logprob(probs),
        EstimatorKind::Scw => {
            let weights = weights.ok_or_else(|| {
                EstimatorError::Config("scw estimator requires a weight provider".into())
            })?;
            scw_score(probs, weights)
        }
        EstimatorKind::Adaptive => adaptive_score(probs, step, chain_len, params),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct StepScore<T> {
    pub step_index: usize,
    /// Score in the active convention's orientation.
    pub value: T,
    pub flagged: bool,
}

/// All five estimator values for one step, canonical orientation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct EstimatorReadout<T> {
    pub base: T,
    pub ln: T,
    pub maxnlp: T,
    pub scw: T,
    pub adaptive: T,
}

impl<T: Real> EstimatorReadout<T> {
    pub fn compute(
        probs: &[T],
        weights: &[T],
        step: usize,
        chain_len: usize,
        alpha: T,
    ) -> Result<Self, EstimatorError> {
        let positional = EstimatorParams::new(EstimatorKind::Adaptive, alpha.abs(), T::zero());
        Ok(Self {
            base: base_score(probs)?,
            ln: length_normalized_score(probs)?,
            maxnlp: max_neg_logprob(probs)?,
            scw: scw_score(probs, weights)?,
            adaptive: adaptive_score(probs, step, chain_len, &positional)?,
        })
    }

    pub fn get(&self, kind: EstimatorKind) -> T {
        match kind {
            EstimatorKind::Base => self.base,
            EstimatorKind::LengthNormalized => self.ln,
            EstimatorKind::MaxNegLogprob => self.maxnlp,
            EstimatorKind::Scw => self.scw,
            EstimatorKind::Adaptive => self.adaptive,
        }
    }
}

/// Supplies per-token semantic-contribution weights in [0, 1].
pub trait WeightProvider: Send + Sync {
    fn name(&self) -> &str;

    /// One weight per token.
    fn weights(&self, step_text: &str, tokens: &[TokenObservation]) -> Vec<f64>;
}

/// Dependency-free weigher: tokens carrying chemical notation, numbers or
/// substantial words get weight 1.0, everything else 0.2; the result is
/// normalized to sum to one (mean 1/L).
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicWeights;

pub const SALIENT_WEIGHT: f64 = 1.0;
pub const FILLER_WEIGHT: f64 = 0.2;

fn formula_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Z][a-z]?[0-9₀-₉]|[\[\]()₀-₉]").unwrap())
}

impl HeuristicWeights {
    pub fn is_salient(token: &str) -> bool {
        let alpha_len = token.chars().filter(|c| c.is_alphabetic()).count();
        token.chars().any(|c| c.is_ascii_digit())
            || formula_re().is_match(token)
            || alpha_len >= 4
    }

    pub fn raw_weight(token: &str) -> f64 {
        if Self::is_salient(token) {
            SALIENT_WEIGHT
        } else {
            FILLER_WEIGHT
        }
    }
}

impl WeightProvider for HeuristicWeights {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn weights(&self, _step_text: &str, tokens: &[TokenObservation]) -> Vec<f64> {
        let raw: Vec<f64> = tokens.iter().map(|t| Self::raw_weight(&t.token_text)).collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.into_iter().map(|w| w / total).collect()
        } else {
            raw
        }
    }
}

/// Uniform weights `1/L`; reduces SCW to the length-normalized score.
#[derive(Debug, Clone, Copy, Default)]
pub struct UniformWeights;

impl WeightProvider for UniformWeights {
    fn name(&self) -> &str {
        "uniform"
    }

    fn weights(&self, _step_text: &str, tokens: &[TokenObservation]) -> Vec<f64> {
        vec![1.0 / tokens.len() as f64; tokens.len()]
    }
}

/// Which steps to score and the chain length the positional term uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScoringWindow {
    /// One-based index of the first step to score.
    pub first_step: usize,
    /// L_R for the positional term. Steps past it get a zero positional term.
    pub chain_len: usize,
}

/// Scores steps `window.first_step..=chain.length()` in order.
pub fn score_steps(
    chain: &ReasoningChain,
    response: &ModelResponse,
    params: &EstimatorParams<f64>,
    weights: Option<&dyn WeightProvider>,
    window: ScoringWindow,
) -> Result<Vec<StepScore<f64>>, EstimatorError> {
    params.validate()?;
    if params.kind == EstimatorKind::Scw && weights.is_none() {
        return Err(EstimatorError::Config(
            "scw estimator requires a weight provider".into(),
        ));
    }
    let first = window.first_step.max(1);
    chain
        .steps
        .iter()
        .filter(|s| s.index >= first)
        .map(|step| {
            let tokens = response.tokens.get(step.token_span.clone()).ok_or(
                EstimatorError::Bounds {
                    index: step.index,
                    len: chain.length(),
                },
            )?;
            let probs: Vec<f64> = tokens.iter().map(|t| t.prob).collect();
            let w = weights.map(|p| p.weights(&step.text, tokens));
            let chain_len = window.chain_len.max(1);
            let position = step.index.min(chain_len);
            let canonical =
                canonical_score(params, &probs, w.as_deref(), position, chain_len)?;
            let value = params.orient(canonical);
            Ok(StepScore {
                step_index: step.index,
                value,
                flagged: params.flag(value),
            })
        })
        .collect()
}

/// One score per step of `chain`, positions relative to the whole chain.
pub fn score_chain(
    chain: &ReasoningChain,
    response: &ModelResponse,
    params: &EstimatorParams<f64>,
    weights: Option<&dyn WeightProvider>,
) -> Result<Vec<StepScore<f64>>, EstimatorError> {
    score_steps(
        chain,
        response,
        params,
        weights,
        ScoringWindow {
            first_step: 1,
            chain_len: chain.length(),
        },
    )
}
