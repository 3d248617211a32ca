//! Side-by-side estimator scores over recorded traces or synthetic chains,
//! with flag decisions across a threshold sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::trace::TraceDocument;
use crate::estimators::{
    EstimatorError, EstimatorKind, EstimatorReadout, HeuristicWeights, WeightProvider,
};
use crate::gateway::TokenObservation;

pub const COMPARE_SCHEMA: &str = "chemau-compare/1";

/// Per-step maximum-token probabilities of the rising-confidence example.
pub const RISING3_STEP_PROBS: [f64; 3] = [0.72, 0.81, 1.0];

#[derive(Debug, Error, PartialEq)]
pub enum CompareError {
    #[error("unusable input: {0}")]
    Unusable(String),
    #[error("bad threshold sweep {0:?}: expected lo:hi:step with step > 0 and lo <= hi")]
    Sweep(String),
    #[error("unknown synthetic generator {0:?} (rising3 | fig1 | rising:<from>:<to>:<steps>)")]
    Synthetic(String),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareStep {
    pub text: String,
    pub tokens: Vec<String>,
    pub probs: Vec<f64>,
}

/// One chain to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareCase {
    pub label: String,
    pub steps: Vec<CompareStep>,
}

impl CompareCase {
    /// A chain whose step `k` has one key token at `key_probs[k]` and filler
    /// tokens that never lower the step maximum.
    pub fn from_key_probs(label: &str, key_probs: &[f64]) -> Self {
        let steps = key_probs
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let filler = p.max(0.99);
                let tokens = vec!["-- ".into(), "step ".into(), format!("k{} ", k + 1), "ok".into()];
                CompareStep {
                    text: format!("step k{} ok", k + 1),
                    tokens,
                    probs: vec![filler, filler, p, filler],
                }
            })
            .collect();
        Self {
            label: label.to_string(),
            steps,
        }
    }

    pub fn rising3() -> Self {
        Self::from_key_probs("rising3", &RISING3_STEP_PROBS)
    }

    /// Key probabilities rising linearly from `from` to `to` over `steps`.
    pub fn rising(from: f64, to: f64, steps: usize) -> Result<Self, CompareError> {
        let bad = || CompareError::Synthetic(format!("rising:{from}:{to}:{steps}"));
        let valid = |p: f64| p > 0.0 && p <= 1.0;
        if steps == 0 || !valid(from) || !valid(to) {
            return Err(bad());
        }
        let probs: Vec<f64> = (0..steps)
            .map(|k| {
                if steps == 1 {
                    from
                } else {
                    from + (to - from) * k as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_key_probs(&format!("rising {from}->{to} x{steps}"), &probs))
    }

    pub fn synthetic(name: &str) -> Result<Self, CompareError> {
        if name == "rising3" || name == "fig1" {
            return Ok(Self::rising3());
        }
        let bad = || CompareError::Synthetic(name.to_string());
        let rest = name.strip_prefix("rising:").ok_or_else(bad)?;
        let parts: Vec<&str> = rest.split(':').collect();
        let [from, to, steps] = parts.as_slice() else {
            return Err(bad());
        };
        let from: f64 = from.parse().map_err(|_| bad())?;
        let to: f64 = to.parse().map_err(|_| bad())?;
        let steps: usize = steps.parse().map_err(|_| bad())?;
        Self::rising(from, to, steps)
    }

    /// The first scored chain of a trace.
    pub fn from_trace(trace: &TraceDocument) -> Result<Self, CompareError> {
        let it = trace.iterations.first().ok_or_else(|| {
            CompareError::Unusable(format!("trace {} has no iterations", trace.question_id))
        })?;
        let mut steps = Vec::with_capacity(it.steps.len());
        for s in &it.steps {
            if s.token_probs.is_empty() {
                return Err(CompareError::Unusable(format!(
                    "trace {} step {} carries no token probabilities",
                    trace.question_id, s.index
                )));
            }
            steps.push(CompareStep {
                text: s.text.clone(),
                tokens: s.token_texts.clone(),
                probs: s.token_probs.clone(),
            });
        }
        if steps.is_empty() {
            return Err(CompareError::Unusable(format!(
                "trace {} has no steps",
                trace.question_id
            )));
        }
        Ok(Self {
            label: trace.question_id.clone(),
            steps,
        })
    }
}

/// Thresholds `lo, lo + step, ..., hi`, generated by integer stepping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaSweep {
    pub thetas: Vec<f64>,
}

impl ThetaSweep {
    pub fn single(theta: f64) -> Self {
        Self { thetas: vec![theta] }
    }

    pub fn range(lo: f64, hi: f64, step: f64) -> Option<Self> {
        if !(lo.is_finite() && hi.is_finite() && step.is_finite()) || step <= 0.0 || lo > hi {
            return None;
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        Some(Self {
            thetas: (0..=n).map(|k| lo + step * k as f64).collect(),
        })
    }
}

impl FromStr for ThetaSweep {
    type Err = CompareError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || CompareError::Sweep(s.to_string());
        let parts: Vec<f64> = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<_, _>>()?;
        match parts.as_slice() {
            [theta] => Ok(Self::single(*theta)),
            [lo, hi, step] => Self::range(*lo, *hi, *step).ok_or_else(bad),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepComparison {
    pub case: String,
    pub index: usize,
    pub chain_len: usize,
    pub text: String,
    pub probs: Vec<f64>,
    /// Canonical scores, larger means less certain.
    pub scores: EstimatorReadout<f64>,
    /// Per estimator, one decision per swept threshold.
    pub flags: BTreeMap<EstimatorKind, Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub schema: String,
    pub alpha: f64,
    pub thetas: Vec<f64>,
    pub steps: Vec<StepComparison>,
    /// Per estimator, flagged step count at each threshold.
    pub flag_counts: BTreeMap<EstimatorKind, Vec<usize>>,
}

pub fn compare_estimators(
    cases: &[CompareCase],
    alpha: f64,
    sweep: &ThetaSweep,
) -> Result<Comparison, CompareError> {
    if cases.is_empty() {
        return Err(CompareError::Unusable("no chains to compare".into()));
    }
    let weigher = HeuristicWeights;
    let mut steps = Vec::new();
    let mut flag_counts: BTreeMap<EstimatorKind, Vec<usize>> = EstimatorKind::ALL
        .into_iter()
        .map(|k| (k, vec![0; sweep.thetas.len()]))
        .collect();
    for case in cases {
        let len = case.steps.len();
        for (k, step) in case.steps.iter().enumerate() {
            if step.probs.is_empty() || step.tokens.len() != step.probs.len() {
                return Err(CompareError::Unusable(format!(
                    "{} step {} has {} tokens and {} probabilities",
                    case.label,
                    k + 1,
                    step.tokens.len(),
                    step.probs.len()
                )));
            }
            let observations: Vec<TokenObservation> = step
                .tokens
                .iter()
                .zip(&step.probs)
                .enumerate()
                .map(|(i, (t, &p))| TokenObservation::from_prob(t.clone(), p, i))
                .collect();
            let weights = weigher.weights(&step.text, &observations);
            let scores = EstimatorReadout::compute(&step.probs, &weights, k + 1, len, alpha)?;
            let mut flags = BTreeMap::new();
            for kind in EstimatorKind::ALL {
                let value = scores.get(kind);
                let decisions: Vec<bool> = sweep.thetas.iter().map(|&th| value > th).collect();
                for (count, &f) in flag_counts.get_mut(&kind).unwrap().iter_mut().zip(&decisions) {
                    *count += usize::from(f);
                }
                flags.insert(kind, decisions);
            }
            steps.push(StepComparison {
                case: case.label.clone(),
                index: k + 1,
                chain_len: len,
                text: step.text.clone(),
                probs: step.probs.clone(),
                scores,
                flags,
            });
        }
    }
    Ok(Comparison {
        schema: COMPARE_SCHEMA.to_string(),
        alpha,
        thetas: sweep.thetas.clone(),
        steps,
        flag_counts,
    })
}

impl Comparison {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("comparison serializes");
        s.push('\n');
        s
    }

    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<24} {:>4}", "case", "step");
        for k in EstimatorKind::ALL {
            let _ = write!(out, " {:>9}", k.as_str());
        }
        out.push('\n');
        for s in &self.steps {
            let _ = write!(out, "{:<24} {:>4}", s.case, s.index);
            for k in EstimatorKind::ALL {
                let _ = write!(out, " {:>9.4}", s.scores.get(k));
            }
            out.push('\n');
        }
        out.push('\n');
        let _ = write!(out, "{:>8}", "theta");
        for k in EstimatorKind::ALL {
            let _ = write!(out, " {:>9}", k.as_str());
        }
        out.push('\n');
        for (i, th) in self.thetas.iter().enumerate() {
            let _ = write!(out, "{th:>8.4}");
            for k in EstimatorKind::ALL {
                let _ = write!(out, " {:>9}", self.flag_counts[&k][i]);
            }
            out.push('\n');
        }
        out
    }
}
