//! Splits a generated response into marker-delimited reasoning steps and
//! extracts the final multiple-choice answer.
//!
//! A line whose first non-whitespace characters are `--` (or `- -`) opens a
//! step. Text before the first marker is the preamble; a line starting with
//! `Answer:` after the last marker begins the postscript. Tokens are assigned
//! to the region containing their first byte, so the preamble, the steps and
//! the postscript partition the token list.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ModelResponse;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    /// One-based position in the chain.
    pub index: usize,
    pub text: String,
    /// Half-open range into the response's token list. Empty only when a
    /// single token starting before the step covers all of it.
    pub token_span: Range<usize>,
    #[serde(default)]
    pub scores: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningChain {
    pub steps: Vec<ReasoningStep>,
    pub raw_text: String,
    pub preamble: String,
    pub postscript: String,
    pub preamble_span: Range<usize>,
    pub postscript_span: Range<usize>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ChainError {
    #[error("unstructured chain: no step markers found")]
    Unstructured,
    #[error("token/text alignment failure: {0}")]
    Integrity(String),
    #[error("step index {index} out of range 1..={len}")]
    Bounds { index: usize, len: usize },
}

impl ReasoningChain {
    /// L_R, the number of steps.
    pub fn length(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn step(&self, index: usize) -> Result<&ReasoningStep, ChainError> {
        index
            .checked_sub(1)
            .and_then(|i| self.steps.get(i))
            .ok_or(ChainError::Bounds {
                index,
                len: self.steps.len(),
            })
    }

    pub fn step_texts(&self) -> Vec<String> {
        self.steps.iter().map(|s| s.text.clone()).collect()
    }

    /// The whole response as one step (index 1, L_R = 1). Used for
    /// unstructured output and for chain-level scoring.
    pub fn single_unit(response: &ModelResponse) -> Self {
        let n = response.tokens.len();
        Self {
            steps: vec![ReasoningStep {
                index: 1,
                text: response.text.trim().to_string(),
                token_span: 0..n,
                scores: BTreeMap::new(),
            }],
            raw_text: response.text.clone(),
            preamble: String::new(),
            postscript: String::new(),
            preamble_span: 0..0,
            postscript_span: n..n,
        }
    }

    /// Canonical text form: preamble, one `-- ` line per step, postscript.
    pub fn render(&self) -> String {
        let mut lines = Vec::with_capacity(self.steps.len() + 2);
        if !self.preamble.is_empty() {
            lines.push(self.preamble.clone());
        }
        lines.extend(self.steps.iter().map(|s| render_step(&s.text)));
        if !self.postscript.is_empty() {
            lines.push(self.postscript.clone());
        }
        lines.join("\n")
    }
}

pub fn render_step(text: &str) -> String {
    format!("-- {text}")
}

/// Byte offset of the step body if `line` opens a step.
fn marker_body(line: &str) -> Option<usize> {
    let trimmed = line.trim_start();
    let lead = line.len() - trimmed.len();
    let content = trimmed.trim_end();
    if content.len() >= 3 && content.chars().all(|c| c == '-') {
        // horizontal rule
        return None;
    }
    if let Some(rest) = trimmed.strip_prefix("--") {
        Some(lead + 2 + (rest.len() - rest.trim_start_matches('-').len()))
    } else if trimmed.starts_with("- -") {
        Some(lead + 3)
    } else {
        None
    }
}

fn answer_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*(?:\*\*)?(?:final\s+)?answer\s*(?:\*\*)?\s*:").unwrap())
}

#[derive(Debug, Clone, PartialEq)]
struct Segmentation {
    /// Byte ranges of each step region and the text body within it.
    steps: Vec<(Range<usize>, Range<usize>)>,
    preamble: Range<usize>,
    postscript: Range<usize>,
}

fn segment(text: &str) -> Option<Segmentation> {
    let mut markers: Vec<(usize, usize)> = Vec::new();
    let mut lines: Vec<(usize, &str)> = Vec::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if let Some(body) = marker_body(line) {
            markers.push((offset, offset + body));
        }
        lines.push((offset, line));
        offset += line.len();
    }
    let &(first, _) = markers.first()?;
    let &(last, _) = markers.last()?;
    let answer_start = lines
        .iter()
        .find(|(start, line)| *start > last && answer_line_re().is_match(line))
        .map_or(text.len(), |(start, _)| *start);
    let steps = markers
        .iter()
        .enumerate()
        .map(|(k, &(start, body))| {
            let end = markers.get(k + 1).map_or(answer_start, |&(next, _)| next);
            (start..end, body.min(end)..end)
        })
        .collect();
    Some(Segmentation {
        steps,
        preamble: 0..first,
        postscript: answer_start..text.len(),
    })
}

/// Index of the first token whose start offset is >= `byte`.
fn first_token_at(starts: &[usize], byte: usize) -> usize {
    starts.partition_point(|&s| s < byte)
}

pub fn parse_chain(response: &ModelResponse) -> Result<ReasoningChain, ChainError> {
    let text = &response.text;
    response.check_integrity().map_err(ChainError::Integrity)?;
    let seg = segment(text).ok_or(ChainError::Unstructured)?;

    let mut starts = Vec::with_capacity(response.tokens.len());
    let mut offset = 0;
    for t in &response.tokens {
        starts.push(offset);
        offset += t.token_text.len();
    }
    let n = response.tokens.len();
    let span_of = |bytes: &Range<usize>, is_last: bool| {
        let lo = first_token_at(&starts, bytes.start);
        let hi = if is_last { n } else { first_token_at(&starts, bytes.end) };
        lo..hi
    };

    let has_postscript = !seg.postscript.is_empty();
    let mut steps = Vec::with_capacity(seg.steps.len());
    for (k, (region, body)) in seg.steps.iter().enumerate() {
        let is_last = k + 1 == seg.steps.len() && !has_postscript;
        let token_span = span_of(region, is_last);
        let body_text = text[body.clone()].trim().to_string();
        if token_span.is_empty() && !body_text.is_empty() {
            tracing::debug!(step = k + 1, "step fully covered by an earlier token");
        }
        steps.push(ReasoningStep {
            index: k + 1,
            text: body_text,
            token_span,
            scores: BTreeMap::new(),
        });
    }
    let postscript_span = if has_postscript {
        span_of(&seg.postscript, true)
    } else {
        n..n
    };
    Ok(ReasoningChain {
        steps,
        raw_text: text.clone(),
        preamble: text[seg.preamble.clone()].trim().to_string(),
        postscript: text[seg.postscript.clone()].trim().to_string(),
        preamble_span: span_of(&seg.preamble, false),
        postscript_span,
    })
}

/// Probabilities of the tokens in step `index` (one-based), order preserved.
pub fn step_probabilities(
    chain: &ReasoningChain,
    response: &ModelResponse,
    index: usize,
) -> Result<Vec<f64>, ChainError> {
    let step = chain.step(index)?;
    response
        .tokens
        .get(step.token_span.clone())
        .map(|ts| ts.iter().map(|t| t.prob).collect())
        .ok_or_else(|| ChainError::Integrity(format!("step {index} span exceeds token list")))
}

/// A parsed multiple-choice answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Answer {
    Letter(char),
    Unparsed,
}

impl Answer {
    pub fn letter(&self) -> Option<char> {
        match self {
            Answer::Letter(c) => Some(*c),
            Answer::Unparsed => None,
        }
    }
}

impl fmt::Display for Answer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Answer::Letter(c) => write!(f, "{c}"),
            Answer::Unparsed => f.write_str("unparsed"),
        }
    }
}

impl From<Answer> for String {
    fn from(a: Answer) -> Self {
        a.to_string()
    }
}

impl TryFrom<String> for Answer {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let mut chars = s.chars();
        match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => Ok(Answer::Letter(c)),
            _ if s == "unparsed" => Ok(Answer::Unparsed),
            _ => Err(format!("invalid answer {s:?}")),
        }
    }
}

fn declared_answer_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\banswer\s*:\s*(?:\(([a-z])\)|([a-z])\b)").unwrap())
}

fn parenthesized_letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\(([A-Z])\)").unwrap())
}

/// Extracts the chosen option from the chain's raw text.
///
/// The last `Answer: X` / `Answer: (X)` (case-insensitive) naming a valid
/// option wins; otherwise the last parenthesized uppercase option letter.
pub fn extract_answer(chain: &ReasoningChain, options: &[char]) -> Answer {
    extract_answer_from_text(&chain.raw_text, options)
}

pub fn extract_answer_from_text(text: &str, options: &[char]) -> Answer {
    let valid = |c: char| {
        let c = c.to_ascii_uppercase();
        options.contains(&c).then_some(c)
    };
    let declared = declared_answer_re()
        .captures_iter(text)
        .filter_map(|cap| {
            let m = cap.get(1).or_else(|| cap.get(2))?;
            valid(m.as_str().chars().next()?)
        })
        .last();
    if let Some(c) = declared {
        return Answer::Letter(c);
    }
    parenthesized_letter_re()
        .captures_iter(text)
        .filter_map(|cap| {
            let c = cap[1].chars().next()?;
            options.contains(&c).then_some(c)
        })
        .last()
        .map_or(Answer::Unparsed, Answer::Letter)
}
