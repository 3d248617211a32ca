//! Deterministic scripted backend.
//!
//! A script (`mock-script/1`) is a JSON document listing turns. Each turn
//! carries the full reply with per-token probabilities and may restrict
//! which calls consume it:
//!
//! ```json
//! {
//!   "schema": "mock-script/1",
//!   "turns": [
//!     { "role": "general", "match": "Knowledge:", "text": "-- Step A\nAnswer: (B)", "prob": 0.95 },
//!     { "role": "domain", "segments": [ { "text": "Incorrect. ", "prob": 0.9 },
//!                                       { "text": "K4[Fe(CN)6]", "prob": 0.8 } ] },
//!     { "tokens": [ { "text": "-- ", "prob": 1.0 }, { "text": "A", "prob": 0.5 } ] }
//!   ]
//! }
//! ```
//!
//! A turn body is exactly one of `text` + `prob` (uniform), `segments`
//! (each segment tokenized with its own probability) or `tokens` (explicit
//! tokenization). `match` and `unless` take one regex or a list; every
//! `match` pattern and no `unless` pattern must hit the prompt, which is the
//! concatenation of all message contents separated by newlines.
//!
//! Selection: among unconsumed turns whose `role` (if any) equals the call's
//! role, the first turn in script order that has `match` patterns and matches
//! wins; otherwise the first eligible turn without `match` patterns. Each turn
//! is consumed once. No eligible turn is a [`GatewayError::ScriptUnderrun`].

use std::path::Path;
use std::sync::Mutex;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{
    validate_request, ChatMessage, FinishReason, GatewayError, ModelBackend, ModelResponse,
    ModelRole, SamplingConfig, TokenObservation,
};

pub const MOCK_SCRIPT_SCHEMA: &str = "mock-script/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(String),
    Many(Vec<String>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<String> {
        match self {
            OneOrMany::One(s) => vec![s],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPiece {
    text: String,
    prob: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    #[serde(default)]
    role: Option<ModelRole>,
    #[serde(default, rename = "match")]
    match_patterns: Option<OneOrMany>,
    #[serde(default)]
    unless: Option<OneOrMany>,
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    prob: Option<f64>,
    #[serde(default)]
    segments: Option<Vec<RawPiece>>,
    #[serde(default)]
    tokens: Option<Vec<RawPiece>>,
    #[serde(default)]
    finish_reason: Option<FinishReason>,
    /// Reply carries text only, as a domain model without logprob support would.
    #[serde(default)]
    no_logprobs: bool,
}

#[derive(Debug, Clone)]
struct Turn {
    role: Option<ModelRole>,
    matchers: Vec<Regex>,
    excluders: Vec<Regex>,
    tokens: Vec<(String, f64)>,
    finish_reason: FinishReason,
    no_logprobs: bool,
}

fn check_prob(p: f64) -> Result<f64, String> {
    if p > 0.0 && p <= 1.0 {
        Ok(p)
    } else {
        Err(format!("probability {p} outside (0, 1]"))
    }
}

fn compile(patterns: Option<OneOrMany>) -> Result<Vec<Regex>, String> {
    patterns
        .map(OneOrMany::into_vec)
        .unwrap_or_default()
        .iter()
        .map(|p| Regex::new(p).map_err(|e| format!("bad pattern {p:?}: {e}")))
        .collect()
}

impl TryFrom<RawTurn> for Turn {
    type Error = String;

    fn try_from(raw: RawTurn) -> Result<Self, Self::Error> {
        let tokens = match (raw.text, raw.segments, raw.tokens) {
            (Some(text), None, None) => {
                let p = check_prob(raw.prob.ok_or("`text` needs a uniform `prob`")?)?;
                tokenize(&text).into_iter().map(|t| (t, p)).collect()
            }
            (None, Some(segments), None) => {
                if raw.prob.is_some() {
                    return Err("`prob` only applies to `text` turns".into());
                }
                let mut out = Vec::new();
                for seg in segments {
                    let p = check_prob(seg.prob)?;
                    out.extend(tokenize(&seg.text).into_iter().map(|t| (t, p)));
                }
                out
            }
            (None, None, Some(tokens)) => {
                if raw.prob.is_some() {
                    return Err("`prob` only applies to `text` turns".into());
                }
                tokens
                    .into_iter()
                    .map(|t| check_prob(t.prob).map(|p| (t.text, p)))
                    .collect::<Result<_, _>>()?
            }
            _ => return Err("turn needs exactly one of `text`, `segments` or `tokens`".into()),
        };
        if tokens.is_empty() {
            return Err("turn produces no tokens".into());
        }
        Ok(Turn {
            role: raw.role,
            matchers: compile(raw.match_patterns)?,
            excluders: compile(raw.unless)?,
            tokens,
            finish_reason: raw.finish_reason.unwrap_or(FinishReason::Stop),
            no_logprobs: raw.no_logprobs,
        })
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawScript {
    schema: String,
    #[serde(default)]
    name: Option<String>,
    #[serde(default = "default_true")]
    system_role: bool,
    turns: Vec<TurnSlot>,
}

fn default_true() -> bool {
    true
}

/// Wrapper so per-turn validation errors surface through serde with a
/// line/column position.
#[derive(Debug)]
struct TurnSlot(Turn);

impl<'de> Deserialize<'de> for TurnSlot {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawTurn::deserialize(d)?;
        Turn::try_from(raw).map(TurnSlot).map_err(serde::de::Error::custom)
    }
}

/// Splits text into tokens: each token is a run of non-whitespace plus the
/// whitespace that follows it. Leading whitespace forms its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for c in text.chars() {
        if !c.is_whitespace() && current.chars().last().is_some_and(char::is_whitespace) {
            tokens.push(std::mem::take(&mut current));
        }
        current.push(c);
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// One call received by the mock, for test inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct MockCall {
    pub role: ModelRole,
    pub prompt: String,
    /// Index of the consumed turn, `None` on underrun.
    pub turn: Option<usize>,
}

#[derive(Debug, Default)]
struct MockState {
    consumed: Vec<bool>,
    calls: Vec<MockCall>,
}

#[derive(Debug)]
pub struct MockBackend {
    name: String,
    system_role: bool,
    turns: Vec<Turn>,
    state: Mutex<MockState>,
}

impl MockBackend {
    pub fn from_script_str(source: &str) -> Result<Self, GatewayError> {
        let raw: RawScript = serde_json::from_str(source).map_err(|e| GatewayError::ScriptParse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if raw.schema != MOCK_SCRIPT_SCHEMA {
            return Err(GatewayError::ScriptParse {
                line: 1,
                column: 1,
                message: format!(
                    "unsupported schema {:?}, expected {MOCK_SCRIPT_SCHEMA:?}",
                    raw.schema
                ),
            });
        }
        let turns: Vec<Turn> = raw.turns.into_iter().map(|t| t.0).collect();
        Ok(Self {
            name: raw.name.unwrap_or_else(|| "mock".to_string()),
            system_role: raw.system_role,
            state: Mutex::new(MockState {
                consumed: vec![false; turns.len()],
                calls: Vec::new(),
            }),
            turns,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path).map_err(|e| GatewayError::ScriptIo {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::from_script_str(&source)
    }

    /// A single-turn mock replying with `text` at a uniform probability.
    pub fn uniform(text: &str, prob: f64) -> Self {
        let tokens = tokenize(text).into_iter().map(|t| (t, prob)).collect();
        Self {
            name: "mock".into(),
            system_role: true,
            turns: vec![Turn {
                role: None,
                matchers: Vec::new(),
                excluders: Vec::new(),
                tokens,
                finish_reason: FinishReason::Stop,
                no_logprobs: false,
            }],
            state: Mutex::new(MockState {
                consumed: vec![false],
                calls: Vec::new(),
            }),
        }
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.state.lock().expect("mock state poisoned").calls.clone()
    }

    pub fn remaining_turns(&self) -> usize {
        let state = self.state.lock().expect("mock state poisoned");
        state.consumed.iter().filter(|c| !**c).count()
    }

    fn select(&self, consumed: &[bool], role: ModelRole, prompt: &str) -> Option<usize> {
        let eligible = |i: &usize| {
            let t = &self.turns[*i];
            !consumed[*i]
                && t.role.map_or(true, |r| r == role)
                && !t.excluders.iter().any(|re| re.is_match(prompt))
        };
        let indices = || (0..self.turns.len()).filter(eligible);
        indices()
            .find(|&i| {
                let m = &self.turns[i].matchers;
                !m.is_empty() && m.iter().all(|re| re.is_match(prompt))
            })
            .or_else(|| indices().find(|&i| self.turns[i].matchers.is_empty()))
    }
}

impl ModelBackend for MockBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &SamplingConfig,
        role: ModelRole,
    ) -> Result<ModelResponse, GatewayError> {
        validate_request(messages, config)?;
        let prompt = messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        let mut state = self.state.lock().expect("mock state poisoned");
        let selected = self.select(&state.consumed, role, &prompt);
        let call = state.calls.len() + 1;
        state.calls.push(MockCall {
            role,
            prompt,
            turn: selected,
        });
        let index = selected.ok_or(GatewayError::ScriptUnderrun { role, call })?;
        state.consumed[index] = true;
        let turn = &self.turns[index];
        let mut response = ModelResponse::from_tokens(&turn.tokens);
        response.finish_reason = turn.finish_reason;
        if turn.no_logprobs {
            response.tokens.clear();
        }
        Ok(response)
    }

    fn is_scripted(&self) -> bool {
        true
    }

    fn supports_system_role(&self) -> bool {
        self.system_role
    }
}

/// Convenience for tests: uniform-probability tokens for `text`.
pub fn uniform_tokens(text: &str, prob: f64) -> Vec<TokenObservation> {
    tokenize(text)
        .into_iter()
        .enumerate()
        .map(|(i, t)| TokenObservation::from_prob(t, prob, i))
        .collect()
}
