//! Uniform access to text-generation backends that report per-token
//! probabilities.
//!
//! Two adapters ship with the crate: [`http::HttpBackend`] talks to an
//! OpenAI-compatible chat-completions endpoint, and [`mock::MockBackend`]
//! replays a scripted document deterministically for tests.

pub mod http;
pub mod mock;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::HttpBackend;
pub use mock::MockBackend;

/// Which of the two collaborating models a call is addressed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelRole {
    General,
    Domain,
}

impl fmt::Display for ModelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelRole::General => f.write_str("general"),
            ModelRole::Domain => f.write_str("domain"),
        }
    }
}

pub const DEFAULT_TEMPERATURE: f64 = 0.3;
pub const DEFAULT_TOP_LOGPROBS: u32 = 4;
pub const GENERAL_MAX_TOKENS: u32 = 1024;
pub const DOMAIN_MAX_TOKENS: u32 = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Candidate tokens requested per position. Only the emitted token's
    /// probability is kept.
    pub top_logprobs: u32,
    pub max_tokens: u32,
}

impl SamplingConfig {
    pub fn for_role(role: ModelRole) -> Self {
        let max_tokens = match role {
            ModelRole::General => GENERAL_MAX_TOKENS,
            ModelRole::Domain => DOMAIN_MAX_TOKENS,
        };
        Self {
            temperature: DEFAULT_TEMPERATURE,
            top_logprobs: DEFAULT_TOP_LOGPROBS,
            max_tokens,
        }
    }

    pub fn general() -> Self {
        Self::for_role(ModelRole::General)
    }

    pub fn domain() -> Self {
        Self::for_role(ModelRole::Domain)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0) || !self.temperature.is_finite() {
            return Err(GatewayError::Precondition(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.top_logprobs < 1 {
            return Err(GatewayError::Precondition(
                "top_logprobs must be at least 1".into(),
            ));
        }
        if self.max_tokens < 1 {
            return Err(GatewayError::Precondition(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MessageRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: MessageRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: MessageRole::Assistant,
            content: content.into(),
        }
    }
}

/// One emitted token and the probability the backend assigned to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenObservation {
    pub token_text: String,
    pub prob: f64,
    /// Natural log of `prob`.
    pub logprob: f64,
    pub position: usize,
}

impl TokenObservation {
    pub fn from_prob(token_text: impl Into<String>, prob: f64, position: usize) -> Self {
        Self {
            token_text: token_text.into(),
            prob,
            logprob: prob.ln(),
            position,
        }
    }

    pub fn from_logprob(token_text: impl Into<String>, logprob: f64, position: usize) -> Self {
        Self {
            token_text: token_text.into(),
            prob: logprob.exp(),
            logprob,
            position,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub tokens: Vec<TokenObservation>,
    pub finish_reason: FinishReason,
}

impl ModelResponse {
    /// Builds a response whose text is the concatenation of the given
    /// `(token_text, prob)` pairs.
    pub fn from_tokens<S: AsRef<str>>(tokens: &[(S, f64)]) -> Self {
        let mut text = String::new();
        let tokens = tokens
            .iter()
            .enumerate()
            .map(|(position, (t, p))| {
                text.push_str(t.as_ref());
                TokenObservation::from_prob(t.as_ref(), *p, position)
            })
            .collect();
        Self {
            text,
            tokens,
            finish_reason: FinishReason::Stop,
        }
    }

    pub fn probs(&self) -> Vec<f64> {
        self.tokens.iter().map(|t| t.prob).collect()
    }

    /// Checks that token texts concatenate to `text` and positions run 0..n.
    pub fn check_integrity(&self) -> Result<(), String> {
        let mut offset = 0usize;
        for (expected, token) in self.tokens.iter().enumerate() {
            if token.position != expected {
                return Err(format!(
                    "token {expected} reports position {}",
                    token.position
                ));
            }
            let end = offset + token.token_text.len();
            if self.text.get(offset..end) != Some(token.token_text.as_str()) {
                return Err(format!(
                    "token {expected} ({:?}) does not match text at byte {offset}",
                    token.token_text
                ));
            }
            offset = end;
        }
        if offset != self.text.len() {
            return Err(format!(
                "tokens cover {offset} bytes but text has {}",
                self.text.len()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("transport failure talking to {backend}: {message}")]
    Transport { backend: String, message: String },
    #[error(
        "{backend} returned no token logprobs; enable logprob return on the server \
         (request sets logprobs=true and top_logprobs)"
    )]
    Capability { backend: String },
    #[error("token/text mismatch from {backend}: {detail}")]
    Integrity { backend: String, detail: String },
    #[error("malformed response from {backend}: {message}")]
    Protocol { backend: String, message: String },
    #[error("mock script underrun: no turn left for {role} call #{call}")]
    ScriptUnderrun { role: ModelRole, call: usize },
    #[error("mock script parse error at line {line}, column {column}: {message}")]
    ScriptParse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("cannot read mock script {path}: {message}")]
    ScriptIo { path: String, message: String },
}

/// A text-generation backend returning per-token probabilities.
///
/// Implementations must be safe to share between threads.
pub trait ModelBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(
        &self,
        messages: &[ChatMessage],
        config: &SamplingConfig,
        role: ModelRole,
    ) -> Result<ModelResponse, GatewayError>;

    /// Scripted backends force single-worker evaluation.
    fn is_scripted(&self) -> bool {
        false
    }

    /// Some model families want system instructions folded into the user turn.
    fn supports_system_role(&self) -> bool {
        true
    }
}

pub(crate) fn validate_request(
    messages: &[ChatMessage],
    config: &SamplingConfig,
) -> Result<(), GatewayError> {
    if messages.is_empty() {
        return Err(GatewayError::Precondition("messages must not be empty".into()));
    }
    if let Some(i) = messages.iter().position(|m| m.content.is_empty()) {
        return Err(GatewayError::Precondition(format!(
            "message {i} has empty content"
        )));
    }
    config.validate()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn role_presets() {
        let g = SamplingConfig::general();
        let d = SamplingConfig::domain();
        assert_eq!(g.max_tokens, 1024);
        assert_eq!(d.max_tokens, 100);
        for c in [g, d] {
            assert_eq!(c.temperature, 0.3);
            assert_eq!(c.top_logprobs, 4);
            c.validate().unwrap();
        }
    }

    #[test]
    fn invalid_sampling_configs() {
        let mut c = SamplingConfig::general();
        c.top_logprobs = 0;
        assert!(matches!(c.validate(), Err(GatewayError::Precondition(_))));
        let mut c = SamplingConfig::general();
        c.max_tokens = 0;
        assert!(c.validate().is_err());
        let mut c = SamplingConfig::general();
        c.temperature = -0.1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_messages_rejected() {
        let c = SamplingConfig::general();
        assert!(validate_request(&[], &c).is_err());
        assert!(validate_request(&[ChatMessage::user("")], &c).is_err());
        assert!(validate_request(&[ChatMessage::user("hi")], &c).is_ok());
    }

    #[test]
    fn logprob_consistency() {
        let t = TokenObservation::from_prob("K", 0.72, 0);
        assert!((t.logprob.exp() - t.prob).abs() <= 1e-9);
        let t = TokenObservation::from_logprob("K", -0.3285, 0);
        assert!((t.logprob - t.prob.ln()).abs() <= 1e-9);
    }

    #[test]
    fn integrity_check() {
        let r = ModelResponse::from_tokens(&[("-- ", 0.9), ("A", 0.9)]);
        assert!(r.check_integrity().is_ok());
        let mut bad = r.clone();
        bad.text.push('!');
        assert!(bad.check_integrity().is_err());
        let mut bad = r;
        bad.tokens[1].position = 5;
        assert!(bad.check_integrity().is_err());
    }
}
