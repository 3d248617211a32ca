//! OpenAI-compatible chat-completions adapter with logprob return.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{
    validate_request, ChatMessage, FinishReason, GatewayError, ModelBackend, ModelResponse,
    ModelRole, SamplingConfig, TokenObservation,
};

pub const GENERAL_URL_ENV: &str = "CHEMAU_GENERAL_URL";
pub const DOMAIN_URL_ENV: &str = "CHEMAU_DOMAIN_URL";
pub const API_KEY_ENV: &str = "CHEMAU_API_KEY";

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    logprobs: bool,
    top_logprobs: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

// `top_logprobs` alternatives are ignored: only the emitted token is kept.
#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
}

#[derive(Debug, Clone)]
pub struct HttpBackend {
    name: String,
    endpoint: String,
    model: String,
    api_key: Option<String>,
    system_role: bool,
    agent: ureq::Agent,
}

impl HttpBackend {
    /// `base_url` is the server root; requests go to `<base_url>/v1/chat/completions`.
    pub fn new(base_url: &str, model: impl Into<String>) -> Self {
        let base = base_url.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base);
        Self {
            name: base.to_string(),
            endpoint: format!("{base}/v1/chat/completions"),
            model: model.into(),
            api_key: None,
            system_role: true,
            agent: ureq::Agent::new_with_defaults(),
        }
        .with_timeout(Duration::from_secs(120))
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        self.agent = ureq::Agent::new_with_config(config);
        self
    }

    pub fn without_system_role(mut self) -> Self {
        self.system_role = false;
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn transport(&self, message: impl Into<String>) -> GatewayError {
        GatewayError::Transport {
            backend: self.name.clone(),
            message: message.into(),
        }
    }

    fn post_once(&self, body: &ChatRequest<'_>) -> Result<String, GatewayError> {
        let mut request = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = request
            .send_json(body)
            .map_err(|e| self.transport(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| self.transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(self.transport(format!("HTTP {status}: {text}")));
        }
        Ok(text)
    }

    fn decode(&self, raw: &str, role: ModelRole) -> Result<ModelResponse, GatewayError> {
        let protocol = |message: String| GatewayError::Protocol {
            backend: self.name.clone(),
            message,
        };
        let parsed: ChatResponse =
            serde_json::from_str(raw).map_err(|e| protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| protocol("response has no choices".into()))?;
        let text = choice.message.content.unwrap_or_default();
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("length") => FinishReason::Length,
            _ => FinishReason::Stop,
        };
        let entries = choice.logprobs.and_then(|l| l.content);
        let tokens: Vec<TokenObservation> = match entries {
            Some(entries) => entries
                .into_iter()
                .enumerate()
                .map(|(i, t)| TokenObservation::from_logprob(t.token, t.logprob, i))
                .collect(),
            None if role == ModelRole::Domain => Vec::new(),
            None => {
                return Err(GatewayError::Capability {
                    backend: self.name.clone(),
                })
            }
        };
        let mut response = ModelResponse {
            text,
            tokens,
            finish_reason,
        };
        if !response.tokens.is_empty() {
            if let Err(detail) = response.check_integrity() {
                if role == ModelRole::Domain {
                    // Only the text of domain replies is consumed.
                    tracing::warn!(backend = %self.name, %detail, "dropping misaligned domain logprobs");
                    response.tokens.clear();
                } else {
                    return Err(GatewayError::Integrity {
                        backend: self.name.clone(),
                        detail,
                    });
                }
            }
        } else if role == ModelRole::General && !response.text.is_empty() {
            return Err(GatewayError::Capability {
                backend: self.name.clone(),
            });
        }
        Ok(response)
    }
}

impl ModelBackend for HttpBackend {
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
        let body = ChatRequest {
            model: &self.model,
            messages,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
            logprobs: true,
            top_logprobs: config.top_logprobs,
        };
        // One retry on transport failure; capability and integrity errors are final.
        let raw = match self.post_once(&body) {
            Ok(raw) => raw,
            Err(first) => {
                tracing::warn!(backend = %self.name, error = %first, "retrying once");
                self.post_once(&body)?
            }
        };
        self.decode(&raw, role)
    }

    fn supports_system_role(&self) -> bool {
        self.system_role
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn backend() -> HttpBackend {
        HttpBackend::new("http://127.0.0.1:9/", "m")
    }

    #[test]
    fn endpoint_normalization() {
        assert_eq!(
            HttpBackend::new("http://h:1/v1/", "m").endpoint(),
            "http://h:1/v1/chat/completions"
        );
        assert_eq!(
            HttpBackend::new("http://h:1", "m").endpoint(),
            "http://h:1/v1/chat/completions"
        );
    }

    #[test]
    fn request_wire_shape() {
        let messages = [ChatMessage::system("s"), ChatMessage::user("u")];
        let body = ChatRequest {
            model: "m",
            messages: &messages,
            temperature: 0.3,
            max_tokens: 1024,
            logprobs: true,
            top_logprobs: 4,
        };
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(v["logprobs"], true);
        assert_eq!(v["top_logprobs"], 4);
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["content"], "u");
    }

    #[test]
    fn decode_keeps_chosen_token_only() {
        let raw = r#"{"choices":[{"message":{"content":"-- A"},"finish_reason":"stop",
            "logprobs":{"content":[
              {"token":"-- ","logprob":-0.1,"top_logprobs":[{"token":"-- ","logprob":-0.1},{"token":"- ","logprob":-2.5}]},
              {"token":"A","logprob":-0.5,"top_logprobs":[]}]}}]}"#;
        let r = backend().decode(raw, ModelRole::General).unwrap();
        assert_eq!(r.tokens.len(), 2);
        assert!((r.tokens[1].prob - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn missing_logprobs_is_capability_error_for_general_only() {
        let raw = r#"{"choices":[{"message":{"content":"Incorrect."}}]}"#;
        assert!(matches!(
            backend().decode(raw, ModelRole::General),
            Err(GatewayError::Capability { .. })
        ));
        let r = backend().decode(raw, ModelRole::Domain).unwrap();
        assert_eq!(r.text, "Incorrect.");
        assert!(r.tokens.is_empty());
    }

    #[test]
    fn mismatch_is_integrity_error() {
        let raw = r#"{"choices":[{"message":{"content":"-- AB"},
            "logprobs":{"content":[{"token":"-- ","logprob":-0.1},{"token":"A","logprob":-0.5}]}}]}"#;
        assert!(matches!(
            backend().decode(raw, ModelRole::General),
            Err(GatewayError::Integrity { .. })
        ));
    }

    #[test]
    fn unreachable_host_is_transport_error() {
        let b = backend().with_timeout(Duration::from_millis(500));
        let err = b
            .complete(&[ChatMessage::user("q")], &SamplingConfig::general(), ModelRole::General)
            .unwrap_err();
        match err {
            GatewayError::Transport { backend, .. } => assert!(backend.contains("127.0.0.1")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
