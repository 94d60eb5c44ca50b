//! LLM transport: a backend-agnostic client trait, the OpenAI-compatible
//! HTTP backend with retry/backoff, and client construction from config.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Environment variable holding the HTTP backend's API key. The value is
/// sent as a bearer token and never logged.
pub const API_KEY_ENV: &str = "UEIDG_LLM_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LlmBackend {
    Http,
    Mock,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LlmClientConfig {
    pub backend: LlmBackend,
    pub endpoint: String,
    pub model: String,
    /// Keep 0 for reproducibility runs.
    pub temperature: f64,
    pub max_tokens: usize,
    pub timeout_secs: u64,
    /// Accepted for interface parity; requests are issued sequentially.
    pub max_concurrent: usize,
    /// Extra attempts after the first on 429/5xx responses.
    pub retries: usize,
    /// Backoff starts here and doubles per attempt.
    pub retry_base_ms: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        LlmClientConfig {
            backend: LlmBackend::Mock,
            endpoint: "http://127.0.0.1:8080".into(),
            model: "mock-judge".into(),
            temperature: 0.0,
            max_tokens: 1024,
            timeout_secs: 60,
            max_concurrent: 1,
            retries: 3,
            retry_base_ms: 250,
        }
    }
}

pub trait LlmClient {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String>;
    fn name(&self) -> &str;
}

/// Build the configured backend; `seed` parameterizes the mock.
pub fn make_client(cfg: &LlmClientConfig, seed: u64) -> Result<Box<dyn LlmClient>> {
    match cfg.backend {
        LlmBackend::Mock => Ok(Box::new(super::mock::MockLlm::new(seed))),
        LlmBackend::Http => Ok(Box::new(HttpLlm::new(cfg.clone())?)),
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    temperature: f64,
    max_tokens: usize,
    messages: Vec<ChatMessage<'a>>,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

pub struct HttpLlm {
    cfg: LlmClientConfig,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

impl HttpLlm {
    pub fn new(cfg: LlmClientConfig) -> Result<HttpLlm> {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| CoreError::Transport {
                request_id: "init".into(),
                msg: format!("building http client: {e}"),
            })?;
        Ok(HttpLlm { cfg, api_key, http })
    }

    fn url(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.cfg.endpoint.trim_end_matches('/')
        )
    }
}

impl LlmClient for HttpLlm {
    fn complete(&self, request_id: &str, prompt: &str) -> Result<String> {
        let body = ChatRequest {
            model: &self.cfg.model,
            temperature: self.cfg.temperature,
            max_tokens: self.cfg.max_tokens,
            messages: vec![ChatMessage {
                role: "user",
                content: prompt,
            }],
        };
        let transport = |msg: String| CoreError::Transport {
            request_id: request_id.to_string(),
            msg,
        };
        for attempt in 0..=self.cfg.retries {
            if attempt > 0 {
                let backoff = self.cfg.retry_base_ms.saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            let mut req = self.http.post(self.url()).json(&body);
            if let Some(key) = &self.api_key {
                req = req.bearer_auth(key);
            }
            let resp = req
                .send()
                .map_err(|e| transport(format!("request failed: {e}")))?;
            let status = resp.status();
            if status.as_u16() == 429 || status.is_server_error() {
                log::warn!(
                    "[request {request_id}] got {status}, attempt {}/{}",
                    attempt + 1,
                    self.cfg.retries + 1
                );
                continue;
            }
            if !status.is_success() {
                return Err(transport(format!("http status {status}")));
            }
            let parsed: ChatResponse = resp
                .json()
                .map_err(|e| transport(format!("malformed response body: {e}")))?;
            return parsed
                .choices
                .into_iter()
                .next()
                .map(|c| c.message.content)
                .ok_or_else(|| transport("response had no choices".into()));
        }
        Err(transport(format!(
            "retries exhausted after {} attempts",
            self.cfg.retries + 1
        )))
    }

    fn name(&self) -> &str {
        "http"
    }
}
