//! Chat-completion HTTP client with bounded retries.

use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChatBackend, CompletionRequest, CompletionResult, GatewayError};

/// Bounded retry with exponential backoff and jitter.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { attempts: 3, base_delay: Duration::from_millis(250) }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let backoff = self.base_delay * 2u32.saturating_pow(attempt);
        let jitter_ms = if self.base_delay.as_millis() > 1 {
            rand::thread_rng().gen_range(0..self.base_delay.as_millis() as u64 / 2)
        } else {
            0
        };
        backoff + Duration::from_millis(jitter_ms)
    }
}

/// JSON chat-completion POST client; any endpoint implementing the
/// messages/choices shape is usable.
pub struct RemoteBackend {
    endpoint: reqwest::Url,
    model: String,
    api_key: Option<String>,
    retry: RetryPolicy,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

impl RemoteBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key_env: Option<&str>,
    ) -> Result<Self, GatewayError> {
        let endpoint = reqwest::Url::parse(endpoint)
            .map_err(|e| GatewayError::InvalidSpec(format!("bad endpoint url: {e}")))?;
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::InvalidSpec(format!("api key env var {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(RemoteBackend {
            endpoint,
            model: model.to_string(),
            api_key,
            retry: RetryPolicy::default(),
            client,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let body = WireRequest {
            model: &self.model,
            messages: vec![
                WireMessage { role: "system", content: &request.system_prompt },
                WireMessage { role: "user", content: &request.user_prompt },
            ],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let started = Instant::now();
        let mut http = self.client.post(self.endpoint.clone()).json(&body);
        if let Some(key) = &self.api_key {
            http = http.bearer_auth(key);
        }
        let response = http.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        if status.as_u16() == 429 {
            return Err(GatewayError::RateLimited(format!("{status}")));
        }
        if status.is_server_error() {
            return Err(GatewayError::Transport(format!("server error {status}")));
        }
        if !status.is_success() {
            return Err(GatewayError::MalformedResponse(format!("http status {status}")));
        }
        let parsed: WireResponse = response
            .json()
            .map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("no choices in response".into()))?;
        let usage = parsed.usage.unwrap_or_default();
        Ok(CompletionResult {
            text: choice.message.content,
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            latency_ms: started.elapsed().as_millis() as u64,
            model_id: self.model.clone(),
        })
    }
}

impl ChatBackend for RemoteBackend {
    fn id(&self) -> &str {
        &self.model
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        let mut last_err = GatewayError::Transport("no attempts made".into());
        for attempt in 0..self.retry.attempts {
            match self.attempt(request) {
                Ok(result) => return Ok(result),
                Err(err) if err.is_retryable() => {
                    last_err = err;
                    if attempt + 1 < self.retry.attempts {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
                Err(err) => return Err(err),
            }
        }
        Err(last_err)
    }
}
