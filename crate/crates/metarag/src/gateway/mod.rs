//! Single abstraction through which every pipeline stage talks to a model:
//! a remote chat-completion client, deterministic mocks for offline runs, and
//! an ensemble fan-out helper.

pub mod limiter;
pub mod mock;
pub mod remote;

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use limiter::InFlightLimiter;
pub use mock::{ScriptedMock, TripleWorldMock};
pub use remote::{RemoteBackend, RetryPolicy};

/// Default cap on simultaneous remote calls.
pub const DEFAULT_IN_FLIGHT: usize = 8;
/// Generous budgets for decomposition and mutation output.
pub const GENERATION_MAX_TOKENS: u32 = 1024;
/// Verification needs only one of three words.
pub const VERIFY_MAX_TOKENS: u32 = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_prompt: String,
    pub user_prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub latency_ms: u64,
    pub model_id: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GatewayError {
    /// Network-level failure; surfaced only after the retry budget.
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid backend spec: {0}")]
    InvalidSpec(String),
    #[error("all ensemble members failed")]
    AllMembersFailed,
}

impl GatewayError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited(_))
    }
}

/// The surface every pipeline stage calls.
pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

/// Serializable backend configuration, resolved into a live backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    RemoteModel {
        endpoint: String,
        model: String,
        /// Name of the env var holding the API key; absent means no auth.
        #[serde(default)]
        api_key_env: Option<String>,
    },
    ScriptedMock {
        /// request digest -> canned completion text.
        script: BTreeMap<String, String>,
    },
    TripleWorldMock {
        synonyms: BTreeMap<String, Vec<String>>,
        antonyms: BTreeMap<String, Vec<String>>,
    },
}

impl BackendSpec {
    pub fn resolve(&self) -> Result<Arc<dyn ChatBackend>, GatewayError> {
        match self {
            BackendSpec::RemoteModel { endpoint, model, api_key_env } => Ok(Arc::new(
                RemoteBackend::new(endpoint, model, api_key_env.as_deref())?,
            )),
            BackendSpec::ScriptedMock { script } => {
                Ok(Arc::new(ScriptedMock::new(script.clone())))
            }
            BackendSpec::TripleWorldMock { synonyms, antonyms } => Ok(Arc::new(
                TripleWorldMock::new(synonyms.clone(), antonyms.clone()),
            )),
        }
    }
}

/// Stable digest of a request, the key for scripted mock tables.
pub fn request_digest(request: &CompletionRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(request.system_prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(request.user_prompt.as_bytes());
    hasher.update([0x1f]);
    hasher.update(request.temperature.to_bits().to_le_bytes());
    hasher.update([0x1f]);
    hasher.update(request.seed.unwrap_or(0).to_le_bytes());
    hex::encode(hasher.finalize())
}

/// Fans one request out to every member; results come back in member order
/// regardless of completion order, with per-member failures tagged in place.
pub fn ensemble_complete(
    members: &[Arc<dyn ChatBackend>],
    request: &CompletionRequest,
) -> Vec<(String, Result<CompletionResult, GatewayError>)> {
    if members.len() == 1 {
        return vec![(members[0].id().to_string(), members[0].complete(request))];
    }
    let mut slots: Vec<Option<(String, Result<CompletionResult, GatewayError>)>> =
        (0..members.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = members
            .iter()
            .map(|member| {
                let member = Arc::clone(member);
                scope.spawn(move || (member.id().to_string(), member.complete(request)))
            })
            .collect();
        for (slot, handle) in slots.iter_mut().zip(handles) {
            *slot = Some(handle.join().expect("ensemble member panicked"));
        }
    });
    slots.into_iter().map(|s| s.expect("slot filled")).collect()
}

/// Whitespace token count used by the mock backends for usage accounting.
pub(crate) fn mock_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
