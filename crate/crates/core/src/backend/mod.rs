//! Chat-completion backends, retrying, and the resumable run ledger.
//!
//! A [`ChatBackend`] turns one message list into reply text. [`chat`] wraps a
//! backend with the profile's retry policy. [`run_batch`] fans a batch of
//! prompt instances out over a bounded worker pool and appends every
//! finished exchange to the [`Ledger`], skipping exchanges already recorded.

mod batch;
mod http;
mod ledger;
mod mock;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, Mode};
use crate::parsing::AnswerFormat;
use crate::promptgen::{ChatMessage, PromptId};

pub use batch::{count_pending, run_batch, BatchError, BatchJob, BatchOptions, BatchSummary, Sleeper};
pub use http::{decode_chat_reply, encode_chat_request, HttpBackend};
pub use ledger::{Exchange, ExchangeStatus, Ledger, LedgerError, LedgerWriter, LEDGER_SCHEMA};
pub use mock::{message_digest, CertaintyModel, Script, ScriptEntry, ScriptedFailure, ScriptedBackend, StochasticBackend, StochasticSettings};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    MockScripted,
    MockStochastic,
}

/// Exponential backoff between attempts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Backoff {
    pub initial_ms: u64,
    pub multiplier: f64,
    pub max_ms: u64,
}

impl Default for Backoff {
    fn default() -> Self {
        Backoff { initial_ms: 1000, multiplier: 2.0, max_ms: 30_000 }
    }
}

impl Backoff {
    /// Wait before retry number `retry` (1 for the first retry).
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = self.multiplier.max(1.0).powi(retry.saturating_sub(1) as i32);
        let ms = (self.initial_ms as f64 * factor).min(self.max_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

fn default_temperature() -> f64 {
    0.6
}

fn default_max_new_tokens() -> u32 {
    4096
}

fn default_timeout_secs() -> u64 {
    120
}

fn default_max_attempts() -> u32 {
    5
}

/// How to reach one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendProfile {
    pub name: String,
    pub kind: BackendKind,
    /// Base URL of the chat-completions API, e.g. `https://host/v1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub credential_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_prompt: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub backoff: Backoff,
    /// Fixture file for [`BackendKind::MockScripted`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stochastic: Option<StochasticSettings>,
}

impl BackendProfile {
    pub fn new(name: impl Into<String>, kind: BackendKind) -> Self {
        BackendProfile {
            name: name.into(),
            kind,
            endpoint: None,
            model: None,
            credential_env: None,
            temperature: default_temperature(),
            max_new_tokens: default_max_new_tokens(),
            system_prompt: None,
            timeout_secs: default_timeout_secs(),
            max_attempts: default_max_attempts(),
            backoff: Backoff::default(),
            script: None,
            stochastic: None,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let fail = |msg: &str| Err(BackendError::Config(format!("backend `{}`: {msg}", self.name)));
        if self.name.is_empty() {
            return fail("name must not be empty");
        }
        if !(self.temperature >= 0.0) {
            return fail("temperature must be >= 0");
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be > 0");
        }
        if self.max_attempts == 0 {
            return fail("max_attempts must be >= 1");
        }
        match self.kind {
            BackendKind::HttpChat if self.endpoint.is_none() || self.model.is_none() => {
                fail("http_chat requires endpoint and model")
            }
            BackendKind::MockScripted if self.script.is_none() => fail("mock_scripted requires script"),
            BackendKind::MockStochastic => match &self.stochastic {
                Some(settings) => settings.validate().map_err(|m| BackendError::Config(format!("backend `{}`: {m}", self.name))),
                None => Ok(()),
            },
            _ => Ok(()),
        }
    }

    /// Prepends the configured system prompt, if any.
    pub fn request_messages(&self, messages: &[ChatMessage]) -> Vec<ChatMessage> {
        self.system_prompt
            .iter()
            .map(|s| ChatMessage::system(s.clone()))
            .chain(messages.iter().cloned())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Turn {
    Answer,
    Certainty,
}

impl fmt::Display for Turn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Turn::Answer => "answer",
            Turn::Certainty => "certainty",
        })
    }
}

/// Identity of one request/response pair in a run.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ExchangeKey {
    pub backend: String,
    pub dataset: String,
    pub record_id: String,
    pub prompt_id: PromptId,
    pub repeat: u32,
    pub turn: Turn,
}

impl fmt::Display for ExchangeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}/{}/{}/{}/{}", self.backend, self.dataset, self.record_id, self.prompt_id, self.repeat, self.turn)
    }
}

/// Everything a backend may look at when answering.
///
/// `gold` and `mode` exist for the mocks; the HTTP backend ignores them.
#[derive(Debug, Clone, Copy)]
pub struct ChatRequest<'a> {
    pub key: &'a ExchangeKey,
    pub messages: &'a [ChatMessage],
    pub gold: Option<Label>,
    pub mode: Mode,
    pub format: AnswerFormat,
}

/// Failure of a single attempt.
#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum ChatError {
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("malformed reply: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("{0}")]
    Config(String),
    #[error("cannot read {path}: {message}")]
    Io { path: PathBuf, message: String },
}

/// A chat endpoint, real or simulated. Must be shareable across workers.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest<'_>) -> Result<String, ChatError>;
}

/// Result of [`chat`] after retries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatOutcome {
    /// Empty on failure.
    pub text: String,
    pub attempts: u32,
    pub error: Option<String>,
}

impl ChatOutcome {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

/// Sends `request`, retrying transient failures per the profile.
///
/// Rate limits, timeouts and server errors are retried up to
/// `max_attempts`. A malformed reply is retried once. Authentication
/// failures return `Err` immediately so the caller can stop the batch.
pub fn chat(
    backend: &dyn ChatBackend,
    profile: &BackendProfile,
    request: &ChatRequest<'_>,
    sleep: &dyn Fn(Duration),
) -> Result<ChatOutcome, ChatError> {
    let mut malformed_seen = false;
    let mut attempt = 0;
    loop {
        attempt += 1;
        let error = match backend.send(request) {
            Ok(text) => return Ok(ChatOutcome { text, attempts: attempt, error: None }),
            Err(e @ ChatError::Auth(_)) => return Err(e),
            Err(e) => e,
        };
        let retryable = match &error {
            ChatError::Transient(_) | ChatError::RateLimited(_) => true,
            ChatError::Malformed(_) => !std::mem::replace(&mut malformed_seen, true),
            ChatError::Fatal(_) | ChatError::Auth(_) => false,
        };
        if !retryable || attempt >= profile.max_attempts {
            return Ok(ChatOutcome { text: String::new(), attempts: attempt, error: Some(error.to_string()) });
        }
        sleep(profile.backoff.delay(attempt));
    }
}

/// Builds the backend a profile describes. Relative script paths resolve
/// against `base_dir`; stochastic mocks without their own seed derive one
/// from `master_seed`.
pub fn build_backend(profile: &BackendProfile, master_seed: u64, base_dir: &Path) -> Result<Arc<dyn ChatBackend>, BackendError> {
    profile.validate()?;
    Ok(match profile.kind {
        BackendKind::HttpChat => Arc::new(HttpBackend::from_profile(profile)?),
        BackendKind::MockScripted => {
            let path = base_dir.join(profile.script.as_ref().expect("validated"));
            Arc::new(ScriptedBackend::load(&path)?)
        }
        BackendKind::MockStochastic => {
            let settings = profile.stochastic.clone().unwrap_or_default();
            let seed = settings.seed.unwrap_or_else(|| crate::seed::derive_seed(master_seed, &["mock", &profile.name]));
            Arc::new(StochasticBackend::new(settings, seed))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Mutex;

    struct Sequence {
        replies: Mutex<Vec<Result<String, ChatError>>>,
        calls: AtomicU32,
    }

    impl Sequence {
        fn new(mut replies: Vec<Result<String, ChatError>>) -> Self {
            replies.reverse();
            Sequence { replies: Mutex::new(replies), calls: AtomicU32::new(0) }
        }
    }

    impl ChatBackend for Sequence {
        fn send(&self, _: &ChatRequest<'_>) -> Result<String, ChatError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.replies.lock().unwrap().pop().unwrap_or_else(|| Err(ChatError::Transient("down".into())))
        }
    }

    fn key() -> ExchangeKey {
        ExchangeKey {
            backend: "b".into(),
            dataset: "d".into(),
            record_id: "r".into(),
            prompt_id: PromptId::P1,
            repeat: 0,
            turn: Turn::Answer,
        }
    }

    fn run(backend: &Sequence, max_attempts: u32) -> (Result<ChatOutcome, ChatError>, Vec<Duration>) {
        let mut profile = BackendProfile::new("b", BackendKind::MockScripted);
        profile.max_attempts = max_attempts;
        let k = key();
        let req = ChatRequest { key: &k, messages: &[], gold: None, mode: Mode::ThreeClass, format: AnswerFormat::Words };
        let slept = Mutex::new(Vec::new());
        let out = chat(backend, &profile, &req, &|d| slept.lock().unwrap().push(d));
        (out, slept.into_inner().unwrap())
    }

    #[test]
    fn rate_limit_then_success() {
        let b = Sequence::new(vec![
            Err(ChatError::RateLimited("429".into())),
            Err(ChatError::RateLimited("429".into())),
            Ok("For".into()),
        ]);
        let (out, slept) = run(&b, 5);
        assert_eq!(out.unwrap(), ChatOutcome { text: "For".into(), attempts: 3, error: None });
        assert_eq!(slept, vec![Duration::from_millis(1000), Duration::from_millis(2000)]);
    }

    #[test]
    fn exhaustion_is_terminal_failure() {
        let b = Sequence::new(vec![]);
        let out = run(&b, 4).0.unwrap();
        assert_eq!((out.text.as_str(), out.attempts, out.ok()), ("", 4, false));
    }

    #[test]
    fn auth_fails_fast() {
        let b = Sequence::new(vec![Err(ChatError::Auth("401".into())), Ok("For".into())]);
        assert!(matches!(run(&b, 5).0, Err(ChatError::Auth(_))));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_is_retried_once() {
        let b = Sequence::new(vec![Err(ChatError::Malformed("x".into())), Ok("A".into())]);
        assert_eq!(run(&b, 5).0.unwrap().attempts, 2);
        let b = Sequence::new(vec![Err(ChatError::Malformed("x".into())), Err(ChatError::Malformed("y".into())), Ok("A".into())]);
        let out = run(&b, 5).0.unwrap();
        assert_eq!((out.attempts, out.ok()), (2, false));
    }

    #[test]
    fn backoff_caps() {
        let b = Backoff { initial_ms: 100, multiplier: 3.0, max_ms: 500 };
        assert_eq!(b.delay(1), Duration::from_millis(100));
        assert_eq!(b.delay(2), Duration::from_millis(300));
        assert_eq!(b.delay(3), Duration::from_millis(500));
    }

    #[test]
    fn profile_validation() {
        let mut p = BackendProfile::new("h", BackendKind::HttpChat);
        assert!(p.validate().is_err());
        p.endpoint = Some("http://localhost:1".into());
        p.model = Some("m".into());
        assert!(p.validate().is_ok());
        p.temperature = -0.1;
        assert!(p.validate().is_err());
        assert_eq!(BackendProfile::new("x", BackendKind::MockStochastic).temperature, 0.6);
        assert_eq!(BackendProfile::new("x", BackendKind::MockStochastic).max_new_tokens, 4096);
    }

    #[test]
    fn system_prompt_is_prepended() {
        let mut p = BackendProfile::new("h", BackendKind::MockStochastic);
        let msgs = [ChatMessage::user("q")];
        assert_eq!(p.request_messages(&msgs), msgs.to_vec());
        p.system_prompt = Some("sys".into());
        assert_eq!(p.request_messages(&msgs)[0], ChatMessage::system("sys"));
    }
}
