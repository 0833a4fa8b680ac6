//! Transport layer to the judge-serving endpoints, plus a deterministic
//! in-process mock for tests and offline runs.
//!
//! One chat-completions client serves all four judge roles (image quality,
//! text quality, captioner, multimodal rater). Transient failures (network
//! errors, HTTP 5xx, HTTP 429) are retried with exponential backoff up to
//! `max_attempts`; other 4xx responses are permanent and never retried. The
//! number of outstanding requests per endpoint is bounded by `max_in_flight`.

use async_trait::async_trait;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};
use thiserror::Error;
use tokio::sync::Semaphore;

/// Which judge an endpoint plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeRole {
    Iqa,
    Tqa,
    Caption,
    Mm,
}

pub const ALL_ROLES: [JudgeRole; 4] =
    [JudgeRole::Iqa, JudgeRole::Tqa, JudgeRole::Caption, JudgeRole::Mm];

impl JudgeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            JudgeRole::Iqa => "iqa",
            JudgeRole::Tqa => "tqa",
            JudgeRole::Caption => "caption",
            JudgeRole::Mm => "mm",
        }
    }
}

/// One judge call on the wire. The caption stage issues two of these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WireStage {
    Iqa,
    Tqa,
    Task,
    CaptionGeneral,
    CaptionSpecific,
    Mm,
}

impl WireStage {
    /// Endpoint role serving this call. Task prediction goes to the text
    /// judge; both caption variants go to the captioner.
    pub fn role(self) -> JudgeRole {
        match self {
            WireStage::Iqa => JudgeRole::Iqa,
            WireStage::Tqa | WireStage::Task => JudgeRole::Tqa,
            WireStage::CaptionGeneral | WireStage::CaptionSpecific => JudgeRole::Caption,
            WireStage::Mm => JudgeRole::Mm,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            WireStage::Iqa => "iqa",
            WireStage::Tqa => "tqa",
            WireStage::Task => "task",
            WireStage::CaptionGeneral => "caption_general",
            WireStage::CaptionSpecific => "caption_specific",
            WireStage::Mm => "mm",
        }
    }

    pub fn from_str_opt(s: &str) -> Option<Self> {
        match s {
            "iqa" => Some(WireStage::Iqa),
            "tqa" => Some(WireStage::Tqa),
            "task" => Some(WireStage::Task),
            "caption_general" => Some(WireStage::CaptionGeneral),
            "caption_specific" => Some(WireStage::CaptionSpecific),
            "mm" => Some(WireStage::Mm),
            _ => None,
        }
    }
}

/// Connection and retry settings for one judge endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the credential; the value
    /// itself never appears in configs or records.
    pub api_key_env: String,
    pub timeout: Duration,
    pub max_attempts: u32,
    pub backoff_base: Duration,
    pub max_in_flight: usize,
    pub temperature: f64,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            model_name: model_name.into(),
            api_key_env: String::new(),
            timeout: Duration::from_secs(120),
            max_attempts: 3,
            backoff_base: Duration::from_millis(500),
            max_in_flight: 8,
            temperature: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_attempts < 1 {
            return Err(ConfigError::new("max_attempts must be >= 1"));
        }
        if self.max_in_flight < 1 {
            return Err(ConfigError::new("max_in_flight must be >= 1"));
        }
        if self.timeout.is_zero() {
            return Err(ConfigError::new("timeout must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid endpoint config: {0}")]
pub struct ConfigError(String);

impl ConfigError {
    fn new(msg: impl Into<String>) -> Self {
        ConfigError(msg.into())
    }
}

/// One request/response round-trip, kept verbatim for audit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeExchange {
    pub entry_id: String,
    pub stage: WireStage,
    pub prompt: String,
    pub image_attached: bool,
    pub raw_response: String,
    pub attempts: u32,
    pub latency: Duration,
}

/// Why a single send failed, classified for the retry policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SendFailure {
    Transient(String),
    Permanent(String),
}

impl SendFailure {
    fn cause(&self) -> &str {
        match self {
            SendFailure::Transient(c) | SendFailure::Permanent(c) => c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChatError {
    #[error("judge call for entry {entry_id} stage {stage:?} exhausted {attempts} attempts: {cause}")]
    Exhausted {
        entry_id: String,
        stage: WireStage,
        attempts: u32,
        cause: String,
    },
    #[error("judge call for entry {entry_id} stage {stage:?} failed permanently: {cause}")]
    Permanent {
        entry_id: String,
        stage: WireStage,
        cause: String,
    },
}

/// A backend that can answer one chat request. Implemented by the HTTP
/// client and by the test mock.
#[async_trait]
pub trait ChatBackend: Send + Sync {
    async fn send(
        &self,
        endpoint: &EndpointConfig,
        entry_id: &str,
        stage: WireStage,
        prompt: &str,
        image: Option<&[u8]>,
    ) -> Result<String, SendFailure>;
}

/// Retrying, concurrency-bounded client over a [`ChatBackend`].
pub struct JudgeClient {
    backend: Arc<dyn ChatBackend>,
    endpoints: HashMap<JudgeRole, EndpointConfig>,
    limits: HashMap<JudgeRole, Arc<Semaphore>>,
    requests_issued: AtomicU64,
}

impl JudgeClient {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        endpoints: HashMap<JudgeRole, EndpointConfig>,
    ) -> Result<Self, ConfigError> {
        let mut limits = HashMap::new();
        for (role, endpoint) in &endpoints {
            endpoint.validate()?;
            limits.insert(*role, Arc::new(Semaphore::new(endpoint.max_in_flight)));
        }
        Ok(JudgeClient {
            backend,
            endpoints,
            limits,
            requests_issued: AtomicU64::new(0),
        })
    }

    pub fn endpoint(&self, role: JudgeRole) -> Option<&EndpointConfig> {
        self.endpoints.get(&role)
    }

    /// Total requests handed to the backend, counting every retry attempt.
    pub fn requests_issued(&self) -> u64 {
        self.requests_issued.load(Ordering::Relaxed)
    }

    /// Sends one prompt, retrying transient failures with exponential
    /// backoff. Returns the first successful response verbatim.
    pub async fn chat(
        &self,
        entry_id: &str,
        stage: WireStage,
        prompt: &str,
        image: Option<&[u8]>,
    ) -> Result<JudgeExchange, ChatError> {
        let role = stage.role();
        let endpoint = self.endpoints.get(&role).ok_or_else(|| ChatError::Permanent {
            entry_id: entry_id.to_string(),
            stage,
            cause: format!("no endpoint configured for role {}", role.as_str()),
        })?;
        let semaphore = self.limits[&role].clone();
        let _permit = semaphore.acquire_owned().await.expect("semaphore closed");

        let started = Instant::now();
        let mut attempts = 0;
        loop {
            attempts += 1;
            self.requests_issued.fetch_add(1, Ordering::Relaxed);
            match self.backend.send(endpoint, entry_id, stage, prompt, image).await {
                Ok(raw_response) => {
                    return Ok(JudgeExchange {
                        entry_id: entry_id.to_string(),
                        stage,
                        prompt: prompt.to_string(),
                        image_attached: image.is_some(),
                        raw_response,
                        attempts,
                        latency: started.elapsed(),
                    });
                }
                Err(SendFailure::Permanent(cause)) => {
                    return Err(ChatError::Permanent {
                        entry_id: entry_id.to_string(),
                        stage,
                        cause,
                    });
                }
                Err(failure @ SendFailure::Transient(_)) => {
                    if attempts >= endpoint.max_attempts {
                        return Err(ChatError::Exhausted {
                            entry_id: entry_id.to_string(),
                            stage,
                            attempts,
                            cause: failure.cause().to_string(),
                        });
                    }
                    tokio::time::sleep(backoff_delay(endpoint.backoff_base, attempts)).await;
                }
            }
        }
    }
}

/// Exponential backoff: base * 2^(attempt-1), capped at 30s. Monotonically
/// non-decreasing across attempts.
pub fn backoff_delay(base: Duration, attempt: u32) -> Duration {
    const CAP: Duration = Duration::from_secs(30);
    let factor = 1u32 << (attempt - 1).min(16);
    base.saturating_mul(factor).min(CAP)
}

fn sniff_mime(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8]) {
        "image/jpeg"
    } else if bytes.starts_with(b"GIF8") {
        "image/gif"
    } else if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..12] == b"WEBP" {
        "image/webp"
    } else {
        "application/octet-stream"
    }
}

/// HTTP backend speaking the chat-completions JSON schema: POST to
/// `{base_url}/chat/completions` with `{model, messages, temperature}`.
/// Images are base64-inlined as data URLs, never passed by reference.
pub struct HttpBackend {
    http: reqwest::Client,
}

impl Default for HttpBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl HttpBackend {
    pub fn new() -> Self {
        HttpBackend { http: reqwest::Client::new() }
    }

    fn request_body(endpoint: &EndpointConfig, prompt: &str, image: Option<&[u8]>) -> serde_json::Value {
        let content = match image {
            None => json!(prompt),
            Some(bytes) => {
                let encoded = base64::engine::general_purpose::STANDARD.encode(bytes);
                let data_url = format!("data:{};base64,{}", sniff_mime(bytes), encoded);
                json!([
                    { "type": "text", "text": prompt },
                    { "type": "image_url", "image_url": { "url": data_url } },
                ])
            }
        };
        json!({
            "model": endpoint.model_name,
            "messages": [ { "role": "user", "content": content } ],
            "temperature": endpoint.temperature,
        })
    }
}

#[async_trait]
impl ChatBackend for HttpBackend {
    async fn send(
        &self,
        endpoint: &EndpointConfig,
        _entry_id: &str,
        _stage: WireStage,
        prompt: &str,
        image: Option<&[u8]>,
    ) -> Result<String, SendFailure> {
        let url = format!("{}/chat/completions", endpoint.base_url.trim_end_matches('/'));
        let mut request = self
            .http
            .post(&url)
            .timeout(endpoint.timeout)
            .json(&Self::request_body(endpoint, prompt, image));
        if !endpoint.api_key_env.is_empty() {
            if let Ok(key) = std::env::var(&endpoint.api_key_env) {
                request = request.header("Authorization", format!("Bearer {key}"));
            }
        }

        let response = request
            .send()
            .await
            .map_err(|e| SendFailure::Transient(format!("request error: {e}")))?;
        let status = response.status();
        if !status.is_success() {
            let code = status.as_u16();
            let cause = format!("HTTP {code}");
            return if code == 429 || status.is_server_error() {
                Err(SendFailure::Transient(cause))
            } else {
                Err(SendFailure::Permanent(cause))
            };
        }

        let body: serde_json::Value = response
            .json()
            .await
            .map_err(|e| SendFailure::Transient(format!("bad response body: {e}")))?;
        body.pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(|s| s.to_string())
            .ok_or_else(|| {
                SendFailure::Transient("response missing choices[0].message.content".into())
            })
    }
}

/// Scripted outcome for one mock call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockOutcome {
    Respond(String),
    FailTransient(String),
    FailPermanent(String),
}

#[derive(Default)]
struct RoleCounters {
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

/// Deterministic fixture-backed backend.
///
/// Responses are keyed by (entry_id, stage); the same key always yields the
/// same response unless a scripted sequence was installed, in which case
/// outcomes are consumed in order and the last one repeats. Instrumented
/// with per-role call and concurrency counters so tests can assert the
/// in-flight bound.
pub struct MockBackend {
    rules: Mutex<HashMap<(String, WireStage), Vec<MockOutcome>>>,
    consumed: Mutex<HashMap<(String, WireStage), usize>>,
    stage_defaults: HashMap<WireStage, String>,
    default: Option<String>,
    latency: Option<Duration>,
    stage_latency: HashMap<WireStage, Duration>,
    calls: AtomicU64,
    counters: HashMap<JudgeRole, RoleCounters>,
}

impl MockBackend {
    pub fn new() -> Self {
        let mut counters = HashMap::new();
        for role in ALL_ROLES {
            counters.insert(role, RoleCounters::default());
        }
        MockBackend {
            rules: Mutex::new(HashMap::new()),
            consumed: Mutex::new(HashMap::new()),
            stage_defaults: HashMap::new(),
            default: None,
            latency: None,
            stage_latency: HashMap::new(),
            calls: AtomicU64::new(0),
            counters,
        }
    }

    /// Loads fixtures from a line-delimited JSON file with records
    /// `{entry_id, stage, response}`. An `entry_id` of `"*"` installs the
    /// response as the default for that stage.
    pub fn from_fixture_file(path: impl AsRef<Path>) -> Result<Self, FixtureError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| FixtureError {
            path: path.display().to_string(),
            line: 0,
            cause: e.to_string(),
        })?;
        let mut mock = MockBackend::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRecord =
                serde_json::from_str(line).map_err(|e| FixtureError {
                    path: path.display().to_string(),
                    line: idx + 1,
                    cause: e.to_string(),
                })?;
            let stage = WireStage::from_str_opt(&record.stage).ok_or_else(|| FixtureError {
                path: path.display().to_string(),
                line: idx + 1,
                cause: format!("unknown stage {:?}", record.stage),
            })?;
            if record.entry_id == "*" {
                mock.stage_defaults.insert(stage, record.response);
            } else {
                mock.respond(&record.entry_id, stage, &record.response);
            }
        }
        Ok(mock)
    }

    /// Installs a fixed response for a key.
    pub fn respond(&mut self, entry_id: &str, stage: WireStage, response: &str) {
        self.rules
            .lock()
            .unwrap()
            .insert((entry_id.to_string(), stage), vec![MockOutcome::Respond(response.to_string())]);
    }

    /// Installs a scripted outcome sequence; the final outcome repeats once
    /// the script is consumed.
    pub fn script(&mut self, entry_id: &str, stage: WireStage, outcomes: Vec<MockOutcome>) {
        assert!(!outcomes.is_empty(), "script needs at least one outcome");
        self.rules
            .lock()
            .unwrap()
            .insert((entry_id.to_string(), stage), outcomes);
    }

    /// Default response for requests with no matching fixture.
    pub fn with_default(mut self, response: &str) -> Self {
        self.default = Some(response.to_string());
        self
    }

    /// Injects per-call latency, for concurrency tests.
    pub fn with_latency(mut self, latency: Duration) -> Self {
        self.latency = Some(latency);
        self
    }

    /// Overrides the injected latency for one wire stage.
    pub fn with_stage_latency(mut self, stage: WireStage, latency: Duration) -> Self {
        self.stage_latency.insert(stage, latency);
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// Highest number of concurrently outstanding calls seen for a role.
    pub fn peak_in_flight(&self, role: JudgeRole) -> usize {
        self.counters[&role].peak.load(Ordering::Relaxed)
    }

    fn next_outcome(&self, entry_id: &str, stage: WireStage) -> MockOutcome {
        let key = (entry_id.to_string(), stage);
        let rules = self.rules.lock().unwrap();
        if let Some(script) = rules.get(&key) {
            let mut consumed = self.consumed.lock().unwrap();
            let position = consumed.entry(key).or_insert(0);
            let outcome = script[(*position).min(script.len() - 1)].clone();
            *position += 1;
            return outcome;
        }
        drop(rules);
        if let Some(response) = self.stage_defaults.get(&stage) {
            return MockOutcome::Respond(response.clone());
        }
        if let Some(response) = &self.default {
            return MockOutcome::Respond(response.clone());
        }
        MockOutcome::FailPermanent(format!(
            "no fixture for entry {entry_id:?} stage {}",
            stage.as_str()
        ))
    }
}

impl Default for MockBackend {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Deserialize)]
struct FixtureRecord {
    entry_id: String,
    stage: String,
    response: String,
}

#[derive(Debug, Error)]
#[error("bad mock fixture {path} line {line}: {cause}")]
pub struct FixtureError {
    pub path: String,
    pub line: usize,
    pub cause: String,
}

#[async_trait]
impl ChatBackend for MockBackend {
    async fn send(
        &self,
        _endpoint: &EndpointConfig,
        entry_id: &str,
        stage: WireStage,
        _prompt: &str,
        _image: Option<&[u8]>,
    ) -> Result<String, SendFailure> {
        let counters = &self.counters[&stage.role()];
        let now = counters.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        counters.peak.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::Relaxed);

        let latency = self.stage_latency.get(&stage).copied().or(self.latency);
        if let Some(latency) = latency {
            tokio::time::sleep(latency).await;
        }
        let outcome = self.next_outcome(entry_id, stage);
        counters.in_flight.fetch_sub(1, Ordering::SeqCst);

        match outcome {
            MockOutcome::Respond(text) => Ok(text),
            MockOutcome::FailTransient(cause) => Err(SendFailure::Transient(cause)),
            MockOutcome::FailPermanent(cause) => Err(SendFailure::Permanent(cause)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn endpoints_with(max_attempts: u32, backoff_ms: u64) -> HashMap<JudgeRole, EndpointConfig> {
        let mut endpoints = HashMap::new();
        for role in ALL_ROLES {
            let mut e = EndpointConfig::new("http://mock", "mock-model");
            e.max_attempts = max_attempts;
            e.backoff_base = Duration::from_millis(backoff_ms);
            endpoints.insert(role, e);
        }
        endpoints
    }

    #[tokio::test]
    async fn first_try_success() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Mm, "Rating: 4");
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let exchange = client.chat("e1", WireStage::Mm, "rate it", None).await.unwrap();
        assert_eq!(exchange.raw_response, "Rating: 4");
        assert_eq!(exchange.attempts, 1);
    }

    #[tokio::test]
    async fn transient_failures_are_retried_until_success() {
        let mut mock = MockBackend::new();
        mock.script(
            "e1",
            WireStage::Iqa,
            vec![
                MockOutcome::FailTransient("HTTP 503".into()),
                MockOutcome::FailTransient("HTTP 503".into()),
                MockOutcome::Respond("BLUR: 5\nNOISE: 5".into()),
            ],
        );
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let exchange = client.chat("e1", WireStage::Iqa, "rate", None).await.unwrap();
        assert_eq!(exchange.attempts, 3);
        assert_eq!(exchange.raw_response, "BLUR: 5\nNOISE: 5");
    }

    #[tokio::test]
    async fn attempts_exhausted_reports_last_cause() {
        let mut mock = MockBackend::new();
        mock.script(
            "e2",
            WireStage::Iqa,
            vec![MockOutcome::FailTransient("HTTP 503".into())],
        );
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let err = client.chat("e2", WireStage::Iqa, "rate", None).await.unwrap_err();
        match err {
            ChatError::Exhausted { entry_id, stage, attempts, cause } => {
                assert_eq!(entry_id, "e2");
                assert_eq!(stage, WireStage::Iqa);
                assert_eq!(attempts, 3);
                assert_eq!(cause, "HTTP 503");
            }
            other => panic!("expected Exhausted, got {other:?}"),
        }
    }

    #[tokio::test]
    async fn permanent_failures_are_not_retried() {
        let mut mock = MockBackend::new();
        mock.script(
            "e1",
            WireStage::Tqa,
            vec![MockOutcome::FailPermanent("HTTP 401".into())],
        );
        let mock = Arc::new(mock);
        let client = JudgeClient::new(mock.clone(), endpoints_with(5, 1)).unwrap();
        let err = client.chat("e1", WireStage::Tqa, "rate", None).await.unwrap_err();
        assert!(matches!(err, ChatError::Permanent { .. }));
        assert_eq!(mock.calls(), 1);
    }

    #[tokio::test]
    async fn unkeyed_requests_use_the_default() {
        let mock = MockBackend::new().with_default("Rating: 3");
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let exchange = client.chat("e9", WireStage::Tqa, "rate", None).await.unwrap();
        assert_eq!(exchange.raw_response, "Rating: 3");
    }

    #[tokio::test]
    async fn unkeyed_without_default_is_permanent() {
        let mock = MockBackend::new();
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let err = client.chat("e9", WireStage::Tqa, "rate", None).await.unwrap_err();
        assert!(matches!(err, ChatError::Permanent { .. }));
    }

    #[tokio::test]
    async fn mock_is_referentially_transparent() {
        let mut mock = MockBackend::new();
        mock.respond("e1", WireStage::Mm, "Multimodal Rating: 5");
        let client = JudgeClient::new(Arc::new(mock), endpoints_with(3, 1)).unwrap();
        let a = client.chat("e1", WireStage::Mm, "rate", None).await.unwrap();
        let b = client.chat("e1", WireStage::Mm, "rate", None).await.unwrap();
        assert_eq!(a.raw_response, b.raw_response);
    }

    #[tokio::test]
    async fn in_flight_bound_is_enforced() {
        let mut endpoints = endpoints_with(1, 1);
        for endpoint in endpoints.values_mut() {
            endpoint.max_in_flight = 3;
        }
        let mock = Arc::new(
            MockBackend::new()
                .with_default("ok")
                .with_latency(Duration::from_millis(5)),
        );
        let client = Arc::new(JudgeClient::new(mock.clone(), endpoints).unwrap());

        let mut handles = Vec::new();
        for i in 0..40 {
            let client = client.clone();
            handles.push(tokio::spawn(async move {
                client.chat(&format!("e{i}"), WireStage::Tqa, "p", None).await.unwrap();
            }));
        }
        for handle in handles {
            handle.await.unwrap();
        }
        assert_eq!(mock.peak_in_flight(JudgeRole::Tqa), 3);
        assert_eq!(mock.calls(), 40);
    }

    #[test]
    fn backoff_is_monotone_and_capped() {
        let base = Duration::from_millis(100);
        let mut previous = Duration::ZERO;
        for attempt in 1..=20 {
            let delay = backoff_delay(base, attempt);
            assert!(delay >= previous);
            assert!(delay <= Duration::from_secs(30));
            previous = delay;
        }
        assert_eq!(backoff_delay(base, 1), Duration::from_millis(100));
        assert_eq!(backoff_delay(base, 2), Duration::from_millis(200));
        assert_eq!(backoff_delay(base, 3), Duration::from_millis(400));
    }

    #[test]
    fn fixture_file_round_trip() {
        use std::io::Write as _;
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, r#"{{"entry_id":"e1","stage":"mm","response":"Multimodal Rating: 5"}}"#)
            .unwrap();
        writeln!(file, r#"{{"entry_id":"*","stage":"tqa","response":"Rating: 3"}}"#).unwrap();
        file.flush().unwrap();

        let mock = MockBackend::from_fixture_file(file.path()).unwrap();
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
        let endpoint = EndpointConfig::new("http://mock", "m");
        let a = rt
            .block_on(mock.send(&endpoint, "e1", WireStage::Mm, "p", None))
            .unwrap();
        assert_eq!(a, "Multimodal Rating: 5");
        let b = rt
            .block_on(mock.send(&endpoint, "anything", WireStage::Tqa, "p", None))
            .unwrap();
        assert_eq!(b, "Rating: 3");
    }

    #[test]
    fn config_validation_rejects_zeroes() {
        let mut endpoint = EndpointConfig::new("http://x", "m");
        endpoint.max_attempts = 0;
        assert!(endpoint.validate().is_err());
        let mut endpoint = EndpointConfig::new("http://x", "m");
        endpoint.max_in_flight = 0;
        assert!(endpoint.validate().is_err());
        let mut endpoint = EndpointConfig::new("http://x", "m");
        endpoint.timeout = Duration::ZERO;
        assert!(endpoint.validate().is_err());
    }

    #[test]
    fn mime_sniffing_covers_common_formats() {
        assert_eq!(sniff_mime(&[0x89, b'P', b'N', b'G', 0, 0]), "image/png");
        assert_eq!(sniff_mime(&[0xFF, 0xD8, 0xFF]), "image/jpeg");
        assert_eq!(sniff_mime(b"GIF89a"), "image/gif");
        assert_eq!(sniff_mime(b"RIFF\x00\x00\x00\x00WEBPVP8 "), "image/webp");
        assert_eq!(sniff_mime(b"plain"), "application/octet-stream");
    }
}
