//! Uniform client for external generation endpoints.
//!
//! One `Gateway` serves every profile (sampled model, judge, boundary model,
//! answering model). Requests flow through a content-addressed response
//! cache, a per-profile rate gate, and retry-with-backoff before reaching a
//! backend — either the chat HTTP client or the deterministic mock.

mod cache;
mod http;
mod limiter;
pub mod mock;

pub use cache::GenCache;
pub use mock::MockBackend;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::template::RenderedMessage;

/// One external generation endpoint with its decoding defaults and limits.
///
/// `auth_env` names an environment variable; the variable's value is read at
/// call time and never serialized anywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointProfile {
    /// `mock:` selects the deterministic in-process backend; anything else is
    /// treated as the base URL of a chat-completions server.
    pub base_url: String,
    pub model_name: String,
    pub auth_env: Option<String>,
    pub dialect: String,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    pub requests_per_second: f64,
    pub max_in_flight: usize,
    pub request_timeout_ms: u64,
    /// Mock knobs: score interval, additive score offset, extra latency.
    pub mock_score_lo: f64,
    pub mock_score_hi: f64,
    pub mock_score_offset: f64,
    pub mock_latency_ms: f64,
}

impl Default for EndpointProfile {
    fn default() -> Self {
        Self {
            base_url: "mock:".into(),
            model_name: "mock-model".into(),
            auth_env: None,
            dialect: "plain".into(),
            temperature: 0.7,
            top_p: 0.9,
            top_k: None,
            max_tokens: 512,
            seed: None,
            requests_per_second: 50.0,
            max_in_flight: 16,
            request_timeout_ms: 60_000,
            mock_score_lo: 1.0,
            mock_score_hi: 5.0,
            mock_score_offset: 0.0,
            mock_latency_ms: 0.0,
        }
    }
}

impl EndpointProfile {
    pub fn mock(model: &str) -> Self {
        Self {
            model_name: format!("mock-{model}"),
            ..Self::default()
        }
    }

    pub fn is_mock(&self) -> bool {
        self.base_url.starts_with("mock:")
    }

    pub fn validate(&self) -> Result<()> {
        if self.requests_per_second <= 0.0 {
            return Err(Error::Config("requests_per_second must be > 0".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::Config("max_in_flight must be >= 1".into()));
        }
        if self.mock_score_lo >= self.mock_score_hi {
            return Err(Error::Config("mock score interval is empty".into()));
        }
        Ok(())
    }

    pub fn decoding(&self) -> DecodingParams {
        DecodingParams {
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            max_tokens: self.max_tokens,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: Option<u32>,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

/// Partial decoding override, merged over the profile defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DecodingOverrides {
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub top_k: Option<u32>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

impl DecodingOverrides {
    /// Deterministic decoding used for boundary inference and answer-time
    /// evaluation.
    pub fn greedy() -> Self {
        Self {
            temperature: Some(0.0),
            top_p: Some(1.0),
            top_k: Some(1),
            ..Self::default()
        }
    }

    pub fn apply(&self, base: DecodingParams) -> DecodingParams {
        DecodingParams {
            temperature: self.temperature.unwrap_or(base.temperature),
            top_p: self.top_p.unwrap_or(base.top_p),
            top_k: self.top_k.or(base.top_k),
            max_tokens: self.max_tokens.unwrap_or(base.max_tokens),
            seed: self.seed.or(base.seed),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay_ms: 50,
            max_delay_ms: 2_000,
        }
    }
}

impl RetryPolicy {
    fn delay(&self, attempt: u32) -> std::time::Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(16))
            .min(self.max_delay_ms);
        std::time::Duration::from_millis(ms)
    }
}

/// A fully resolved generation request; `cache_key` is total over its fields.
#[derive(Debug, Clone, Serialize)]
pub struct GenerationRequest<'a> {
    pub profile_name: &'a str,
    pub model_name: &'a str,
    pub message: &'a RenderedMessage,
    pub decoding: DecodingParams,
    /// Index of the repeated draw this request belongs to. Mixed into the
    /// cache key so each of the R samples of one query caches independently.
    pub sample_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_meta: Option<serde_json::Value>,
}

/// Content-addressed key over model, canonical message bytes (image refs by
/// content digest), decoding parameters, and sample index. Stable across
/// runs and platforms.
pub fn cache_key(request: &GenerationRequest<'_>) -> Result<String> {
    #[derive(Serialize)]
    struct Canon<'a> {
        model: &'a str,
        message_sha256: String,
        decoding: DecodingParams,
        index: u32,
    }
    let canon = Canon {
        model: request.model_name,
        message_sha256: hex::encode(Sha256::digest(request.message.canonical_bytes()?)),
        decoding: request.decoding,
        index: request.sample_index,
    };
    let bytes = serde_json::to_vec(&canon)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) trait Backend: Send + Sync {
    fn generate(
        &self,
        request: &GenerationRequest<'_>,
        digest: &str,
    ) -> Result<GenerationResponse>;
}

#[derive(Debug, Serialize)]
struct CallLogEntry<'a> {
    ts_unix_ms: u128,
    profile: &'a str,
    digest: &'a str,
    cached: bool,
    ok: bool,
    latency_ms: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// Thread-safe client over all configured profiles.
pub struct Gateway {
    profiles: std::collections::BTreeMap<String, EndpointProfile>,
    force_mock: bool,
    retry: RetryPolicy,
    cache: Option<GenCache>,
    gates: Mutex<HashMap<String, Arc<limiter::RateGate>>>,
    backends: Mutex<HashMap<String, Arc<dyn Backend>>>,
    mocks: Mutex<HashMap<String, Arc<MockBackend>>>,
    call_log: Option<Mutex<BufWriter<File>>>,
}

impl Gateway {
    pub fn new(
        profiles: std::collections::BTreeMap<String, EndpointProfile>,
        retry: RetryPolicy,
        cache_dir: Option<&Path>,
        call_log_path: Option<&Path>,
        force_mock: bool,
    ) -> Result<Self> {
        let cache = cache_dir.map(GenCache::new).transpose()?;
        let call_log = match call_log_path {
            Some(path) => {
                let file = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(Error::io(path))?;
                Some(Mutex::new(BufWriter::new(file)))
            }
            None => None,
        };
        Ok(Self {
            profiles,
            force_mock,
            retry,
            cache,
            gates: Mutex::new(HashMap::new()),
            backends: Mutex::new(HashMap::new()),
            mocks: Mutex::new(HashMap::new()),
            call_log,
        })
    }

    pub fn profile(&self, name: &str) -> Result<&EndpointProfile> {
        self.profiles
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown profile {name:?}")))
    }

    fn backend(&self, name: &str, profile: &EndpointProfile) -> Arc<dyn Backend> {
        let mut backends = self.backends.lock().expect("backend map lock");
        if let Some(b) = backends.get(name) {
            return Arc::clone(b);
        }
        let backend: Arc<dyn Backend> = if self.force_mock || profile.is_mock() {
            let mock = Arc::new(MockBackend::new(profile));
            self.mocks
                .lock()
                .expect("mock map lock")
                .insert(name.to_string(), Arc::clone(&mock));
            mock
        } else {
            Arc::new(http::HttpBackend::new(profile))
        };
        backends.insert(name.to_string(), Arc::clone(&backend));
        backend
    }

    /// Instrumentation handle for a mock profile, if that profile has been
    /// used. Tests assert call counts and the observed in-flight ceiling.
    pub fn mock_backend(&self, name: &str) -> Option<Arc<MockBackend>> {
        self.mocks.lock().expect("mock map lock").get(name).cloned()
    }

    fn gate(&self, name: &str, profile: &EndpointProfile) -> Arc<limiter::RateGate> {
        let mut gates = self.gates.lock().expect("gate map lock");
        Arc::clone(gates.entry(name.to_string()).or_insert_with(|| {
            Arc::new(limiter::RateGate::new(
                profile.requests_per_second,
                profile.max_in_flight,
            ))
        }))
    }

    fn log_call(&self, entry: &CallLogEntry<'_>) {
        if let Some(log) = &self.call_log {
            let mut w = log.lock().expect("call log lock");
            if let Ok(line) = serde_json::to_string(entry) {
                let _ = writeln!(w, "{line}");
                let _ = w.flush();
            }
        }
    }

    /// Generate with caching, rate limiting, and retry. The cache serves
    /// identical requests without touching the backend at all.
    pub fn generate(
        &self,
        profile_name: &str,
        message: &RenderedMessage,
        overrides: DecodingOverrides,
        sample_index: u32,
    ) -> Result<GenerationResponse> {
        if message.is_empty() {
            return Err(Error::Validation("refusing to send an empty message".into()));
        }
        let profile = self.profile(profile_name)?;
        let request = GenerationRequest {
            profile_name,
            model_name: &profile.model_name,
            message,
            decoding: overrides.apply(profile.decoding()),
            sample_index,
        };
        let digest = cache_key(&request)?;

        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.load(&digest)? {
                self.log_call(&CallLogEntry {
                    ts_unix_ms: now_ms(),
                    profile: profile_name,
                    digest: &digest,
                    cached: true,
                    ok: true,
                    latency_ms: hit.latency_ms,
                    error: None,
                });
                return Ok(hit);
            }
        }

        let backend = self.backend(profile_name, profile);
        let gate = self.gate(profile_name, profile);
        let mut attempt = 0u32;
        let response = loop {
            let _slot = gate.acquire();
            match backend.generate(&request, &digest) {
                Ok(resp) => break resp,
                Err(e) if e.is_transient() && attempt < self.retry.max_retries => {
                    log::warn!(
                        "profile {profile_name}: transient failure (attempt {attempt}): {e}"
                    );
                    drop(_slot);
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => {
                    self.log_call(&CallLogEntry {
                        ts_unix_ms: now_ms(),
                        profile: profile_name,
                        digest: &digest,
                        cached: false,
                        ok: false,
                        latency_ms: 0.0,
                        error: Some(e.to_string()),
                    });
                    return Err(e);
                }
            }
        };

        if let Some(cache) = &self.cache {
            cache.store(&digest, &response)?;
        }
        self.log_call(&CallLogEntry {
            ts_unix_ms: now_ms(),
            profile: profile_name,
            digest: &digest,
            cached: false,
            ok: true,
            latency_ms: response.latency_ms,
            error: None,
        });
        Ok(response)
    }
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::template::RenderedMessage;
    use std::collections::BTreeMap;

    fn gateway(cache_dir: Option<&Path>) -> Gateway {
        let mut profiles = BTreeMap::new();
        profiles.insert("m".to_string(), EndpointProfile::mock("m"));
        Gateway::new(profiles, RetryPolicy::default(), cache_dir, None, false).unwrap()
    }

    fn msg(text: &str) -> RenderedMessage {
        RenderedMessage::from_text(text)
    }

    #[test]
    fn cache_key_distinguishes_index_and_params() {
        let profile = EndpointProfile::mock("m");
        let message = msg("hello");
        let base = GenerationRequest {
            profile_name: "m",
            model_name: &profile.model_name,
            message: &message,
            decoding: profile.decoding(),
            sample_index: 0,
        };
        let k0 = cache_key(&base).unwrap();
        let k0b = cache_key(&base).unwrap();
        assert_eq!(k0, k0b);

        let mut by_index = base.clone();
        by_index.sample_index = 1;
        assert_ne!(k0, cache_key(&by_index).unwrap());

        let mut by_temp = base.clone();
        by_temp.decoding.temperature = 0.11;
        assert_ne!(k0, cache_key(&by_temp).unwrap());
    }

    #[test]
    fn mock_generation_is_deterministic() {
        let gw = gateway(None);
        let a = gw
            .generate("m", &msg("Question: hi"), DecodingOverrides::default(), 3)
            .unwrap();
        let b = gw
            .generate("m", &msg("Question: hi"), DecodingOverrides::default(), 3)
            .unwrap();
        assert_eq!(a, b);
        let c = gw
            .generate("m", &msg("Question: hi"), DecodingOverrides::default(), 4)
            .unwrap();
        assert_ne!(a.text, c.text);
    }

    #[test]
    fn second_call_served_from_cache_without_backend() {
        let dir = tempfile::tempdir().unwrap();
        let gw = gateway(Some(dir.path()));
        let m = msg("Question: cached?");
        let first = gw.generate("m", &m, DecodingOverrides::default(), 0).unwrap();
        let calls_after_first = gw.mock_backend("m").unwrap().calls();
        let second = gw.generate("m", &m, DecodingOverrides::default(), 0).unwrap();
        assert_eq!(first, second);
        assert_eq!(gw.mock_backend("m").unwrap().calls(), calls_after_first);
    }

    #[test]
    fn empty_message_rejected() {
        let gw = gateway(None);
        let err = gw
            .generate("m", &msg(""), DecodingOverrides::default(), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn greedy_overrides_apply() {
        let profile = EndpointProfile::mock("m");
        let merged = DecodingOverrides::greedy().apply(profile.decoding());
        assert_eq!(merged.temperature, 0.0);
        assert_eq!(merged.top_p, 1.0);
        assert_eq!(merged.top_k, Some(1));
        assert_eq!(merged.max_tokens, profile.max_tokens);
    }
}
