//! Deterministic in-process backend.
//!
//! Replies are a pure function of the request content: the canonical message
//! bytes plus the sample index seed a hash, and the reply kind follows from
//! which shipped template the message was rendered with. Two processes given
//! the same request produce identical bytes, which is what makes whole-run
//! determinism and kill-and-resume equivalence testable.

use std::sync::atomic::{AtomicUsize, Ordering};

use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::gateway::{
    Backend, EndpointProfile, FinishReason, GenerationRequest, GenerationResponse,
};

/// Marker a test query can embed to make every judge/boundary reply
/// unparsable.
pub const UNSCORABLE_MARKER: &str = "[[mock:unscorable]]";

enum PromptKind {
    Judge,
    SoftBoundary,
    HardBoundary,
    PromptBaseline,
    Answer,
}

fn classify(text: &str) -> PromptKind {
    let lower = text.to_lowercase();
    if lower.contains("rate the prediction") {
        PromptKind::Judge
    } else if lower.contains("score ranging from") {
        PromptKind::SoftBoundary
    } else if lower.contains(r#""true" or "false,""#) {
        PromptKind::HardBoundary
    } else if lower.contains("external web search") {
        PromptKind::PromptBaseline
    } else {
        PromptKind::Answer
    }
}

/// The question content embedded in a rendered prompt. Falls back to the
/// whole text so free-form messages still hash stably.
fn extract_question(text: &str) -> &str {
    for prefix in ["Text question: ", "Question: "] {
        if let Some(pos) = text.find(prefix) {
            let rest = &text[pos + prefix.len()..];
            return rest.lines().next().unwrap_or(rest);
        }
    }
    text
}

fn u64_from(bytes: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b.copy_from_slice(&bytes[..8]);
    u64::from_be_bytes(b)
}

/// Map hash bytes onto a two-decimal grid in [lo, hi].
fn grid_score(seed: u64, lo: f64, hi: f64) -> f64 {
    let steps = ((hi - lo) * 100.0).round() as u64 + 1;
    lo + (seed % steps) as f64 / 100.0
}

pub struct MockBackend {
    score_lo: f64,
    score_hi: f64,
    score_offset: f64,
    extra_latency_ms: f64,
    /// Threshold on the underlying query score above which the hard verdict
    /// says the query is inside the boundary.
    boundary_epsilon: f64,
    calls: AtomicUsize,
    in_flight: AtomicUsize,
    max_in_flight_seen: AtomicUsize,
}

impl MockBackend {
    pub fn new(profile: &EndpointProfile) -> Self {
        Self {
            score_lo: profile.mock_score_lo,
            score_hi: profile.mock_score_hi,
            score_offset: profile.mock_score_offset,
            extra_latency_ms: profile.mock_latency_ms,
            boundary_epsilon: 4.0,
            calls: AtomicUsize::new(0),
            in_flight: AtomicUsize::new(0),
            max_in_flight_seen: AtomicUsize::new(0),
        }
    }

    /// Number of actual backend generations (cache hits never reach here).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Highest concurrent in-flight count this backend has observed.
    pub fn max_in_flight_seen(&self) -> usize {
        self.max_in_flight_seen.load(Ordering::SeqCst)
    }

    /// The latent per-query score every boundary-style reply is derived
    /// from. Exposed so tests can compute expected gate behavior in closed
    /// form.
    pub fn underlying_score(question: &str) -> f64 {
        let digest = Sha256::digest(format!("q:{question}").as_bytes());
        grid_score(u64_from(&digest), 1.0, 5.0)
    }

    fn reply_text(&self, kind: PromptKind, text: &str, seed: u64) -> String {
        if text.contains(UNSCORABLE_MARKER) {
            match kind {
                PromptKind::Answer => {}
                _ => return "I cannot rate this".to_string(),
            }
        }
        match kind {
            PromptKind::Judge => {
                let base = grid_score(seed, self.score_lo, self.score_hi);
                format!("{:.2}", base + self.score_offset)
            }
            PromptKind::SoftBoundary => {
                let s = Self::underlying_score(extract_question(text));
                format!("{:.2}", self.score_lo + self.score_hi - s)
            }
            PromptKind::HardBoundary => {
                if Self::underlying_score(extract_question(text)) < self.boundary_epsilon {
                    "True".to_string()
                } else {
                    "False".to_string()
                }
            }
            PromptKind::PromptBaseline => {
                if Self::underlying_score(extract_question(text)) < self.boundary_epsilon {
                    "true".to_string()
                } else {
                    "false".to_string()
                }
            }
            PromptKind::Answer => {
                let hexseed = format!("{seed:016x}");
                if seed & 1 == 1 {
                    format!("mock answer {} {}", &hexseed[..8], extract_question(text))
                } else {
                    format!("mock answer {}", &hexseed[..8])
                }
            }
        }
    }
}

impl Backend for MockBackend {
    fn generate(
        &self,
        request: &GenerationRequest<'_>,
        _digest: &str,
    ) -> Result<GenerationResponse> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.max_in_flight_seen.fetch_max(now, Ordering::SeqCst);
        self.calls.fetch_add(1, Ordering::SeqCst);

        let mut hasher = Sha256::new();
        hasher.update(request.message.canonical_bytes()?);
        hasher.update(request.sample_index.to_be_bytes());
        let digest = hasher.finalize();
        let seed = u64_from(&digest);

        let text = request.message.joined_text();
        let reply = self.reply_text(classify(&text), &text, seed);
        // Synthetic but deterministic latency so timing fields stay
        // byte-identical across runs and parallelism levels.
        let latency_ms = (seed % 400) as f64 / 10.0 + self.extra_latency_ms;

        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        Ok(GenerationResponse {
            text: reply,
            finish_reason: FinishReason::Stop,
            latency_ms,
            provider_meta: None,
        })
    }
}
