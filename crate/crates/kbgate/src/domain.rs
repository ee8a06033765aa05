//! Core domain types and the score math everything else builds on.
//!
//! A judge grades answers on a closed interval (wrong end / correct end).
//! Flipping a quality score turns it into a search-need score; thresholding
//! the mean turns it into a hard in/out-of-boundary label.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::jsonl;

/// Closed score interval used by judges and boundary models.
///
/// `wrong` is the score for a completely wrong answer, `correct` for a
/// perfect one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreScale {
    pub wrong: f64,
    pub correct: f64,
}

impl Default for ScoreScale {
    fn default() -> Self {
        Self {
            wrong: 1.0,
            correct: 5.0,
        }
    }
}

impl ScoreScale {
    pub fn validate(&self) -> Result<()> {
        if !(self.wrong < self.correct) {
            return Err(Error::Config(format!(
                "score scale requires wrong < correct, got [{}, {}]",
                self.wrong, self.correct
            )));
        }
        Ok(())
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.wrong && s <= self.correct
    }

    pub fn check(&self, s: f64) -> Result<f64> {
        if self.contains(s) {
            Ok(s)
        } else {
            Err(Error::ScoreOutOfRange {
                value: s,
                lo: self.wrong,
                hi: self.correct,
            })
        }
    }

    pub fn clamp(&self, s: f64) -> f64 {
        s.clamp(self.wrong, self.correct)
    }

    pub fn span(&self) -> f64 {
        self.correct - self.wrong
    }
}

/// Linearly flip an answer-quality score into a search-need score:
/// `wrong + correct - s`. The correct end maps to the wrong end and vice
/// versa; the midpoint is a fixed point.
pub fn flip_score(s: f64, scale: ScoreScale) -> Result<f64> {
    scale.check(s)?;
    Ok(scale.wrong + scale.correct - s)
}

/// Hard in/out-of-boundary label: `true` means the query falls outside the
/// boundary and needs a search. A mean score at or above `epsilon` counts as
/// inside (ties are inside, so no search).
pub fn hard_label(s: f64, epsilon: f64, scale: ScoreScale) -> Result<bool> {
    scale.check(s)?;
    scale.check(epsilon)?;
    Ok(s < epsilon)
}

/// Reference to an image: a URI (remote or local path) or inline bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ImageRef {
    Uri {
        uri: String,
    },
    Inline {
        media_type: String,
        data_base64: String,
    },
}

impl ImageRef {
    pub fn uri(s: impl Into<String>) -> Self {
        ImageRef::Uri { uri: s.into() }
    }

    fn is_remote(uri: &str) -> bool {
        uri.starts_with("http://") || uri.starts_with("https://") || uri.starts_with("data:")
    }

    /// Stable content digest. Inline data and local files hash their bytes;
    /// remote URIs hash the URI string itself (fetching at hash time would
    /// make cache keys depend on the network).
    pub fn content_digest(&self) -> Result<String> {
        let mut h = Sha256::new();
        match self {
            ImageRef::Inline {
                media_type,
                data_base64,
            } => {
                h.update(b"inline:");
                h.update(media_type.as_bytes());
                h.update(b":");
                h.update(data_base64.as_bytes());
            }
            ImageRef::Uri { uri } if Self::is_remote(uri) => {
                h.update(b"uri:");
                h.update(uri.as_bytes());
            }
            ImageRef::Uri { uri } => {
                let path = Path::new(uri.strip_prefix("file://").unwrap_or(uri));
                let bytes = std::fs::read(path).map_err(|e| {
                    Error::Ingestion(format!("image ref {uri:?} unreadable: {e}"))
                })?;
                h.update(b"file:");
                h.update(&bytes);
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Short textual form used when a prompt dialect inlines image refs as
    /// text.
    pub fn display_text(&self) -> String {
        match self {
            ImageRef::Uri { uri } => uri.clone(),
            ImageRef::Inline { media_type, .. } => {
                let digest = self.content_digest().unwrap_or_default();
                format!("inline:{media_type};sha256:{}", &digest[..16.min(digest.len())])
            }
        }
    }
}

/// One VQA item: a text query, its images, the gold answer, and optional
/// per-dataset extras (an annotated retrieval query, a human search-needed
/// label).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub source: String,
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub images: Vec<ImageRef>,
    pub gold_answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_query: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub human_label: Option<bool>,
}

impl QueryRecord {
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("query id must be non-empty".into()));
        }
        if self.text.trim().is_empty() && self.images.is_empty() {
            return Err(Error::Validation(format!(
                "query {:?} has neither text nor images",
                self.id
            )));
        }
        Ok(())
    }
}

/// Read a line-delimited JSON query file and validate it as a dataset:
/// every record valid, ids unique.
pub fn load_queries(path: &Path) -> Result<Vec<QueryRecord>> {
    let queries: Vec<QueryRecord> = jsonl::read_file(path)?;
    let mut seen = BTreeSet::new();
    for q in &queries {
        q.validate()?;
        if !seen.insert(q.id.clone()) {
            return Err(Error::Integrity(format!(
                "duplicate query id {:?} in {}",
                q.id,
                path.display()
            )));
        }
    }
    Ok(queries)
}

/// Boundary label for one query: the hard search-needed bit plus the flipped
/// (search-need) score. Human-annotated labels carry only the hard bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryLabel {
    pub query_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_score: Option<f64>,
    pub hard: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_used: Option<f64>,
}

/// Run mode / gate variant: the five ways an answer can be produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    None,
    All,
    Prompt,
    Hkb,
    Skb,
}

impl Mode {
    pub const ALL_MODES: [Mode; 5] = [Mode::None, Mode::All, Mode::Prompt, Mode::Hkb, Mode::Skb];

    /// Column label used in report tables.
    pub fn label(&self) -> &'static str {
        match self {
            Mode::None => "No RAG",
            Mode::All => "All RAG",
            Mode::Prompt => "Prompt-based",
            Mode::Hkb => "HKB",
            Mode::Skb => "SKB",
        }
    }

    pub fn parse(s: &str) -> Result<Mode> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(Mode::None),
            "all" => Ok(Mode::All),
            "prompt" => Ok(Mode::Prompt),
            "hkb" => Ok(Mode::Hkb),
            "skb" => Ok(Mode::Skb),
            other => Err(Error::Validation(format!("unknown mode {other:?}"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Mode::None => "none",
            Mode::All => "all",
            Mode::Prompt => "prompt",
            Mode::Hkb => "hkb",
            Mode::Skb => "skb",
        };
        write!(f, "{s}")
    }
}
