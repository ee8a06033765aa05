//! Content-addressed response cache: one JSON record per request digest.
//!
//! Writers are idempotent — rewriting identical content is a no-op, and two
//! concurrent writers of the same content race harmlessly through a
//! temp-and-rename. Different content under one key means the key derivation
//! is broken somewhere, so that is a hard error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::GenerationResponse;

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    digest: String,
    response: GenerationResponse,
}

pub struct GenCache {
    dir: PathBuf,
}

impl GenCache {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn load(&self, digest: &str) -> Result<Option<GenerationResponse>> {
        let path = self.path(digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path)(e)),
        };
        match serde_json::from_str::<CacheRecord>(&text) {
            Ok(rec) => Ok(Some(rec.response)),
            Err(e) => {
                // A torn write (crash mid-rename is impossible, but a partial
                // tmp copy or manual edit is not): drop it and regenerate.
                log::warn!("discarding corrupt cache entry {digest}: {e}");
                let _ = std::fs::remove_file(&path);
                Ok(None)
            }
        }
    }

    pub fn store(&self, digest: &str, response: &GenerationResponse) -> Result<()> {
        let path = self.path(digest);
        if let Some(existing) = self.load(digest)? {
            if existing.text != response.text || existing.finish_reason != response.finish_reason {
                return Err(Error::CacheConflict {
                    key: digest.to_string(),
                    detail: "existing entry holds different content".into(),
                });
            }
            // Identical content: keep the first write (stable latencies).
            return Ok(());
        }
        let record = CacheRecord {
            digest: digest.to_string(),
            response: response.clone(),
        };
        let tmp = self.dir.join(format!(
            "{digest}.{}.tmp",
            std::process::id()
        ));
        std::fs::write(&tmp, serde_json::to_vec(&record)?).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, &path).map_err(Error::io(&path))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::FinishReason;

    fn resp(text: &str) -> GenerationResponse {
        GenerationResponse {
            text: text.into(),
            finish_reason: FinishReason::Stop,
            latency_ms: 1.5,
            provider_meta: None,
        }
    }

    #[test]
    fn store_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GenCache::new(dir.path()).unwrap();
        assert!(cache.load("abc").unwrap().is_none());
        cache.store("abc", &resp("hello")).unwrap();
        assert_eq!(cache.load("abc").unwrap().unwrap().text, "hello");
    }

    #[test]
    fn identical_rewrite_is_noop_conflicting_rewrite_errors() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GenCache::new(dir.path()).unwrap();
        cache.store("k", &resp("same")).unwrap();
        cache.store("k", &resp("same")).unwrap();
        let err = cache.store("k", &resp("different")).unwrap_err();
        assert!(matches!(err, Error::CacheConflict { .. }));
    }

    #[test]
    fn corrupt_entry_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let cache = GenCache::new(dir.path()).unwrap();
        std::fs::write(dir.path().join("bad.json"), b"{not json").unwrap();
        assert!(cache.load("bad").unwrap().is_none());
        assert!(!dir.path().join("bad.json").exists());
    }
}
