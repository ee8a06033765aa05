//! Search providers and retrieval-context assembly.
//!
//! A provider answers text or image searches with ranked snippets. The
//! fixture provider reads canned results from a directory so everything
//! downstream runs hermetically; the HTTP provider talks to a configurable
//! JSON endpoint. Results are cached per (provider, issued query) with a
//! timestamp and an optional max age.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{ImageRef, QueryRecord};
use crate::error::{Error, Result};

pub const NO_RESULTS_MARKER: &str = "[no search results]";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub title: String,
    pub text: String,
    pub url: String,
}

/// What was actually sent to the provider.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IssuedQuery {
    Text(String),
    Image(ImageRef),
}

impl IssuedQuery {
    /// Stable identity used for caching and fixture lookup.
    pub fn identity(&self) -> Result<String> {
        Ok(match self {
            IssuedQuery::Text(t) => format!("text:{t}"),
            IssuedQuery::Image(i) => format!("image:{}", i.content_digest()?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedContext {
    pub query_id: String,
    pub provider: String,
    pub issued_query: IssuedQuery,
    pub snippets: Vec<Snippet>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<Vec<ImageRef>>,
    pub duration_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RetrievalPolicy {
    /// Annotated gold query if present, otherwise the query text.
    GoldElseText,
    /// Always the query text (ignores gold annotations).
    Text,
    /// Gold query if present (annotations always win), otherwise the first
    /// image.
    #[default]
    Image,
}

impl RetrievalPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gold-else-text" => Ok(RetrievalPolicy::GoldElseText),
            "text" => Ok(RetrievalPolicy::Text),
            "image" => Ok(RetrievalPolicy::Image),
            other => Err(Error::Validation(format!(
                "unknown retrieval policy {other:?}"
            ))),
        }
    }
}

/// Choose what to send to the search provider for a query.
pub fn pick_retrieval_query(query: &QueryRecord, policy: RetrievalPolicy) -> Result<IssuedQuery> {
    if let Some(gold) = query.gold_query.as_deref().filter(|g| !g.trim().is_empty()) {
        if !matches!(policy, RetrievalPolicy::Text) {
            return Ok(IssuedQuery::Text(gold.to_string()));
        }
    }
    match policy {
        RetrievalPolicy::GoldElseText | RetrievalPolicy::Text => {
            if query.text.trim().is_empty() {
                Err(Error::Validation(format!(
                    "query {:?} has no text for a text search",
                    query.id
                )))
            } else {
                Ok(IssuedQuery::Text(query.text.clone()))
            }
        }
        RetrievalPolicy::Image => match query.images.first() {
            Some(image) => Ok(IssuedQuery::Image(image.clone())),
            None => Err(Error::Validation(format!(
                "query {:?} has no image for an image search",
                query.id
            ))),
        },
    }
}

/// Concatenate snippets in rank order under a fixed connective template,
/// dropping whole snippets from the tail to fit the character budget.
pub fn assemble_context(ctx: &RetrievedContext, budget: usize) -> Result<String> {
    if budget == 0 {
        return Err(Error::Validation("context budget must be > 0".into()));
    }
    if ctx.snippets.is_empty() {
        return Ok(NO_RESULTS_MARKER.to_string());
    }
    let mut out = String::new();
    for (rank, snippet) in ctx.snippets.iter().enumerate() {
        let block = format!(
            "[{}] {}\n{}\n({})\n",
            rank + 1,
            snippet.title,
            snippet.text,
            snippet.url
        );
        if out.len() + block.len() > budget {
            break;
        }
        out.push_str(&block);
    }
    Ok(out)
}

/// A search backend. Implementations must be safe to call from many worker
/// threads at once.
pub trait SearchProvider: Send + Sync {
    fn name(&self) -> &str;
    fn search_text(&self, query: &str, top_k: usize) -> Result<Vec<Snippet>>;
    fn search_image(&self, image: &ImageRef, top_k: usize) -> Result<Vec<Snippet>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ProviderConfig {
    Fixture {
        dir: PathBuf,
        #[serde(default = "default_top_k")]
        top_k: usize,
    },
    Http {
        base_url: String,
        #[serde(default)]
        auth_env: Option<String>,
        #[serde(default = "default_top_k")]
        top_k: usize,
        #[serde(default = "default_timeout_ms")]
        request_timeout_ms: u64,
    },
}

fn default_top_k() -> usize {
    5
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl ProviderConfig {
    pub fn fixture(dir: impl Into<PathBuf>) -> Self {
        ProviderConfig::Fixture {
            dir: dir.into(),
            top_k: default_top_k(),
        }
    }

    pub fn top_k(&self) -> usize {
        match self {
            ProviderConfig::Fixture { top_k, .. } | ProviderConfig::Http { top_k, .. } => *top_k,
        }
    }

    pub fn build(&self, name: &str) -> Box<dyn SearchProvider> {
        match self {
            ProviderConfig::Fixture { dir, .. } => Box::new(FixtureProvider {
                name: name.to_string(),
                dir: dir.clone(),
            }),
            ProviderConfig::Http {
                base_url,
                auth_env,
                request_timeout_ms,
                ..
            } => Box::new(HttpProvider {
                name: name.to_string(),
                base_url: base_url.clone(),
                auth_env: auth_env.clone(),
                client: reqwest::blocking::Client::builder()
                    .timeout(std::time::Duration::from_millis(*request_timeout_ms))
                    .build()
                    .expect("reqwest client"),
            }),
        }
    }
}

/// Reads canned results from `<dir>/<sha256(identity)>.json`, each file a
/// JSON array of snippets. A missing file means zero results, which keeps
/// fixture corpora sparse.
pub struct FixtureProvider {
    name: String,
    dir: PathBuf,
}

impl FixtureProvider {
    pub fn fixture_path(dir: &Path, issued: &IssuedQuery) -> Result<PathBuf> {
        let digest = hex::encode(Sha256::digest(issued.identity()?.as_bytes()));
        Ok(dir.join(format!("{digest}.json")))
    }

    /// Test and authoring helper: drop a canned result set where the
    /// provider will look for it.
    pub fn write_fixture(dir: &Path, issued: &IssuedQuery, snippets: &[Snippet]) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = Self::fixture_path(dir, issued)?;
        std::fs::write(&path, serde_json::to_vec_pretty(snippets)?).map_err(Error::io(&path))?;
        Ok(())
    }

    fn lookup(&self, issued: &IssuedQuery, top_k: usize) -> Result<Vec<Snippet>> {
        let path = Self::fixture_path(&self.dir, issued)?;
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(Error::io(&path)(e)),
        };
        let mut snippets: Vec<Snippet> = serde_json::from_str(&text)
            .map_err(|e| Error::Integrity(format!("{}: {e}", path.display())))?;
        snippets.truncate(top_k);
        Ok(snippets)
    }
}

impl SearchProvider for FixtureProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn search_text(&self, query: &str, top_k: usize) -> Result<Vec<Snippet>> {
        self.lookup(&IssuedQuery::Text(query.to_string()), top_k)
    }

    fn search_image(&self, image: &ImageRef, top_k: usize) -> Result<Vec<Snippet>> {
        self.lookup(&IssuedQuery::Image(image.clone()), top_k)
    }
}

/// Generic JSON search endpoint: POST `{base_url}/search` with
/// `{"query"| "image_uri", "top_k"}`, expecting `{"results": [{title, text,
/// url}]}`.
pub struct HttpProvider {
    name: String,
    base_url: String,
    auth_env: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    fn request(&self, body: serde_json::Value, top_k: usize) -> Result<Vec<Snippet>> {
        let url = format!("{}/search", self.base_url.trim_end_matches('/'));
        let mut req = self.client.post(&url).json(&body);
        if let Some(var) = &self.auth_env {
            match std::env::var(var) {
                Ok(v) if !v.is_empty() => req = req.bearer_auth(v),
                _ => return Err(Error::Auth(format!("environment variable {var} is not set"))),
            }
        }
        let resp = req
            .send()
            .map_err(|e| Error::Transport(format!("{url}: {e}")))?;
        let status = resp.status();
        if status.as_u16() == 429 {
            return Err(Error::RateLimited(format!("{url} returned 429")));
        }
        if !status.is_success() {
            return Err(Error::Transport(format!("{url} returned {status}")));
        }
        #[derive(Deserialize)]
        struct Reply {
            results: Vec<Snippet>,
        }
        let mut reply: Reply = resp
            .json()
            .map_err(|e| Error::MalformedReply(format!("bad search JSON: {e}")))?;
        reply.results.truncate(top_k);
        Ok(reply.results)
    }
}

impl SearchProvider for HttpProvider {
    fn name(&self) -> &str {
        &self.name
    }

    fn search_text(&self, query: &str, top_k: usize) -> Result<Vec<Snippet>> {
        self.request(serde_json::json!({"query": query, "top_k": top_k}), top_k)
    }

    fn search_image(&self, image: &ImageRef, top_k: usize) -> Result<Vec<Snippet>> {
        let body = match image {
            ImageRef::Uri { uri } => serde_json::json!({"image_uri": uri, "top_k": top_k}),
            ImageRef::Inline { .. } => serde_json::json!({
                "image_digest": image.content_digest()?,
                "top_k": top_k,
            }),
        };
        self.request(body, top_k)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct SearchCacheRecord {
    created_unix: u64,
    context: RetrievedContext,
}

/// Search client: provider + cache + retry. The cache key covers provider
/// name, issued query identity, and top_k.
pub struct Searcher {
    provider: Box<dyn SearchProvider>,
    top_k: usize,
    cache_dir: Option<PathBuf>,
    max_age_secs: u64,
    max_retries: u32,
}

impl Searcher {
    pub fn new(
        provider: Box<dyn SearchProvider>,
        top_k: usize,
        cache_dir: Option<PathBuf>,
        max_age_secs: u64,
        max_retries: u32,
    ) -> Result<Self> {
        if let Some(dir) = &cache_dir {
            std::fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        Ok(Self {
            provider,
            top_k,
            cache_dir,
            max_age_secs,
            max_retries,
        })
    }

    fn cache_path(&self, issued: &IssuedQuery) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.cache_dir else {
            return Ok(None);
        };
        let key = format!(
            "{}:{}:{}",
            self.provider.name(),
            issued.identity()?,
            self.top_k
        );
        let digest = hex::encode(Sha256::digest(key.as_bytes()));
        Ok(Some(dir.join(format!("{digest}.json"))))
    }

    fn load_cached(&self, issued: &IssuedQuery) -> Result<Option<RetrievedContext>> {
        let Some(path) = self.cache_path(issued)? else {
            return Ok(None);
        };
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(Error::io(&path)(e)),
        };
        let record: SearchCacheRecord = match serde_json::from_str(&text) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("discarding corrupt search cache entry: {e}");
                let _ = std::fs::remove_file(&path);
                return Ok(None);
            }
        };
        if self.max_age_secs > 0 {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            if now.saturating_sub(record.created_unix) > self.max_age_secs {
                return Ok(None);
            }
        }
        Ok(Some(record.context))
    }

    fn store_cached(&self, issued: &IssuedQuery, context: &RetrievedContext) -> Result<()> {
        let Some(path) = self.cache_path(issued)? else {
            return Ok(());
        };
        let record = SearchCacheRecord {
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            context: context.clone(),
        };
        crate::jsonl::write_bytes(&path, &serde_json::to_vec(&record)?)
    }

    /// Issue (or replay) a search for a query under the given policy.
    pub fn search(&self, query: &QueryRecord, policy: RetrievalPolicy) -> Result<RetrievedContext> {
        let issued = pick_retrieval_query(query, policy)?;
        if let Some(mut cached) = self.load_cached(&issued)? {
            cached.query_id = query.id.clone();
            return Ok(cached);
        }

        let mut attempt = 0u32;
        let snippets = loop {
            let result = match &issued {
                IssuedQuery::Text(t) => {
                    if t.trim().is_empty() {
                        return Err(Error::Validation("empty search query".into()));
                    }
                    self.provider.search_text(t, self.top_k)
                }
                IssuedQuery::Image(i) => self.provider.search_image(i, self.top_k),
            };
            match result {
                Ok(s) => break s,
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    std::thread::sleep(std::time::Duration::from_millis(
                        20u64.saturating_mul(1 << attempt.min(8)),
                    ));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };

        // Deterministic synthetic duration keyed on the issued query, so
        // cached and fresh fixture runs report identical timings.
        let duration_ms = {
            let digest = Sha256::digest(issued.identity()?.as_bytes());
            let mut b = [0u8; 8];
            b.copy_from_slice(&digest[..8]);
            (u64::from_be_bytes(b) % 300) as f64 / 10.0
        };
        let context = RetrievedContext {
            query_id: query.id.clone(),
            provider: self.provider.name().to_string(),
            issued_query: issued.clone(),
            snippets,
            images: None,
            duration_ms,
        };
        self.store_cached(&issued, &context)?;
        Ok(context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn query(id: &str) -> QueryRecord {
        QueryRecord {
            id: id.into(),
            source: "dynvqa-en".into(),
            text: "Who is the UK prime minister?".into(),
            images: vec![ImageRef::uri("https://example.com/uk.jpeg")],
            gold_answer: "someone".into(),
            gold_query: Some("UK prime minister".into()),
            human_label: None,
        }
    }

    fn snippets(n: usize) -> Vec<Snippet> {
        (0..n)
            .map(|i| Snippet {
                title: format!("result {i}"),
                text: format!("body {i}"),
                url: format!("https://example.com/{i}"),
            })
            .collect()
    }

    #[test]
    fn gold_query_wins_under_default_policy() {
        let issued = pick_retrieval_query(&query("q"), RetrievalPolicy::Image).unwrap();
        assert_eq!(issued, IssuedQuery::Text("UK prime minister".into()));
    }

    #[test]
    fn image_policy_without_gold_uses_first_image() {
        let mut q = query("q");
        q.gold_query = None;
        let issued = pick_retrieval_query(&q, RetrievalPolicy::Image).unwrap();
        assert!(matches!(issued, IssuedQuery::Image(_)));
    }

    #[test]
    fn image_policy_without_image_is_a_validation_error() {
        let mut q = query("q");
        q.gold_query = None;
        q.images.clear();
        assert!(matches!(
            pick_retrieval_query(&q, RetrievalPolicy::Image),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn text_policy_ignores_gold() {
        let issued = pick_retrieval_query(&query("q"), RetrievalPolicy::Text).unwrap();
        assert_eq!(
            issued,
            IssuedQuery::Text("Who is the UK prime minister?".into())
        );
    }

    fn ctx(snips: Vec<Snippet>) -> RetrievedContext {
        RetrievedContext {
            query_id: "q".into(),
            provider: "fixture".into(),
            issued_query: IssuedQuery::Text("x".into()),
            snippets: snips,
            images: None,
            duration_ms: 0.0,
        }
    }

    #[test]
    fn assemble_respects_budget_at_snippet_granularity() {
        let full = assemble_context(&ctx(snippets(3)), 10_000).unwrap();
        assert!(full.contains("result 0") && full.contains("result 2"));

        let first_block_len = assemble_context(&ctx(snippets(1)), 10_000).unwrap().len();
        let truncated = assemble_context(&ctx(snippets(3)), first_block_len + 3).unwrap();
        assert!(truncated.contains("result 0"));
        assert!(!truncated.contains("result 1"));
        assert!(truncated.len() <= first_block_len + 3);
    }

    #[test]
    fn empty_results_get_a_marker() {
        assert_eq!(assemble_context(&ctx(vec![]), 100).unwrap(), NO_RESULTS_MARKER);
    }

    #[test]
    fn fixture_provider_round_trip_and_cache() {
        let dir = tempfile::tempdir().unwrap();
        let fixture_dir = dir.path().join("fixtures");
        let cache_dir = dir.path().join("cache");
        let issued = IssuedQuery::Text("UK prime minister".into());
        FixtureProvider::write_fixture(&fixture_dir, &issued, &snippets(2)).unwrap();

        let provider = ProviderConfig::fixture(&fixture_dir).build("fixture");
        let searcher =
            Searcher::new(provider, 5, Some(cache_dir.clone()), 0, 2).unwrap();
        let first = searcher.search(&query("q1"), RetrievalPolicy::Image).unwrap();
        assert_eq!(first.snippets.len(), 2);
        assert_eq!(first.provider, "fixture");

        // Second call comes from the cache: remove the fixture, same result.
        std::fs::remove_file(FixtureProvider::fixture_path(&fixture_dir, &issued).unwrap())
            .unwrap();
        let second = searcher.search(&query("q2"), RetrievalPolicy::Image).unwrap();
        assert_eq!(second.snippets, first.snippets);
        assert_eq!(second.duration_ms, first.duration_ms);
    }

    #[test]
    fn missing_fixture_is_empty_not_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let provider = ProviderConfig::fixture(dir.path()).build("fixture");
        let searcher = Searcher::new(provider, 5, None, 0, 0).unwrap();
        let mut q = query("q");
        q.gold_query = Some("nothing canned".into());
        let out = searcher.search(&q, RetrievalPolicy::Image).unwrap();
        assert!(out.snippets.is_empty());
    }

    /// Provider that fails with 429-style errors a fixed number of times.
    struct Flaky {
        failures: std::sync::atomic::AtomicU32,
    }

    impl SearchProvider for Flaky {
        fn name(&self) -> &str {
            "flaky"
        }
        fn search_text(&self, _q: &str, _k: usize) -> Result<Vec<Snippet>> {
            if self
                .failures
                .fetch_update(
                    std::sync::atomic::Ordering::SeqCst,
                    std::sync::atomic::Ordering::SeqCst,
                    |v| v.checked_sub(1),
                )
                .is_ok()
            {
                Err(Error::RateLimited("429".into()))
            } else {
                Ok(vec![])
            }
        }
        fn search_image(&self, _i: &ImageRef, _k: usize) -> Result<Vec<Snippet>> {
            self.search_text("", 0)
        }
    }

    #[test]
    fn transient_search_failures_retry_then_surface() {
        let searcher = Searcher::new(
            Box::new(Flaky {
                failures: std::sync::atomic::AtomicU32::new(2),
            }),
            5,
            None,
            0,
            3,
        )
        .unwrap();
        assert!(searcher.search(&query("ok"), RetrievalPolicy::Image).is_ok());

        let exhausted = Searcher::new(
            Box::new(Flaky {
                failures: std::sync::atomic::AtomicU32::new(10),
            }),
            5,
            None,
            0,
            2,
        )
        .unwrap();
        let err = exhausted
            .search(&query("fail"), RetrievalPolicy::Image)
            .unwrap_err();
        assert!(matches!(err, Error::RateLimited(_)));
    }
}
