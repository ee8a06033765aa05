//! Answer production under the five run modes, with per-stage timing.
//!
//! A gated answer is literally one of the two base decodings: the no-context
//! decoding when the gate skips, the with-context decoding when it fires.
//! Timing separates the work done before answer generation (gate forward
//! pass + retrieval) from the answer decoding itself.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Mode, QueryRecord};
use crate::error::{Error, Result};
use crate::gate::{decide, GateOpts};
use crate::gateway::DecodingOverrides;
use crate::retrieval::{assemble_context, RetrievalPolicy, Searcher};
use crate::run::{run_stage_units, RunContext};
use crate::template::compose_answer_message;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerRecord {
    pub query_id: String,
    pub mode: Mode,
    pub answer_text: String,
    pub retrieved: bool,
    pub gate_ms: f64,
    pub retrieval_ms: f64,
    /// Everything before answer generation: gate + retrieval, exactly.
    pub prebuild_ms: f64,
    pub answer_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub context_hash: Option<String>,
}

/// Per-mode timing aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub mode: Mode,
    pub n: usize,
    pub total_gate_ms: f64,
    pub total_retrieval_ms: f64,
    pub total_prebuild_ms: f64,
    pub mean_prebuild_ms: f64,
    pub total_answer_ms: f64,
}

pub struct AnswerOpts<'a> {
    pub answer_profile: &'a str,
    pub gate: GateOpts<'a>,
    pub searcher: &'a Searcher,
    pub retrieval_policy: RetrievalPolicy,
    pub context_budget: usize,
}

/// Produce one answer record for (query, mode).
pub fn answer(
    ctx: &RunContext,
    query: &QueryRecord,
    mode: Mode,
    epsilon: Option<f64>,
    opts: &AnswerOpts<'_>,
) -> Result<AnswerRecord> {
    let decision = decide(&ctx.gateway, query, mode, epsilon, &opts.gate)?;
    let gate_ms = decision.duration_ms;

    let (context, retrieval_ms) = if decision.retrieve {
        let retrieved = opts.searcher.search(query, opts.retrieval_policy)?;
        let duration = retrieved.duration_ms;
        (Some(assemble_context(&retrieved, opts.context_budget)?), duration)
    } else {
        (None, 0.0)
    };

    let dialect = ctx.config.dialect_for(opts.answer_profile)?;
    let message = compose_answer_message(query, context.as_deref(), dialect)?;
    let response =
        ctx.gateway
            .generate(opts.answer_profile, &message, DecodingOverrides::greedy(), 0)?;

    Ok(AnswerRecord {
        query_id: query.id.clone(),
        mode,
        answer_text: response.text,
        retrieved: decision.retrieve,
        gate_ms,
        retrieval_ms,
        prebuild_ms: gate_ms + retrieval_ms,
        answer_ms: response.latency_ms,
        context_hash: context.map(|k| hex::encode(Sha256::digest(k.as_bytes()))),
    })
}

/// Run every requested mode over the corpus. One record per (query, mode),
/// ordered by query id within each mode; failures are per-row, not fatal.
pub fn run_benchmark(
    ctx: &RunContext,
    queries: &[QueryRecord],
    modes: &[Mode],
    epsilon: Option<f64>,
    opts: &AnswerOpts<'_>,
) -> Result<(
    BTreeMap<Mode, Vec<AnswerRecord>>,
    BTreeMap<Mode, BTreeMap<String, String>>,
)> {
    let mut all_records = BTreeMap::new();
    let mut all_failures = BTreeMap::new();
    for &mode in modes {
        let eps = match mode {
            Mode::Skb => Some(epsilon.unwrap_or(ctx.config.defaults.skb_epsilon)),
            _ => None,
        };
        let stage = format!(
            "answer-{mode}{}",
            eps.map(|e| format!("-{e}")).unwrap_or_default()
        );
        let units: Vec<(String, &QueryRecord)> =
            queries.iter().map(|q| (q.id.clone(), q)).collect();
        let outcome = run_stage_units(ctx, &stage, &units, |query| {
            answer(ctx, query, mode, eps, opts)
        })?;
        all_records.insert(mode, outcome.results.into_values().collect());
        all_failures.insert(mode, outcome.failures);
    }
    Ok((all_records, all_failures))
}

/// Fold answer records into per-mode timing rows (sorted by mode).
pub fn timing_summary(records: &BTreeMap<Mode, Vec<AnswerRecord>>) -> Vec<TimingRow> {
    records
        .iter()
        .map(|(&mode, rows)| {
            let total_gate_ms = rows.iter().map(|r| r.gate_ms).sum::<f64>();
            let total_retrieval_ms = rows.iter().map(|r| r.retrieval_ms).sum::<f64>();
            let total_prebuild_ms = rows.iter().map(|r| r.prebuild_ms).sum::<f64>();
            let total_answer_ms = rows.iter().map(|r| r.answer_ms).sum::<f64>();
            TimingRow {
                mode,
                n: rows.len(),
                total_gate_ms,
                total_retrieval_ms,
                total_prebuild_ms,
                mean_prebuild_ms: if rows.is_empty() {
                    0.0
                } else {
                    total_prebuild_ms / rows.len() as f64
                },
                total_answer_ms,
            }
        })
        .collect()
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out = String::from(
        "mode,n,total_gate_ms,total_retrieval_ms,total_prebuild_ms,mean_prebuild_ms,total_answer_ms\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.mode,
            r.n,
            r.total_gate_ms,
            r.total_retrieval_ms,
            r.total_prebuild_ms,
            r.mean_prebuild_ms,
            r.total_answer_ms
        ));
    }
    out
}

impl AnswerRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.retrieved && (self.retrieval_ms != 0.0 || self.context_hash.is_some()) {
            return Err(Error::Integrity(format!(
                "record {:?}: no retrieval but retrieval fields set",
                self.query_id
            )));
        }
        if (self.prebuild_ms - (self.gate_ms + self.retrieval_ms)).abs() > 1e-9 {
            return Err(Error::Integrity(format!(
                "record {:?}: prebuild time is not gate + retrieval",
                self.query_id
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::domain::{ImageRef, ScoreScale};
    use crate::retrieval::{FixtureProvider, IssuedQuery, ProviderConfig, Snippet};
    use crate::template::TemplateSet;

    struct Setup {
        ctx: RunContext,
        templates: TemplateSet,
        _dir: tempfile::TempDir,
        fixture_dir: std::path::PathBuf,
    }

    fn setup() -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(Config::default(), dir.path(), true).unwrap();
        let templates = ctx.config.template_set().unwrap();
        let fixture_dir = dir.path().join("fixtures");
        std::fs::create_dir_all(&fixture_dir).unwrap();
        Setup {
            ctx,
            templates,
            fixture_dir,
            _dir: dir,
        }
    }

    fn searcher(s: &Setup) -> Searcher {
        Searcher::new(
            ProviderConfig::fixture(&s.fixture_dir).build("fixture"),
            5,
            Some(s.ctx.store.search_cache_dir()),
            0,
            2,
        )
        .unwrap()
    }

    fn opts<'a>(s: &'a Setup, searcher: &'a Searcher) -> AnswerOpts<'a> {
        AnswerOpts {
            answer_profile: "answerer",
            gate: GateOpts {
                boundary_profile: "boundary",
                prompt_profile: "answerer",
                templates: &s.templates,
                boundary_dialect: s.ctx.config.dialect_for("boundary").unwrap(),
                prompt_dialect: s.ctx.config.dialect_for("answerer").unwrap(),
                scale: ScoreScale::default(),
            },
            searcher,
            retrieval_policy: RetrievalPolicy::Image,
            context_budget: 4000,
        }
    }

    fn queries(n: usize) -> Vec<QueryRecord> {
        (0..n)
            .map(|i| QueryRecord {
                id: format!("q{i:03}"),
                source: "mix".into(),
                text: format!("what is thing number {i}?"),
                images: vec![ImageRef::uri(format!("https://example.com/{i}.png"))],
                gold_answer: format!("thing {i}"),
                gold_query: None,
                human_label: None,
            })
            .collect()
    }

    #[test]
    fn mode_none_never_retrieves_mode_all_always_does() {
        let s = setup();
        let sr = searcher(&s);
        let o = opts(&s, &sr);
        let qs = queries(4);
        let (records, failures) =
            run_benchmark(&s.ctx, &qs, &[Mode::None, Mode::All], None, &o).unwrap();
        assert!(failures.values().all(BTreeMap::is_empty));
        for r in &records[&Mode::None] {
            r.validate().unwrap();
            assert!(!r.retrieved);
            assert_eq!(r.prebuild_ms, 0.0);
        }
        for r in &records[&Mode::All] {
            r.validate().unwrap();
            assert!(r.retrieved);
            assert!(r.context_hash.is_some());
        }
    }

    #[test]
    fn gated_answers_equal_the_matching_base_decoding() {
        let s = setup();
        // Give one query canned snippets so contexts differ across queries.
        let qs = queries(6);
        FixtureProvider::write_fixture(
            &s.fixture_dir,
            &IssuedQuery::Image(qs[0].images[0].clone()),
            &[Snippet {
                title: "t".into(),
                text: "canned context".into(),
                url: "https://example.com".into(),
            }],
        )
        .unwrap();
        let sr = searcher(&s);
        let o = opts(&s, &sr);
        let (records, _) = run_benchmark(
            &s.ctx,
            &qs,
            &[Mode::None, Mode::All, Mode::Hkb, Mode::Skb],
            Some(3.0),
            &o,
        )
        .unwrap();
        let none: BTreeMap<&str, &AnswerRecord> = records[&Mode::None]
            .iter()
            .map(|r| (r.query_id.as_str(), r))
            .collect();
        let all: BTreeMap<&str, &AnswerRecord> = records[&Mode::All]
            .iter()
            .map(|r| (r.query_id.as_str(), r))
            .collect();
        for mode in [Mode::Hkb, Mode::Skb] {
            for r in &records[&mode] {
                r.validate().unwrap();
                let base = if r.retrieved {
                    all[r.query_id.as_str()]
                } else {
                    none[r.query_id.as_str()]
                };
                assert_eq!(r.answer_text, base.answer_text, "{mode} {}", r.query_id);
                assert_eq!(r.context_hash, base.context_hash);
            }
        }
    }

    #[test]
    fn skb_beyond_scale_equals_mode_none_byte_for_byte() {
        let s = setup();
        let sr = searcher(&s);
        let o = opts(&s, &sr);
        let qs = queries(5);
        let (records, _) =
            run_benchmark(&s.ctx, &qs, &[Mode::None, Mode::Skb], Some(5.01), &o).unwrap();
        let none_texts: Vec<&str> = records[&Mode::None]
            .iter()
            .map(|r| r.answer_text.as_str())
            .collect();
        let skb_texts: Vec<&str> = records[&Mode::Skb]
            .iter()
            .map(|r| r.answer_text.as_str())
            .collect();
        assert_eq!(none_texts, skb_texts);
        assert!(records[&Mode::Skb].iter().all(|r| !r.retrieved));
    }

    #[test]
    fn timing_summary_totals_are_row_sums() {
        let s = setup();
        let sr = searcher(&s);
        let o = opts(&s, &sr);
        let qs = queries(3);
        let (records, _) = run_benchmark(&s.ctx, &qs, &[Mode::All], None, &o).unwrap();
        let summary = timing_summary(&records);
        assert_eq!(summary.len(), 1);
        let row = &summary[0];
        let expected: f64 = records[&Mode::All].iter().map(|r| r.prebuild_ms).sum();
        assert_eq!(row.total_prebuild_ms, expected);
        assert_eq!(row.n, 3);
        let csv = timing_csv(&summary);
        assert!(csv.starts_with("mode,n,"));
        assert!(csv.contains("all,3,"));
    }

    #[test]
    fn rerun_is_served_from_cache_with_zero_backend_calls() {
        let s = setup();
        let sr = searcher(&s);
        let o = opts(&s, &sr);
        let qs = queries(3);
        let (first, _) = run_benchmark(&s.ctx, &qs, &[Mode::Skb], Some(4.5), &o).unwrap();
        let calls_before = s.ctx.gateway.mock_backend("answerer").unwrap().calls();
        // Wipe the checkpoint so the stage recomputes through the gen cache.
        std::fs::remove_file(s.ctx.store.checkpoint_path("answer-skb-4.5")).unwrap();
        let (second, _) = run_benchmark(&s.ctx, &qs, &[Mode::Skb], Some(4.5), &o).unwrap();
        assert_eq!(first, second);
        assert_eq!(
            s.ctx.gateway.mock_backend("answerer").unwrap().calls(),
            calls_before
        );
    }
}
