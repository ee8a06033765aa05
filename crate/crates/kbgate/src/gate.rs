//! Gating: query the boundary model and map its output to a retrieve/skip
//! decision.
//!
//! The hard model answers true/false; the soft model answers a score, and
//! retrieval fires when the score reaches the threshold (ties retrieve). A
//! reply that parses as neither falls open: retrieving unnecessarily costs
//! latency, skipping a needed retrieval costs accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Mode, QueryRecord, ScoreScale};
use crate::error::{Error, Result};
use crate::gateway::{DecodingOverrides, Gateway};
use crate::judge::parse_first_number;
use crate::run::{run_stage_units, RunContext};
use crate::template::{render_query, Dialect, PromptTemplate, TemplateSet, TemplateVariant};

/// Slack above the top of the scale accepted for sweep thresholds; a
/// threshold beyond the scale disables retrieval entirely.
pub const EPSILON_SLACK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Bool(bool),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    pub query_id: String,
    pub variant: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    pub retrieve: bool,
    pub duration_ms: f64,
    pub fallback_used: bool,
}

/// Parse a leading true/false token, tolerating case and punctuation.
pub fn parse_bool_reply(text: &str) -> Result<bool> {
    let token: String = text
        .trim_start()
        .chars()
        .take_while(|c| c.is_ascii_alphabetic())
        .collect();
    match token.to_ascii_lowercase().as_str() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!(
            "expected true/false, got {:?}",
            text.chars().take(40).collect::<String>()
        ))),
    }
}

/// Profile and template wiring for gate calls.
pub struct GateOpts<'a> {
    pub boundary_profile: &'a str,
    /// Profile asked by the prompt baseline — the model whose own knowledge
    /// is in question (the answering model).
    pub prompt_profile: &'a str,
    pub templates: &'a TemplateSet,
    pub boundary_dialect: &'a Dialect,
    pub prompt_dialect: &'a Dialect,
    pub scale: ScoreScale,
}

fn template<'a>(set: &'a TemplateSet, variant: TemplateVariant) -> Result<&'a PromptTemplate> {
    set.get(&variant)
        .ok_or_else(|| Error::Config(format!("no template for variant {}", variant.key())))
}

/// One greedy forward pass of the hard boundary model. Returns the verdict,
/// the raw reply, and the pass latency.
pub fn predict_hard(
    gateway: &Gateway,
    query: &QueryRecord,
    opts: &GateOpts<'_>,
) -> Result<(Result<bool>, String, f64)> {
    let message = render_query(
        template(opts.templates, TemplateVariant::Hard)?,
        opts.boundary_dialect,
        query,
    )?;
    let response = gateway.generate(
        opts.boundary_profile,
        &message,
        DecodingOverrides::greedy(),
        0,
    )?;
    let parsed = parse_bool_reply(&response.text);
    Ok((parsed, response.text, response.latency_ms))
}

/// One greedy forward pass of the soft boundary model: first decimal number
/// in the reply, clamped to the scale.
pub fn predict_soft(
    gateway: &Gateway,
    query: &QueryRecord,
    opts: &GateOpts<'_>,
) -> Result<(Result<f64>, String, f64)> {
    let message = render_query(
        template(opts.templates, TemplateVariant::Soft)?,
        opts.boundary_dialect,
        query,
    )?;
    let response = gateway.generate(
        opts.boundary_profile,
        &message,
        DecodingOverrides::greedy(),
        0,
    )?;
    let parsed = parse_first_number(&response.text)
        .map(|v| opts.scale.clamp(v))
        .ok_or_else(|| Error::Parse(format!("no score in {:?}", response.text)));
    Ok((parsed, response.text, response.latency_ms))
}

/// Ask the answering model itself whether it wants a search. Parse failure
/// means the model claimed self-sufficiency: no retrieval, flagged.
pub fn prompt_based_decide(
    gateway: &Gateway,
    query: &QueryRecord,
    opts: &GateOpts<'_>,
) -> Result<(Result<bool>, String, f64)> {
    let message = render_query(
        template(opts.templates, TemplateVariant::PromptBaseline)?,
        opts.prompt_dialect,
        query,
    )?;
    let response = gateway.generate(
        opts.prompt_profile,
        &message,
        DecodingOverrides::greedy(),
        0,
    )?;
    let parsed = parse_bool_reply(&response.text);
    Ok((parsed, response.text, response.latency_ms))
}

/// Map a boundary verdict to the retrieve/skip decision for one query.
///
/// Duration covers the boundary forward pass only; the fixed variants
/// (none/all) take no pass and report zero.
pub fn decide(
    gateway: &Gateway,
    query: &QueryRecord,
    variant: Mode,
    epsilon: Option<f64>,
    opts: &GateOpts<'_>,
) -> Result<GateDecision> {
    match variant {
        Mode::None | Mode::All => Ok(GateDecision {
            query_id: query.id.clone(),
            variant,
            raw_output: None,
            verdict: None,
            epsilon: None,
            retrieve: variant == Mode::All,
            duration_ms: 0.0,
            fallback_used: false,
        }),
        Mode::Hkb => {
            let (parsed, raw, duration_ms) = predict_hard(gateway, query, opts)?;
            let (retrieve, verdict, fallback_used) = match parsed {
                Ok(v) => (v, Some(Verdict::Bool(v)), false),
                Err(_) => (true, None, true),
            };
            Ok(GateDecision {
                query_id: query.id.clone(),
                variant,
                raw_output: Some(raw),
                verdict,
                epsilon: None,
                retrieve,
                duration_ms,
                fallback_used,
            })
        }
        Mode::Skb => {
            let eps = epsilon
                .ok_or_else(|| Error::Validation("soft gating needs a threshold".into()))?;
            if eps < opts.scale.wrong || eps > opts.scale.correct + EPSILON_SLACK {
                return Err(Error::ScoreOutOfRange {
                    value: eps,
                    lo: opts.scale.wrong,
                    hi: opts.scale.correct + EPSILON_SLACK,
                });
            }
            let (parsed, raw, duration_ms) = predict_soft(gateway, query, opts)?;
            let (retrieve, verdict, fallback_used) = match parsed {
                Ok(score) => (score >= eps, Some(Verdict::Score(score)), false),
                Err(_) => (true, None, true),
            };
            Ok(GateDecision {
                query_id: query.id.clone(),
                variant,
                raw_output: Some(raw),
                verdict,
                epsilon: Some(eps),
                retrieve,
                duration_ms,
                fallback_used,
            })
        }
        Mode::Prompt => {
            let (parsed, raw, duration_ms) = prompt_based_decide(gateway, query, opts)?;
            let (retrieve, verdict, fallback_used) = match parsed {
                Ok(v) => (v, Some(Verdict::Bool(v)), false),
                Err(_) => (false, None, true),
            };
            Ok(GateDecision {
                query_id: query.id.clone(),
                variant,
                raw_output: Some(raw),
                verdict,
                epsilon: None,
                retrieve,
                duration_ms,
                fallback_used,
            })
        }
    }
}

/// Decide a whole corpus with checkpointing and parallel fan-out. Decisions
/// come back ordered by query id; per-query endpoint failures are collected,
/// not fatal.
pub fn decide_corpus(
    ctx: &RunContext,
    queries: &[QueryRecord],
    variant: Mode,
    epsilon: Option<f64>,
    boundary_profile: &str,
    prompt_profile: &str,
) -> Result<(Vec<GateDecision>, BTreeMap<String, String>)> {
    let templates = ctx.config.template_set()?;
    let opts = GateOpts {
        boundary_profile,
        prompt_profile,
        templates: &templates,
        boundary_dialect: ctx.config.dialect_for(boundary_profile)?,
        prompt_dialect: ctx.config.dialect_for(prompt_profile)?,
        scale: ctx.config.scale,
    };
    let stage = format!(
        "gate-{variant}{}",
        epsilon.map(|e| format!("-{e}")).unwrap_or_default()
    );
    let units: Vec<(String, &QueryRecord)> =
        queries.iter().map(|q| (q.id.clone(), q)).collect();
    let outcome = run_stage_units(ctx, &stage, &units, |query| {
        decide(&ctx.gateway, query, variant, epsilon, &opts)
    })?;
    Ok((outcome.results.into_values().collect(), outcome.failures))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::domain::ImageRef;
    use crate::gateway::MockBackend;

    fn query(text: &str) -> QueryRecord {
        QueryRecord {
            id: format!("q-{}", text.len()),
            source: "mix".into(),
            text: text.into(),
            images: vec![ImageRef::uri("https://example.com/x.png")],
            gold_answer: "g".into(),
            gold_query: None,
            human_label: None,
        }
    }

    #[test]
    fn bool_reply_parsing_tolerates_case_and_punctuation() {
        assert_eq!(parse_bool_reply("True").unwrap(), true);
        assert_eq!(parse_bool_reply("false.").unwrap(), false);
        assert_eq!(parse_bool_reply("  TRUE, because...").unwrap(), true);
        assert!(parse_bool_reply("maybe").is_err());
        assert!(parse_bool_reply("").is_err());
    }

    struct Setup {
        ctx: RunContext,
        _dir: tempfile::TempDir,
    }

    fn setup() -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let ctx = RunContext::new(Config::default(), dir.path(), true).unwrap();
        Setup { ctx, _dir: dir }
    }

    fn opts<'a>(
        templates: &'a TemplateSet,
        dialect: &'a Dialect,
    ) -> GateOpts<'a> {
        GateOpts {
            boundary_profile: "boundary",
            prompt_profile: "answerer",
            templates,
            boundary_dialect: dialect,
            prompt_dialect: dialect,
            scale: ScoreScale::default(),
        }
    }

    #[test]
    fn hard_and_soft_verdicts_match_the_mock_rule() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        for text in ["alpha", "beta question", "third thing?", "one more"] {
            let q = query(text);
            let latent = MockBackend::underlying_score(text);
            let hkb = decide(&s.ctx.gateway, &q, Mode::Hkb, None, &o).unwrap();
            assert_eq!(hkb.retrieve, latent < 4.0, "hkb for {text:?}");
            assert!(!hkb.fallback_used);

            let skb = decide(&s.ctx.gateway, &q, Mode::Skb, Some(3.0), &o).unwrap();
            let flipped = 6.0 - latent;
            assert_eq!(skb.retrieve, flipped >= 3.0, "skb for {text:?}");
            match skb.verdict {
                Some(Verdict::Score(v)) => assert!((v - flipped).abs() < 1e-9),
                other => panic!("expected a score verdict, got {other:?}"),
            }
        }
    }

    #[test]
    fn fixed_variants_never_touch_the_model() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        let q = query("anything");
        let none = decide(&s.ctx.gateway, &q, Mode::None, None, &o).unwrap();
        let all = decide(&s.ctx.gateway, &q, Mode::All, None, &o).unwrap();
        assert!(!none.retrieve && all.retrieve);
        assert_eq!(none.duration_ms, 0.0);
        assert_eq!(all.duration_ms, 0.0);
        assert!(s.ctx.gateway.mock_backend("boundary").is_none());
    }

    #[test]
    fn skb_degenerate_thresholds() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        for text in ["a", "bb", "ccc", "dddd", "eeeee"] {
            let q = query(text);
            let low = decide(&s.ctx.gateway, &q, Mode::Skb, Some(1.0), &o).unwrap();
            assert!(low.retrieve, "threshold at the wrong end retrieves everything");
            let high = decide(&s.ctx.gateway, &q, Mode::Skb, Some(5.01), &o).unwrap();
            assert!(!high.retrieve, "threshold beyond the scale retrieves nothing");
        }
    }

    #[test]
    fn skb_threshold_outside_slack_rejected() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        let err = decide(&s.ctx.gateway, &query("x"), Mode::Skb, Some(0.5), &o).unwrap_err();
        assert!(matches!(err, Error::ScoreOutOfRange { .. }));
        assert!(decide(&s.ctx.gateway, &query("x"), Mode::Skb, None, &o).is_err());
    }

    #[test]
    fn unparsable_boundary_reply_falls_open() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        let q = query(crate::gateway::mock::UNSCORABLE_MARKER);
        let hkb = decide(&s.ctx.gateway, &q, Mode::Hkb, None, &o).unwrap();
        assert!(hkb.retrieve && hkb.fallback_used);
        let skb = decide(&s.ctx.gateway, &q, Mode::Skb, Some(4.5), &o).unwrap();
        assert!(skb.retrieve && skb.fallback_used);
        // The baseline fails closed instead: the model claimed nothing.
        let prompt = decide(&s.ctx.gateway, &q, Mode::Prompt, None, &o).unwrap();
        assert!(!prompt.retrieve && prompt.fallback_used);
    }

    #[test]
    fn retrieve_count_monotone_in_threshold() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        let queries: Vec<QueryRecord> = (0..40)
            .map(|i| {
                let mut q = query(&format!("probe number {i}"));
                q.id = format!("q{i:02}");
                q
            })
            .collect();
        let mut previous = usize::MAX;
        for step in 0..=40 {
            let eps = 1.0 + step as f64 * 0.1;
            let count = queries
                .iter()
                .filter(|q| {
                    decide(&s.ctx.gateway, q, Mode::Skb, Some(eps), &o)
                        .unwrap()
                        .retrieve
                })
                .count();
            assert!(count <= previous, "count rose at eps={eps}");
            previous = count;
        }
    }

    /// The hard gate is strict (score below threshold retrieves) while the
    /// soft gate fires on equality, so with the mock emitting the flipped
    /// latent score the two disagree exactly on ties.
    #[test]
    fn hard_and_soft_agree_except_on_ties() {
        let s = setup();
        let templates = s.ctx.config.template_set().unwrap();
        let dialect = Dialect::default();
        let o = opts(&templates, &dialect);
        let label_eps = 4.0; // the mock hard verdict is baked at this threshold
        let skb_eps = 6.0 - label_eps; // flip into the search-need domain
        for i in 0..120 {
            let text = format!("tie probe {i}");
            let mut q = query(&text);
            q.id = format!("t{i:03}");
            let latent = MockBackend::underlying_score(&text);
            let hkb = decide(&s.ctx.gateway, &q, Mode::Hkb, None, &o).unwrap();
            let skb = decide(&s.ctx.gateway, &q, Mode::Skb, Some(skb_eps), &o).unwrap();
            if (latent - label_eps).abs() < 1e-9 {
                assert!(!hkb.retrieve && skb.retrieve, "tie splits hard/soft");
            } else {
                assert_eq!(hkb.retrieve, skb.retrieve, "latent={latent}");
            }
        }
    }

    #[test]
    fn corpus_decisions_are_ordered_and_complete() {
        let s = setup();
        let queries: Vec<QueryRecord> = (0..10)
            .map(|i| {
                let mut q = query(&format!("corpus item {i}"));
                q.id = format!("q{i:02}");
                q
            })
            .collect();
        let (decisions, failures) =
            decide_corpus(&s.ctx, &queries, Mode::Skb, Some(4.5), "boundary", "answerer")
                .unwrap();
        assert!(failures.is_empty());
        assert_eq!(decisions.len(), 10);
        let ids: Vec<&str> = decisions.iter().map(|d| d.query_id.as_str()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }
}
