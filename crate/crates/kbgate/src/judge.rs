//! Judge scoring of sampled answers and mean aggregation.
//!
//! Each sample is scored by a text judge against the gold answer. The first
//! decimal number in the reply is the score, clamped to the scale; a reply
//! with no parseable number is retried twice and then marked invalid.
//! Invalid scores never enter the mean. A query whose valid count falls
//! below the configured minimum is dropped with a logged reason.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{QueryRecord, ScoreScale};
use crate::error::{Error, Result};
use crate::gateway::{DecodingOverrides, Gateway};
use crate::run::{run_stage_units, RunContext};
use crate::sampling::SampleSet;
use crate::template::{render_judge, PromptTemplate, TemplateVariant};

/// Attempts per sample: the initial call plus two retries.
pub const JUDGE_ATTEMPTS: u32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeScore {
    pub index: u32,
    /// Parsed and clamped score; `None` for an unparsable reply.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedQuery {
    pub query_id: String,
    pub source: String,
    pub scores: Vec<JudgeScore>,
    pub valid_count: u32,
    pub mean_score: f64,
}

/// First decimal number in a text, e.g. `"Score: 6/5, perfect"` yields 6.
pub fn parse_first_number(text: &str) -> Option<f64> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i].is_ascii_digit() {
            let start = i;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            if i < bytes.len() && bytes[i] == b'.' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit()
            {
                i += 1;
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
            }
            return text[start..i].parse().ok();
        }
        i += 1;
    }
    None
}

/// Arithmetic mean of valid scores. Permutation-invariant, bounded by the
/// extremes of its inputs.
pub fn aggregate(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Validation("no valid scores to aggregate".into()));
    }
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Score one sample once (with retries). The retry attempt is mixed into the
/// cached-request index so each attempt is a distinct, resumable call.
pub fn judge_sample(
    gateway: &Gateway,
    judge_profile: &str,
    template: &PromptTemplate,
    query: &QueryRecord,
    sample_text: &str,
    scale: ScoreScale,
    base_index: u32,
) -> Result<JudgeScore> {
    if query.gold_answer.trim().is_empty() {
        return Err(Error::Validation(format!(
            "query {:?} has no gold answer to judge against",
            query.id
        )));
    }
    let message = render_judge(template, &query.text, sample_text, &query.gold_answer)?;
    let mut last_raw = String::new();
    for attempt in 0..JUDGE_ATTEMPTS {
        let response = gateway.generate(
            judge_profile,
            &message,
            DecodingOverrides::greedy(),
            base_index * JUDGE_ATTEMPTS + attempt,
        )?;
        last_raw = response.text;
        if let Some(value) = parse_first_number(&last_raw) {
            return Ok(JudgeScore {
                index: base_index,
                score: Some(scale.clamp(value)),
                raw: last_raw,
            });
        }
    }
    Ok(JudgeScore {
        index: base_index,
        score: None,
        raw: last_raw,
    })
}

fn unit_id(query_id: &str, index: u32) -> String {
    format!("{query_id}#{index:05}")
}

/// Judge every sample of every set and fold the scores into per-query means.
/// Returns judged queries ordered by id plus per-query drop reasons.
pub fn judge_corpus(
    ctx: &RunContext,
    queries: &[QueryRecord],
    sample_sets: &[SampleSet],
    judge_profile: &str,
) -> Result<(Vec<JudgedQuery>, BTreeMap<String, String>)> {
    let template = ctx.config.template(TemplateVariant::Judge)?;
    let scale = ctx.config.scale;
    let min_valid = ctx.config.defaults.min_valid;
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();

    let mut units = Vec::new();
    for set in sample_sets {
        for sample in &set.samples {
            units.push((
                unit_id(&set.query_id, sample.index),
                (set.query_id.clone(), sample.index, sample.text.clone()),
            ));
        }
    }

    let outcome = run_stage_units(ctx, "judge", &units, |(query_id, index, text)| {
        let query = by_id
            .get(query_id.as_str())
            .ok_or_else(|| Error::Integrity(format!("unknown query {query_id:?}")))?;
        judge_sample(&ctx.gateway, judge_profile, &template, query, text, scale, *index)
    })?;

    let mut grouped: BTreeMap<String, Vec<JudgeScore>> = BTreeMap::new();
    for (uid, score) in &outcome.results {
        let query_id = uid.rsplit_once('#').map(|(q, _)| q).unwrap_or(uid);
        grouped.entry(query_id.to_string()).or_default().push(score.clone());
    }

    let mut judged = Vec::new();
    let mut dropped = BTreeMap::new();
    for (uid, err) in outcome.failures {
        let query_id = uid.rsplit_once('#').map(|(q, _)| q).unwrap_or(&uid);
        dropped.insert(query_id.to_string(), err);
    }
    for (query_id, mut scores) in grouped {
        if dropped.contains_key(&query_id) {
            continue;
        }
        scores.sort_by_key(|s| s.index);
        let valid: Vec<f64> = scores.iter().filter_map(|s| s.score).collect();
        if (valid.len() as u32) < min_valid.max(1) {
            log::warn!(
                "query {query_id}: dropped, {} of {} judge replies parseable (min {})",
                valid.len(),
                scores.len(),
                min_valid
            );
            dropped.insert(
                query_id,
                format!(
                    "no usable judge scores: {} of {} replies parseable",
                    valid.len(),
                    scores.len()
                ),
            );
            continue;
        }
        let source = by_id
            .get(query_id.as_str())
            .map(|q| q.source.clone())
            .unwrap_or_default();
        let mean_score = aggregate(&valid)?;
        judged.push(JudgedQuery {
            query_id,
            source,
            valid_count: valid.len() as u32,
            scores,
            mean_score,
        });
    }
    Ok((judged, dropped))
}
