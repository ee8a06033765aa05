//! Answer-quality metrics: judge-scored quality on 0–100, token-overlap
//! accuracy, and search ratio.

use crate::domain::{QueryRecord, ScoreScale};
use crate::error::{Error, Result};
use crate::gate::GateDecision;
use crate::gateway::Gateway;
use crate::judge::judge_sample;
use crate::template::PromptTemplate;

/// Normalize for token matching: lowercase, strip punctuation (every
/// non-alphanumeric becomes a separator), collapse whitespace.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .map(|c| {
            if c.is_alphanumeric() {
                c.to_lowercase().next().unwrap_or(c)
            } else {
                ' '
            }
        })
        .collect();
    cleaned.split_whitespace().map(str::to_string).collect()
}

/// Share of prediction tokens that appear in the gold answer (multiset
/// semantics), on 0–100. An empty prediction scores 0.
pub fn token_accuracy(prediction: &str, gold: &str) -> Result<f64> {
    if gold.trim().is_empty() {
        return Err(Error::Validation("gold answer must be non-empty".into()));
    }
    let pred_tokens = normalize_tokens(prediction);
    if pred_tokens.is_empty() {
        return Ok(0.0);
    }
    let mut gold_counts: std::collections::HashMap<String, usize> = Default::default();
    for token in normalize_tokens(gold) {
        *gold_counts.entry(token).or_insert(0) += 1;
    }
    let mut matched = 0usize;
    for token in &pred_tokens {
        if let Some(count) = gold_counts.get_mut(token) {
            if *count > 0 {
                *count -= 1;
                matched += 1;
            }
        }
    }
    Ok(100.0 * matched as f64 / pred_tokens.len() as f64)
}

/// Map a judge score onto 0–100: the wrong end to 0, the correct end to 100,
/// linear in between.
pub fn rescale_judge_score(score: f64, scale: ScoreScale) -> f64 {
    (score - scale.wrong) / scale.span() * 100.0
}

/// Judge-evaluated quality of one prediction, on 0–100. `None` means the
/// judge never produced a parseable score (the row is unevaluated, not 0).
pub fn llm_metric(
    gateway: &Gateway,
    judge_profile: &str,
    template: &PromptTemplate,
    query: &QueryRecord,
    prediction: &str,
    scale: ScoreScale,
) -> Result<Option<f64>> {
    let judged = judge_sample(gateway, judge_profile, template, query, prediction, scale, 0)?;
    Ok(judged.score.map(|s| rescale_judge_score(s, scale)))
}

/// Percentage of decisions that route to retrieval.
pub fn search_ratio(decisions: &[GateDecision]) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Validation("no decisions to summarize".into()));
    }
    let retrieving = decisions.iter().filter(|d| d.retrieve).count();
    Ok(100.0 * retrieving as f64 / decisions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::Mode;

    #[test]
    fn identical_strings_score_100() {
        assert_eq!(token_accuracy("houston astros", "houston astros").unwrap(), 100.0);
    }

    #[test]
    fn extra_prediction_token_costs_precision() {
        let score = token_accuracy("the houston astros", "houston astros").unwrap();
        assert!((score - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn disjoint_and_empty_predictions_score_zero() {
        assert_eq!(token_accuracy("apple pie", "houston astros").unwrap(), 0.0);
        assert_eq!(token_accuracy("", "gold").unwrap(), 0.0);
        assert!(token_accuracy("x", "  ").is_err());
    }

    #[test]
    fn normalization_kills_case_and_punctuation() {
        assert_eq!(
            token_accuracy("The Houston-Astros!!", "houston astros the").unwrap(),
            100.0
        );
        assert_eq!(normalize_tokens("A.B, c!"), vec!["a", "b", "c"]);
    }

    #[test]
    fn multiset_semantics_not_set_semantics() {
        // "very very good" vs "very good": the second "very" has no partner.
        let score = token_accuracy("very very good", "very good").unwrap();
        assert!((score - 200.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn rescale_endpoints_and_midpoint() {
        let scale = ScoreScale::default();
        assert_eq!(rescale_judge_score(1.0, scale), 0.0);
        assert_eq!(rescale_judge_score(3.0, scale), 50.0);
        assert_eq!(rescale_judge_score(5.0, scale), 100.0);
    }

    fn decision(retrieve: bool) -> GateDecision {
        GateDecision {
            query_id: "q".into(),
            variant: Mode::Skb,
            raw_output: None,
            verdict: None,
            epsilon: Some(4.5),
            retrieve,
            duration_ms: 0.0,
            fallback_used: false,
        }
    }

    #[test]
    fn search_ratio_counts_retrievals() {
        let ds = vec![decision(true), decision(true), decision(false), decision(false)];
        assert_eq!(search_ratio(&ds).unwrap(), 50.0);
        assert_eq!(search_ratio(&ds[..2]).unwrap(), 100.0);
        assert!(search_ratio(&[]).is_err());
    }
}
