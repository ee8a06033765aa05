//! Evaluation harness: per-mode reports, threshold sweeps, held-in boundary
//! accuracy, and dual-judge consistency.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::answer::AnswerRecord;
use crate::domain::{BoundaryLabel, Mode, QueryRecord};
use crate::error::{Error, Result};
use crate::gate::{predict_soft, GateOpts};
use crate::metrics::{llm_metric, token_accuracy};
use crate::par;
use crate::run::RunContext;
use crate::sft::SftVariant;
use crate::template::{PromptTemplate, TemplateVariant};

pub const OVERALL_DATASET: &str = "(overall)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub dataset: String,
    pub mode: Mode,
    /// Queries in this (dataset, mode) group, including failed rows.
    pub n: usize,
    /// Rows excluded from the judge aggregate: failed answers plus
    /// judge-unevaluable predictions.
    pub failures: usize,
    pub llm_score: f64,
    pub token_acc: f64,
    pub search_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub rows: Vec<EvalRow>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Per-item metric values for one answer record.
#[derive(Debug, Clone)]
struct ItemMetrics {
    query_id: String,
    dataset: String,
    retrieved: bool,
    llm: Option<f64>,
    token: f64,
}

fn score_records(
    ctx: &RunContext,
    queries: &BTreeMap<&str, &QueryRecord>,
    records: &[AnswerRecord],
    judge_profile: &str,
    template: &PromptTemplate,
) -> Result<Vec<ItemMetrics>> {
    let scored = par::map_units(ctx.parallelism, records, |record| -> Result<ItemMetrics> {
        let query = queries.get(record.query_id.as_str()).ok_or_else(|| {
            Error::Integrity(format!("answer references unknown query {:?}", record.query_id))
        })?;
        let llm = llm_metric(
            &ctx.gateway,
            judge_profile,
            template,
            query,
            &record.answer_text,
            ctx.config.scale,
        )?;
        let token = token_accuracy(&record.answer_text, &query.gold_answer)?;
        Ok(ItemMetrics {
            query_id: record.query_id.clone(),
            dataset: query.source.clone(),
            retrieved: record.retrieved,
            llm,
            token,
        })
    });
    scored.into_iter().collect()
}

fn fold_rows(
    mode: Mode,
    items: &[ItemMetrics],
    failed_rows: &BTreeMap<String, String>,
    failed_dataset: impl Fn(&str) -> String,
) -> Vec<EvalRow> {
    let mut datasets: Vec<String> = items.iter().map(|i| i.dataset.clone()).collect();
    datasets.extend(failed_rows.keys().map(|qid| failed_dataset(qid)));
    datasets.sort();
    datasets.dedup();
    datasets.push(OVERALL_DATASET.to_string());

    let mut rows = Vec::new();
    for dataset in datasets {
        let overall = dataset == OVERALL_DATASET;
        let group: Vec<&ItemMetrics> = items
            .iter()
            .filter(|i| overall || i.dataset == dataset)
            .collect();
        let group_failed = failed_rows
            .iter()
            .filter(|(qid, _)| overall || failed_dataset(qid) == dataset)
            .count();
        let llm_values: Vec<f64> = group.iter().filter_map(|i| i.llm).collect();
        let token_values: Vec<f64> = group.iter().map(|i| i.token).collect();
        let unevaluated = group.iter().filter(|i| i.llm.is_none()).count();
        let retrieving = group.iter().filter(|i| i.retrieved).count();
        rows.push(EvalRow {
            dataset,
            mode,
            n: group.len() + group_failed,
            failures: group_failed + unevaluated,
            llm_score: mean(&llm_values),
            token_acc: mean(&token_values),
            search_ratio: if group.is_empty() {
                0.0
            } else {
                100.0 * retrieving as f64 / group.len() as f64
            },
        });
    }
    rows
}

/// Score every answer under the judge and fold into per-(dataset, mode)
/// rows, with an `(overall)` row per mode.
pub fn evaluate(
    ctx: &RunContext,
    queries: &[QueryRecord],
    records: &BTreeMap<Mode, Vec<AnswerRecord>>,
    failures: &BTreeMap<Mode, BTreeMap<String, String>>,
    judge_profile: &str,
) -> Result<EvalReport> {
    let template = ctx.config.template(TemplateVariant::Judge)?;
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let source_of = |qid: &str| -> String {
        by_id
            .get(qid)
            .map(|q| q.source.clone())
            .unwrap_or_else(|| "(unknown)".into())
    };

    let mut rows = Vec::new();
    for (&mode, mode_records) in records {
        let empty = BTreeMap::new();
        let failed = failures.get(&mode).unwrap_or(&empty);
        let items = score_records(ctx, &by_id, mode_records, judge_profile, &template)?;
        rows.extend(fold_rows(mode, &items, failed, source_of));
    }
    Ok(EvalReport {
        run_id: ctx.store.run_id().to_string(),
        rows,
    })
}

pub fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("dataset,mode,n,failures,llm_score,token_acc,search_ratio\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.dataset, r.mode, r.n, r.failures, r.llm_score, r.token_acc, r.search_ratio
        ));
    }
    out
}

/// Aligned text table, one block per dataset, one metric column plus one %
/// column per mode.
pub fn report_table(report: &EvalReport) -> String {
    let mut datasets: Vec<&str> = report.rows.iter().map(|r| r.dataset.as_str()).collect();
    datasets.sort();
    datasets.dedup();
    let mut out = String::new();
    for dataset in datasets {
        let rows: Vec<&EvalRow> = report
            .rows
            .iter()
            .filter(|r| r.dataset == dataset)
            .collect();
        let n = rows.first().map(|r| r.n).unwrap_or(0);
        out.push_str(&format!("Dataset: {dataset} (n={n})\n"));
        out.push_str(&format!("{:<8}", "Metric"));
        for r in &rows {
            out.push_str(&format!("{:>14}{:>9}", r.mode.label(), "%"));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "LLM"));
        for r in &rows {
            out.push_str(&format!("{:>14.2}{:>9.2}", r.llm_score, r.search_ratio));
        }
        out.push('\n');
        out.push_str(&format!("{:<8}", "Acc."));
        for r in &rows {
            out.push_str(&format!("{:>14.2}{:>9.2}", r.token_acc, r.search_ratio));
        }
        out.push_str("\n\n");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub ratio: f64,
    pub llm: f64,
    pub token_acc: f64,
}

/// Sweep the soft-gate threshold over a grid, reusing one boundary forward
/// pass per query and the cached base answers. The wrong-end threshold
/// reproduces the all-retrieval aggregates; a threshold beyond the scale
/// reproduces the no-retrieval aggregates.
pub fn epsilon_sweep(
    ctx: &RunContext,
    queries: &[QueryRecord],
    grid: &[f64],
    none_items: &[(String, Option<f64>, f64)],
    all_items: &[(String, Option<f64>, f64)],
    gate: &GateOpts<'_>,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::Validation("sweep grid is empty".into()));
    }
    let mut sorted: Vec<&QueryRecord> = queries.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));

    let scores: Vec<Result<f64>> = par::map_units(ctx.parallelism, &sorted, |query| {
        let (parsed, _raw, _ms) = predict_soft(&ctx.gateway, query, gate)?;
        // Fail-open on an unparsable boundary reply, consistent with decide.
        Ok(parsed.unwrap_or(ctx.config.scale.correct))
    });
    let scores: Vec<f64> = scores.into_iter().collect::<Result<_>>()?;

    let none_by_id: BTreeMap<&str, (&Option<f64>, f64)> = none_items
        .iter()
        .map(|(id, llm, tok)| (id.as_str(), (llm, *tok)))
        .collect();
    let all_by_id: BTreeMap<&str, (&Option<f64>, f64)> = all_items
        .iter()
        .map(|(id, llm, tok)| (id.as_str(), (llm, *tok)))
        .collect();

    let mut rows = Vec::with_capacity(grid.len());
    for &epsilon in grid {
        if epsilon < ctx.config.scale.wrong
            || epsilon > ctx.config.scale.correct + crate::gate::EPSILON_SLACK
        {
            return Err(Error::ScoreOutOfRange {
                value: epsilon,
                lo: ctx.config.scale.wrong,
                hi: ctx.config.scale.correct + crate::gate::EPSILON_SLACK,
            });
        }
        let mut llm_values = Vec::new();
        let mut token_values = Vec::new();
        let mut retrieving = 0usize;
        for (query, &score) in sorted.iter().zip(scores.iter()) {
            let retrieve = score >= epsilon;
            let table = if retrieve { &all_by_id } else { &none_by_id };
            let (llm, token) = table.get(query.id.as_str()).ok_or_else(|| {
                Error::Integrity(format!("no base answer metrics for query {:?}", query.id))
            })?;
            if retrieve {
                retrieving += 1;
            }
            if let Some(v) = llm {
                llm_values.push(*v);
            }
            token_values.push(*token);
        }
        rows.push(SweepRow {
            epsilon,
            ratio: 100.0 * retrieving as f64 / sorted.len() as f64,
            llm: mean(&llm_values),
            token_acc: mean(&token_values),
        });
    }
    Ok(rows)
}

/// Per-item (query_id, llm, token) triples in sorted query order — the exact
/// values both `evaluate` and the sweep aggregate from.
pub fn per_item_metrics(
    ctx: &RunContext,
    queries: &[QueryRecord],
    records: &[AnswerRecord],
    judge_profile: &str,
) -> Result<Vec<(String, Option<f64>, f64)>> {
    let template = ctx.config.template(TemplateVariant::Judge)?;
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let items = score_records(ctx, &by_id, records, judge_profile, &template)?;
    Ok(items
        .into_iter()
        .map(|i| (i.query_id, i.llm, i.token))
        .collect())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("epsilon,ratio,llm,token_acc\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.epsilon, r.ratio, r.llm, r.token_acc));
    }
    out
}

/// Accuracy of boundary predictions against reference labels, 0–100.
/// Hard: exact match. Soft: within tolerance.
pub fn held_in_accuracy(
    predictions: &[BoundaryLabel],
    labels: &[BoundaryLabel],
    variant: SftVariant,
    tolerance: f64,
) -> Result<f64> {
    let pred_map: BTreeMap<&str, &BoundaryLabel> =
        predictions.iter().map(|l| (l.query_id.as_str(), l)).collect();
    let label_map: BTreeMap<&str, &BoundaryLabel> =
        labels.iter().map(|l| (l.query_id.as_str(), l)).collect();
    if pred_map.len() != predictions.len() || label_map.len() != labels.len() {
        return Err(Error::Integrity("duplicate query ids".into()));
    }
    if pred_map.keys().ne(label_map.keys()) {
        return Err(Error::Integrity(
            "prediction and label sets cover different query ids".into(),
        ));
    }
    if label_map.is_empty() {
        return Err(Error::Validation("no labels to score against".into()));
    }
    let mut correct = 0usize;
    for (qid, label) in &label_map {
        let pred = pred_map[qid];
        let hit = match variant {
            SftVariant::Hard => pred.hard == label.hard,
            SftVariant::Soft => {
                let p = pred.soft.ok_or_else(|| {
                    Error::Integrity(format!("prediction for {qid:?} has no soft score"))
                })?;
                let l = label.soft.ok_or_else(|| {
                    Error::Integrity(format!("label for {qid:?} has no soft score"))
                })?;
                (p - l).abs() <= tolerance
            }
        };
        if hit {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / label_map.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub mode: Mode,
    pub mean_a: f64,
    pub mean_b: f64,
    pub gap: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub judge_a: String,
    pub judge_b: String,
    pub rows: Vec<ConsistencyRow>,
    pub max_gap: f64,
}

/// Score the same answers under two judges and report per-mode means and the
/// largest absolute gap.
pub fn judge_consistency(
    ctx: &RunContext,
    queries: &[QueryRecord],
    records: &BTreeMap<Mode, Vec<AnswerRecord>>,
    judge_a: &str,
    judge_b: &str,
) -> Result<ConsistencyReport> {
    let template = ctx.config.template(TemplateVariant::Judge)?;
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();
    let mut rows = Vec::new();
    let mut max_gap: f64 = 0.0;
    for (&mode, mode_records) in records {
        let mut means = Vec::new();
        for judge in [judge_a, judge_b] {
            let items = score_records(ctx, &by_id, mode_records, judge, &template)?;
            let values: Vec<f64> = items.iter().filter_map(|i| i.llm).collect();
            means.push(mean(&values));
        }
        let gap = (means[0] - means[1]).abs();
        max_gap = max_gap.max(gap);
        rows.push(ConsistencyRow {
            mode,
            mean_a: means[0],
            mean_b: means[1],
            gap,
        });
    }
    Ok(ConsistencyReport {
        judge_a: judge_a.to_string(),
        judge_b: judge_b.to_string(),
        rows,
        max_gap,
    })
}

pub fn consistency_csv(report: &ConsistencyReport) -> String {
    let mut out = String::from("mode,mean_a,mean_b,gap\n");
    for r in &report.rows {
        out.push_str(&format!("{},{},{},{}\n", r.mode, r.mean_a, r.mean_b, r.gap));
    }
    out.push_str(&format!("max_gap,,,{}\n", report.max_gap));
    out
}

/// Parse a sweep grid: either `start:stop:step` or a comma-separated list.
pub fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parse_one = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::Validation(format!("bad grid value {s:?}")))
    };
    if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::Validation(format!(
                "grid {spec:?} is not start:stop:step"
            )));
        }
        let (start, stop, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if step <= 0.0 || stop < start {
            return Err(Error::Validation(format!("grid {spec:?} is not increasing")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| start + i as f64 * step).collect())
    } else {
        spec.split(',').map(parse_one).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn label(id: &str, hard: bool, soft: Option<f64>) -> BoundaryLabel {
        BoundaryLabel {
            query_id: id.into(),
            mean_score: None,
            hard,
            soft,
            epsilon_used: None,
        }
    }

    #[test]
    fn held_in_hard_counts_exact_matches() {
        let labels = vec![label("a", true, None), label("b", true, None)];
        let preds = vec![label("a", true, None), label("b", false, None)];
        let acc = held_in_accuracy(&preds, &labels, SftVariant::Hard, 0.5).unwrap();
        assert_eq!(acc, 50.0);
    }

    #[test]
    fn held_in_soft_uses_tolerance() {
        let labels = vec![label("a", true, Some(4.0))];
        let close = vec![label("a", true, Some(4.1))];
        let far = vec![label("a", true, Some(4.6))];
        assert_eq!(held_in_accuracy(&close, &labels, SftVariant::Soft, 0.5).unwrap(), 100.0);
        assert_eq!(held_in_accuracy(&far, &labels, SftVariant::Soft, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn held_in_misaligned_ids_error() {
        let labels = vec![label("a", true, None)];
        let preds = vec![label("b", true, None)];
        assert!(matches!(
            held_in_accuracy(&preds, &labels, SftVariant::Hard, 0.5),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn grid_parsing_range_and_list() {
        let grid = parse_grid("1.0:5.0:0.5").unwrap();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], 1.0);
        assert_eq!(*grid.last().unwrap(), 5.0);

        let list = parse_grid("1.0,4.5,5.01").unwrap();
        assert_eq!(list, vec![1.0, 4.5, 5.01]);

        assert!(parse_grid("5:1:1").is_err());
        assert!(parse_grid("1:5:0").is_err());
        assert!(parse_grid("a,b").is_err());
    }

    #[test]
    fn forty_one_point_grid() {
        let grid = parse_grid("1.0:5.0:0.1").unwrap();
        assert_eq!(grid.len(), 41);
    }
}
