//! Per-source statistics over judged queries: count, mean of means,
//! population standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::judge::JudgedQuery;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceStats {
    pub source: String,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

/// Group judged queries by source and compute (count, mean, population std)
/// of the per-query mean scores. Rows come back sorted by source.
pub fn dataset_stats(judged: &[JudgedQuery]) -> Result<Vec<SourceStats>> {
    if judged.is_empty() {
        return Err(Error::Validation("no judged queries to summarize".into()));
    }
    let mut by_source: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    for jq in judged {
        by_source
            .entry(jq.source.clone())
            .or_default()
            .push(jq.mean_score);
    }
    Ok(by_source
        .into_iter()
        .map(|(source, means)| {
            let count = means.len();
            let mean = means.iter().sum::<f64>() / count as f64;
            let var = means.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / count as f64;
            SourceStats {
                source,
                count,
                mean,
                std: var.sqrt(),
            }
        })
        .collect())
}

/// CSV with full-precision values: `source,count,mean,std`.
pub fn stats_csv(rows: &[SourceStats]) -> String {
    let mut out = String::from("source,count,mean,std\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.source, r.count, r.mean, r.std));
    }
    out
}

/// Aligned text table in the shape count / mean ± std per source.
pub fn stats_table(rows: &[SourceStats]) -> String {
    let name_width = rows
        .iter()
        .map(|r| r.source.len())
        .chain(std::iter::once("Source".len()))
        .max()
        .unwrap_or(6);
    let mut out = format!(
        "{:<name_width$}  {:>8}  {:>18}\n",
        "Source", "Samples", "Avg. Score ± Std"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<name_width$}  {:>8}  {:>11.2} ± {:.2}\n",
            r.source, r.count, r.mean, r.std
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgedQuery;

    fn jq(id: &str, source: &str, mean: f64) -> JudgedQuery {
        JudgedQuery {
            query_id: id.into(),
            source: source.into(),
            scores: vec![],
            valid_count: 1,
            mean_score: mean,
        }
    }

    #[test]
    fn population_std_of_one_two_three() {
        let rows = dataset_stats(&[jq("a", "s", 1.0), jq("b", "s", 2.0), jq("c", "s", 3.0)])
            .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].count, 3);
        assert!((rows[0].mean - 2.0).abs() < 1e-12);
        assert!((rows[0].std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((rows[0].std - 0.8165).abs() < 1e-4);
    }

    #[test]
    fn single_query_has_zero_std() {
        let rows = dataset_stats(&[jq("a", "s", 4.2)]).unwrap();
        assert_eq!(rows[0].std, 0.0);
    }

    #[test]
    fn two_sources_two_rows_with_matching_counts() {
        let rows = dataset_stats(&[
            jq("a", "beta", 1.0),
            jq("b", "alpha", 2.0),
            jq("c", "alpha", 3.0),
        ])
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].source, "alpha");
        assert_eq!(rows[0].count, 2);
        assert_eq!(rows[1].source, "beta");
        assert_eq!(rows[1].count, 1);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(dataset_stats(&[]).is_err());
    }

    #[test]
    fn csv_and_table_shapes() {
        let rows = dataset_stats(&[jq("a", "s", 3.7)]).unwrap();
        let csv = stats_csv(&rows);
        assert!(csv.starts_with("source,count,mean,std\n"));
        assert!(csv.contains("s,1,3.7,0\n"));
        let table = stats_table(&rows);
        assert!(table.contains("Avg. Score ± Std"));
        assert!(table.contains("3.70 ± 0.00"));
    }
}
