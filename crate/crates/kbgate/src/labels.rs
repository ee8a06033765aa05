//! Boundary-label construction from judged means, and import of human
//! annotations.

use std::collections::BTreeSet;
use std::path::Path;

use crate::domain::{flip_score, hard_label, BoundaryLabel, ScoreScale};
use crate::error::{Error, Result};
use crate::judge::JudgedQuery;

/// One label per judged query: hard via the epsilon threshold, soft via the
/// linear flip. Output is ordered by query id.
pub fn build_labels(
    judged: &[JudgedQuery],
    epsilon: f64,
    scale: ScoreScale,
) -> Result<Vec<BoundaryLabel>> {
    scale.check(epsilon)?;
    let mut labels: Vec<BoundaryLabel> = judged
        .iter()
        .map(|jq| {
            Ok(BoundaryLabel {
                query_id: jq.query_id.clone(),
                mean_score: Some(jq.mean_score),
                hard: hard_label(jq.mean_score, epsilon, scale)?,
                soft: Some(flip_score(jq.mean_score, scale)?),
                epsilon_used: Some(epsilon),
            })
        })
        .collect::<Result<_>>()?;
    labels.sort_by(|a, b| a.query_id.cmp(&b.query_id));
    Ok(labels)
}

/// Import human annotations: CSV rows of `query_id,label` with a boolean
/// label (true = search needed). Duplicates must agree; unknown ids are
/// integrity errors. The resulting labels carry only the hard bit.
pub fn import_human_labels(path: &Path, known_ids: &BTreeSet<String>) -> Result<Vec<BoundaryLabel>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let mut seen: std::collections::BTreeMap<String, bool> = Default::default();
    for (row_index, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            Error::Ingestion(format!("{} row {}: {e}", path.display(), row_index + 2))
        })?;
        let query_id = record
            .get(0)
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse(format!("row {}: missing query_id", row_index + 2)))?
            .to_string();
        let raw = record
            .get(1)
            .map(str::trim)
            .ok_or_else(|| Error::Parse(format!("row {}: missing label", row_index + 2)))?;
        let value = match raw.to_ascii_lowercase().as_str() {
            "true" | "1" | "yes" => true,
            "false" | "0" | "no" => false,
            other => {
                return Err(Error::Parse(format!(
                    "row {}: label {other:?} is not a boolean",
                    row_index + 2
                )))
            }
        };
        if !known_ids.contains(&query_id) {
            return Err(Error::Integrity(format!(
                "human label references unknown query {query_id:?}"
            )));
        }
        match seen.insert(query_id.clone(), value) {
            Some(previous) if previous != value => {
                return Err(Error::Integrity(format!(
                    "conflicting human labels for query {query_id:?}"
                )));
            }
            _ => {}
        }
    }
    Ok(seen
        .into_iter()
        .map(|(query_id, hard)| BoundaryLabel {
            query_id,
            mean_score: None,
            hard,
            soft: None,
            epsilon_used: None,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::judge::JudgedQuery;

    fn jq(id: &str, mean: f64) -> JudgedQuery {
        JudgedQuery {
            query_id: id.into(),
            source: "mix".into(),
            scores: vec![],
            valid_count: 1,
            mean_score: mean,
        }
    }

    #[test]
    fn labels_follow_threshold_and_flip() {
        let labels = build_labels(&[jq("a", 1.86), jq("b", 4.27)], 4.0, ScoreScale::default())
            .unwrap();
        assert!(labels[0].hard);
        assert!((labels[0].soft.unwrap() - 4.14).abs() < 1e-12);
        assert!(!labels[1].hard);
        assert_eq!(labels[0].epsilon_used, Some(4.0));
    }

    #[test]
    fn perfect_mean_is_inside_with_minimal_search_need() {
        let labels = build_labels(&[jq("a", 5.0)], 4.0, ScoreScale::default()).unwrap();
        assert!(!labels[0].hard);
        assert_eq!(labels[0].soft, Some(1.0));
    }

    #[test]
    fn empty_in_empty_out() {
        assert!(build_labels(&[], 4.0, ScoreScale::default()).unwrap().is_empty());
    }

    #[test]
    fn output_sorted_by_query_id() {
        let labels =
            build_labels(&[jq("z", 3.0), jq("a", 3.0)], 4.0, ScoreScale::default()).unwrap();
        assert_eq!(labels[0].query_id, "a");
        assert_eq!(labels[1].query_id, "z");
    }

    fn write_csv(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("human.csv");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    fn ids(list: &[&str]) -> BTreeSet<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn human_import_round_trip() {
        let (_d, path) = write_csv("query_id,label\nq1,true\nq2,false\n");
        let labels = import_human_labels(&path, &ids(&["q1", "q2"])).unwrap();
        assert_eq!(labels.len(), 2);
        assert!(labels[0].hard && !labels[1].hard);
        assert!(labels[0].mean_score.is_none() && labels[0].soft.is_none());
    }

    #[test]
    fn agreeing_duplicates_dedupe_conflicts_error() {
        let (_d, path) = write_csv("query_id,label\nq1,true\nq1,true\n");
        assert_eq!(import_human_labels(&path, &ids(&["q1"])).unwrap().len(), 1);

        let (_d2, path2) = write_csv("query_id,label\nq1,true\nq1,false\n");
        let err = import_human_labels(&path2, &ids(&["q1"])).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)));
    }

    #[test]
    fn unknown_id_and_bad_boolean_rejected() {
        let (_d, path) = write_csv("query_id,label\nmystery,true\n");
        assert!(matches!(
            import_human_labels(&path, &ids(&["q1"])),
            Err(Error::Integrity(_))
        ));

        let (_d2, path2) = write_csv("query_id,label\nq1,maybe\n");
        assert!(matches!(
            import_human_labels(&path2, &ids(&["q1"])),
            Err(Error::Parse(_))
        ));
    }
}
