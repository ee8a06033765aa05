//! Repeated sampling of the target model: R draws per query.
//!
//! Work fans out over (query, draw) units so interruptions land mid-query at
//! worst; each draw is cached by its own index and the checkpoint file keeps
//! completed units. Re-running a finished corpus touches the backend zero
//! times.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::QueryRecord;
use crate::error::{Error, Result};
use crate::gateway::DecodingOverrides;
use crate::run::{run_stage_units, RunContext};
use crate::template::compose_answer_message;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: u32,
    pub text: String,
    pub latency_ms: f64,
}

/// All draws for one query. Complete when `samples.len() == requested`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    pub query_id: String,
    pub samples: Vec<Sample>,
    pub requested: u32,
}

impl SampleSet {
    pub fn is_complete(&self) -> bool {
        self.samples.len() == self.requested as usize
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.samples {
            if s.index >= self.requested || !seen.insert(s.index) {
                return Err(Error::Integrity(format!(
                    "sample set {:?}: bad or duplicate index {}",
                    self.query_id, s.index
                )));
            }
        }
        Ok(())
    }
}

fn unit_id(query_id: &str, index: u32) -> String {
    format!("{query_id}#{index:05}")
}

/// Draw `requested` samples for every query with bounded parallel fan-out.
/// Returns one complete `SampleSet` per query, ordered by query id, plus
/// per-unit failures.
pub fn collect_samples(
    ctx: &RunContext,
    queries: &[QueryRecord],
    requested: u32,
    profile_name: &str,
) -> Result<(Vec<SampleSet>, BTreeMap<String, String>)> {
    if requested == 0 {
        return Err(Error::Validation("sample count must be >= 1".into()));
    }
    let dialect = ctx.config.dialect_for(profile_name)?.clone();
    let by_id: BTreeMap<&str, &QueryRecord> = queries.iter().map(|q| (q.id.as_str(), q)).collect();

    let mut units = Vec::with_capacity(queries.len() * requested as usize);
    for q in queries {
        for index in 0..requested {
            units.push((unit_id(&q.id, index), (q.id.clone(), index)));
        }
    }

    let outcome = run_stage_units(ctx, "sample", &units, |(query_id, index)| {
        let query = by_id
            .get(query_id.as_str())
            .ok_or_else(|| Error::Integrity(format!("unknown query {query_id:?}")))?;
        let message = compose_answer_message(query, None, &dialect)?;
        let response =
            ctx.gateway
                .generate(profile_name, &message, DecodingOverrides::default(), *index)?;
        Ok(Sample {
            index: *index,
            text: response.text,
            latency_ms: response.latency_ms,
        })
    })?;

    let mut grouped: BTreeMap<String, Vec<Sample>> = BTreeMap::new();
    for (uid, sample) in &outcome.results {
        let query_id = uid.rsplit_once('#').map(|(q, _)| q).unwrap_or(uid);
        grouped.entry(query_id.to_string()).or_default().push(sample.clone());
    }

    let mut sets = Vec::new();
    for (query_id, mut samples) in grouped {
        samples.sort_by_key(|s| s.index);
        let set = SampleSet {
            query_id,
            samples,
            requested,
        };
        set.validate()?;
        if set.is_complete() {
            sets.push(set);
        }
    }

    let mut failures = BTreeMap::new();
    for (uid, err) in outcome.failures {
        let query_id = uid.rsplit_once('#').map(|(q, _)| q).unwrap_or(&uid);
        failures.insert(query_id.to_string(), err);
    }
    Ok((sets, failures))
}
