//! Stage execution: checkpointed, resumable, parallel unit processing.
//!
//! A stage is a set of independent units keyed by id. Each completed unit is
//! appended to the stage's checkpoint file before the stage finalizes, so an
//! interrupted run can reload finished units and schedule only the missing
//! ones. Unit results are folded back in id order, which keeps final outputs
//! independent of scheduling.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::gateway::Gateway;
use crate::par;
use crate::runstore::RunStore;

/// Everything a stage needs: configuration, the gateway, the store, and the
/// execution knobs.
pub struct RunContext {
    pub config: Config,
    pub gateway: Arc<Gateway>,
    pub store: RunStore,
    pub parallelism: usize,
    pub resume: bool,
    /// Fault injection for tests: stop after scheduling this many new units,
    /// leaving the stage interrupted but checkpointed.
    pub unit_limit: Option<usize>,
}

impl RunContext {
    pub fn new(config: Config, run_dir: &Path, mock: bool) -> Result<Self> {
        let store = RunStore::open(run_dir, &config.hash(), crate::TOOL_VERSION)?;
        let gateway = Arc::new(Gateway::new(
            config.profiles.clone(),
            config.retry.clone(),
            Some(&store.gen_cache_dir()),
            Some(&store.call_log_path()),
            mock,
        )?);
        let parallelism = config.defaults.parallelism.max(1);
        Ok(Self {
            config,
            gateway,
            store,
            parallelism,
            resume: false,
            unit_limit: None,
        })
    }
}

/// Digest of a stage's own parameters; stages with different parameters
/// checkpoint and no-op independently.
pub fn params_hash<T: Serialize>(params: &T) -> String {
    let bytes = serde_json::to_vec(params).expect("params serialize");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointLine<R> {
    uid: String,
    ok: Option<R>,
    err: Option<String>,
}

#[derive(Debug)]
pub struct StageOutcome<R> {
    /// Successful unit results keyed by unit id.
    pub results: BTreeMap<String, R>,
    /// Units that failed in the final pass, keyed by unit id.
    pub failures: BTreeMap<String, String>,
    /// How many units were served from checkpoints instead of recomputed.
    pub reused: usize,
}

/// Run `worker` over every unit not already checkpointed. Checkpoint lines
/// are flushed per unit; corrupt lines are quarantined and their units
/// rescheduled; previously failed units are retried.
pub fn run_stage_units<U, R, F>(
    ctx: &RunContext,
    stage: &str,
    units: &[(String, U)],
    worker: F,
) -> Result<StageOutcome<R>>
where
    U: Sync,
    R: Serialize + DeserializeOwned + Clone + Send,
    F: Fn(&U) -> Result<R> + Sync,
{
    let ck_path = ctx.store.checkpoint_path(stage);
    let mut done: BTreeMap<String, R> = BTreeMap::new();
    let known: std::collections::BTreeSet<&str> =
        units.iter().map(|(uid, _)| uid.as_str()).collect();

    if ck_path.exists() {
        let text = std::fs::read_to_string(&ck_path).map_err(Error::io(&ck_path))?;
        let mut quarantined = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<CheckpointLine<R>>(line) {
                Ok(rec) if known.contains(rec.uid.as_str()) => {
                    if let Some(result) = rec.ok {
                        done.insert(rec.uid, result);
                    }
                    // err lines fall through: the unit is rescheduled.
                }
                Ok(_) => {} // checkpoint from a different unit set; ignore
                Err(e) => quarantined.push(format!("line {}: {e}: {line}", lineno + 1)),
            }
        }
        if !quarantined.is_empty() {
            let qpath = ctx.store.quarantine_path(stage);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&qpath)
                .map_err(Error::io(&qpath))?;
            for q in &quarantined {
                writeln!(f, "{q}").map_err(Error::io(&qpath))?;
            }
            log::warn!(
                "stage {stage}: quarantined {} corrupt checkpoint line(s); units rescheduled",
                quarantined.len()
            );
        }
    }

    let reused = done.len();
    let mut missing: Vec<&(String, U)> = units
        .iter()
        .filter(|(uid, _)| !done.contains_key(uid))
        .collect();
    missing.sort_by(|a, b| a.0.cmp(&b.0));

    let interrupted = match ctx.unit_limit {
        Some(limit) if missing.len() > limit => {
            missing.truncate(limit);
            true
        }
        _ => false,
    };

    let ck_file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&ck_path)
        .map_err(Error::io(&ck_path))?;
    let writer = Mutex::new(std::io::BufWriter::new(ck_file));

    let outcomes: Vec<(String, Result<R>)> = par::map_units(ctx.parallelism, &missing, |(uid, unit)| {
        let result = worker(unit);
        let line = match &result {
            Ok(r) => CheckpointLine {
                uid: uid.clone(),
                ok: Some(r.clone()),
                err: None,
            },
            Err(e) => CheckpointLine {
                uid: uid.clone(),
                ok: None,
                err: Some(e.to_string()),
            },
        };
        if let Ok(json) = serde_json::to_string(&line) {
            let mut w = writer.lock().expect("checkpoint writer");
            let _ = writeln!(w, "{json}");
            let _ = w.flush();
        }
        (uid.clone(), result)
    });

    let mut failures = BTreeMap::new();
    for (uid, result) in outcomes {
        match result {
            Ok(r) => {
                done.insert(uid, r);
            }
            Err(e) => {
                failures.insert(uid, e.to_string());
            }
        }
    }

    if interrupted {
        return Err(Error::Interrupted {
            completed: done.len(),
        });
    }

    Ok(StageOutcome {
        results: done,
        failures,
        reused,
    })
}
