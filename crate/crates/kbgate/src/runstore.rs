//! Persistent run store: manifest, caches, checkpoints, outputs.
//!
//! One directory per run. The manifest is an append-only JSONL of events;
//! every output file it references carries a digest. A lock file keeps the
//! store single-coordinator. Resuming demands the same effective config —
//! anything else silently mixes regimes, so it is refused.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEvent {
    pub run_id: String,
    pub ts: String,
    pub tool_version: String,
    pub event: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Digest over the stage's own parameters (epsilon, R, variant, ...).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template_hashes: Option<std::collections::BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<FileDigest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    /// Never started under these parameters.
    Fresh,
    /// Started but not completed: checkpoints may exist.
    Interrupted,
    /// Completed with identical parameters and inputs: re-running is a no-op.
    Complete,
}

#[derive(Debug)]
struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    run_id: String,
    config_hash: String,
    tool_version: String,
    _lock: LockGuard,
}

impl RunStore {
    /// Open (or create) a run directory. An existing manifest must carry the
    /// same config hash; otherwise the store refuses and demands a new
    /// directory.
    pub fn open(root: &Path, config_hash: &str, tool_version: &str) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(Error::io(root))?;
        for sub in ["cache/gen", "cache/search", "checkpoints"] {
            let dir = root.join(sub);
            std::fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        }

        let lock_path = root.join("lock");
        match OpenOptions::new().write(true).create_new(true).open(&lock_path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::RunStore(format!(
                    "{} is locked by another coordinator (remove {} if that process is gone)",
                    root.display(),
                    lock_path.display()
                )));
            }
            Err(e) => return Err(Error::io(&lock_path)(e)),
        }
        let lock = LockGuard { path: lock_path };

        let manifest = root.join("manifest.jsonl");
        let run_id = if manifest.exists() {
            let events: Vec<ManifestEvent> = jsonl::read_file(&manifest)?;
            let created = events
                .first()
                .ok_or_else(|| Error::RunStore("manifest exists but is empty".into()))?;
            if created.config_hash != config_hash {
                return Err(Error::RunStore(format!(
                    "config hash changed ({} -> {}); refusing to reuse {} — use a new run dir",
                    &created.config_hash[..12.min(created.config_hash.len())],
                    &config_hash[..12],
                    root.display()
                )));
            }
            created.run_id.clone()
        } else {
            use sha2::{Digest, Sha256};
            let ts = chrono::Utc::now().to_rfc3339();
            let run_id = hex::encode(&Sha256::digest(format!("{config_hash}:{ts}").as_bytes())[..8]);
            let store = RunStore {
                root: root.to_path_buf(),
                run_id: run_id.clone(),
                config_hash: config_hash.to_string(),
                tool_version: tool_version.to_string(),
                _lock: lock,
            };
            store.append_event(ManifestEvent {
                run_id: run_id.clone(),
                ts,
                tool_version: tool_version.to_string(),
                event: "run_created".into(),
                config_hash: config_hash.to_string(),
                stage: None,
                params_hash: None,
                template_hashes: None,
                profiles: vec![],
                inputs: vec![],
                outputs: vec![],
                note: None,
            })?;
            return Ok(store);
        };

        Ok(RunStore {
            root: root.to_path_buf(),
            run_id,
            config_hash: config_hash.to_string(),
            tool_version: tool_version.to_string(),
            _lock: lock,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn gen_cache_dir(&self) -> PathBuf {
        self.root.join("cache/gen")
    }

    pub fn search_cache_dir(&self) -> PathBuf {
        self.root.join("cache/search")
    }

    pub fn call_log_path(&self) -> PathBuf {
        self.root.join("calls.jsonl")
    }

    pub fn checkpoint_path(&self, stage: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.jsonl"))
    }

    pub fn quarantine_path(&self, stage: &str) -> PathBuf {
        self.root
            .join("checkpoints")
            .join(format!("{stage}.quarantine"))
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    fn append_event(&self, event: ManifestEvent) -> Result<()> {
        let path = self.manifest_path();
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(Error::io(&path))?;
        let line = serde_json::to_string(&event)?;
        writeln!(file, "{line}").map_err(Error::io(&path))?;
        Ok(())
    }

    pub fn events(&self) -> Result<Vec<ManifestEvent>> {
        jsonl::read_file(&self.manifest_path())
    }

    fn event(&self, kind: &str, stage: &str) -> ManifestEvent {
        ManifestEvent {
            run_id: self.run_id.clone(),
            ts: chrono::Utc::now().to_rfc3339(),
            tool_version: self.tool_version.clone(),
            event: kind.into(),
            config_hash: self.config_hash.clone(),
            stage: Some(stage.to_string()),
            params_hash: None,
            template_hashes: None,
            profiles: vec![],
            inputs: vec![],
            outputs: vec![],
            note: None,
        }
    }

    pub fn stage_started(
        &self,
        stage: &str,
        params_hash: &str,
        template_hashes: std::collections::BTreeMap<String, String>,
        profiles: Vec<String>,
        inputs: Vec<FileDigest>,
    ) -> Result<()> {
        let mut ev = self.event("stage_started", stage);
        ev.params_hash = Some(params_hash.to_string());
        ev.template_hashes = Some(template_hashes);
        ev.profiles = profiles;
        ev.inputs = inputs;
        self.append_event(ev)
    }

    pub fn stage_completed(
        &self,
        stage: &str,
        params_hash: &str,
        inputs: Vec<FileDigest>,
        outputs: Vec<FileDigest>,
        note: Option<String>,
    ) -> Result<()> {
        let mut ev = self.event("stage_completed", stage);
        ev.params_hash = Some(params_hash.to_string());
        ev.inputs = inputs;
        ev.outputs = outputs;
        ev.note = note;
        self.append_event(ev)
    }

    /// Where a stage stands for the given parameters and inputs. A completed
    /// run also requires its recorded outputs to still exist on disk.
    pub fn stage_status(
        &self,
        stage: &str,
        params_hash: &str,
        inputs: &[FileDigest],
    ) -> Result<StageStatus> {
        let events = self.events()?;
        let mut status = StageStatus::Fresh;
        for ev in &events {
            if ev.stage.as_deref() != Some(stage) || ev.params_hash.as_deref() != Some(params_hash)
            {
                continue;
            }
            match ev.event.as_str() {
                "stage_started" if ev.inputs == inputs => {
                    if status != StageStatus::Complete {
                        status = StageStatus::Interrupted;
                    }
                }
                "stage_completed" if ev.inputs == inputs => {
                    let all_present = ev
                        .outputs
                        .iter()
                        .all(|o| self.root.join(&o.path).exists());
                    if all_present {
                        status = StageStatus::Complete;
                    }
                }
                _ => {}
            }
        }
        Ok(status)
    }

    /// Write a final output file and return its manifest entry.
    pub fn write_output_bytes(&self, name: &str, bytes: &[u8]) -> Result<FileDigest> {
        let path = self.output_path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(Error::io(parent))?;
        }
        jsonl::write_bytes(&path, bytes)?;
        Ok(FileDigest {
            path: name.to_string(),
            sha256: jsonl::sha256_file(&path)?,
        })
    }

    pub fn write_output_jsonl<T: Serialize>(&self, name: &str, rows: &[T]) -> Result<FileDigest> {
        let mut buf = Vec::new();
        for row in rows {
            serde_json::to_writer(&mut buf, row)?;
            buf.push(b'\n');
        }
        self.write_output_bytes(name, &buf)
    }
}

pub fn file_digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: jsonl::sha256_file(path)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "abc", "0.1.0").unwrap();
        let err = RunStore::open(dir.path(), "abc", "0.1.0").unwrap_err();
        assert!(matches!(err, Error::RunStore(_)));
        drop(store);
        RunStore::open(dir.path(), "abc", "0.1.0").unwrap();
    }

    #[test]
    fn config_change_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        drop(RunStore::open(dir.path(), "abc", "0.1.0").unwrap());
        let err = RunStore::open(dir.path(), "different", "0.1.0").unwrap_err();
        assert!(err.to_string().contains("config hash changed"));
    }

    #[test]
    fn stage_lifecycle_statuses() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path(), "abc", "0.1.0").unwrap();
        let inputs = vec![FileDigest {
            path: "q.jsonl".into(),
            sha256: "x".into(),
        }];
        assert_eq!(
            store.stage_status("sample", "p1", &inputs).unwrap(),
            StageStatus::Fresh
        );
        store
            .stage_started("sample", "p1", Default::default(), vec![], inputs.clone())
            .unwrap();
        assert_eq!(
            store.stage_status("sample", "p1", &inputs).unwrap(),
            StageStatus::Interrupted
        );
        let out = store.write_output_bytes("samples.jsonl", b"{}\n").unwrap();
        store
            .stage_completed("sample", "p1", inputs.clone(), vec![out], None)
            .unwrap();
        assert_eq!(
            store.stage_status("sample", "p1", &inputs).unwrap(),
            StageStatus::Complete
        );
        // Different parameters: fresh again.
        assert_eq!(
            store.stage_status("sample", "p2", &inputs).unwrap(),
            StageStatus::Fresh
        );
    }
}
