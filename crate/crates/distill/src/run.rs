//! Run directories: `<out>/<run_id>/` holding the manifest, the config,
//! one file per completed epoch, the response cache and the reports.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use distill_core::{EngineError, EpochRecord, EpochSink, RunConfig, TaskSpec};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::json::{read_json, write_json};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.json";
pub const EPOCHS: &str = "epochs";
pub const CACHE: &str = "cache";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const BASELINES: &str = "baselines.json";
pub const LOCK: &str = "run.lock";

/// The single JSON document read by `optimize` and `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigFile {
    pub task: TaskSpec,
    #[serde(default)]
    pub config: RunConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub config: RunConfig,
    pub task: TaskSpec,
    pub status: RunStatus,
    pub completed_epochs: u32,
    /// Dataset the run was started on, as given on the command line.
    pub data_path: String,
    /// FNV-1a of the dataset bytes; resume refuses a changed file.
    pub data_fingerprint: String,
    #[serde(default)]
    pub error: Option<String>,
}

/// Few-shot baseline persisted next to the epochs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FewShotBaseline {
    pub n: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    #[serde(default)]
    pub few_shot: Option<FewShotBaseline>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("{path} is not a run directory: {reason}")]
    NotARun { path: String, reason: String },
    #[error("corrupt run directory {path}: {reason}")]
    Corrupt { path: String, reason: String },
    #[error("run directory {0} is locked by another process (remove {LOCK} if that process is gone)")]
    Locked(String),
}

pub fn fingerprint(bytes: &[u8]) -> String {
    format!("{:016x}", distill_core::sampling::fnv1a(bytes))
}

/// UTC timestamp plus a short random suffix.
pub fn new_run_id() -> String {
    let suffix: u32 = rand::rng().random();
    format!("{}-{:06x}", chrono::Utc::now().format("%Y%m%dT%H%M%SZ"), suffix & 0xff_ffff)
}

pub fn now_rfc3339() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `<parent>/<run_id>/` with its config, an initial manifest
    /// and the epochs directory.
    pub fn create(parent: &Path, manifest: &RunManifest) -> Result<Self, RunError> {
        let root = parent.join(&manifest.run_id);
        fs::create_dir_all(parent)?;
        fs::create_dir(&root)?;
        fs::create_dir(root.join(EPOCHS))?;
        let dir = Self { root };
        write_json(
            &dir.path(CONFIG),
            &ConfigFile {
                task: manifest.task.clone(),
                config: manifest.config.clone(),
            },
        )?;
        dir.write_manifest(manifest)?;
        Ok(dir)
    }

    pub fn open(root: &Path) -> Result<Self, RunError> {
        if !root.join(MANIFEST).is_file() {
            return Err(RunError::NotARun {
                path: root.display().to_string(),
                reason: format!("{MANIFEST} is missing"),
            });
        }
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn epoch_path(&self, epoch: u32) -> PathBuf {
        self.root.join(EPOCHS).join(format!("epoch_{epoch}.json"))
    }

    fn corrupt(&self, reason: String) -> RunError {
        RunError::Corrupt {
            path: self.root.display().to_string(),
            reason,
        }
    }

    pub fn read_manifest(&self) -> Result<RunManifest, RunError> {
        read_json(&self.path(MANIFEST)).map_err(|e| self.corrupt(e))
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), RunError> {
        Ok(write_json(&self.path(MANIFEST), manifest)?)
    }

    pub fn write_epoch(&self, record: &EpochRecord) -> Result<(), RunError> {
        Ok(write_json(&self.epoch_path(record.epoch), record)?)
    }

    /// Epochs `1..=n`, each of which must exist and carry its own number.
    pub fn read_epochs(&self, n: u32) -> Result<Vec<EpochRecord>, RunError> {
        (1..=n)
            .map(|k| {
                let p = self.epoch_path(k);
                if !p.is_file() {
                    return Err(self.corrupt(format!("epochs/epoch_{k}.json is missing")));
                }
                let rec: EpochRecord = read_json(&p).map_err(|e| self.corrupt(e))?;
                if rec.epoch != k {
                    return Err(self.corrupt(format!("epochs/epoch_{k}.json holds epoch {}", rec.epoch)));
                }
                Ok(rec)
            })
            .collect()
    }

    pub fn read_baselines(&self) -> Result<Baselines, RunError> {
        let p = self.path(BASELINES);
        if !p.is_file() {
            return Ok(Baselines::default());
        }
        read_json(&p).map_err(|e| self.corrupt(e))
    }

    pub fn write_baselines(&self, b: &Baselines) -> Result<(), RunError> {
        Ok(write_json(&self.path(BASELINES), b)?)
    }

    /// Takes the writer lock; it is released when the guard drops.
    pub fn lock(&self) -> Result<RunLock, RunError> {
        let path = self.path(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(RunError::Locked(self.root.display().to_string())),
            Err(e) => Err(e.into()),
        }
    }
}

#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Persists each epoch and its manifest update, then decides whether the
/// run may continue.
pub struct RunSink<'a> {
    pub dir: &'a RunDir,
    pub manifest: &'a mut RunManifest,
    /// Stop cleanly once this many epochs are on disk.
    pub stop_after: Option<u32>,
    pub interrupted: &'a AtomicBool,
}

impl EpochSink for RunSink<'_> {
    fn epoch_completed(&mut self, record: &EpochRecord) -> Result<(), EngineError> {
        let sink = |e: RunError| EngineError::Sink(e.to_string());
        self.dir.write_epoch(record).map_err(sink)?;
        self.manifest.completed_epochs = record.epoch;
        self.dir.write_manifest(self.manifest).map_err(sink)?;
        let stop = self.stop_after.is_some_and(|k| record.epoch >= k);
        if (stop || self.interrupted.load(Ordering::SeqCst)) && record.epoch < self.manifest.config.epochs {
            return Err(EngineError::Halted(record.epoch));
        }
        Ok(())
    }
}
