//! Incremental execution of a brick's pipeline.
//!
//! A stage is stale when any of these hold:
//!
//! * the lockfile has no entry for it;
//! * a dependency's current hash differs from the recorded one;
//! * a declared output is missing or was never recorded;
//! * it declares no dependencies (such stages always run);
//! * its command differs from the recorded command.
//!
//! An output whose content drifted while still present does not make its
//! producer stale; the drift reaches consumers as a changed dependency.
//! Stages with no reason of their own but a stale or blocked upstream are
//! blocked: [`repro`] re-plans them once the upstream has run and skips
//! them when the regenerated inputs came out byte-identical.

mod run;

pub use run::{commit_outputs, repro, RunOptions, RunReport, StageRun};

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::model::path::key;
use crate::model::{ContentHash, Lockfile, Manifest, ModelError, Stage, LOCK_FILE, MANIFEST_FILE};
use crate::store::{hash_path, StoreError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("{path} changed since it was locked (locked {expected}, found {})", .actual.map_or("nothing".to_string(), |h| h.to_string()))]
    HashMismatch {
        path: String,
        expected: ContentHash,
        actual: Option<ContentHash>,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> PipelineError {
    let context = context.into();
    move |source| PipelineError::Io { context, source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum StageState {
    Fresh,
    Stale,
    Blocked,
}

impl fmt::Display for StageState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fresh => "fresh",
            Self::Stale => "stale",
            Self::Blocked => "blocked",
        })
    }
}

/// Why a stage has to run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Reason {
    NotLocked,
    AlwaysRuns,
    CmdChanged {
        recorded: Option<String>,
        current: String,
    },
    DepChanged {
        path: String,
        recorded: Option<ContentHash>,
        current: Option<ContentHash>,
    },
    OutMissing {
        path: String,
        recorded: Option<ContentHash>,
        current: Option<ContentHash>,
    },
    /// Only reported for blocked stages.
    Upstream { stage: String },
}

fn show(hash: &Option<ContentHash>) -> String {
    hash.map_or_else(|| "absent".to_string(), |h| h.to_string())
}

impl fmt::Display for Reason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NotLocked => f.write_str("no lock entry"),
            Self::AlwaysRuns => f.write_str("no dependencies; always runs"),
            Self::CmdChanged { .. } => f.write_str("command changed"),
            Self::DepChanged { path, recorded, current } => {
                write!(f, "dep {path}: {} -> {}", show(recorded), show(current))
            }
            Self::OutMissing { path, recorded, current } => {
                write!(f, "out {path}: {} -> {}", show(recorded), show(current))
            }
            Self::Upstream { stage } => write!(f, "waits on {stage}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StageStatus {
    pub stage: String,
    pub state: StageState,
    pub reasons: Vec<Reason>,
}

/// Current hashes of workspace paths, each computed at most once.
#[derive(Debug)]
pub struct HashMemo {
    workdir: PathBuf,
    known: HashMap<String, Option<(ContentHash, u64)>>,
    computed: usize,
}

impl HashMemo {
    pub fn new(workdir: &Path) -> Self {
        Self {
            workdir: workdir.to_path_buf(),
            known: HashMap::new(),
            computed: 0,
        }
    }

    pub fn get(&mut self, path: &str) -> Result<Option<(ContentHash, u64)>> {
        let k = key(path);
        if let Some(v) = self.known.get(k) {
            return Ok(*v);
        }
        let v = hash_path(&self.workdir.join(k))?;
        self.computed += 1;
        self.known.insert(k.to_string(), v);
        Ok(v)
    }

    /// Drops cached values at or below `path`, and any directory above it.
    pub fn forget(&mut self, path: &str) {
        self.known
            .retain(|k, _| !crate::model::paths_overlap(k, path));
    }

    /// Number of hash computations performed so far.
    pub fn computed(&self) -> usize {
        self.computed
    }
}

/// A stage's own reasons to run, ignoring upstream state.
pub fn stage_reasons(stage: &Stage, lock: &Lockfile, memo: &mut HashMemo) -> Result<Vec<Reason>> {
    let mut reasons = Vec::new();
    let Some(locked) = lock.stage(&stage.name) else {
        reasons.push(Reason::NotLocked);
        return Ok(reasons);
    };
    if stage.always_runs() {
        reasons.push(Reason::AlwaysRuns);
    }
    if locked.cmd.as_deref() != Some(stage.cmd.as_str()) {
        reasons.push(Reason::CmdChanged {
            recorded: locked.cmd.clone(),
            current: stage.cmd.clone(),
        });
    }
    for dep in &stage.deps {
        let recorded = locked.dep(dep).map(|r| r.hash);
        let current = memo.get(dep)?.map(|(h, _)| h);
        if recorded.is_none() || recorded != current {
            reasons.push(Reason::DepChanged {
                path: key(dep).to_string(),
                recorded,
                current,
            });
        }
    }
    for out in &stage.outs {
        let recorded = locked.out(out).map(|r| r.hash);
        let current = memo.get(out)?.map(|(h, _)| h);
        if recorded.is_none() || current.is_none() {
            reasons.push(Reason::OutMissing {
                path: key(out).to_string(),
                recorded,
                current,
            });
        }
    }
    Ok(reasons)
}

/// Status of every stage in topological order.
pub fn plan(workdir: &Path, manifest: &Manifest, lock: Option<&Lockfile>) -> Result<Vec<StageStatus>> {
    let empty = Lockfile::new();
    let lock = lock.unwrap_or(&empty);
    let mut memo = HashMemo::new(workdir);
    let order = manifest.topo_order()?;
    let mut states: HashMap<&str, StageState> = HashMap::new();
    let mut out = Vec::with_capacity(order.len());
    for stage in order {
        let mut reasons = stage_reasons(stage, lock, &mut memo)?;
        let state = if !reasons.is_empty() {
            StageState::Stale
        } else if let Some(up) = manifest
            .upstream(&stage.name)
            .into_iter()
            .find(|u| states.get(u) != Some(&StageState::Fresh))
        {
            reasons.push(Reason::Upstream { stage: up.to_string() });
            StageState::Blocked
        } else {
            StageState::Fresh
        };
        states.insert(&stage.name, state);
        out.push(StageStatus {
            stage: stage.name.clone(),
            state,
            reasons,
        });
    }
    Ok(out)
}

/// Reads `brick.yaml` and, if present, `brick.lock` from a workspace.
pub fn load_workspace(workdir: &Path) -> Result<(Manifest, Option<Lockfile>)> {
    let manifest_path = workdir.join(MANIFEST_FILE);
    let bytes = fs::read(&manifest_path).map_err(io_err(format!("reading {}", manifest_path.display())))?;
    let manifest = Manifest::parse(&bytes)?;
    let lock_path = workdir.join(LOCK_FILE);
    let lock = match fs::read(&lock_path) {
        Ok(bytes) => Some(Lockfile::parse(&bytes)?),
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(io_err(format!("reading {}", lock_path.display()))(e)),
    };
    Ok((manifest, lock))
}

/// Writes `brick.lock` via a temp file and rename.
pub fn write_lock(workdir: &Path, lock: &Lockfile) -> Result<()> {
    let path = workdir.join(LOCK_FILE);
    let tmp = workdir.join(format!(".{LOCK_FILE}.tmp"));
    fs::write(&tmp, lock.to_yaml()).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, &path).map_err(io_err(format!("writing {}", path.display())))
}
