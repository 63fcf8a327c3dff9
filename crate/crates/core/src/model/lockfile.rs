use std::fmt::Write as _;

use indexmap::IndexMap;
use serde::Deserialize;

use super::path;
use super::yaml::{scalar, syntax, utf8};
use super::{ContentHash, Result};

/// Recorded hash and size of one dependency or output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockRecord {
    /// Workspace-relative path, without a trailing `/`.
    pub path: String,
    pub hash: ContentHash,
    /// File size, or total size of all files for a directory.
    pub size: u64,
}

impl LockRecord {
    pub fn new(path: &str, hash: ContentHash, size: u64) -> Result<Self> {
        Ok(Self {
            path: path::key(&path::normalize(path)?).to_string(),
            hash,
            size,
        })
    }
}

/// What the last successful run of a stage consumed and produced.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LockStage {
    /// Command that produced the outputs; `None` in hand-written locks.
    pub cmd: Option<String>,
    pub deps: Vec<LockRecord>,
    pub outs: Vec<LockRecord>,
}

impl LockStage {
    pub fn dep(&self, path: &str) -> Option<&LockRecord> {
        let key = path::key(path);
        self.deps.iter().find(|r| r.path == key)
    }

    pub fn out(&self, path: &str) -> Option<&LockRecord> {
        let key = path::key(path);
        self.outs.iter().find(|r| r.path == key)
    }
}

/// Recorded hashes for every stage of a pipeline. Its `brick/` outputs are
/// the brick's distributable assets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Lockfile {
    stages: IndexMap<String, LockStage>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLock {
    stages: Option<IndexMap<String, Option<RawLockStage>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLockStage {
    cmd: Option<String>,
    #[serde(default)]
    deps: Option<Vec<RawRecord>>,
    #[serde(default)]
    outs: Option<Vec<RawRecord>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    path: String,
    md5: String,
    size: u64,
}

impl Lockfile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = utf8(bytes)?;
        let raw: RawLock = serde_yaml::from_str(text).map_err(syntax)?;
        let mut stages = IndexMap::new();
        for (name, raw_stage) in raw.stages.unwrap_or_default() {
            let raw_stage = raw_stage.unwrap_or(RawLockStage {
                cmd: None,
                deps: None,
                outs: None,
            });
            let records = |list: Option<Vec<RawRecord>>| -> Result<Vec<LockRecord>> {
                list.unwrap_or_default()
                    .into_iter()
                    .map(|r| LockRecord::new(&r.path, r.md5.parse()?, r.size))
                    .collect()
            };
            let stage = LockStage {
                cmd: raw_stage.cmd,
                deps: records(raw_stage.deps)?,
                outs: records(raw_stage.outs)?,
            };
            stages.insert(name, stage);
        }
        Ok(Self { stages })
    }

    /// Canonical text form; `parse(to_yaml(l)) == l`.
    pub fn to_yaml(&self) -> String {
        if self.stages.is_empty() {
            return "stages: {}\n".to_string();
        }
        let mut out = String::from("stages:\n");
        for (name, stage) in &self.stages {
            if stage.cmd.is_none() && stage.deps.is_empty() && stage.outs.is_empty() {
                let _ = writeln!(out, "  {}: {{}}", scalar(name));
                continue;
            }
            let _ = writeln!(out, "  {}:", scalar(name));
            if let Some(cmd) = &stage.cmd {
                let _ = writeln!(out, "    cmd: {}", scalar(cmd));
            }
            for (key, list) in [("deps", &stage.deps), ("outs", &stage.outs)] {
                if list.is_empty() {
                    continue;
                }
                let _ = writeln!(out, "    {key}:");
                for r in list {
                    let _ = writeln!(out, "    - path: {}", scalar(&r.path));
                    let _ = writeln!(out, "      md5: {}", scalar(&r.hash.to_string()));
                    let _ = writeln!(out, "      size: {}", r.size);
                }
            }
        }
        out
    }

    pub fn stage(&self, name: &str) -> Option<&LockStage> {
        self.stages.get(name)
    }

    pub fn stages(&self) -> impl Iterator<Item = (&str, &LockStage)> {
        self.stages.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.stages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    /// Inserts or replaces the entry for `name`, keeping its position.
    pub fn set_stage(&mut self, name: &str, stage: LockStage) {
        self.stages.insert(name.to_string(), stage);
    }

    pub fn remove_stage(&mut self, name: &str) -> Option<LockStage> {
        self.stages.shift_remove(name)
    }

    /// Reorders entries to follow `order`; names not listed keep their
    /// relative order at the end.
    pub fn sort_by_order<'a>(&mut self, order: impl IntoIterator<Item = &'a str>) {
        let rank: IndexMap<&str, usize> = order.into_iter().enumerate().map(|(i, n)| (n, i)).collect();
        let mut entries: Vec<(String, LockStage)> = self.stages.drain(..).collect();
        entries.sort_by_key(|(name, _)| rank.get(name.as_str()).copied().unwrap_or(usize::MAX));
        self.stages = entries.into_iter().collect();
    }

    /// Every recorded output, in stage then declaration order.
    pub fn outs(&self) -> impl Iterator<Item = (&str, &LockRecord)> {
        self.stages
            .iter()
            .flat_map(|(name, s)| s.outs.iter().map(move |r| (name.as_str(), r)))
    }

    /// Outputs under the `brick/` payload directory.
    pub fn payload_outs(&self) -> impl Iterator<Item = &LockRecord> {
        self.outs()
            .map(|(_, r)| r)
            .filter(|r| path::is_under(&r.path, super::PAYLOAD_DIR))
    }
}
