//! Brick-defining file formats and the coordinates used to name bricks.
//!
//! A brick is described by three text files that live in its repository:
//!
//! * `brick.yaml`: the [`Manifest`], a list of pipeline stages;
//! * `brick.lock`: the [`Lockfile`], recorded hashes of every stage's
//!   dependencies and outputs;
//! * `.bb/dependencies.txt`: the [`DependencySet`] of pinned upstream bricks.
//!
//! All parsers here are pure functions over byte buffers.

mod brick_ref;
mod deps;
mod hash;
mod lockfile;
mod manifest;
pub(crate) mod path;
mod yaml;

pub use brick_ref::{BrickRef, CommitSpec, DEFAULT_ORG, MIN_PREFIX_LEN};
pub use deps::{DependencyEntry, DependencySet, Upsert};
pub use hash::ContentHash;
pub use lockfile::{LockRecord, LockStage, Lockfile};
pub use manifest::{Manifest, Stage};
pub use path::{is_under, paths_overlap};

/// File name of the pipeline manifest inside a brick repository.
pub const MANIFEST_FILE: &str = "brick.yaml";
/// File name of the lockfile inside a brick repository.
pub const LOCK_FILE: &str = "brick.lock";
/// Location of the dependency pins, relative to a brick repository.
pub const DEPENDENCIES_FILE: &str = ".bb/dependencies.txt";
/// Directory holding distributable artifacts.
pub const PAYLOAD_DIR: &str = "brick";

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("malformed brick reference {input:?}: {reason}")]
    MalformedRef { input: String, reason: String },

    #[error("syntax error: {0}")]
    Syntax(String),

    #[error("dependency cycle between stages: {}", .0.join(" -> "))]
    Cycle(Vec<String>),

    #[error("output {path:?} is claimed by both stage {first:?} and stage {second:?}")]
    DuplicateOutput {
        path: String,
        first: String,
        second: String,
    },

    #[error("bad content hash {0:?}")]
    BadHash(String),

    #[error("invalid path {path:?}: {reason}")]
    InvalidPath { path: String, reason: &'static str },

    #[error("invalid stage {stage:?}: {reason}")]
    InvalidStage { stage: String, reason: String },

    #[error("{0} is listed more than once")]
    DuplicateEntry(String),

    #[error("{brick} is not pinned to a full 40-hex commit (got {commit:?})")]
    UnpinnedEntry { brick: String, commit: String },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
