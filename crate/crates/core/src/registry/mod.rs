//! Brick distribution over HTTP.
//!
//! Wire protocol (every request carries `Authorization: Bearer <token>`):
//!
//! | method | path                                     | body / response                  |
//! |--------|------------------------------------------|----------------------------------|
//! | GET    | `/api/{org}/{name}/commits`              | JSON list of [`CommitInfo`]      |
//! | POST   | `/api/{org}/{name}/commits`              | snapshot tar in, `CommitInfo` out|
//! | GET    | `/api/{org}/{name}/{commit}/snapshot.tar`| snapshot tar                     |
//! | GET    | `/api/{org}/{name}/{commit}/lock`        | the commit's `brick.lock`        |
//! | GET    | `/blobs/{hash}`                          | blob bytes                       |
//! | PUT    | `/blobs/{hash}`                          | blob bytes in                    |
//!
//! Blob and snapshot responses carry an `X-Content-MD5` header with the hex
//! digest of the body.

pub mod archive;
mod client;
mod server;

pub use client::{PushReport, RegistryClient, RegistryEndpoint, RetryPolicy};
pub use server::{RegistryServer, RequestRecord, ServerConfig, ServerHandle};

use serde::{Deserialize, Serialize};

use crate::store::StoreError;

pub const CONTENT_MD5_HEADER: &str = "x-content-md5";
/// Optional branch for a pushed commit; defaults to [`MAIN_BRANCH`].
pub const BRANCH_HEADER: &str = "x-branch";
/// Optional explicit commit id for a push; otherwise the server assigns
/// the SHA-1 of the snapshot archive.
pub const COMMIT_HEADER: &str = "x-commit";
pub const MAIN_BRANCH: &str = "main";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitInfo {
    pub commit: String,
    pub branch: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub is_head_of_main: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum RegistryError {
    #[error("authentication failed: the registry rejected the configured token")]
    Auth,

    #[error("not found: {0}")]
    NotFound(String),

    #[error("commit prefix {prefix} of {brick} is ambiguous ({} matches)", .matches.len())]
    AmbiguousPrefix {
        brick: String,
        prefix: String,
        matches: Vec<String>,
    },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("conflict: {0}")]
    Conflict(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("registry returned {status}: {message}")]
    Server { status: u16, message: String },

    #[error("registry rejected the request ({status}): {message}")]
    Rejected { status: u16, message: String },

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl RegistryError {
    /// Network failures and 5xx responses are worth retrying.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Network(_) | Self::Server { .. })
    }
}

pub type Result<T, E = RegistryError> = std::result::Result<T, E>;
