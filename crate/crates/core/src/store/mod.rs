//! Content-addressed blob store.
//!
//! Every distinct byte sequence is stored once under
//! `<root>/<first 2 hex>/<remaining 30 hex>` of its MD5. Blobs are written
//! to a temp file in the root, fsynced, then renamed into place, so a
//! reader never observes a partial blob. Directory outputs are stored as
//! canonical [`DirManifest`] blobs plus their member files.

mod cache;
mod hashing;
mod tree;

pub use cache::{BlobWriter, Cache, LinkStrategy, Materialized, PutOutcome, VerifyReport, COPIES_NOTE};
pub use hashing::{hash_bytes, hash_file, hash_path, hash_reader};
pub use tree::{hash_tree, DirEntry, DirManifest};
pub(crate) use tree::rel_to_slash;

use std::io;
use std::path::PathBuf;

use crate::model::ContentHash;

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("cache entry {} does not match its digest (found {actual})", .path.display())]
    CorruptCache { path: PathBuf, actual: String },

    #[error("blob {0} is not in the cache")]
    MissingBlob(ContentHash),

    #[error("content digest {actual} does not match expected {expected}")]
    Integrity { expected: ContentHash, actual: ContentHash },

    #[error("invalid directory manifest: {0}")]
    BadDirManifest(String),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for io::Result<T> {
    fn context(self, what: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|source| StoreError::Io {
            context: what(),
            source,
        })
    }
}
