use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::InstallError;
use crate::model::{Lockfile, PAYLOAD_DIR};
use crate::store::Cache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AssetFormat {
    Parquet,
    Sqlite,
    Hdt,
    Other,
}

impl AssetFormat {
    pub fn from_path(path: &str) -> Self {
        let file = path.trim_end_matches('/').rsplit('/').next().unwrap_or(path);
        let ext = file.rsplit_once('.').map(|(_, e)| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("parquet") => Self::Parquet,
            Some("sqlite" | "sqlite3" | "db") => Self::Sqlite,
            Some("hdt") => Self::Hdt,
            _ => Self::Other,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Parquet => "parquet",
            Self::Sqlite => "sqlite",
            Self::Hdt => "hdt",
            Self::Other => "other",
        }
    }
}

impl fmt::Display for AssetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Asset {
    pub name: String,
    /// Path relative to the brick directory, e.g. `brick/hgnc.parquet`.
    pub relpath: String,
    pub path: PathBuf,
    pub format: AssetFormat,
}

/// Logical name for a payload path: the `brick/` prefix dropped and every
/// `/` and `.` replaced with `_`.
pub fn mangle(relpath: &str) -> String {
    let inner = relpath
        .strip_prefix(PAYLOAD_DIR)
        .and_then(|r| r.strip_prefix('/'))
        .unwrap_or(relpath);
    inner.trim_end_matches('/').replace(['/', '.'], "_")
}

/// The distributable assets of one installed brick, keyed by logical name.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct AssetCatalog {
    entries: BTreeMap<String, Asset>,
}

impl AssetCatalog {
    /// Builds the catalog for a brick rooted at `brick_dir`. Outputs are
    /// one asset each, except an output that is the whole payload directory,
    /// whose files become individual assets.
    pub fn from_lock(lock: &Lockfile, brick_dir: &Path, cache: &Cache) -> Result<Self, InstallError> {
        let mut catalog = Self::default();
        for record in lock.payload_outs() {
            if record.path == PAYLOAD_DIR && record.hash.is_dir() {
                let manifest = cache.read_dir_manifest(&record.hash)?;
                for entry in manifest.entries() {
                    catalog.insert(&format!("{PAYLOAD_DIR}/{}", entry.relpath), brick_dir)?;
                }
            } else {
                catalog.insert(&record.path, brick_dir)?;
            }
        }
        Ok(catalog)
    }

    fn insert(&mut self, relpath: &str, brick_dir: &Path) -> Result<(), InstallError> {
        let name = mangle(relpath);
        if let Some(existing) = self.entries.get(&name) {
            return Err(InstallError::AssetNameCollision {
                name,
                first: existing.relpath.clone(),
                second: relpath.to_string(),
            });
        }
        self.entries.insert(
            name.clone(),
            Asset {
                name,
                relpath: relpath.to_string(),
                path: brick_dir.join(relpath),
                format: AssetFormat::from_path(relpath),
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Asset> {
        self.entries.get(name)
    }

    /// Assets sorted by name.
    pub fn iter(&self) -> impl Iterator<Item = &Asset> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
