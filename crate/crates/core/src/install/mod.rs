//! The local brick library and the install algorithm.
//!
//! Layout:
//!
//! ```text
//! <root>/cache/                     content-addressed blobs
//! <root>/<org>/<name>/<commit>/     one installed brick
//! <root>/.staging/                  in-progress installs and their locks
//! ```
//!
//! An install stages everything under `.staging` and renames the finished
//! directory into place, so a brick directory is either complete or absent.

mod assets;
mod deps;

pub use assets::{mangle, Asset, AssetCatalog, AssetFormat};
pub use deps::{deps_add, deps_init, deps_pull, read_dependencies, PullOutcome, PullReport};

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use walkdir::WalkDir;

use crate::model::{BrickRef, CommitSpec, ContentHash, Lockfile, ModelError, LOCK_FILE};
use crate::registry::{RegistryClient, RegistryError};
use crate::store::{hash_file, Cache, LinkStrategy, StoreError, VerifyReport, COPIES_NOTE};

pub const CACHE_DIR: &str = "cache";
pub const STAGING_DIR: &str = ".staging";
/// Completion marker written last into a staged brick; holds the install
/// time as zero-padded nanoseconds since the epoch.
pub const STAMP_FILE: &str = ".installed";

pub const DEFAULT_PARALLEL_FETCH: usize = 4;

#[derive(Debug, thiserror::Error)]
pub enum InstallError {
    #[error(transparent)]
    Registry(#[from] RegistryError),

    #[error(transparent)]
    Store(#[from] StoreError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error("asset name {name} is produced by both {first} and {second}")]
    AssetNameCollision { name: String, first: String, second: String },

    #[error("{0} is not installed; run `bricks install {0}` first")]
    NotInstalled(String),

    #[error("{0} is reserved by the library layout and cannot be installed")]
    ReservedName(String),

    #[error("snapshot of {brick} is invalid: {reason}")]
    InvalidSnapshot { brick: String, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl InstallError {
    pub fn is_auth(&self) -> bool {
        matches!(self, Self::Registry(RegistryError::Auth))
    }
}

pub type Result<T, E = InstallError> = std::result::Result<T, E>;

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> InstallError {
    let context = context.into();
    move |source| InstallError::Io { context, source }
}

/// The four install steps, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstallStep {
    Snapshot,
    Enumerate,
    Fetch,
    Link,
}

impl InstallStep {
    pub const ALL: [InstallStep; 4] = [Self::Snapshot, Self::Enumerate, Self::Fetch, Self::Link];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Snapshot => "snapshot",
            Self::Enumerate => "enumerate",
            Self::Fetch => "fetch",
            Self::Link => "link",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|step| step.as_str() == s)
    }
}

impl fmt::Display for InstallStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstallReport {
    pub brick: BrickRef,
    pub commit: String,
    pub path: PathBuf,
    /// Steps completed, in order; empty when already installed.
    pub steps: Vec<InstallStep>,
    /// Distinct data blobs the brick's payload needs.
    pub blobs_total: usize,
    /// Data blobs downloaded because the cache lacked them.
    pub blobs_fetched: usize,
    /// Directory manifests downloaded during enumeration.
    pub manifests_fetched: usize,
    pub snapshot_bytes: u64,
    pub already_installed: bool,
}

impl InstallReport {
    /// The line printed on success.
    pub fn summary(&self) -> String {
        if self.already_installed {
            format!("already installed {}/{}@{}", self.brick.org, self.brick.name, self.commit)
        } else {
            format!(
                "installed {}/{}@{} ({}/{} blobs fetched)",
                self.brick.org, self.brick.name, self.commit, self.blobs_fetched, self.blobs_total
            )
        }
    }
}

/// One installed commit of a brick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstalledBrick {
    pub org: String,
    pub name: String,
    pub commit: String,
    pub path: PathBuf,
    /// Contents of the stamp file; sorts chronologically.
    pub stamp: String,
}

#[derive(Debug, Default)]
pub struct LibraryCheck {
    pub cache: VerifyReport,
    /// Copied (unlinked) assets whose bytes no longer match their digest.
    pub bad_copies: Vec<PathBuf>,
    /// Payload links whose target is gone.
    pub broken_links: Vec<PathBuf>,
}

impl LibraryCheck {
    pub fn is_ok(&self) -> bool {
        self.cache.is_ok() && self.bad_copies.is_empty() && self.broken_links.is_empty()
    }
}

/// A library root with its shared cache.
#[derive(Debug)]
pub struct Library {
    root: PathBuf,
    cache: Cache,
}

impl Library {
    /// Opens (creating if needed) the library at `root`.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        fs::create_dir_all(root).map_err(io_err(format!("creating library {}", root.display())))?;
        let root = fs::canonicalize(root).map_err(io_err(format!("resolving {}", root.display())))?;
        let cache = Cache::open(root.join(CACHE_DIR))?;
        Ok(Self { root, cache })
    }

    pub fn with_link_strategy(mut self, link: LinkStrategy) -> Self {
        self.cache = self.cache.with_link_strategy(link);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cache(&self) -> &Cache {
        &self.cache
    }

    pub fn brick_dir(&self, org: &str, name: &str, commit: &str) -> PathBuf {
        self.root.join(org).join(name).join(commit)
    }

    pub fn staging_root(&self) -> PathBuf {
        self.root.join(STAGING_DIR)
    }

    pub fn is_installed(&self, org: &str, name: &str, commit: &str) -> bool {
        self.brick_dir(org, name, commit).join(STAMP_FILE).is_file()
    }

    /// Installed commits of one brick, oldest first.
    pub fn installed(&self, org: &str, name: &str) -> Vec<InstalledBrick> {
        let dir = self.root.join(org).join(name);
        let Ok(read) = fs::read_dir(&dir) else {
            return Vec::new();
        };
        let mut out: Vec<InstalledBrick> = read
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let commit = e.file_name().to_str()?.to_string();
                let stamp = fs::read_to_string(e.path().join(STAMP_FILE)).ok()?;
                Some(InstalledBrick {
                    org: org.to_string(),
                    name: name.to_string(),
                    commit,
                    path: e.path(),
                    stamp: stamp.trim().to_string(),
                })
            })
            .collect();
        out.sort_by(|a, b| (&a.stamp, &a.commit).cmp(&(&b.stamp, &b.commit)));
        out
    }

    /// Every installed brick in the library.
    pub fn all_installed(&self) -> Vec<InstalledBrick> {
        let mut out = Vec::new();
        for org in subdirs(&self.root) {
            if org == CACHE_DIR || org.starts_with('.') {
                continue;
            }
            for name in subdirs(&self.root.join(&org)) {
                out.extend(self.installed(&org, &name));
            }
        }
        out
    }

    /// The installed brick a reference selects: its commit or prefix, or
    /// for `latest` the most recently installed commit.
    pub fn find(&self, brick: &BrickRef) -> Result<InstalledBrick> {
        let installed = self.installed(&brick.org, &brick.name);
        let found = match &brick.commit {
            CommitSpec::Latest => installed.into_iter().last(),
            spec => {
                let mut matching: Vec<_> = installed.into_iter().filter(|b| spec.matches(&b.commit)).collect();
                if matching.len() > 1 {
                    return Err(InstallError::Registry(RegistryError::AmbiguousPrefix {
                        brick: brick.slug(),
                        prefix: spec.to_string(),
                        matches: matching.into_iter().map(|b| b.commit).collect(),
                    }));
                }
                matching.pop()
            }
        };
        found.ok_or_else(|| InstallError::NotInstalled(brick.to_string()))
    }

    /// The asset catalog of an installed brick.
    pub fn assets(&self, brick: &BrickRef) -> Result<AssetCatalog> {
        let installed = self.find(brick)?;
        let lock = read_lock(&installed.path)?;
        AssetCatalog::from_lock(&lock, &installed.path, &self.cache)
    }

    /// Checks the cache and every installed brick's payload.
    pub fn verify(&self) -> Result<LibraryCheck> {
        let mut check = LibraryCheck {
            cache: self.cache.verify()?,
            ..LibraryCheck::default()
        };
        for brick in self.all_installed() {
            for entry in WalkDir::new(brick.path.join(crate::model::PAYLOAD_DIR)).min_depth(1) {
                let Ok(entry) = entry else { continue };
                let path = entry.path();
                if entry.path_is_symlink() && !path.exists() {
                    check.broken_links.push(path.to_path_buf());
                }
                if entry.file_name() == COPIES_NOTE {
                    check.bad_copies.extend(check_copies(path)?);
                }
            }
        }
        check.bad_copies.sort();
        check.broken_links.sort();
        Ok(check)
    }

    /// Digests in the cache that no installed brick references.
    pub fn gc_candidates(&self) -> Result<Vec<String>> {
        let mut referenced = HashSet::new();
        for brick in self.all_installed() {
            let lock = read_lock(&brick.path)?;
            for record in lock.payload_outs() {
                referenced.insert(record.hash.hex());
                if record.hash.is_dir() {
                    if let Ok(manifest) = self.cache.read_dir_manifest(&record.hash) {
                        referenced.extend(manifest.entries().iter().map(|e| e.hash.hex()));
                    }
                }
            }
        }
        Ok(self
            .cache
            .digests()?
            .into_iter()
            .filter(|d| !referenced.contains(d))
            .collect())
    }
}

fn subdirs(dir: &Path) -> Vec<String> {
    let mut out: Vec<String> = fs::read_dir(dir)
        .into_iter()
        .flatten()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_dir()).unwrap_or(false))
        .filter_map(|e| e.file_name().to_str().map(str::to_string))
        .collect();
    out.sort();
    out
}

fn read_lock(brick_dir: &Path) -> Result<Lockfile> {
    let path = brick_dir.join(LOCK_FILE);
    let bytes = fs::read(&path).map_err(io_err(format!("reading {}", path.display())))?;
    Ok(Lockfile::parse(&bytes)?)
}

/// Copies listed in a sidecar note whose content drifted.
fn check_copies(note: &Path) -> Result<Vec<PathBuf>> {
    let dir = note.parent().expect("notes live in a directory");
    let text = fs::read_to_string(note).map_err(io_err(format!("reading {}", note.display())))?;
    let mut bad = Vec::new();
    for line in text.lines() {
        let Some((digest, file)) = line.split_once(' ') else { continue };
        let path = dir.join(file);
        match hash_file(&path) {
            Ok((actual, _)) if actual.hex() == digest => {}
            _ => bad.push(path),
        }
    }
    Ok(bad)
}

/// Called after each step completes.
pub type StepHook = Arc<dyn Fn(InstallStep) + Send + Sync>;

/// Installs bricks from a registry into a library.
#[derive(Clone)]
pub struct Installer<'a> {
    library: &'a Library,
    client: RegistryClient,
    parallel: usize,
    hook: Option<StepHook>,
}

impl<'a> Installer<'a> {
    pub fn new(library: &'a Library, client: RegistryClient) -> Self {
        Self {
            library,
            client,
            parallel: DEFAULT_PARALLEL_FETCH,
            hook: None,
        }
    }

    pub fn parallel(mut self, streams: usize) -> Self {
        self.parallel = streams.max(1);
        self
    }

    pub fn on_step(mut self, hook: StepHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn library(&self) -> &Library {
        self.library
    }

    pub fn client(&self) -> &RegistryClient {
        &self.client
    }

    fn step_done(&self, step: InstallStep, steps: &mut Vec<InstallStep>) {
        steps.push(step);
        log::debug!("install step={step}");
        if let Some(hook) = &self.hook {
            hook(step);
        }
    }

    pub fn install(&self, brick: &BrickRef) -> Result<InstallReport> {
        if brick.org == CACHE_DIR || brick.org.starts_with('.') {
            return Err(InstallError::ReservedName(brick.org.clone()));
        }
        let client = self.client.for_ref(brick)?;
        let commit = client.resolve_commit(brick)?;
        let pinned = brick.pinned(&commit);
        let lib = self.library;
        let final_dir = lib.brick_dir(&brick.org, &brick.name, &commit);
        let mut report = InstallReport {
            brick: pinned,
            commit: commit.clone(),
            path: final_dir.clone(),
            steps: Vec::new(),
            blobs_total: 0,
            blobs_fetched: 0,
            manifests_fetched: 0,
            snapshot_bytes: 0,
            already_installed: false,
        };
        if lib.is_installed(&brick.org, &brick.name, &commit) {
            report.already_installed = true;
            return Ok(report);
        }

        let staging_root = lib.staging_root();
        fs::create_dir_all(&staging_root).map_err(io_err(format!("creating {}", staging_root.display())))?;
        let key = format!("{}.{}.{}", brick.org, brick.name, commit);
        let lock_path = staging_root.join(format!("{key}.lock"));
        let lock = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(format!("opening {}", lock_path.display())))?;
        lock.lock().map_err(io_err(format!("locking {}", lock_path.display())))?;

        // Another process may have finished while we waited.
        if lib.is_installed(&brick.org, &brick.name, &commit) {
            report.already_installed = true;
            return Ok(report);
        }
        let staging = staging_root.join(&key);
        if staging.exists() {
            log::info!("removing stale staging directory {}", staging.display());
            remove_tree(&staging)?;
        }

        let result = self.stage(&client, &mut report, &staging, &final_dir);
        if result.is_err() && staging.exists() {
            let _ = remove_tree(&staging);
        }
        drop(lock);
        result?;
        log::info!("{}", report.summary());
        Ok(report)
    }

    fn stage(&self, client: &RegistryClient, report: &mut InstallReport, staging: &Path, final_dir: &Path) -> Result<()> {
        let brick = report.brick.clone();
        let cache = self.library.cache();
        let mut steps = Vec::new();

        report.snapshot_bytes = client.fetch_snapshot(&brick.org, &brick.name, &report.commit, staging)?;
        self.step_done(InstallStep::Snapshot, &mut steps);

        let lock_bytes = fs::read(staging.join(LOCK_FILE)).map_err(|_| InstallError::InvalidSnapshot {
            brick: brick.to_string(),
            reason: format!("no {LOCK_FILE}"),
        })?;
        let lock = Lockfile::parse(&lock_bytes)?;
        let payload: Vec<_> = lock.payload_outs().cloned().collect();
        let mut needed = BTreeSet::new();
        for record in &payload {
            if record.hash.is_dir() {
                if !cache.contains(&record.hash) {
                    client.fetch_blob_into_cache(&record.hash, cache)?;
                    report.manifests_fetched += 1;
                }
                let manifest = cache.read_dir_manifest(&record.hash)?;
                needed.extend(manifest.entries().iter().map(|e| e.hash));
            } else {
                needed.insert(record.hash);
            }
        }
        AssetCatalog::from_lock(&lock, final_dir, cache)?;
        self.step_done(InstallStep::Enumerate, &mut steps);

        let missing: Vec<ContentHash> = needed.iter().filter(|h| !cache.contains(h)).copied().collect();
        report.blobs_total = needed.len();
        report.blobs_fetched = missing.len();
        self.fetch_all(client, &missing)?;
        self.step_done(InstallStep::Fetch, &mut steps);

        for record in &payload {
            cache.materialize(&record.hash, &staging.join(&record.path))?;
        }
        self.step_done(InstallStep::Link, &mut steps);

        write_stamp(staging)?;
        let parent = final_dir.parent().expect("brick dirs have parents");
        fs::create_dir_all(parent).map_err(io_err(format!("creating {}", parent.display())))?;
        fs::rename(staging, final_dir).map_err(io_err(format!("moving brick into {}", final_dir.display())))?;
        report.steps = steps;
        Ok(())
    }

    fn fetch_all(&self, client: &RegistryClient, missing: &[ContentHash]) -> Result<()> {
        let cache = self.library.cache();
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let first_error = Mutex::new(None);
        let workers = self.parallel.min(missing.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| {
                    while !failed.load(Ordering::Relaxed) {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(hash) = missing.get(i) else { break };
                        if let Err(e) = client.fetch_blob_into_cache(hash, cache) {
                            failed.store(true, Ordering::Relaxed);
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                    }
                });
            }
        });
        match first_error.into_inner().unwrap() {
            Some(e) => Err(e.into()),
            None => Ok(()),
        }
    }
}

fn write_stamp(dir: &Path) -> Result<()> {
    let nanos = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    let path = dir.join(STAMP_FILE);
    let mut file = File::create(&path).map_err(io_err(format!("writing {}", path.display())))?;
    writeln!(file, "{nanos:020}")
        .and_then(|_| file.sync_all())
        .map_err(io_err(format!("writing {}", path.display())))
}

/// Removes a staged tree; cache links inside it are only unlinked.
fn remove_tree(dir: &Path) -> Result<()> {
    fs::remove_dir_all(dir).map_err(io_err(format!("removing {}", dir.display())))
}
