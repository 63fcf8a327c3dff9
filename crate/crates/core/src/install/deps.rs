use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::{io_err, InstallError, InstallReport, Installer, Result};
use crate::model::{BrickRef, DependencyEntry, DependencySet, Upsert, DEPENDENCIES_FILE};
use crate::registry::RegistryClient;

fn deps_path(workdir: &Path) -> PathBuf {
    workdir.join(DEPENDENCIES_FILE)
}

/// Creates an empty dependencies file unless one exists. Returns whether
/// it was created.
pub fn deps_init(workdir: &Path) -> Result<bool> {
    let path = deps_path(workdir);
    if path.is_file() {
        return Ok(false);
    }
    let dir = path.parent().expect("dependencies file lives in a directory");
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let mut file = match fs::File::options().write(true).create_new(true).open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Ok(false),
        Err(e) => return Err(io_err(format!("creating {}", path.display()))(e)),
    };
    file.write_all(DependencySet::new().to_text().as_bytes())
        .map_err(io_err(format!("writing {}", path.display())))?;
    Ok(true)
}

pub fn read_dependencies(workdir: &Path) -> Result<DependencySet> {
    let path = deps_path(workdir);
    let bytes = fs::read(&path).map_err(|e| {
        let hint = if e.kind() == io::ErrorKind::NotFound {
            " (run `bricks init` first)"
        } else {
            ""
        };
        io_err(format!("reading {}{hint}", path.display()))(e)
    })?;
    Ok(DependencySet::parse(&bytes)?)
}

fn write_dependencies(workdir: &Path, set: &DependencySet) -> Result<()> {
    let path = deps_path(workdir);
    let tmp = path.with_extension("txt.tmp");
    fs::write(&tmp, set.to_text()).map_err(io_err(format!("writing {}", tmp.display())))?;
    fs::rename(&tmp, &path).map_err(io_err(format!("writing {}", path.display())))
}

/// Resolves `brick` and pins it in the dependencies file, replacing any
/// existing pin of the same brick. The file is untouched on error.
pub fn deps_add(workdir: &Path, client: &RegistryClient, brick: &BrickRef) -> Result<(DependencySet, Upsert)> {
    let mut set = read_dependencies(workdir)?;
    let client = client.for_ref(brick)?;
    let commit = client.resolve_commit(brick)?;
    let entry = DependencyEntry {
        brick: BrickRef {
            source_url: None,
            ..brick.pinned(&commit)
        },
        url: client.endpoint().base_url().to_string(),
    };
    let outcome = set.upsert(entry)?;
    match &outcome {
        Upsert::Added => log::info!("added {}@{commit}", brick.slug()),
        Upsert::Updated { previous } => log::info!("updated {} from {previous} to {commit}", brick.slug()),
        Upsert::Unchanged => log::info!("{}@{commit} already pinned", brick.slug()),
    }
    if outcome != Upsert::Unchanged {
        write_dependencies(workdir, &set)?;
    }
    Ok((set, outcome))
}

#[derive(Debug)]
pub struct PullOutcome {
    pub entry: DependencyEntry,
    pub result: Result<InstallReport>,
}

/// Per-entry results of [`deps_pull`], in file order.
#[derive(Debug, Default)]
pub struct PullReport {
    pub outcomes: Vec<PullOutcome>,
}

impl PullReport {
    /// Entries that were newly installed by this pull.
    pub fn installed(&self) -> impl Iterator<Item = &InstallReport> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok())
            .filter(|r| !r.already_installed)
    }

    pub fn failures(&self) -> impl Iterator<Item = (&DependencyEntry, &InstallError)> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().err().map(|e| (&o.entry, e)))
    }

    pub fn is_ok(&self) -> bool {
        self.failures().next().is_none()
    }

    /// Brick directories of every successful entry, in file order.
    pub fn paths(&self) -> Vec<PathBuf> {
        self.outcomes
            .iter()
            .filter_map(|o| o.result.as_ref().ok().map(|r| r.path.clone()))
            .collect()
    }
}

/// Installs every pinned dependency not already in the library. Failures
/// do not stop later entries.
pub fn deps_pull(workdir: &Path, installer: &Installer<'_>) -> Result<PullReport> {
    let set = read_dependencies(workdir)?;
    let mut report = PullReport::default();
    for entry in set.entries() {
        let brick = BrickRef {
            source_url: Some(format!("{}/api/{}/{}", entry.url, entry.brick.org, entry.brick.name)),
            ..entry.brick.clone()
        };
        let result = installer.install(&brick);
        if let Err(e) = &result {
            log::error!("{}@{}: {e}", entry.brick.slug(), entry.commit());
        }
        report.outcomes.push(PullOutcome {
            entry: entry.clone(),
            result,
        });
    }
    Ok(report)
}
