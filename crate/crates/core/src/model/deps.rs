use std::fmt::Write as _;

use super::brick_ref::{BrickRef, CommitSpec};
use super::ModelError;

const HEADER: &str = "# brick dependencies: <org>/<name> <commit> <url>\n";

/// One pinned upstream brick.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DependencyEntry {
    /// Always carries a [`CommitSpec::Full`] commit.
    pub brick: BrickRef,
    pub url: String,
}

impl DependencyEntry {
    pub fn commit(&self) -> &str {
        match &self.brick.commit {
            CommitSpec::Full(c) => c,
            _ => unreachable!("dependency entries are always pinned"),
        }
    }
}

/// Outcome of [`DependencySet::upsert`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Upsert {
    Added,
    Updated { previous: String },
    Unchanged,
}

/// Contents of `.bb/dependencies.txt`: pinned bricks in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DependencySet {
    entries: Vec<DependencyEntry>,
}

impl DependencySet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(bytes: &[u8]) -> Result<Self, ModelError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|e| ModelError::Syntax(format!("input is not UTF-8: {e}")))?;
        let mut set = Self::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = match line.split_once('#') {
                Some((content, _)) => content,
                None => line,
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.is_empty() {
                continue;
            }
            let [slug, commit, url] = fields[..] else {
                return Err(ModelError::Syntax(format!(
                    "line {}: expected `<org>/<name> <commit> <url>`, found {} fields",
                    lineno + 1,
                    fields.len()
                )));
            };
            if !slug.contains('/') || slug.contains('@') || slug.contains("://") {
                return Err(ModelError::Syntax(format!(
                    "line {}: {slug:?} is not of the form <org>/<name>",
                    lineno + 1
                )));
            }
            let brick = BrickRef::parse(slug, "")?;
            let commit = match CommitSpec::parse(commit) {
                Ok(CommitSpec::Full(c)) => c,
                _ => {
                    return Err(ModelError::UnpinnedEntry {
                        brick: slug.to_string(),
                        commit: commit.to_string(),
                    })
                }
            };
            let entry = DependencyEntry {
                brick: brick.pinned(&commit),
                url: url.to_string(),
            };
            if set.find(&entry.brick.org, &entry.brick.name).is_some() {
                return Err(ModelError::DuplicateEntry(entry.brick.slug()));
            }
            set.entries.push(entry);
        }
        Ok(set)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from(HEADER);
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.brick.slug(), e.commit(), e.url);
        }
        out
    }

    pub fn entries(&self) -> &[DependencyEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, org: &str, name: &str) -> Option<&DependencyEntry> {
        self.entries
            .iter()
            .find(|e| e.brick.org == org && e.brick.name == name)
    }

    /// Adds a pin, or replaces the pin of an existing `(org, name)` in place.
    pub fn upsert(&mut self, entry: DependencyEntry) -> Result<Upsert, ModelError> {
        if !entry.brick.commit.is_full() {
            return Err(ModelError::UnpinnedEntry {
                brick: entry.brick.slug(),
                commit: entry.brick.commit.to_string(),
            });
        }
        if entry.url.is_empty() || entry.url.chars().any(char::is_whitespace) {
            return Err(ModelError::Syntax(format!(
                "dependency url {:?} must be non-empty and contain no whitespace",
                entry.url
            )));
        }
        let existing = self
            .entries
            .iter_mut()
            .find(|e| e.brick.org == entry.brick.org && e.brick.name == entry.brick.name);
        match existing {
            Some(e) if *e == entry => Ok(Upsert::Unchanged),
            Some(e) => {
                let previous = e.commit().to_string();
                *e = entry;
                Ok(Upsert::Updated { previous })
            }
            None => {
                self.entries.push(entry);
                Ok(Upsert::Added)
            }
        }
    }
}
