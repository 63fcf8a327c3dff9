use std::fmt::Write as _;
use std::path::Path;

use walkdir::WalkDir;

use super::hashing::{hash_bytes, hash_file};
use super::{IoContext, Result, StoreError};
use crate::model::ContentHash;

/// One file of a directory manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirEntry {
    /// `/`-separated path relative to the directory.
    pub relpath: String,
    pub hash: ContentHash,
    pub size: u64,
}

/// Sorted listing of a directory's regular files with their digests.
///
/// Canonical bytes are one `<md5> <size> <relpath>\n` line per entry in
/// bytewise relpath order; the directory's digest is the MD5 of those bytes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DirManifest {
    entries: Vec<DirEntry>,
}

impl DirManifest {
    pub fn new(mut entries: Vec<DirEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.relpath.as_bytes().cmp(b.relpath.as_bytes()));
        for (i, e) in entries.iter().enumerate() {
            check_relpath(&e.relpath)?;
            if e.hash.is_dir() {
                return Err(StoreError::BadDirManifest(format!(
                    "{} refers to a directory digest",
                    e.relpath
                )));
            }
            if i > 0 && entries[i - 1].relpath == e.relpath {
                return Err(StoreError::BadDirManifest(format!("{} listed twice", e.relpath)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[DirEntry] {
        &self.entries
    }

    pub fn total_size(&self) -> u64 {
        self.entries.iter().map(|e| e.size).sum()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(out, "{} {} {}", e.hash, e.size, e.relpath);
        }
        out.into_bytes()
    }

    /// Digest of the canonical bytes, flagged as a directory.
    pub fn digest(&self) -> ContentHash {
        hash_bytes(&self.to_bytes()).with_dir(true)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| StoreError::BadDirManifest("not UTF-8".into()))?;
        if !text.is_empty() && !text.ends_with('\n') {
            return Err(StoreError::BadDirManifest("missing final newline".into()));
        }
        let mut entries = Vec::new();
        for line in text.lines() {
            let mut parts = line.splitn(3, ' ');
            let (Some(hash), Some(size), Some(relpath)) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(StoreError::BadDirManifest(format!("malformed line {line:?}")));
            };
            let hash: ContentHash = hash
                .parse()
                .map_err(|_| StoreError::BadDirManifest(format!("bad digest in {line:?}")))?;
            let size: u64 = size
                .parse()
                .map_err(|_| StoreError::BadDirManifest(format!("bad size in {line:?}")))?;
            entries.push(DirEntry {
                relpath: relpath.to_string(),
                hash,
                size,
            });
        }
        let manifest = Self::new(entries)?;
        if manifest.to_bytes() != bytes {
            return Err(StoreError::BadDirManifest("entries are not in canonical order".into()));
        }
        Ok(manifest)
    }
}

fn check_relpath(relpath: &str) -> Result<()> {
    let bad = relpath.is_empty()
        || relpath.starts_with('/')
        || relpath.ends_with('/')
        || relpath.contains('\n')
        || relpath.contains('\\')
        || relpath.split('/').any(|s| s.is_empty() || s == "." || s == "..");
    if bad {
        return Err(StoreError::BadDirManifest(format!("invalid relative path {relpath:?}")));
    }
    Ok(())
}

/// Lists every regular file under `dir` (following links) and digests the
/// resulting manifest.
pub fn hash_tree(dir: &Path) -> Result<(DirManifest, ContentHash)> {
    let mut entries = Vec::new();
    for item in WalkDir::new(dir).follow_links(true).min_depth(1) {
        let item = item
            .map_err(std::io::Error::from)
            .context(|| format!("walking {}", dir.display()))?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(dir).expect("walkdir yields children");
        let relpath = rel_to_slash(rel).ok_or_else(|| StoreError::Io {
            context: format!("hashing {}", item.path().display()),
            source: std::io::Error::new(std::io::ErrorKind::InvalidData, "file name is not UTF-8"),
        })?;
        let (hash, size) = hash_file(item.path())?;
        entries.push(DirEntry { relpath, hash, size });
    }
    let manifest = DirManifest::new(entries)?;
    let digest = manifest.digest();
    Ok((manifest, digest))
}

pub(crate) fn rel_to_slash(rel: &Path) -> Option<String> {
    let parts: Option<Vec<&str>> = rel.components().map(|c| c.as_os_str().to_str()).collect();
    parts.map(|p| p.join("/"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    #[test]
    fn empty_directory_hashes_empty_listing() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, hash) = hash_tree(dir.path()).unwrap();
        assert!(manifest.entries().is_empty());
        assert!(hash.is_dir());
        assert_eq!(hash.to_string(), "d41d8cd98f00b204e9800998ecf8427e.dir");
    }

    #[test]
    fn creation_order_does_not_matter() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let files = [("x/2.csv", "two"), ("1.csv", "one"), ("x/y/3.csv", "three")];
        for (p, c) in files {
            fs::create_dir_all(a.path().join(p).parent().unwrap()).unwrap();
            fs::write(a.path().join(p), c).unwrap();
        }
        for (p, c) in files.iter().rev() {
            fs::create_dir_all(b.path().join(p).parent().unwrap()).unwrap();
            fs::write(b.path().join(p), c).unwrap();
        }
        let (ma, ha) = hash_tree(a.path()).unwrap();
        assert_eq!(ha, hash_tree(b.path()).unwrap().1);
        let names: Vec<_> = ma.entries().iter().map(|e| e.relpath.as_str()).collect();
        assert_eq!(names, ["1.csv", "x/2.csv", "x/y/3.csv"]);
        assert_eq!(ma.total_size(), 11);

        fs::write(b.path().join("x/2.csv"), "twO").unwrap();
        assert_ne!(ha, hash_tree(b.path()).unwrap().1);
    }

    #[test]
    fn manifest_bytes_parse_back() {
        let m = DirManifest::new(vec![
            DirEntry {
                relpath: "b c.txt".into(),
                hash: hash_bytes(b"x"),
                size: 1,
            },
            DirEntry {
                relpath: "a/z".into(),
                hash: hash_bytes(b""),
                size: 0,
            },
        ])
        .unwrap();
        let bytes = m.to_bytes();
        assert_eq!(
            String::from_utf8(bytes.clone()).unwrap(),
            "d41d8cd98f00b204e9800998ecf8427e 0 a/z\n9dd4e461268c8034f5c8564e155c67a6 1 b c.txt\n"
        );
        assert_eq!(DirManifest::parse(&bytes).unwrap(), m);
        assert!(DirManifest::parse(b"garbage\n").is_err());
        let unsorted = "9dd4e461268c8034f5c8564e155c67a6 1 b\nd41d8cd98f00b204e9800998ecf8427e 0 a\n";
        assert!(DirManifest::parse(unsorted.as_bytes()).is_err());
    }

    #[test]
    fn rejects_escaping_entries() {
        for bad in ["../x", "/abs", "a//b", "a/./b", ""] {
            let e = DirEntry {
                relpath: bad.into(),
                hash: hash_bytes(b""),
                size: 0,
            };
            assert!(DirManifest::new(vec![e]).is_err(), "{bad:?}");
        }
    }
}
