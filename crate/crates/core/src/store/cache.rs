use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use md5::{Digest, Md5};

use super::hashing::{hash_bytes, hash_file};
use super::tree::{hash_tree, DirManifest};
use super::{IoContext, Result, StoreError};
use crate::model::ContentHash;

const TMP_PREFIX: &str = ".tmp-";

/// Sidecar listing files that were copied instead of linked, one
/// `<md5> <file name>` line each, kept next to the copies.
pub const COPIES_NOTE: &str = ".bricks-copies";

/// How [`Cache::materialize`] places files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LinkStrategy {
    /// Symlink into the cache, copying when the filesystem refuses links.
    #[default]
    Symlink,
    /// Always copy.
    Copy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PutOutcome {
    pub hash: ContentHash,
    pub size: u64,
    /// False when the digest was already present and nothing was written.
    pub written: bool,
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Materialized {
    pub links: usize,
    pub copies: Vec<PathBuf>,
}

#[derive(Debug, Default, Clone)]
pub struct VerifyReport {
    pub checked: usize,
    /// Blobs whose content no longer matches their name.
    pub corrupt: Vec<PathBuf>,
    /// Files that are neither blobs nor in-flight temp files.
    pub stray: Vec<PathBuf>,
    pub in_flight: usize,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.corrupt.is_empty()
    }
}

/// A content-addressed blob directory.
#[derive(Debug)]
pub struct Cache {
    root: PathBuf,
    link: LinkStrategy,
    writes: AtomicU64,
}

impl Cache {
    /// Opens (creating if needed) the cache rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).context(|| format!("creating cache {}", root.display()))?;
        Ok(Self {
            root,
            link: LinkStrategy::default(),
            writes: AtomicU64::new(0),
        })
    }

    pub fn with_link_strategy(mut self, link: LinkStrategy) -> Self {
        self.link = link;
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Number of blobs this handle has committed to disk.
    pub fn write_count(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    pub fn blob_path(&self, hash: &ContentHash) -> PathBuf {
        let hex = hash.hex();
        self.root.join(&hex[..2]).join(&hex[2..])
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        self.blob_path(hash).is_file()
    }

    pub fn put_bytes(&self, data: &[u8]) -> Result<PutOutcome> {
        let hash = hash_bytes(data);
        let size = data.len() as u64;
        if self.check_existing(&hash)? {
            return Ok(PutOutcome { hash, size, written: false });
        }
        let mut writer = self.writer()?;
        writer.write_all(data).context(|| "writing blob".into())?;
        writer.commit(Some(&hash))
    }

    pub fn put_reader(&self, mut reader: impl Read) -> Result<PutOutcome> {
        let mut writer = self.writer()?;
        io::copy(&mut reader, &mut writer).context(|| "writing blob".into())?;
        writer.commit(None)
    }

    pub fn put_file(&self, path: &Path) -> Result<PutOutcome> {
        let (hash, size) = hash_file(path)?;
        if self.check_existing(&hash)? {
            return Ok(PutOutcome { hash, size, written: false });
        }
        let file = File::open(path).context(|| format!("opening {}", path.display()))?;
        let mut writer = self.writer()?;
        io::copy(&mut &file, &mut writer).context(|| format!("copying {}", path.display()))?;
        writer.commit(Some(&hash))
    }

    /// Stores every file under `dir` and the directory's manifest.
    pub fn put_tree(&self, dir: &Path) -> Result<(DirManifest, PutOutcome)> {
        let (manifest, digest) = hash_tree(dir)?;
        for entry in manifest.entries() {
            let path = dir.join(&entry.relpath);
            let out = self.put_file(&path)?;
            if out.hash != entry.hash {
                return Err(StoreError::Integrity {
                    expected: entry.hash,
                    actual: out.hash,
                });
            }
        }
        let mut out = self.put_bytes(&manifest.to_bytes())?;
        out.hash = digest;
        out.size = manifest.total_size();
        Ok((manifest, out))
    }

    /// Stores whatever is at `path`, file or directory.
    pub fn put_path(&self, path: &Path) -> Result<PutOutcome> {
        if path.is_dir() {
            Ok(self.put_tree(path)?.1)
        } else {
            self.put_file(path)
        }
    }

    /// Opens a temp file in the cache root for streaming a new blob.
    pub fn writer(&self) -> Result<BlobWriter<'_>> {
        let tmp = self.root.join(format!("{TMP_PREFIX}{}", uuid::Uuid::new_v4().simple()));
        let file = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&tmp)
            .context(|| format!("creating {}", tmp.display()))?;
        Ok(BlobWriter {
            cache: self,
            file: Some(file),
            tmp,
            hasher: Md5::new(),
            size: 0,
        })
    }

    /// True when the blob exists and its content matches its name.
    fn check_existing(&self, hash: &ContentHash) -> Result<bool> {
        let path = self.blob_path(hash);
        if !path.is_file() {
            return Ok(false);
        }
        let (actual, _) = hash_file(&path)?;
        if actual.hex() != hash.hex() {
            return Err(StoreError::CorruptCache {
                path,
                actual: actual.hex(),
            });
        }
        Ok(true)
    }

    pub fn read(&self, hash: &ContentHash) -> Result<Vec<u8>> {
        let path = self.blob_path(hash);
        match fs::read(&path) {
            Ok(bytes) => Ok(bytes),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(StoreError::MissingBlob(*hash)),
            Err(e) => Err(e).context(|| format!("reading {}", path.display())),
        }
    }

    pub fn read_dir_manifest(&self, hash: &ContentHash) -> Result<DirManifest> {
        let bytes = self.read(hash)?;
        DirManifest::parse(&bytes)
    }

    /// Makes the content named by `hash` appear at `dest`.
    ///
    /// Files become links to the cached blob; directories become real
    /// directories whose files are links. Re-running on an already
    /// materialized destination changes nothing.
    pub fn materialize(&self, hash: &ContentHash, dest: &Path) -> Result<Materialized> {
        let mut done = Materialized::default();
        if hash.is_dir() {
            let manifest = self.read_dir_manifest(hash)?;
            if let Some(missing) = manifest.entries().iter().find(|e| !self.contains(&e.hash)) {
                return Err(StoreError::MissingBlob(missing.hash));
            }
            fs::create_dir_all(dest).context(|| format!("creating {}", dest.display()))?;
            for entry in manifest.entries() {
                self.materialize_file(&entry.hash, &dest.join(&entry.relpath), &mut done)?;
            }
        } else {
            if !self.contains(hash) {
                return Err(StoreError::MissingBlob(*hash));
            }
            self.materialize_file(hash, dest, &mut done)?;
        }
        Ok(done)
    }

    fn materialize_file(&self, hash: &ContentHash, dest: &Path, done: &mut Materialized) -> Result<()> {
        let blob = self.blob_path(hash);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent).context(|| format!("creating {}", parent.display()))?;
        }
        match fs::symlink_metadata(dest) {
            Ok(meta) if meta.file_type().is_symlink() => {
                if fs::read_link(dest).ok().as_deref() == Some(blob.as_path()) {
                    done.links += 1;
                    return Ok(());
                }
                fs::remove_file(dest).context(|| format!("replacing {}", dest.display()))?;
            }
            Ok(meta) if meta.is_file() => {
                if hash_file(dest)?.0.hex() == hash.hex() {
                    done.copies.push(dest.to_path_buf());
                    return Ok(());
                }
                make_writable(dest);
                fs::remove_file(dest).context(|| format!("replacing {}", dest.display()))?;
            }
            Ok(_) => {
                return Err(StoreError::Io {
                    context: format!("materializing {}", dest.display()),
                    source: io::Error::new(io::ErrorKind::AlreadyExists, "a directory is in the way"),
                })
            }
            Err(_) => {}
        }

        if self.link == LinkStrategy::Symlink {
            match symlink_file(&blob, dest) {
                Ok(()) => {
                    done.links += 1;
                    return Ok(());
                }
                Err(e) => log::warn!("symlink {} failed ({e}); copying instead", dest.display()),
            }
        }
        fs::copy(&blob, dest).context(|| format!("copying to {}", dest.display()))?;
        record_copy(dest, hash)?;
        done.copies.push(dest.to_path_buf());
        Ok(())
    }

    /// Re-hashes every blob and checks it against its name. In-flight temp
    /// files are counted but not checked.
    pub fn verify(&self) -> Result<VerifyReport> {
        let mut report = VerifyReport::default();
        for entry in fs::read_dir(&self.root).context(|| format!("listing {}", self.root.display()))? {
            let entry = entry.context(|| format!("listing {}", self.root.display()))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            let path = entry.path();
            if name.starts_with(TMP_PREFIX) {
                report.in_flight += 1;
                continue;
            }
            if !(is_hex(&name, 2) && path.is_dir()) {
                report.stray.push(path);
                continue;
            }
            for blob in fs::read_dir(&path).context(|| format!("listing {}", path.display()))? {
                let blob = blob.context(|| format!("listing {}", path.display()))?;
                let blob_name = blob.file_name().to_string_lossy().into_owned();
                let blob_path = blob.path();
                if !(is_hex(&blob_name, 30) && blob_path.is_file()) {
                    report.stray.push(blob_path);
                    continue;
                }
                report.checked += 1;
                let (actual, _) = hash_file(&blob_path)?;
                if actual.hex() != format!("{name}{blob_name}") {
                    report.corrupt.push(blob_path);
                }
            }
        }
        report.corrupt.sort();
        report.stray.sort();
        Ok(report)
    }

    /// Every digest currently stored, sorted.
    pub fn digests(&self) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for shard in fs::read_dir(&self.root).context(|| format!("listing {}", self.root.display()))? {
            let shard = shard.context(|| format!("listing {}", self.root.display()))?;
            let shard_name = shard.file_name().to_string_lossy().into_owned();
            if !is_hex(&shard_name, 2) || !shard.path().is_dir() {
                continue;
            }
            for blob in fs::read_dir(shard.path()).context(|| format!("listing {shard_name}"))? {
                let blob = blob.context(|| format!("listing {shard_name}"))?;
                let name = blob.file_name().to_string_lossy().into_owned();
                if is_hex(&name, 30) {
                    out.push(format!("{shard_name}{name}"));
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

/// Streams bytes into a temp file; [`commit`](Self::commit) moves it into
/// place under its digest. Dropping without committing discards the bytes.
pub struct BlobWriter<'a> {
    cache: &'a Cache,
    file: Option<File>,
    tmp: PathBuf,
    hasher: Md5,
    size: u64,
}

impl Write for BlobWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.file.as_mut().expect("writer is open").write(buf)?;
        self.hasher.update(&buf[..n]);
        self.size += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.file.as_mut().expect("writer is open").flush()
    }
}

impl BlobWriter<'_> {
    pub fn bytes_written(&self) -> u64 {
        self.size
    }

    /// Finishes the blob. When `expected` is given and the content does not
    /// match, the bytes are discarded and an integrity error is returned.
    pub fn commit(mut self, expected: Option<&ContentHash>) -> Result<PutOutcome> {
        let file = self.file.take().expect("writer is open");
        file.sync_all().context(|| format!("syncing {}", self.tmp.display()))?;
        drop(file);
        let hash = ContentHash::from_digest(self.hasher.clone().finalize().into(), false);
        if let Some(expected) = expected {
            if expected.hex() != hash.hex() {
                return Err(StoreError::Integrity {
                    expected: *expected,
                    actual: hash,
                });
            }
        }
        let size = self.size;
        if self.cache.check_existing(&hash)? {
            return Ok(PutOutcome { hash, size, written: false });
        }
        let dest = self.cache.blob_path(&hash);
        let shard = dest.parent().expect("blob paths are sharded");
        fs::create_dir_all(shard).context(|| format!("creating {}", shard.display()))?;
        make_readonly(&self.tmp);
        fs::rename(&self.tmp, &dest).context(|| format!("committing {}", dest.display()))?;
        self.cache.writes.fetch_add(1, Ordering::Relaxed);
        Ok(PutOutcome { hash, size, written: true })
    }
}

impl Drop for BlobWriter<'_> {
    fn drop(&mut self) {
        self.file.take();
        if self.tmp.exists() {
            make_writable(&self.tmp);
            let _ = fs::remove_file(&self.tmp);
        }
    }
}

fn is_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

fn record_copy(dest: &Path, hash: &ContentHash) -> Result<()> {
    let (Some(parent), Some(name)) = (dest.parent(), dest.file_name()) else {
        return Ok(());
    };
    let note = parent.join(COPIES_NOTE);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&note)
        .context(|| format!("opening {}", note.display()))?;
    writeln!(file, "{} {}", hash.hex(), name.to_string_lossy())
        .context(|| format!("writing {}", note.display()))
}

fn make_readonly(path: &Path) {
    if let Ok(meta) = fs::metadata(path) {
        let mut perms = meta.permissions();
        perms.set_readonly(true);
        let _ = fs::set_permissions(path, perms);
    }
}

#[allow(clippy::permissions_set_readonly_false)]
fn make_writable(path: &Path) {
    if let Ok(meta) = fs::metadata(path) {
        let mut perms = meta.permissions();
        perms.set_readonly(false);
        let _ = fs::set_permissions(path, perms);
    }
}

#[cfg(unix)]
fn symlink_file(target: &Path, link: &Path) -> io::Result<()> {
    std::os::unix::fs::symlink(target, link)
}

#[cfg(windows)]
fn symlink_file(target: &Path, link: &Path) -> io::Result<()> {
    std::os::windows::fs::symlink_file(target, link)
}
