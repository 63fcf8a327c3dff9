//! Deterministic ustar snapshots of a brick repository.
//!
//! Entries are regular files only, sorted bytewise by path, with zeroed
//! mtimes and owner fields, so the same tree always packs to the same bytes.

use std::fs;
use std::io::{self, Read};
use std::path::Path;

use tar::{Archive, Builder, EntryType, Header};
use walkdir::WalkDir;

use crate::model::{is_under, Lockfile, LOCK_FILE, PAYLOAD_DIR};
use crate::store::COPIES_NOTE;

/// Directories never shipped in a snapshot.
const EXCLUDED_DIRS: &[&str] = &[PAYLOAD_DIR, ".git", "logs"];

/// Packs every regular file under `dir` for which `include` returns true.
pub fn pack_dir(dir: &Path, include: impl Fn(&str) -> bool) -> io::Result<Vec<u8>> {
    let mut files = Vec::new();
    for item in WalkDir::new(dir).min_depth(1) {
        let item = item.map_err(io::Error::from)?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(dir).expect("walkdir yields children");
        let rel = crate::store::rel_to_slash(rel).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("{} is not UTF-8", rel.display()))
        })?;
        if include(&rel) {
            files.push(rel);
        }
    }
    files.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));

    let mut builder = Builder::new(Vec::new());
    for rel in files {
        let path = dir.join(&rel);
        let meta = fs::metadata(&path)?;
        let mut header = Header::new_ustar();
        header.set_path(&rel)?;
        header.set_entry_type(EntryType::Regular);
        header.set_size(meta.len());
        header.set_mode(if is_executable(&meta) { 0o755 } else { 0o644 });
        header.set_mtime(0);
        header.set_uid(0);
        header.set_gid(0);
        header.set_cksum();
        builder.append(&header, fs::File::open(&path)?)?;
    }
    builder.into_inner()
}

/// Packs a brick workspace: everything except the payload directory, VCS
/// metadata, logs and the lockfile's recorded outputs.
pub fn pack_snapshot(workdir: &Path, lock: &Lockfile) -> io::Result<Vec<u8>> {
    let outs: Vec<String> = lock.outs().map(|(_, r)| r.path.clone()).collect();
    pack_dir(workdir, |rel| {
        !EXCLUDED_DIRS.iter().any(|d| is_under(rel, d))
            && !outs.iter().any(|o| is_under(rel, o))
            && !rel.ends_with(COPIES_NOTE)
    })
}

/// Extracts an archive produced by [`pack_dir`] into `dest`.
pub fn unpack(bytes: &[u8], dest: &Path) -> io::Result<Vec<String>> {
    fs::create_dir_all(dest)?;
    let mut archive = Archive::new(bytes);
    archive.set_preserve_mtime(false);
    let mut paths = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry_path(&entry)?;
        match entry.header().entry_type() {
            EntryType::Regular | EntryType::Continuous => {}
            EntryType::Directory => continue,
            other => {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("unsupported entry type {other:?} for {path}"),
                ))
            }
        }
        if !entry.unpack_in(dest)? {
            return Err(io::Error::new(io::ErrorKind::InvalidData, format!("unsafe path {path}")));
        }
        paths.push(path);
    }
    Ok(paths)
}

/// Reads one file out of an archive without extracting it.
pub fn read_entry(bytes: &[u8], wanted: &str) -> io::Result<Option<Vec<u8>>> {
    let mut archive = Archive::new(bytes);
    for entry in archive.entries()? {
        let mut entry = entry?;
        if entry_path(&entry)? == wanted {
            let mut buf = Vec::new();
            entry.read_to_end(&mut buf)?;
            return Ok(Some(buf));
        }
    }
    Ok(None)
}

/// The lockfile carried by a snapshot archive, if any.
pub fn read_lock(bytes: &[u8]) -> io::Result<Option<Vec<u8>>> {
    read_entry(bytes, LOCK_FILE)
}

fn entry_path<R: Read>(entry: &tar::Entry<'_, R>) -> io::Result<String> {
    let path = entry.path()?;
    path.to_str()
        .map(str::to_string)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "entry path is not UTF-8"))
}

#[cfg(unix)]
fn is_executable(meta: &fs::Metadata) -> bool {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o111 != 0
}

#[cfg(not(unix))]
fn is_executable(_meta: &fs::Metadata) -> bool {
    false
}
