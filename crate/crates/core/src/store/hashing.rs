use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use md5::{Digest, Md5};

use super::tree::hash_tree;
use super::{IoContext, Result};
use crate::model::ContentHash;

pub fn hash_bytes(data: &[u8]) -> ContentHash {
    ContentHash::from_digest(Md5::digest(data).into(), false)
}

/// Hashes a stream, returning the digest and the number of bytes read.
pub fn hash_reader(mut reader: impl Read) -> io::Result<(ContentHash, u64)> {
    let mut hasher = Md5::new();
    let mut buf = vec![0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = match reader.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        };
        hasher.update(&buf[..n]);
        size += n as u64;
    }
    Ok((ContentHash::from_digest(hasher.finalize().into(), false), size))
}

pub fn hash_file(path: &Path) -> Result<(ContentHash, u64)> {
    let file = File::open(path).context(|| format!("opening {}", path.display()))?;
    hash_reader(file).context(|| format!("reading {}", path.display()))
}

/// Hashes whatever is at `path`: a tree digest for directories, a file
/// digest otherwise. Returns `None` when nothing exists there.
pub fn hash_path(path: &Path) -> Result<Option<(ContentHash, u64)>> {
    match std::fs::metadata(path) {
        Ok(meta) if meta.is_dir() => {
            let (manifest, hash) = hash_tree(path)?;
            Ok(Some((hash, manifest.total_size())))
        }
        Ok(_) => hash_file(path).map(Some),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e).context(|| format!("inspecting {}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_digests() {
        assert_eq!(hash_bytes(b"").to_string(), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(hash_bytes(b"hello").to_string(), "5d41402abc4b2a76b9719d911017c592");
    }

    #[test]
    fn streaming_matches_one_shot() {
        let data: Vec<u8> = (0..200_000u32).map(|i| (i % 251) as u8).collect();
        let (h, n) = hash_reader(&data[..]).unwrap();
        assert_eq!(h, hash_bytes(&data));
        assert_eq!(n, data.len() as u64);
    }
}
