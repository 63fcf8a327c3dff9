//! Workspace-relative path handling shared by the manifest and lockfile.

use super::ModelError;

/// Normalizes a workspace-relative path.
///
/// Leading `./` segments and empty segments are dropped. A trailing `/` is
/// kept because it marks a directory in the manifest. Absolute paths and
/// `..` segments are rejected.
pub(crate) fn normalize(raw: &str) -> Result<String, ModelError> {
    let invalid = |reason| ModelError::InvalidPath {
        path: raw.to_string(),
        reason,
    };
    if raw.is_empty() {
        return Err(invalid("empty path"));
    }
    if raw.starts_with('/') || raw.starts_with('\\') || has_drive_prefix(raw) {
        return Err(invalid("absolute paths are not allowed"));
    }
    if raw.contains('\\') {
        return Err(invalid("use '/' as the path separator"));
    }
    let is_dir = raw.ends_with('/');
    let mut parts = Vec::new();
    for segment in raw.split('/') {
        match segment {
            "" | "." => continue,
            ".." => return Err(invalid("'..' segments are not allowed")),
            s => parts.push(s),
        }
    }
    if parts.is_empty() {
        return Err(invalid("path names the workspace root"));
    }
    let mut out = parts.join("/");
    if is_dir {
        out.push('/');
    }
    Ok(out)
}

fn has_drive_prefix(raw: &str) -> bool {
    let b = raw.as_bytes();
    b.len() >= 2 && b[0].is_ascii_alphabetic() && b[1] == b':'
}

/// The path without its directory marker.
pub(crate) fn key(path: &str) -> &str {
    path.strip_suffix('/').unwrap_or(path)
}

/// True when `inner` equals `outer` or lies below it.
pub fn is_under(inner: &str, outer: &str) -> bool {
    let inner = key(inner);
    let outer = key(outer);
    inner == outer
        || (inner.len() > outer.len()
            && inner.starts_with(outer)
            && inner.as_bytes()[outer.len()] == b'/')
}

/// True when one path equals or contains the other.
pub fn paths_overlap(a: &str, b: &str) -> bool {
    is_under(a, b) || is_under(b, a)
}
