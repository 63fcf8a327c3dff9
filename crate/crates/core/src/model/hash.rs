use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

const DIR_SUFFIX: &str = ".dir";

/// An MD5 digest naming a blob in the content store.
///
/// Rendered as 32 lowercase hex digits; directory manifests carry a `.dir`
/// suffix so that a reader can tell which digests must be expanded.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentHash {
    digest: [u8; 16],
    is_dir: bool,
}

impl ContentHash {
    pub fn from_digest(digest: [u8; 16], is_dir: bool) -> Self {
        Self { digest, is_dir }
    }

    pub fn digest(&self) -> &[u8; 16] {
        &self.digest
    }

    pub fn is_dir(&self) -> bool {
        self.is_dir
    }

    /// The bare 32-hex digest, without any `.dir` suffix.
    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }

    /// Same digest, flagged as a plain file blob.
    pub fn as_file(&self) -> Self {
        Self {
            digest: self.digest,
            is_dir: false,
        }
    }

    pub fn with_dir(self, is_dir: bool) -> Self {
        Self { is_dir, ..self }
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())?;
        if self.is_dir {
            f.write_str(DIR_SUFFIX)?;
        }
        Ok(())
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentHash({self})")
    }
}

impl FromStr for ContentHash {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (hex_part, is_dir) = match s.strip_suffix(DIR_SUFFIX) {
            Some(rest) => (rest, true),
            None => (s, false),
        };
        let valid = hex_part.len() == 32
            && hex_part
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !valid {
            return Err(ModelError::BadHash(s.to_string()));
        }
        let mut digest = [0u8; 16];
        hex::decode_to_slice(hex_part, &mut digest).map_err(|_| ModelError::BadHash(s.into()))?;
        Ok(Self { digest, is_dir })
    }
}

impl Serialize for ContentHash {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ContentHash {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
