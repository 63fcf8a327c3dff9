//! User configuration: library location, registry URL, token and fetch
//! parallelism.
//!
//! Each setting comes from the first of: command-line flag, environment
//! variable, config file. The file is flat `key=value` text at
//! `$BRICKS_CONFIG`, else `$XDG_CONFIG_HOME/bricks/config`, else
//! `~/.config/bricks/config`.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::Serialize;

use crate::install::DEFAULT_PARALLEL_FETCH;

pub const ENV_CONFIG: &str = "BRICKS_CONFIG";
pub const ENV_LIBRARY: &str = "BRICKS_LIBRARY";
pub const ENV_REGISTRY: &str = "BRICKS_REGISTRY";
pub const ENV_TOKEN: &str = "BRICKS_TOKEN";
pub const ENV_PARALLEL: &str = "BRICKS_PARALLEL_FETCH";

const KEY_LIBRARY: &str = "library";
const KEY_REGISTRY: &str = "registry";
const KEY_TOKEN: &str = "token";
const KEY_PARALLEL: &str = "parallel_fetch";
const KNOWN_KEYS: [&str; 4] = [KEY_LIBRARY, KEY_REGISTRY, KEY_TOKEN, KEY_PARALLEL];

pub const REDACTED: &str = "****";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}:{line}: {reason}")]
    Syntax { path: String, line: usize, reason: String },

    #[error("invalid {key}: {reason}")]
    Invalid { key: &'static str, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

/// Where a setting's value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Env,
    File,
    Default,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Flag => "flag",
            Self::Env => "env",
            Self::File => "file",
            Self::Default => "default",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Setting<T> {
    pub value: T,
    pub source: Source,
}

/// Contents of the config file, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfigFile {
    entries: IndexMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut entries = IndexMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let syntax = |reason: String| ConfigError::Syntax {
                path: origin.to_string(),
                line: i + 1,
                reason,
            };
            let (k, v) = line.split_once('=').ok_or_else(|| syntax("expected key=value".into()))?;
            let k = k.trim();
            if !KNOWN_KEYS.contains(&k) {
                return Err(syntax(format!("unknown key {k:?}")));
            }
            entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    /// Reads the file; a missing file is empty.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        match fs::read_to_string(path) {
            Ok(text) => Self::parse(&text, &path.display().to_string()),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Self::default()),
            Err(source) => Err(ConfigError::Io {
                context: format!("reading {}", path.display()),
                source,
            }),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.entries.insert(key.to_string(), value.to_string());
    }

    pub fn to_text(&self) -> String {
        let mut keys: Vec<&String> = self.entries.keys().collect();
        keys.sort_by_key(|k| KNOWN_KEYS.iter().position(|known| known == k));
        keys.into_iter()
            .map(|k| format!("{k}={}\n", self.entries[k]))
            .collect()
    }

    /// Writes the file with owner-only permissions, since it holds the token.
    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let io_err = |source| ConfigError::Io {
            context: format!("writing {}", path.display()),
            source,
        };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err)?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_text()).map_err(io_err)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&tmp, fs::Permissions::from_mode(0o600)).map_err(io_err)?;
        }
        fs::rename(&tmp, path).map_err(io_err)
    }
}

/// Values given on the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub library: Option<PathBuf>,
    pub registry: Option<String>,
    pub token: Option<String>,
    pub parallel_fetch: Option<usize>,
}

/// Effective settings after applying precedence.
#[derive(Clone, PartialEq, Eq)]
pub struct Config {
    pub library: Option<Setting<PathBuf>>,
    pub registry: Option<Setting<String>>,
    pub token: Option<Setting<String>>,
    pub parallel_fetch: Setting<usize>,
}

impl fmt::Debug for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Config")
            .field("library", &self.library)
            .field("registry", &self.registry)
            .field("token", &self.token.as_ref().map(|t| (REDACTED, t.source)))
            .field("parallel_fetch", &self.parallel_fetch)
            .finish()
    }
}

/// Default config file location for the given environment.
pub fn default_path(env: &dyn Fn(&str) -> Option<String>) -> Option<PathBuf> {
    if let Some(p) = env(ENV_CONFIG).filter(|p| !p.is_empty()) {
        return Some(PathBuf::from(p));
    }
    let base = env("XDG_CONFIG_HOME")
        .filter(|p| !p.is_empty())
        .map(PathBuf::from)
        .or_else(|| env("HOME").map(|h| Path::new(&h).join(".config")))?;
    Some(base.join("bricks").join("config"))
}

/// The process environment, for [`Config::resolve`].
pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

fn pick<T>(
    flag: Option<T>,
    env: Option<String>,
    file: Option<&str>,
    parse: impl Fn(&str) -> Result<T, String>,
    key: &'static str,
) -> Result<Option<Setting<T>>, ConfigError> {
    if let Some(value) = flag {
        return Ok(Some(Setting { value, source: Source::Flag }));
    }
    let invalid = |reason| ConfigError::Invalid { key, reason };
    if let Some(raw) = env.filter(|v| !v.is_empty()) {
        return Ok(Some(Setting {
            value: parse(&raw).map_err(invalid)?,
            source: Source::Env,
        }));
    }
    if let Some(raw) = file.filter(|v| !v.is_empty()) {
        return Ok(Some(Setting {
            value: parse(raw).map_err(invalid)?,
            source: Source::File,
        }));
    }
    Ok(None)
}

fn parse_parallel(raw: &str) -> Result<usize, String> {
    match raw.parse::<usize>() {
        Ok(n) if n >= 1 => Ok(n),
        _ => Err(format!("{raw:?} is not an integer >= 1")),
    }
}

impl Config {
    pub fn resolve(flags: &Overrides, env: &dyn Fn(&str) -> Option<String>, file: &ConfigFile) -> Result<Self, ConfigError> {
        let library = pick(
            flags.library.clone(),
            env(ENV_LIBRARY),
            file.get(KEY_LIBRARY),
            |s| Ok(PathBuf::from(s)),
            KEY_LIBRARY,
        )?;
        let registry = pick(
            flags.registry.clone(),
            env(ENV_REGISTRY),
            file.get(KEY_REGISTRY),
            |s| Ok(s.trim_end_matches('/').to_string()),
            KEY_REGISTRY,
        )?;
        let token = pick(flags.token.clone(), env(ENV_TOKEN), file.get(KEY_TOKEN), |s| Ok(s.to_string()), KEY_TOKEN)?;
        if let Some(0) = flags.parallel_fetch {
            return Err(ConfigError::Invalid {
                key: KEY_PARALLEL,
                reason: "must be at least 1".into(),
            });
        }
        let parallel_fetch = pick(
            flags.parallel_fetch,
            env(ENV_PARALLEL),
            file.get(KEY_PARALLEL),
            parse_parallel,
            KEY_PARALLEL,
        )?
        .unwrap_or(Setting {
            value: DEFAULT_PARALLEL_FETCH,
            source: Source::Default,
        });
        Ok(Self {
            library,
            registry,
            token,
            parallel_fetch,
        })
    }

    /// `key<TAB>value<TAB>source` lines with the token redacted.
    pub fn show(&self) -> String {
        let mut out = String::new();
        let mut line = |key: &str, value: Option<String>, source: Option<Source>| {
            let value = value.unwrap_or_else(|| "(unset)".into());
            let source = source.map_or_else(|| "-".to_string(), |s| s.to_string());
            out.push_str(&format!("{key}\t{value}\t{source}\n"));
        };
        line(
            KEY_LIBRARY,
            self.library.as_ref().map(|s| s.value.display().to_string()),
            self.library.as_ref().map(|s| s.source),
        );
        line(
            KEY_REGISTRY,
            self.registry.as_ref().map(|s| s.value.clone()),
            self.registry.as_ref().map(|s| s.source),
        );
        line(KEY_TOKEN, self.token.as_ref().map(|_| REDACTED.to_string()), self.token.as_ref().map(|s| s.source));
        line(
            KEY_PARALLEL,
            Some(self.parallel_fetch.value.to_string()),
            Some(self.parallel_fetch.source),
        );
        out
    }

    /// The file contents that would reproduce the given overrides on top of `file`.
    pub fn merged_file(file: &ConfigFile, flags: &Overrides) -> ConfigFile {
        let mut out = file.clone();
        if let Some(l) = &flags.library {
            out.set(KEY_LIBRARY, &l.display().to_string());
        }
        if let Some(r) = &flags.registry {
            out.set(KEY_REGISTRY, r.trim_end_matches('/'));
        }
        if let Some(t) = &flags.token {
            out.set(KEY_TOKEN, t);
        }
        if let Some(p) = flags.parallel_fetch {
            out.set(KEY_PARALLEL, &p.to_string());
        }
        out
    }
}
