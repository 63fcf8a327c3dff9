use std::fmt;

use url::Url;

use super::ModelError;

/// Organization assumed when a reference names only the brick.
pub const DEFAULT_ORG: &str = "biobricks-ai";

/// Shortest accepted commit prefix.
pub const MIN_PREFIX_LEN: usize = 5;

const FULL_COMMIT_LEN: usize = 40;

/// Which commit of a brick a reference selects.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum CommitSpec {
    /// Head of the main branch at resolution time.
    Latest,
    /// A hex prefix of at least [`MIN_PREFIX_LEN`] characters.
    Prefix(String),
    /// A full 40-hex commit id.
    Full(String),
}

impl CommitSpec {
    /// Parses a commit token; input is lowercased.
    pub fn parse(token: &str) -> Result<Self, String> {
        if token == "latest" {
            return Ok(Self::Latest);
        }
        if token.is_empty() || !token.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(format!("commit {token:?} is not hexadecimal"));
        }
        let token = token.to_ascii_lowercase();
        match token.len() {
            FULL_COMMIT_LEN => Ok(Self::Full(token)),
            n if n < MIN_PREFIX_LEN => Err(format!(
                "commit prefix {token:?} is shorter than {MIN_PREFIX_LEN} characters"
            )),
            n if n > FULL_COMMIT_LEN => Err(format!("commit {token:?} is longer than 40 characters")),
            _ => Ok(Self::Prefix(token)),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, Self::Full(_))
    }

    /// True when `commit` is selected by this spec. `Latest` matches nothing.
    pub fn matches(&self, commit: &str) -> bool {
        match self {
            Self::Latest => false,
            Self::Prefix(p) => commit.starts_with(p.as_str()),
            Self::Full(c) => commit == c,
        }
    }
}

impl fmt::Display for CommitSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Latest => f.write_str("latest"),
            Self::Prefix(s) | Self::Full(s) => f.write_str(s),
        }
    }
}

/// An `(org, name, commit)` coordinate identifying one brick version.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BrickRef {
    pub org: String,
    pub name: String,
    pub commit: CommitSpec,
    /// Explicit location the brick should be fetched from.
    pub source_url: Option<String>,
}

impl BrickRef {
    pub fn new(org: &str, name: &str, commit: CommitSpec) -> Result<Self, ModelError> {
        let input = format!("{org}/{name}");
        check_ident(&input, org)?;
        check_ident(&input, name)?;
        Ok(Self {
            org: org.to_string(),
            name: name.to_string(),
            commit,
            source_url: None,
        })
    }

    /// Parses the reference forms accepted on the command line:
    ///
    /// * `name`: `default_org/name` at the latest commit;
    /// * `org/name` and `org/name@<hex>`;
    /// * `<scheme>://host/.../org/name[@<hex>]`: an explicit source location.
    pub fn parse(text: &str, default_org: &str) -> Result<Self, ModelError> {
        let input = text.trim();
        let malformed = |reason: String| ModelError::MalformedRef {
            input: text.to_string(),
            reason,
        };
        if input.is_empty() {
            return Err(malformed("empty reference".into()));
        }
        if input.contains("://") {
            return Self::parse_url(input).map_err(malformed);
        }

        let (coords, commit) = match input.split_once('@') {
            Some((coords, commit)) => (coords, CommitSpec::parse(commit).map_err(malformed)?),
            None => (input, CommitSpec::Latest),
        };
        let (org, name) = match coords.split_once('/') {
            Some((org, name)) => (org, name),
            None => (default_org, coords),
        };
        check_ident(text, org)?;
        check_ident(text, name)?;
        Ok(Self {
            org: org.to_string(),
            name: name.to_string(),
            commit,
            source_url: None,
        })
    }

    fn parse_url(input: &str) -> Result<Self, String> {
        // An '@' after the last '/' separates the commit; earlier ones
        // belong to the URL's userinfo.
        let split = input
            .rsplit_once('@')
            .filter(|(loc, tail)| !tail.contains('/') && has_path(loc));
        let (location, commit) = match split {
            Some((loc, tail)) => (loc, CommitSpec::parse(tail)?),
            None => (input, CommitSpec::Latest),
        };
        let location = location.trim_end_matches('/');
        let url = Url::parse(location).map_err(|e| format!("invalid URL: {e}"))?;
        if url.cannot_be_a_base() || url.host_str().is_none() {
            return Err("URL has no host".into());
        }
        let segments: Vec<&str> = url
            .path_segments()
            .map(|s| s.filter(|seg| !seg.is_empty()).collect())
            .unwrap_or_default();
        if segments.len() < 2 {
            return Err("URL must end in /<org>/<name>".into());
        }
        let org = segments[segments.len() - 2];
        let name = segments[segments.len() - 1];
        let name = name.strip_suffix(".git").unwrap_or(name);
        if !is_ident(org) || !is_ident(name) {
            return Err(format!("URL path does not end in a valid org/name: {org}/{name}"));
        }
        Ok(Self {
            org: org.to_string(),
            name: name.to_string(),
            commit,
            source_url: Some(location.to_string()),
        })
    }

    /// `org/name`
    pub fn slug(&self) -> String {
        format!("{}/{}", self.org, self.name)
    }

    /// Same brick pinned to a resolved commit.
    pub fn pinned(&self, commit: &str) -> Self {
        Self {
            commit: CommitSpec::Full(commit.to_string()),
            ..self.clone()
        }
    }
}

impl fmt::Display for BrickRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source_url {
            Some(url) => f.write_str(url)?,
            None => write!(f, "{}/{}", self.org, self.name)?,
        }
        if self.commit != CommitSpec::Latest {
            write!(f, "@{}", self.commit)?;
        }
        Ok(())
    }
}

fn has_path(location: &str) -> bool {
    location
        .split_once("://")
        .is_some_and(|(_, rest)| rest.contains('/'))
}

pub(crate) fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'-'))
}

fn check_ident(input: &str, ident: &str) -> Result<(), ModelError> {
    if is_ident(ident) {
        Ok(())
    } else {
        Err(ModelError::MalformedRef {
            input: input.to_string(),
            reason: format!("{ident:?} is not a valid identifier"),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bare_name_uses_default_org() {
        let r = BrickRef::parse("hgnc", DEFAULT_ORG).unwrap();
        assert_eq!(r.org, "biobricks-ai");
        assert_eq!(r.name, "hgnc");
        assert_eq!(r.commit, CommitSpec::Latest);
        assert_eq!(r.source_url, None);
    }

    #[test]
    fn org_name_with_prefix() {
        let r = BrickRef::parse("biobricks-ai/chemharmony@4f060", DEFAULT_ORG).unwrap();
        assert_eq!(r.slug(), "biobricks-ai/chemharmony");
        assert_eq!(r.commit, CommitSpec::Prefix("4f060".into()));
    }

    #[test]
    fn short_prefix_is_rejected() {
        assert!(matches!(
            BrickRef::parse("a/b@4f0", DEFAULT_ORG),
            Err(ModelError::MalformedRef { .. })
        ));
    }

    #[test]
    fn rejects_bad_identifiers() {
        for bad in ["", "  ", "a/b/c", "a b", "../x", "a/..", "org/na$me", "a/b@", "a/b@zzzzzz"] {
            assert!(BrickRef::parse(bad, DEFAULT_ORG).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn full_commit_is_lowercased() {
        let c = "ABCDEF0123456789ABCDEF0123456789ABCDEF01";
        let r = BrickRef::parse(&format!("x/y@{c}"), DEFAULT_ORG).unwrap();
        assert_eq!(r.commit, CommitSpec::Full(c.to_ascii_lowercase()));
    }

    #[test]
    fn url_form_sets_source() {
        let r = BrickRef::parse("https://github.com/biobricks-ai/hgnc.git@4f0601", DEFAULT_ORG).unwrap();
        assert_eq!(r.org, "biobricks-ai");
        assert_eq!(r.name, "hgnc");
        assert_eq!(r.commit, CommitSpec::Prefix("4f0601".into()));
        assert_eq!(r.source_url.as_deref(), Some("https://github.com/biobricks-ai/hgnc.git"));

        let r = BrickRef::parse("http://user@localhost:8080/api/acme/tox", DEFAULT_ORG).unwrap();
        assert_eq!(r.slug(), "acme/tox");
        assert_eq!(r.commit, CommitSpec::Latest);

        assert!(BrickRef::parse("http://localhost:8080/onlyone", DEFAULT_ORG).is_err());
        assert!(BrickRef::parse("http://localhost/a/b@4f0", DEFAULT_ORG).is_err());
    }

    fn ident() -> impl Strategy<Value = String> {
        "[A-Za-z0-9_-][A-Za-z0-9._-]{0,12}"
    }

    fn commit() -> impl Strategy<Value = CommitSpec> {
        prop_oneof![
            Just(CommitSpec::Latest),
            "[0-9a-f]{5,39}".prop_map(CommitSpec::Prefix),
            "[0-9a-f]{40}".prop_map(CommitSpec::Full),
        ]
    }

    proptest! {
        #[test]
        fn rendered_refs_parse_back(org in ident(), name in ident(), commit in commit(), url in any::<bool>()) {
            let name = if name.ends_with(".git") { format!("{name}x") } else { name };
            let mut r = BrickRef { org: org.clone(), name: name.clone(), commit, source_url: None };
            if url {
                r.source_url = Some(format!("http://registry.test:9000/api/{org}/{name}"));
            }
            let text = r.to_string();
            let back = BrickRef::parse(&text, "unused").unwrap();
            prop_assert_eq!(back, r);
        }
    }
}
