use std::fmt;
use std::io::{self, Read, Seek, Write};
use std::path::Path;
use std::time::Duration;

use md5::{Digest, Md5};
use reqwest::blocking::{Client, RequestBuilder, Response};
use reqwest::StatusCode;
use url::Url;

use super::archive;
use super::{CommitInfo, RegistryError, Result, BRANCH_HEADER, COMMIT_HEADER, CONTENT_MD5_HEADER};
use crate::model::{BrickRef, CommitSpec, ContentHash, Lockfile, LOCK_FILE};
use crate::store::{Cache, PutOutcome, StoreError};

/// Where a registry lives and how to authenticate to it.
#[derive(Clone, PartialEq, Eq)]
pub struct RegistryEndpoint {
    base_url: String,
    token: String,
}

impl RegistryEndpoint {
    pub fn new(base_url: &str, token: &str) -> Result<Self> {
        let trimmed = base_url.trim().trim_end_matches('/');
        let url = Url::parse(trimmed).map_err(|e| RegistryError::Rejected {
            status: 0,
            message: format!("invalid registry URL {trimmed:?}: {e}"),
        })?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(RegistryError::Rejected {
                status: 0,
                message: format!("registry URL must be http or https, got {}", url.scheme()),
            });
        }
        Ok(Self {
            base_url: trimmed.to_string(),
            token: token.to_string(),
        })
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    pub fn token(&self) -> &str {
        &self.token
    }

    /// The endpoint a reference should be fetched from. References carrying
    /// a source URL point at their own registry: a `.../api/{org}/{name}`
    /// URL has that suffix stripped, any other URL keeps only its origin.
    pub fn for_ref(&self, brick: &BrickRef) -> Result<Self> {
        let Some(source) = &brick.source_url else {
            return Ok(self.clone());
        };
        let suffix = format!("/api/{}/{}", brick.org, brick.name);
        let base = match source.trim_end_matches(".git").strip_suffix(&suffix) {
            Some(base) => base.to_string(),
            None => {
                let url = Url::parse(source).map_err(|e| RegistryError::Rejected {
                    status: 0,
                    message: format!("invalid source URL: {e}"),
                })?;
                url.origin().ascii_serialization()
            }
        };
        Self::new(&base, &self.token)
    }
}

impl fmt::Debug for RegistryEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryEndpoint")
            .field("base_url", &self.base_url)
            .field("token", &"****")
            .finish()
    }
}

/// Retries network failures and 5xx responses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total tries, including the first.
    pub attempts: u32,
    /// Pause before the n-th retry; the last value repeats.
    pub delays: Vec<Duration>,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            delays: vec![Duration::from_millis(500), Duration::from_secs(1), Duration::from_secs(2)],
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            attempts: 1,
            delays: Vec::new(),
        }
    }

    fn delay(&self, retry: usize) -> Duration {
        self.delays
            .get(retry)
            .or(self.delays.last())
            .copied()
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PushReport {
    pub commit: CommitInfo,
    /// False when the registry already had this exact commit.
    pub created: bool,
    pub blobs_uploaded: usize,
    pub snapshot_bytes: u64,
}

#[derive(Clone)]
pub struct RegistryClient {
    endpoint: RegistryEndpoint,
    http: Client,
    retry: RetryPolicy,
}

impl fmt::Debug for RegistryClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RegistryClient")
            .field("endpoint", &self.endpoint)
            .field("retry", &self.retry)
            .finish()
    }
}

impl RegistryClient {
    pub fn new(endpoint: RegistryEndpoint) -> Result<Self> {
        let http = Client::builder()
            .connect_timeout(Duration::from_secs(10))
            .timeout(None)
            .build()
            .map_err(network)?;
        Ok(Self {
            endpoint,
            http,
            retry: RetryPolicy::default(),
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn endpoint(&self) -> &RegistryEndpoint {
        &self.endpoint
    }

    /// A client for another endpoint sharing this one's connection pool.
    pub fn for_ref(&self, brick: &BrickRef) -> Result<Self> {
        Ok(Self {
            endpoint: self.endpoint.for_ref(brick)?,
            http: self.http.clone(),
            retry: self.retry.clone(),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.endpoint.base_url, path)
    }

    fn request(&self, method: reqwest::Method, path: &str) -> RequestBuilder {
        self.http
            .request(method, self.url(path))
            .bearer_auth(&self.endpoint.token)
    }

    fn with_retries<T>(&self, mut op: impl FnMut() -> Result<T>) -> Result<T> {
        let mut tries = 0;
        loop {
            tries += 1;
            match op() {
                Err(e) if e.is_retryable() && tries < self.retry.attempts.max(1) => {
                    let pause = self.retry.delay(tries as usize - 1);
                    log::warn!("{e}; retrying in {pause:?}");
                    std::thread::sleep(pause);
                }
                other => return other,
            }
        }
    }

    fn send(&self, req: RequestBuilder) -> Result<Response> {
        let response = req.send().map_err(network)?;
        check_status(response)
    }

    /// Confirms the registry is reachable and accepts the token.
    pub fn ping(&self) -> Result<()> {
        let empty = crate::store::hash_bytes(b"");
        let response = self
            .with_retries(|| self.request(reqwest::Method::GET, &format!("/blobs/{empty}")).send().map_err(network))?;
        match check_status(response) {
            Ok(_) | Err(RegistryError::NotFound(_)) => Ok(()),
            Err(e) => Err(e),
        }
    }

    /// Every known commit of a brick, newest first.
    pub fn list_commits(&self, org: &str, name: &str) -> Result<Vec<CommitInfo>> {
        let path = format!("/api/{org}/{name}/commits");
        self.with_retries(|| {
            self.send(self.request(reqwest::Method::GET, &path))?
                .json::<Vec<CommitInfo>>()
                .map_err(network)
        })
    }

    /// Resolves `latest` or a prefix to a full commit id.
    pub fn resolve_commit(&self, brick: &BrickRef) -> Result<String> {
        if let CommitSpec::Full(commit) = &brick.commit {
            return Ok(commit.clone());
        }
        let commits = self.list_commits(&brick.org, &brick.name)?;
        match &brick.commit {
            CommitSpec::Latest => commits
                .into_iter()
                .find(|c| c.is_head_of_main)
                .map(|c| c.commit)
                .ok_or_else(|| RegistryError::NotFound(format!("{} has no commit on main", brick.slug()))),
            spec @ CommitSpec::Prefix(prefix) => {
                let matches: Vec<String> = commits
                    .into_iter()
                    .filter(|c| spec.matches(&c.commit))
                    .map(|c| c.commit)
                    .collect();
                match matches.len() {
                    0 => Err(RegistryError::NotFound(format!(
                        "no commit of {} starts with {prefix}",
                        brick.slug()
                    ))),
                    1 => Ok(matches.into_iter().next().unwrap()),
                    _ => Err(RegistryError::AmbiguousPrefix {
                        brick: brick.slug(),
                        prefix: prefix.clone(),
                        matches,
                    }),
                }
            }
            CommitSpec::Full(_) => unreachable!(),
        }
    }

    /// Downloads a commit's snapshot archive, verified against its digest header.
    pub fn fetch_snapshot_bytes(&self, org: &str, name: &str, commit: &str) -> Result<Vec<u8>> {
        let path = format!("/api/{org}/{name}/{commit}/snapshot.tar");
        self.with_retries(|| {
            let response = self.send(self.request(reqwest::Method::GET, &path))?;
            let expected = md5_header(&response)?;
            let bytes = response.bytes().map_err(network)?.to_vec();
            verify_md5(&bytes, expected.as_deref(), "snapshot")?;
            Ok(bytes)
        })
    }

    /// Downloads and unpacks a snapshot into `dest`; returns the archive size.
    pub fn fetch_snapshot(&self, org: &str, name: &str, commit: &str, dest: &Path) -> Result<u64> {
        let bytes = self.fetch_snapshot_bytes(org, name, commit)?;
        archive::unpack(&bytes, dest).map_err(|source| RegistryError::Io {
            context: format!("unpacking snapshot into {}", dest.display()),
            source,
        })?;
        Ok(bytes.len() as u64)
    }

    pub fn fetch_lock(&self, org: &str, name: &str, commit: &str) -> Result<Lockfile> {
        let path = format!("/api/{org}/{name}/{commit}/lock");
        let bytes = self.with_retries(|| {
            let response = self.send(self.request(reqwest::Method::GET, &path))?;
            let expected = md5_header(&response)?;
            let bytes = response.bytes().map_err(network)?.to_vec();
            verify_md5(&bytes, expected.as_deref(), LOCK_FILE)?;
            Ok(bytes)
        })?;
        Lockfile::parse(&bytes).map_err(|e| RegistryError::Integrity(format!("registry sent an invalid lockfile: {e}")))
    }

    /// Streams a blob into `sink`. Bytes are spooled and verified first, so
    /// `sink` only ever sees content matching `hash`.
    pub fn fetch_blob(&self, hash: &ContentHash, sink: &mut dyn Write) -> Result<u64> {
        let mut spool = self.with_retries(|| {
            let mut spool = tempfile::tempfile().map_err(|source| RegistryError::Io {
                context: "creating download spool".into(),
                source,
            })?;
            let mut hasher = Md5::new();
            let size = self.download(hash, &mut |chunk| {
                hasher.update(chunk);
                spool.write_all(chunk)
            })?;
            let actual = hex::encode(hasher.finalize());
            if actual != hash.hex() {
                return Err(mismatch(hash, &actual, size));
            }
            Ok(spool)
        })?;
        let io_err = |source| RegistryError::Io {
            context: format!("copying blob {hash}"),
            source,
        };
        spool.rewind().map_err(io_err)?;
        io::copy(&mut spool, sink).map_err(io_err)
    }

    /// Downloads a blob straight into `cache`. A transfer whose digest does
    /// not match never becomes visible in the cache.
    pub fn fetch_blob_into_cache(&self, hash: &ContentHash, cache: &Cache) -> Result<PutOutcome> {
        self.with_retries(|| {
            let mut writer = cache.writer()?;
            self.download(hash, &mut |chunk| writer.write_all(chunk))?;
            match writer.commit(Some(hash)) {
                Err(StoreError::Integrity { actual, .. }) => Err(mismatch(hash, &actual.hex(), 0)),
                other => Ok(other?),
            }
        })
    }

    fn download(&self, hash: &ContentHash, sink: &mut dyn FnMut(&[u8]) -> io::Result<()>) -> Result<u64> {
        let mut response = self.send(self.request(reqwest::Method::GET, &format!("/blobs/{hash}")))?;
        let mut buf = vec![0u8; 64 * 1024];
        let mut total = 0u64;
        loop {
            let n = match response.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(RegistryError::Network(format!("reading blob {hash}: {e}"))),
            };
            sink(&buf[..n]).map_err(|source| RegistryError::Io {
                context: format!("storing blob {hash}"),
                source,
            })?;
            total += n as u64;
        }
        Ok(total)
    }

    pub fn put_blob(&self, hash: &ContentHash, bytes: Vec<u8>) -> Result<()> {
        let path = format!("/blobs/{hash}");
        self.with_retries(|| {
            self.send(self.request(reqwest::Method::PUT, &path).body(bytes.clone()))
                .map(|_| ())
        })
    }

    /// Publishes the brick in `workdir`: its snapshot plus every payload blob
    /// the registry does not already hold. Blobs are read from `cache`.
    pub fn push_brick(
        &self,
        workdir: &Path,
        cache: &Cache,
        org: &str,
        name: &str,
        branch: Option<&str>,
        commit: Option<&str>,
    ) -> Result<PushReport> {
        let lock_path = workdir.join(LOCK_FILE);
        let lock_bytes = std::fs::read(&lock_path).map_err(|source| RegistryError::Io {
            context: format!("reading {}", lock_path.display()),
            source,
        })?;
        let lock = Lockfile::parse(&lock_bytes)
            .map_err(|e| RegistryError::Rejected { status: 0, message: e.to_string() })?;
        let snapshot = archive::pack_snapshot(workdir, &lock).map_err(|source| RegistryError::Io {
            context: format!("packing {}", workdir.display()),
            source,
        })?;

        let mut uploaded = 0;
        for round in 0..3 {
            let mut req = self
                .request(reqwest::Method::POST, &format!("/api/{org}/{name}/commits"))
                .header(reqwest::header::CONTENT_TYPE, "application/x-tar");
            if let Some(branch) = branch {
                req = req.header(BRANCH_HEADER, branch);
            }
            if let Some(commit) = commit {
                req = req.header(COMMIT_HEADER, commit);
            }
            let req = req.body(snapshot.clone());
            let response = self.with_retries(|| req.try_clone().expect("body is buffered").send().map_err(network))?;
            let status = response.status();
            if status == StatusCode::UNPROCESSABLE_ENTITY && round < 2 {
                let body: serde_json::Value = response.json().map_err(network)?;
                let Some(missing) = body.get("missing").and_then(|m| m.as_array()) else {
                    return Err(RegistryError::Rejected {
                        status: status.as_u16(),
                        message: body["error"].as_str().unwrap_or("rejected").to_string(),
                    });
                };
                for digest in missing {
                    let hash: ContentHash = digest
                        .as_str()
                        .and_then(|d| d.parse().ok())
                        .ok_or_else(|| RegistryError::Integrity(format!("registry listed bad digest {digest}")))?;
                    self.put_blob(&hash, cache.read(&hash)?)?;
                    uploaded += 1;
                }
                // Directory manifests were missing, so their members may be too.
                continue;
            }
            let created = status == StatusCode::CREATED;
            let info: CommitInfo = check_status(response)?.json().map_err(network)?;
            log::info!("pushed {org}/{name}@{} ({uploaded} blobs uploaded)", info.commit);
            return Ok(PushReport {
                commit: info,
                created,
                blobs_uploaded: uploaded,
                snapshot_bytes: snapshot.len() as u64,
            });
        }
        unreachable!("the last push round always returns")
    }
}

fn network(e: reqwest::Error) -> RegistryError {
    // reqwest includes the URL but never request headers, so the token
    // cannot leak through this message.
    RegistryError::Network(e.without_url().to_string())
}

fn check_status(response: Response) -> Result<Response> {
    let status = response.status();
    if status.is_success() {
        return Ok(response);
    }
    let body = response.text().unwrap_or_default();
    let message = serde_json::from_str::<serde_json::Value>(&body)
        .ok()
        .and_then(|v| v.get("error").and_then(|e| e.as_str()).map(str::to_string))
        .unwrap_or(body);
    Err(match status {
        StatusCode::UNAUTHORIZED | StatusCode::FORBIDDEN => RegistryError::Auth,
        StatusCode::NOT_FOUND => RegistryError::NotFound(message),
        StatusCode::CONFLICT => RegistryError::Conflict(message),
        s if s.is_server_error() => RegistryError::Server {
            status: s.as_u16(),
            message,
        },
        s => RegistryError::Rejected {
            status: s.as_u16(),
            message,
        },
    })
}

fn md5_header(response: &Response) -> Result<Option<String>> {
    match response.headers().get(CONTENT_MD5_HEADER) {
        None => Ok(None),
        Some(v) => v
            .to_str()
            .map(|s| Some(s.to_ascii_lowercase()))
            .map_err(|_| RegistryError::Integrity("unreadable digest header".into())),
    }
}

fn verify_md5(bytes: &[u8], expected: Option<&str>, what: &str) -> Result<()> {
    let Some(expected) = expected else {
        return Err(RegistryError::Integrity(format!("{what} response has no digest header")));
    };
    let actual = hex::encode(Md5::digest(bytes));
    if actual != expected {
        return Err(RegistryError::Integrity(format!(
            "{what} digest {actual} does not match header {expected}"
        )));
    }
    Ok(())
}

fn mismatch(hash: &ContentHash, actual: &str, size: u64) -> RegistryError {
    RegistryError::Integrity(format!("blob {hash} arrived as {actual} ({size} bytes)"))
}
