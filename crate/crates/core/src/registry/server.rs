//! Reference registry server.
//!
//! Storage lives under one root: `blobs/` is a content-addressed [`Cache`]
//! holding data blobs, directory manifests and snapshot archives, and
//! `index/{org}/{name}.json` lists each brick's commits.
#![allow(clippy::result_large_err)]

use std::collections::HashSet;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::StreamExt;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};
use tokio::sync::oneshot;

use super::archive;
use super::{CommitInfo, BRANCH_HEADER, COMMIT_HEADER, CONTENT_MD5_HEADER, MAIN_BRANCH};
use crate::model::{BrickRef, CommitSpec, ContentHash, Lockfile};
use crate::store::{hash_bytes, Cache, StoreError};

const MAX_SNAPSHOT_BYTES: usize = 1 << 30;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub root: PathBuf,
    /// Accepted bearer tokens.
    pub tokens: Vec<String>,
}

/// One handled request, as seen by the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestRecord {
    pub method: String,
    pub path: String,
    pub status: u16,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredCommit {
    commit: String,
    branch: String,
    timestamp: u64,
    seq: u64,
    snapshot_md5: String,
}

struct ServerState {
    root: PathBuf,
    blobs: Cache,
    tokens: HashSet<String>,
    index_lock: Mutex<()>,
    log: Mutex<Vec<RequestRecord>>,
}

/// A registry bound to its storage root; turn it into a router or run it.
#[derive(Clone)]
pub struct RegistryServer {
    state: Arc<ServerState>,
}

impl RegistryServer {
    pub fn open(config: ServerConfig) -> std::io::Result<Self> {
        fs::create_dir_all(config.root.join("index"))?;
        let blobs = Cache::open(config.root.join("blobs")).map_err(std::io::Error::other)?;
        Ok(Self {
            state: Arc::new(ServerState {
                root: config.root,
                blobs,
                tokens: config.tokens.into_iter().collect(),
                index_lock: Mutex::new(()),
                log: Mutex::new(Vec::new()),
            }),
        })
    }

    pub fn router(&self) -> Router {
        let state = self.state.clone();
        Router::new()
            .route("/api/{org}/{name}/commits", get(list_commits).post(push_commit))
            .route("/api/{org}/{name}/{commit}/snapshot.tar", get(get_snapshot))
            .route("/api/{org}/{name}/{commit}/lock", get(get_lock))
            .route("/blobs/{hash}", get(get_blob).put(put_blob))
            .layer(middleware::from_fn_with_state(state.clone(), require_token))
            .layer(middleware::from_fn_with_state(state.clone(), record_request))
            .layer(DefaultBodyLimit::max(MAX_SNAPSHOT_BYTES))
            .with_state(state)
    }

    /// Serves on a background thread with its own runtime.
    pub fn spawn(self, addr: SocketAddr) -> std::io::Result<ServerHandle> {
        let listener = std::net::TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let (tx, rx) = oneshot::channel::<()>();
        let router = self.router();
        let thread = std::thread::Builder::new()
            .name("registry-server".into())
            .spawn(move || {
                let runtime = tokio::runtime::Builder::new_multi_thread()
                    .worker_threads(4)
                    .enable_all()
                    .build()
                    .expect("building server runtime");
                runtime.block_on(async move {
                    let listener = tokio::net::TcpListener::from_std(listener).expect("adopting listener");
                    let _ = axum::serve(listener, router)
                        .with_graceful_shutdown(async {
                            let _ = rx.await;
                        })
                        .await;
                });
            })?;
        Ok(ServerHandle {
            addr,
            server: self,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    /// Serves in the foreground until the process is stopped.
    pub fn run(self, addr: SocketAddr) -> std::io::Result<()> {
        let runtime = tokio::runtime::Runtime::new()?;
        runtime.block_on(async move {
            let listener = tokio::net::TcpListener::bind(addr).await?;
            log::info!("registry listening on {}", listener.local_addr()?);
            axum::serve(listener, self.router()).await
        })
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.state.log.lock().unwrap().clone()
    }

    pub fn clear_requests(&self) {
        self.state.log.lock().unwrap().clear();
    }

    /// The server's blob store.
    pub fn blobs(&self) -> &Cache {
        &self.state.blobs
    }
}

/// A running background server; stops when dropped.
pub struct ServerHandle {
    addr: SocketAddr,
    server: RegistryServer,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn server(&self) -> &RegistryServer {
        &self.server
    }

    pub fn requests(&self) -> Vec<RequestRecord> {
        self.server.requests()
    }

    pub fn clear_requests(&self) {
        self.server.clear_requests()
    }

    /// Successful requests with the given method whose path starts with `prefix`.
    pub fn count(&self, method: &str, prefix: &str) -> usize {
        self.requests()
            .iter()
            .filter(|r| r.method == method && r.path.starts_with(prefix) && r.status < 300)
            .count()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

type Shared = State<Arc<ServerState>>;

async fn record_request(State(state): Shared, req: Request, next: Next) -> Response {
    let method = req.method().to_string();
    let path = req.uri().path().to_string();
    let response = next.run(req).await;
    state.log.lock().unwrap().push(RequestRecord {
        method,
        path,
        status: response.status().as_u16(),
    });
    response
}

async fn require_token(State(state): Shared, req: Request, next: Next) -> Response {
    let presented = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    match presented {
        Some(token) if state.tokens.contains(token) => next.run(req).await,
        _ => {
            let mut response = error(StatusCode::UNAUTHORIZED, "missing or invalid bearer token");
            response
                .headers_mut()
                .insert(header::WWW_AUTHENTICATE, HeaderValue::from_static("Bearer"));
            response
        }
    }
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(serde_json::json!({ "error": message.into() }))).into_response()
}

fn internal(err: impl std::fmt::Display) -> Response {
    log::error!("registry internal error: {err}");
    error(StatusCode::INTERNAL_SERVER_ERROR, err.to_string())
}

fn check_coords(org: &str, name: &str) -> Result<(), Response> {
    BrickRef::new(org, name, CommitSpec::Latest)
        .map(|_| ())
        .map_err(|e| error(StatusCode::BAD_REQUEST, e.to_string()))
}

impl ServerState {
    fn index_path(&self, org: &str, name: &str) -> PathBuf {
        self.root.join("index").join(org).join(format!("{name}.json"))
    }

    fn load_index(&self, org: &str, name: &str) -> std::io::Result<Option<Vec<StoredCommit>>> {
        match fs::read(self.index_path(org, name)) {
            Ok(bytes) => serde_json::from_slice(&bytes).map(Some).map_err(std::io::Error::other),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn save_index(&self, org: &str, name: &str, commits: &[StoredCommit]) -> std::io::Result<()> {
        let path = self.index_path(org, name);
        let dir = path.parent().expect("index paths have a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4().simple()));
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&serde_json::to_vec_pretty(commits).map_err(std::io::Error::other)?)?;
        file.sync_all()?;
        fs::rename(&tmp, &path)
    }

    fn find_commit(&self, org: &str, name: &str, commit: &str) -> Result<StoredCommit, Response> {
        check_coords(org, name)?;
        let commits = self
            .load_index(org, name)
            .map_err(internal)?
            .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown brick {org}/{name}")))?;
        commits
            .into_iter()
            .find(|c| c.commit == commit)
            .ok_or_else(|| error(StatusCode::NOT_FOUND, format!("unknown commit {commit} of {org}/{name}")))
    }

    fn snapshot_bytes(&self, stored: &StoredCommit) -> Result<Vec<u8>, Response> {
        let hash: ContentHash = stored.snapshot_md5.parse().map_err(internal)?;
        self.blobs.read(&hash).map_err(internal)
    }
}

/// Newest first, with the newest `main` commit flagged as head.
fn commit_infos(mut commits: Vec<StoredCommit>) -> Vec<CommitInfo> {
    commits.sort_by_key(|c| std::cmp::Reverse(c.seq));
    let head = commits.iter().position(|c| c.branch == MAIN_BRANCH);
    commits
        .into_iter()
        .enumerate()
        .map(|(i, c)| CommitInfo {
            commit: c.commit,
            branch: c.branch,
            timestamp: c.timestamp,
            is_head_of_main: Some(i) == head,
        })
        .collect()
}

async fn list_commits(State(state): Shared, UrlPath((org, name)): UrlPath<(String, String)>) -> Response {
    if let Err(r) = check_coords(&org, &name) {
        return r;
    }
    match state.load_index(&org, &name) {
        Ok(Some(commits)) => Json(commit_infos(commits)).into_response(),
        Ok(None) => error(StatusCode::NOT_FOUND, format!("unknown brick {org}/{name}")),
        Err(e) => internal(e),
    }
}

fn with_md5(bytes: Vec<u8>, content_type: &'static str) -> Response {
    let md5 = hash_bytes(&bytes).hex();
    let mut response = Response::new(Body::from(bytes));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static(content_type));
    headers.insert(CONTENT_MD5_HEADER, HeaderValue::from_str(&md5).expect("hex is a valid header"));
    response
}

async fn get_snapshot(
    State(state): Shared,
    UrlPath((org, name, commit)): UrlPath<(String, String, String)>,
) -> Response {
    let result = state
        .find_commit(&org, &name, &commit)
        .and_then(|stored| state.snapshot_bytes(&stored));
    match result {
        Ok(bytes) => with_md5(bytes, "application/x-tar"),
        Err(r) => r,
    }
}

async fn get_lock(
    State(state): Shared,
    UrlPath((org, name, commit)): UrlPath<(String, String, String)>,
) -> Response {
    let result = state
        .find_commit(&org, &name, &commit)
        .and_then(|stored| state.snapshot_bytes(&stored))
        .and_then(|bytes| archive::read_lock(&bytes).map_err(internal));
    match result {
        Ok(Some(lock)) => with_md5(lock, "application/yaml"),
        Ok(None) => error(StatusCode::NOT_FOUND, "commit has no lockfile"),
        Err(r) => r,
    }
}

fn parse_hash(raw: &str) -> Result<ContentHash, Response> {
    raw.parse()
        .map_err(|_| error(StatusCode::BAD_REQUEST, format!("{raw:?} is not a content hash")))
}

async fn get_blob(State(state): Shared, UrlPath(raw): UrlPath<String>) -> Response {
    let hash = match parse_hash(&raw) {
        Ok(h) => h,
        Err(r) => return r,
    };
    let path = state.blobs.blob_path(&hash);
    let file = match tokio::fs::File::open(&path).await {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return error(StatusCode::NOT_FOUND, format!("unknown blob {hash}"))
        }
        Err(e) => return internal(e),
    };
    let len = match file.metadata().await {
        Ok(m) => m.len(),
        Err(e) => return internal(e),
    };
    let mut response = Response::new(Body::from_stream(tokio_util::io::ReaderStream::new(file)));
    let headers = response.headers_mut();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("application/octet-stream"));
    headers.insert(header::CONTENT_LENGTH, HeaderValue::from(len));
    headers.insert(CONTENT_MD5_HEADER, HeaderValue::from_str(&hash.hex()).expect("hex"));
    response
}

async fn put_blob(State(state): Shared, UrlPath(raw): UrlPath<String>, body: Body) -> Response {
    let hash = match parse_hash(&raw) {
        Ok(h) => h,
        Err(r) => return r,
    };
    let mut writer = match state.blobs.writer() {
        Ok(w) => w,
        Err(e) => return internal(e),
    };
    let mut stream = body.into_data_stream();
    while let Some(chunk) = stream.next().await {
        let chunk = match chunk {
            Ok(c) => c,
            Err(e) => return error(StatusCode::BAD_REQUEST, format!("reading upload: {e}")),
        };
        if let Err(e) = writer.write_all(&chunk) {
            return internal(e);
        }
    }
    match writer.commit(Some(&hash)) {
        Ok(out) if out.written => StatusCode::CREATED.into_response(),
        Ok(_) => StatusCode::OK.into_response(),
        Err(StoreError::Integrity { actual, .. }) => error(
            StatusCode::UNPROCESSABLE_ENTITY,
            format!("upload digest {} does not match {}", actual.hex(), hash.hex()),
        ),
        Err(e) => internal(e),
    }
}

/// Digests a commit's lockfile needs on the server: every payload output,
/// and for directories their manifest and members.
fn missing_payload(blobs: &Cache, lock: &Lockfile) -> Result<Vec<String>, StoreError> {
    let mut missing = Vec::new();
    for record in lock.payload_outs() {
        if !blobs.contains(&record.hash) {
            missing.push(record.hash.to_string());
            continue;
        }
        if record.hash.is_dir() {
            let manifest = blobs.read_dir_manifest(&record.hash)?;
            missing.extend(
                manifest
                    .entries()
                    .iter()
                    .filter(|e| !blobs.contains(&e.hash))
                    .map(|e| e.hash.to_string()),
            );
        }
    }
    missing.sort();
    missing.dedup();
    Ok(missing)
}

async fn push_commit(
    State(state): Shared,
    UrlPath((org, name)): UrlPath<(String, String)>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    if let Err(r) = check_coords(&org, &name) {
        return r;
    }
    let header = |key: &str| headers.get(key).and_then(|v| v.to_str().ok()).map(str::to_string);
    let branch = header(BRANCH_HEADER).unwrap_or_else(|| MAIN_BRANCH.to_string());
    if branch.is_empty() || branch.contains(char::is_whitespace) {
        return error(StatusCode::BAD_REQUEST, "invalid branch name");
    }
    let commit = match header(COMMIT_HEADER) {
        Some(c) => match CommitSpec::parse(&c) {
            Ok(CommitSpec::Full(c)) => c,
            _ => return error(StatusCode::BAD_REQUEST, format!("{c:?} is not a 40-hex commit id")),
        },
        None => hex::encode(Sha1::digest(&body)),
    };

    let lock = match archive::read_lock(&body) {
        Ok(Some(bytes)) => match Lockfile::parse(&bytes) {
            Ok(lock) => lock,
            Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("invalid brick.lock: {e}")),
        },
        Ok(None) => return error(StatusCode::UNPROCESSABLE_ENTITY, "snapshot has no brick.lock"),
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("invalid snapshot archive: {e}")),
    };
    match missing_payload(&state.blobs, &lock) {
        Ok(missing) if !missing.is_empty() => {
            return (
                StatusCode::UNPROCESSABLE_ENTITY,
                Json(serde_json::json!({ "error": "payload blobs missing", "missing": missing })),
            )
                .into_response()
        }
        Ok(_) => {}
        Err(e) => return internal(e),
    }

    let _guard = state.index_lock.lock().unwrap();
    let mut commits = match state.load_index(&org, &name) {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => return internal(e),
    };
    let snapshot_md5 = hash_bytes(&body).hex();
    if let Some(existing) = commits.iter().find(|c| c.commit == commit) {
        if existing.snapshot_md5 == snapshot_md5 && existing.branch == branch {
            let info = commit_infos(commits.clone())
                .into_iter()
                .find(|c| c.commit == commit)
                .expect("commit is indexed");
            return (StatusCode::OK, Json(info)).into_response();
        }
        return error(
            StatusCode::CONFLICT,
            format!("commit {commit} of {org}/{name} already exists with different content"),
        );
    }
    if let Err(e) = state.blobs.put_bytes(&body) {
        return internal(e);
    }
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let seq = commits.iter().map(|c| c.seq).max().map_or(0, |s| s + 1);
    commits.push(StoredCommit {
        commit: commit.clone(),
        branch,
        timestamp,
        seq,
        snapshot_md5,
    });
    if let Err(e) = state.save_index(&org, &name, &commits) {
        return internal(e);
    }
    log::info!("registered {org}/{name}@{commit}");
    let info = commit_infos(commits)
        .into_iter()
        .find(|c| c.commit == commit)
        .expect("commit is indexed");
    (StatusCode::CREATED, Json(info)).into_response()
}
