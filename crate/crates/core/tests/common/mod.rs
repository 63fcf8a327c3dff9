#![allow(dead_code)]

pub mod md5_oracle;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::{Mutex, Once};

use bricks::model::{LockRecord, LockStage, Lockfile, Manifest, Stage};
use bricks::pipeline;
use bricks::registry::{RegistryClient, RegistryEndpoint, RegistryServer, RetryPolicy, ServerConfig, ServerHandle};
use bricks::store::{hash_path, Cache};
use tempfile::TempDir;

pub const TOKEN: &str = "tk-5b1e0c7d-secret";

pub struct TestRegistry {
    pub handle: ServerHandle,
    root: TempDir,
}

impl TestRegistry {
    pub fn start() -> Self {
        let root = tempfile::tempdir().unwrap();
        let server = RegistryServer::open(ServerConfig {
            root: root.path().to_path_buf(),
            tokens: vec![TOKEN.to_string()],
        })
        .unwrap();
        let handle = server.spawn("127.0.0.1:0".parse().unwrap()).unwrap();
        Self { handle, root }
    }

    pub fn url(&self) -> String {
        self.handle.url()
    }

    pub fn storage(&self) -> &Path {
        self.root.path()
    }

    pub fn endpoint(&self) -> RegistryEndpoint {
        RegistryEndpoint::new(&self.url(), TOKEN).unwrap()
    }

    pub fn client(&self) -> RegistryClient {
        RegistryClient::new(self.endpoint()).unwrap().with_retry(RetryPolicy::none())
    }

    pub fn client_with_token(&self, token: &str) -> RegistryClient {
        RegistryClient::new(RegistryEndpoint::new(&self.url(), token).unwrap())
            .unwrap()
            .with_retry(RetryPolicy::none())
    }

    fn successful_gets(&self, keep: impl Fn(&str) -> bool) -> usize {
        self.handle
            .requests()
            .iter()
            .filter(|r| r.method == "GET" && r.status == 200 && keep(&r.path))
            .count()
    }

    /// Data blob downloads, directory manifests excluded.
    pub fn data_fetches(&self) -> usize {
        self.successful_gets(|p| p.starts_with("/blobs/") && !p.ends_with(".dir"))
    }

    pub fn manifest_fetches(&self) -> usize {
        self.successful_gets(|p| p.starts_with("/blobs/") && p.ends_with(".dir"))
    }

    pub fn snapshot_fetches(&self) -> usize {
        self.successful_gets(|p| p.ends_with("/snapshot.tar"))
    }

    pub fn clear(&self) {
        self.handle.clear_requests();
    }
}

/// Builds a brick workspace whose single stage declares `outs`, writes
/// `files`, locks it and pushes it. Returns the commit id.
pub fn publish(
    reg: &TestRegistry,
    org: &str,
    name: &str,
    outs: &[&str],
    files: &[(&str, &[u8])],
    commit: Option<&str>,
) -> String {
    let work = tempfile::tempdir().unwrap();
    let store = tempfile::tempdir().unwrap();
    write_brick_workspace(work.path(), outs, files);
    let cache = Cache::open(store.path()).unwrap();
    let (_, lock) = pipeline::load_workspace(work.path()).unwrap();
    pipeline::commit_outputs(work.path(), lock.as_ref().unwrap(), &cache).unwrap();
    let report = reg
        .client()
        .push_brick(work.path(), &cache, org, name, None, commit)
        .unwrap();
    report.commit.commit
}

/// Writes files, a one-stage manifest and a lock recording their hashes.
pub fn write_brick_workspace(dir: &Path, outs: &[&str], files: &[(&str, &[u8])]) {
    for (path, bytes) in files {
        let full = dir.join(path);
        fs::create_dir_all(full.parent().unwrap()).unwrap();
        fs::write(full, bytes).unwrap();
    }
    let stage = Stage::new("build", "true", Vec::<String>::new(), outs.iter().copied()).unwrap();
    let manifest = Manifest::new([stage]).unwrap();
    fs::write(dir.join("brick.yaml"), manifest.to_yaml()).unwrap();
    let mut lock = Lockfile::new();
    let records = outs
        .iter()
        .map(|o| {
            let key = o.trim_end_matches('/');
            let (hash, size) = hash_path(&dir.join(key)).unwrap().expect("declared output exists");
            LockRecord::new(key, hash, size).unwrap()
        })
        .collect();
    lock.set_stage(
        "build",
        LockStage {
            cmd: Some("true".into()),
            deps: vec![],
            outs: records,
        },
    );
    pipeline::write_lock(dir, &lock).unwrap();
}

/// `n` partition files named `part-00.parquet` ... with distinct content.
pub fn partitions(n: usize) -> Vec<(String, Vec<u8>)> {
    (0..n)
        .map(|i| {
            (
                format!("brick/parts.parquet/part-{i:02}.parquet"),
                format!("partition {i}\n").repeat(50 + i).into_bytes(),
            )
        })
        .collect()
}

pub fn as_refs(files: &[(String, Vec<u8>)]) -> Vec<(&str, &[u8])> {
    files.iter().map(|(p, b)| (p.as_str(), b.as_slice())).collect()
}

pub const SMRT_MANIFEST: &str = "\
stages:
  status:
    cmd: sh scripts/status.sh
    outs:
      - status.txt
  download:
    cmd: sh scripts/download.sh
    deps:
      - status.txt
    outs:
      - download/
  process:
    cmd: sh scripts/process.sh
    deps:
      - download/
    outs:
      - brick/smrt.parquet
";

/// A three-stage pipeline shaped like a typical extraction brick. Each
/// script appends a line to `.counters/<stage>` when it runs.
pub fn smrt_workspace(dir: &Path) {
    fs::create_dir_all(dir.join("scripts")).unwrap();
    fs::create_dir_all(dir.join(".counters")).unwrap();
    fs::write(dir.join("brick.yaml"), SMRT_MANIFEST).unwrap();
    fs::write(
        dir.join("scripts/status.sh"),
        "echo run >> .counters/status\nprintf 'release 2024-06\\n' > status.txt\n",
    )
    .unwrap();
    fs::write(
        dir.join("scripts/download.sh"),
        "echo run >> .counters/download\nmkdir -p download\n\
         printf 'id,smiles,rt\\n1,CCO,301.2\\n' > download/part1.csv\n\
         printf 'id,smiles,rt\\n2,CCN,412.9\\n' > download/part2.csv\n",
    )
    .unwrap();
    fs::write(
        dir.join("scripts/process.sh"),
        "echo run >> .counters/process\nmkdir -p brick\ncat download/part1.csv download/part2.csv > brick/smrt.parquet\n",
    )
    .unwrap();
}

pub fn counter(dir: &Path, stage: &str) -> usize {
    fs::read_to_string(dir.join(".counters").join(stage))
        .map(|s| s.lines().count())
        .unwrap_or(0)
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_bricks"))
}

/// Runs the CLI with a private, initially absent config file.
pub fn run_cli(config_dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args)
        .env("BRICKS_CONFIG", config_dir.join("config"))
        .env_remove("BRICKS_LIBRARY")
        .env_remove("BRICKS_REGISTRY")
        .env_remove("BRICKS_TOKEN")
        .env_remove("BRICKS_FAILPOINT")
        .env_remove("BRICKS_LOG");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

static LOGS: Mutex<Vec<String>> = Mutex::new(Vec::new());
static LOGGER_INIT: Once = Once::new();

struct Capture;

impl log::Log for Capture {
    fn enabled(&self, _: &log::Metadata) -> bool {
        true
    }

    fn log(&self, record: &log::Record) {
        LOGS.lock()
            .unwrap()
            .push(format!("{} {} {}", record.level(), record.target(), record.args()));
    }

    fn flush(&self) {}
}

/// Routes every log record, from any crate, into an in-memory buffer.
pub fn capture_logs() {
    LOGGER_INIT.call_once(|| {
        log::set_boxed_logger(Box::new(Capture)).unwrap();
        log::set_max_level(log::LevelFilter::Trace);
    });
}

pub fn take_logs() -> Vec<String> {
    std::mem::take(&mut *LOGS.lock().unwrap())
}
