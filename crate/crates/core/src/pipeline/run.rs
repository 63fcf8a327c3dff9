use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::Serialize;

use super::{io_err, stage_reasons, write_lock, HashMemo, PipelineError, Reason, Result};
use crate::model::path::key;
use crate::model::{ContentHash, LockRecord, LockStage, Lockfile, Manifest, Stage};
use crate::store::Cache;

const LOG_DIR: &str = "logs";
const STDERR_TAIL: usize = 4096;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Stages run concurrently at most.
    pub jobs: usize,
    /// Also copy stage output to this process's stderr.
    pub echo: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { jobs: 1, echo: false }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StageRun {
    pub stage: String,
    pub reasons: Vec<Reason>,
    /// `None` when the command could not be started or was killed by a signal.
    pub exit_code: Option<i32>,
    #[serde(serialize_with = "as_secs")]
    pub duration: Duration,
    /// Last few KiB of the command's stderr.
    pub stderr: String,
    /// Set when the stage did not succeed.
    pub error: Option<String>,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    /// Stages whose command ran, in execution order (failures included).
    pub executed: Vec<String>,
    /// Stages not run: fresh, cut off, or downstream of a failure.
    pub skipped: Vec<String>,
    pub failed: Vec<String>,
    pub runs: Vec<StageRun>,
    #[serde(skip)]
    pub lock: Lockfile,
}

impl RunReport {
    pub fn is_success(&self) -> bool {
        self.failed.is_empty()
    }

    pub fn run(&self, stage: &str) -> Option<&StageRun> {
        self.runs.iter().find(|r| r.stage == stage)
    }
}

/// Runs every stage that needs it, in topological order, rewriting the
/// lockfile after each success. Stages downstream of a failure are skipped;
/// lock entries of stages that did not succeed are left as they were.
pub fn repro(workdir: &Path, manifest: &Manifest, lock: Option<&Lockfile>, opts: &RunOptions) -> Result<RunReport> {
    let workdir = fs::canonicalize(workdir).map_err(io_err(format!("resolving {}", workdir.display())))?;
    let order: Vec<&Stage> = manifest.topo_order()?;
    let file_order: Vec<&str> = manifest.stages().map(|s| s.name.as_str()).collect();

    let mut lock = lock.cloned().unwrap_or_default();
    let dropped: Vec<String> = lock
        .stages()
        .map(|(n, _)| n.to_string())
        .filter(|n| manifest.get(n).is_none())
        .collect();
    for name in dropped {
        lock.remove_stage(&name);
    }
    lock.sort_by_order(file_order.iter().copied());

    let mut memo = HashMemo::new(&workdir);
    let mut finished: HashSet<&str> = HashSet::new();
    let mut broken: HashSet<&str> = HashSet::new();
    let mut report = RunReport {
        executed: Vec::new(),
        skipped: Vec::new(),
        failed: Vec::new(),
        runs: Vec::new(),
        lock: Lockfile::new(),
    };

    loop {
        let mut wave: Vec<(&Stage, Vec<Reason>)> = Vec::new();
        for stage in &order {
            let name = stage.name.as_str();
            if finished.contains(name) || wave.iter().any(|(s, _)| s.name == name) {
                continue;
            }
            let upstream = manifest.upstream(name);
            if !upstream.iter().all(|u| finished.contains(u)) {
                continue;
            }
            if upstream.iter().any(|u| broken.contains(u)) {
                log::warn!("skipping {name}: an upstream stage failed");
                broken.insert(name);
                finished.insert(name);
                report.skipped.push(name.to_string());
                continue;
            }
            let reasons = stage_reasons(stage, &lock, &mut memo)?;
            if reasons.is_empty() {
                log::info!("{name} is up to date");
                finished.insert(name);
                report.skipped.push(name.to_string());
            } else if wave.len() < opts.jobs.max(1) {
                wave.push((stage, reasons));
            }
        }
        if wave.is_empty() {
            break;
        }

        // Inputs are recorded as they were when the command started.
        let mut inputs = Vec::with_capacity(wave.len());
        for (stage, _) in &wave {
            inputs.push(record_all(&stage.deps, &mut memo)?);
        }

        let results: Vec<Outcome> = if wave.len() == 1 {
            vec![run_stage(&workdir, wave[0].0, opts.echo)]
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|(stage, _)| {
                        let workdir = &workdir;
                        scope.spawn(move || run_stage(workdir, stage, opts.echo))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("stage runner panicked")).collect()
            })
        };

        for (((stage, reasons), deps), outcome) in wave.into_iter().zip(inputs).zip(results) {
            let name = stage.name.as_str();
            for out in &stage.outs {
                memo.forget(out);
            }
            let mut error = outcome.error;
            if error.is_none() {
                let outs = record_all(&stage.outs, &mut memo)?;
                let missing = stage.outs.iter().zip(&outs).find(|(_, r)| r.is_none());
                match missing {
                    None => {
                        lock.set_stage(
                            name,
                            LockStage {
                                cmd: Some(stage.cmd.clone()),
                                deps: deps.into_iter().flatten().collect(),
                                outs: outs.into_iter().flatten().collect(),
                            },
                        );
                        lock.sort_by_order(file_order.iter().copied());
                        write_lock(&workdir, &lock)?;
                    }
                    Some((path, _)) => error = Some(format!("declared output {} was not produced", key(path))),
                }
            }
            report.executed.push(name.to_string());
            if let Some(e) = &error {
                log::error!("stage {name} failed: {e}");
                broken.insert(name);
                report.failed.push(name.to_string());
            } else {
                log::info!("stage {name} done in {:.2?}", outcome.duration);
            }
            finished.insert(name);
            report.runs.push(StageRun {
                stage: name.to_string(),
                reasons,
                exit_code: outcome.exit_code,
                duration: outcome.duration,
                stderr: outcome.stderr,
                error,
            });
        }
    }

    report.lock = lock;
    Ok(report)
}

/// Current records for `paths`; `None` for paths that do not exist.
fn record_all(paths: &[String], memo: &mut HashMemo) -> Result<Vec<Option<LockRecord>>> {
    paths
        .iter()
        .map(|p| {
            Ok(memo.get(p)?.map(|(hash, size)| LockRecord {
                path: key(p).to_string(),
                hash,
                size,
            }))
        })
        .collect()
}

struct Outcome {
    exit_code: Option<i32>,
    duration: Duration,
    stderr: String,
    error: Option<String>,
}

fn run_stage(workdir: &Path, stage: &Stage, echo: bool) -> Outcome {
    let started = Instant::now();
    log::info!("running {}: {}", stage.name, stage.cmd);
    match spawn_logged(workdir, stage, echo) {
        Ok((status, stderr)) => {
            let error = (!status.success()).then(|| match status.code() {
                Some(code) => format!("command exited with status {code}"),
                None => "command was killed by a signal".to_string(),
            });
            Outcome {
                exit_code: status.code(),
                duration: started.elapsed(),
                stderr,
                error,
            }
        }
        Err(e) => Outcome {
            exit_code: None,
            duration: started.elapsed(),
            stderr: String::new(),
            error: Some(format!("could not run command: {e}")),
        },
    }
}

fn spawn_logged(workdir: &Path, stage: &Stage, echo: bool) -> io::Result<(std::process::ExitStatus, String)> {
    let log_dir = workdir.join(LOG_DIR);
    fs::create_dir_all(&log_dir)?;
    let log = Arc::new(Mutex::new(File::create(log_dir.join(format!("{}.log", stage.name)))?));
    let mut child = Command::new("sh")
        .arg("-c")
        .arg(&stage.cmd)
        .current_dir(workdir)
        .env("BRICK_WORKDIR", workdir)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()?;
    let stdout = child.stdout.take().expect("stdout is piped");
    let stderr = child.stderr.take().expect("stderr is piped");
    let tail = Arc::new(Mutex::new(Vec::new()));
    let out_thread = tee(stdout, log.clone(), echo, None);
    let err_thread = tee(stderr, log, echo, Some(tail.clone()));
    let status = child.wait()?;
    let _ = out_thread.join();
    let _ = err_thread.join();
    let tail = String::from_utf8_lossy(&tail.lock().unwrap()).into_owned();
    Ok((status, tail))
}

fn tee(
    mut source: impl Read + Send + 'static,
    log: Arc<Mutex<File>>,
    echo: bool,
    tail: Option<Arc<Mutex<Vec<u8>>>>,
) -> std::thread::JoinHandle<()> {
    std::thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            let n = match source.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => n,
            };
            let chunk = &buf[..n];
            let _ = log.lock().unwrap().write_all(chunk);
            if echo {
                let _ = io::stderr().write_all(chunk);
            }
            if let Some(tail) = &tail {
                let mut tail = tail.lock().unwrap();
                tail.extend_from_slice(chunk);
                if tail.len() > STDERR_TAIL {
                    let excess = tail.len() - STDERR_TAIL;
                    tail.drain(..excess);
                }
            }
        }
    })
}

/// Stores every `brick/` output of the lockfile in `cache`, checking that
/// each still matches its recorded hash. Returns digests in lock order.
pub fn commit_outputs(workdir: &Path, lock: &Lockfile, cache: &Cache) -> Result<Vec<ContentHash>> {
    let mut stored = Vec::new();
    let mut seen: HashMap<String, ContentHash> = HashMap::new();
    for record in lock.payload_outs() {
        if let Some(hash) = seen.get(&record.path) {
            stored.push(*hash);
            continue;
        }
        let path: PathBuf = workdir.join(&record.path);
        let current = crate::store::hash_path(&path)?.map(|(h, _)| h);
        if current != Some(record.hash) {
            return Err(PipelineError::HashMismatch {
                path: record.path.clone(),
                expected: record.hash,
                actual: current,
            });
        }
        let put = cache.put_path(&path)?;
        if put.hash != record.hash {
            return Err(PipelineError::HashMismatch {
                path: record.path.clone(),
                expected: record.hash,
                actual: Some(put.hash),
            });
        }
        seen.insert(record.path.clone(), put.hash);
        stored.push(put.hash);
    }
    Ok(stored)
}
