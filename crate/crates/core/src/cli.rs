//! The `bricks` command line.
//!
//! Exit codes: 0 success, 1 operational failure, 2 usage or configuration
//! error, 3 authentication failure. Machine-readable output goes to stdout,
//! diagnostics to stderr.

use std::ffi::OsString;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{self, Config, ConfigError, ConfigFile, Overrides};
use crate::install::{self, InstallError, InstallStep, Installer, Library};
use crate::model::{BrickRef, ModelError, DEFAULT_ORG};
use crate::pipeline::{self, PipelineError, RunOptions, StageState};
use crate::registry::{RegistryClient, RegistryEndpoint, RegistryError, RegistryServer, ServerConfig};

/// Aborts the process right after the named install step; used to test
/// crash safety.
pub const FAILPOINT_ENV: &str = "BRICKS_FAILPOINT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_AUTH: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "bricks", version, about = "Install, build and publish versioned data bricks")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalArgs {
    /// Library root directory.
    #[arg(long, global = true, value_name = "DIR")]
    library: Option<PathBuf>,

    /// Registry base URL.
    #[arg(long, global = true, value_name = "URL")]
    registry: Option<String>,

    /// Registry access token.
    #[arg(long, global = true, value_name = "TOKEN")]
    token: Option<String>,

    /// Concurrent blob downloads.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,

    /// Config file to use instead of the default location.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args, Debug, Clone)]
struct WorkdirArg {
    /// Brick repository to operate on.
    #[arg(long = "dir", short = 'C', default_value = ".")]
    dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the config file and create the library.
    Configure {
        /// Verify the token against the registry.
        #[arg(long)]
        check: bool,
        /// Print the effective settings and where each came from.
        #[arg(long)]
        show: bool,
    },
    /// Install a brick into the library.
    Install { brick: String },
    /// List the assets of an installed brick.
    Assets {
        brick: String,
        #[arg(long)]
        json: bool,
    },
    /// Create `.bb/dependencies.txt`.
    Init {
        #[command(flatten)]
        work: WorkdirArg,
    },
    /// Pin a brick as a dependency.
    Add {
        brick: String,
        #[command(flatten)]
        work: WorkdirArg,
    },
    /// Install every pinned dependency that is missing.
    Pull {
        #[command(flatten)]
        work: WorkdirArg,
    },
    /// Run the stages whose inputs changed.
    Repro {
        #[command(flatten)]
        work: WorkdirArg,
        /// Only print the plan.
        #[arg(long)]
        dry_run: bool,
        #[arg(long)]
        json: bool,
        /// Stages to run concurrently.
        #[arg(long, short = 'j', default_value_t = 1)]
        jobs: usize,
    },
    /// Publish the brick in the working directory.
    Push {
        /// `org/name` to publish as.
        brick: String,
        #[command(flatten)]
        work: WorkdirArg,
        #[arg(long)]
        branch: Option<String>,
        /// Explicit 40-hex commit id.
        #[arg(long)]
        commit: Option<String>,
    },
    /// Pipeline plan plus dependency install state.
    Status {
        #[command(flatten)]
        work: WorkdirArg,
        #[arg(long)]
        json: bool,
    },
    /// Cache maintenance.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Run a registry server.
    Serve {
        /// Storage directory.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        /// Accepted token; repeatable. Defaults to the configured token.
        #[arg(long = "allow-token")]
        allow_token: Vec<String>,
    },
}

#[derive(Subcommand, Debug)]
enum CacheAction {
    /// Re-hash every blob and check copied assets.
    Verify,
    /// List digests no installed brick references.
    Gc {
        #[arg(long)]
        dry_run: bool,
    },
}

/// An error with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn failure(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_FAILURE,
            message: message.into(),
        }
    }
}

impl From<RegistryError> for CliError {
    fn from(e: RegistryError) -> Self {
        let code = match &e {
            RegistryError::Auth => EXIT_AUTH,
            _ => EXIT_FAILURE,
        };
        let mut message = e.to_string();
        if code == EXIT_AUTH {
            message.push_str("; run `bricks configure --token <TOKEN>`");
        }
        Self { code, message }
    }
}

impl From<InstallError> for CliError {
    fn from(e: InstallError) -> Self {
        match e {
            InstallError::Registry(e) => e.into(),
            InstallError::Model(e) => Self::usage(e.to_string()),
            e => Self::failure(e.to_string()),
        }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Model(e) => Self::usage(e.to_string()),
            e => Self::failure(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::usage(e.to_string())
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::failure(e.to_string())
    }
}

type CliResult = Result<(), CliError>;

/// Runs the CLI and returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("BRICKS_LOG", level))
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .try_init();

    let mut out = io::stdout().lock();
    match run(cli, &mut out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

struct Context {
    global: GlobalArgs,
    file_path: Option<PathBuf>,
    file: ConfigFile,
    config: Config,
}

impl Context {
    fn load(global: GlobalArgs) -> Result<Self, CliError> {
        let file_path = global.config.clone().or_else(|| config::default_path(&config::process_env));
        let file = match &file_path {
            Some(p) => ConfigFile::load(p)?,
            None => ConfigFile::default(),
        };
        let config = Config::resolve(&overrides(&global), &config::process_env, &file)?;
        Ok(Self {
            global,
            file_path,
            file,
            config,
        })
    }

    fn library(&self) -> Result<Library, CliError> {
        let root = self
            .config
            .library
            .as_ref()
            .ok_or_else(|| CliError::usage("no library configured; run `bricks configure --library <DIR>`"))?;
        Ok(Library::open(&root.value)?)
    }

    fn client(&self) -> Result<RegistryClient, CliError> {
        let registry = self
            .config
            .registry
            .as_ref()
            .ok_or_else(|| CliError::usage("no registry configured; run `bricks configure --registry <URL>`"))?;
        let token = self.config.token.as_ref().ok_or_else(|| CliError {
            code: EXIT_AUTH,
            message: "no registry token configured; run `bricks configure --token <TOKEN>`".into(),
        })?;
        let endpoint = RegistryEndpoint::new(&registry.value, &token.value).map_err(|e| CliError::usage(e.to_string()))?;
        Ok(RegistryClient::new(endpoint)?)
    }

    fn installer<'a>(&self, library: &'a Library) -> Result<Installer<'a>, CliError> {
        let mut installer = Installer::new(library, self.client()?).parallel(self.config.parallel_fetch.value);
        if let Some(step) = std::env::var(FAILPOINT_ENV).ok().as_deref().and_then(InstallStep::parse) {
            installer = installer.on_step(Arc::new(move |done| {
                if done == step {
                    eprintln!("failpoint: aborting after {step}");
                    std::process::abort();
                }
            }));
        }
        Ok(installer)
    }
}

fn overrides(global: &GlobalArgs) -> Overrides {
    Overrides {
        library: global.library.clone(),
        registry: global.registry.clone(),
        token: global.token.clone(),
        parallel_fetch: global.parallel,
    }
}

fn parse_ref(text: &str) -> Result<BrickRef, CliError> {
    Ok(BrickRef::parse(text, DEFAULT_ORG)?)
}

fn json_line(out: &mut dyn Write, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::failure(e.to_string()))?;
    writeln!(out, "{text}")?;
    Ok(())
}

fn run(cli: Cli, out: &mut dyn Write) -> CliResult {
    let ctx = Context::load(cli.global)?;
    match cli.command {
        Command::Configure { check, show } => configure(&ctx, check, show, out),
        Command::Install { brick } => {
            let library = ctx.library()?;
            let report = ctx.installer(&library)?.install(&parse_ref(&brick)?)?;
            writeln!(out, "{}", report.summary())?;
            Ok(())
        }
        Command::Assets { brick, json } => {
            let catalog = ctx.library()?.assets(&parse_ref(&brick)?)?;
            if json {
                return json_line(out, &catalog);
            }
            for asset in catalog.iter() {
                writeln!(out, "{}\t{}\t{}", asset.name, asset.path.display(), asset.format)?;
            }
            Ok(())
        }
        Command::Init { work } => {
            let created = install::deps_init(&work.dir)?;
            let verb = if created { "created" } else { "kept existing" };
            writeln!(out, "{verb} {}", work.dir.join(crate::model::DEPENDENCIES_FILE).display())?;
            Ok(())
        }
        Command::Add { brick, work } => {
            let brick = parse_ref(&brick)?;
            let (set, outcome) = install::deps_add(&work.dir, &ctx.client()?, &brick)?;
            let entry = set.find(&brick.org, &brick.name).expect("entry was just added");
            let line = match outcome {
                crate::model::Upsert::Added => format!("added {}@{}", entry.brick.slug(), entry.commit()),
                crate::model::Upsert::Updated { previous } => {
                    format!("updated {} {previous} -> {}", entry.brick.slug(), entry.commit())
                }
                crate::model::Upsert::Unchanged => format!("unchanged {}@{}", entry.brick.slug(), entry.commit()),
            };
            writeln!(out, "{line}")?;
            Ok(())
        }
        Command::Pull { work } => {
            let library = ctx.library()?;
            let report = install::deps_pull(&work.dir, &ctx.installer(&library)?)?;
            for outcome in &report.outcomes {
                match &outcome.result {
                    Ok(r) => writeln!(out, "{}", r.summary())?,
                    Err(e) => eprintln!("failed {}@{}: {e}", outcome.entry.brick.slug(), outcome.entry.commit()),
                }
            }
            let failures: Vec<_> = report.failures().collect();
            if failures.is_empty() {
                return Ok(());
            }
            let code = if failures.iter().all(|(_, e)| e.is_auth()) { EXIT_AUTH } else { EXIT_FAILURE };
            Err(CliError {
                code,
                message: format!("{} of {} dependencies failed", failures.len(), report.outcomes.len()),
            })
        }
        Command::Repro { work, dry_run, json, jobs } => repro(&work.dir, dry_run, json, jobs, out),
        Command::Push {
            brick,
            work,
            branch,
            commit,
        } => {
            let brick = parse_ref(&brick)?;
            let library = ctx.library()?;
            let (_, lock) = pipeline::load_workspace(&work.dir)?;
            let lock = lock.ok_or_else(|| CliError::usage("no brick.lock; run `bricks repro` first"))?;
            let stored = pipeline::commit_outputs(&work.dir, &lock, library.cache())?;
            log::info!("{} payload outputs in the cache", stored.len());
            let client = ctx.client()?.for_ref(&brick)?;
            let report = client.push_brick(
                &work.dir,
                library.cache(),
                &brick.org,
                &brick.name,
                branch.as_deref(),
                commit.as_deref(),
            )?;
            let verb = if report.created { "pushed" } else { "already pushed" };
            writeln!(
                out,
                "{verb} {}@{} ({} blobs uploaded)",
                brick.slug(),
                report.commit.commit,
                report.blobs_uploaded
            )?;
            Ok(())
        }
        Command::Status { work, json } => status(&ctx, &work.dir, json, out),
        Command::Cache { action } => {
            let library = ctx.library()?;
            match action {
                CacheAction::Verify => {
                    let check = library.verify()?;
                    writeln!(out, "checked {} blobs", check.cache.checked)?;
                    for p in &check.cache.corrupt {
                        writeln!(out, "corrupt\t{}", p.display())?;
                    }
                    for p in &check.bad_copies {
                        writeln!(out, "modified-copy\t{}", p.display())?;
                    }
                    for p in &check.broken_links {
                        writeln!(out, "broken-link\t{}", p.display())?;
                    }
                    if check.is_ok() {
                        Ok(())
                    } else {
                        Err(CliError::failure("library verification failed"))
                    }
                }
                CacheAction::Gc { dry_run } => {
                    if !dry_run {
                        return Err(CliError::usage("only `cache gc --dry-run` is supported"));
                    }
                    for digest in library.gc_candidates()? {
                        writeln!(out, "{digest}")?;
                    }
                    Ok(())
                }
            }
        }
        Command::Serve { root, addr, allow_token } => {
            let mut tokens = allow_token;
            if tokens.is_empty() {
                tokens.extend(ctx.config.token.as_ref().map(|t| t.value.clone()));
            }
            if tokens.is_empty() {
                return Err(CliError::usage("no tokens to accept; pass --allow-token"));
            }
            let server = RegistryServer::open(ServerConfig { root, tokens })?;
            eprintln!("serving on http://{addr}");
            server.run(addr)?;
            Ok(())
        }
    }
}

fn configure(ctx: &Context, check: bool, show: bool, out: &mut dyn Write) -> CliResult {
    let flags = overrides(&ctx.global);
    let any_flag = flags.library.is_some() || flags.registry.is_some() || flags.token.is_some() || flags.parallel_fetch.is_some();
    if any_flag {
        let path = ctx
            .file_path
            .as_ref()
            .ok_or_else(|| CliError::usage("cannot locate a config file; pass --config or set HOME"))?;
        let merged = Config::merged_file(&ctx.file, &flags);
        if merged != ctx.file || !path.exists() {
            merged.save(path)?;
            eprintln!("wrote {}", path.display());
        }
    }
    if let Some(library) = &ctx.config.library {
        let library = Library::open(&library.value)?;
        log::info!("library at {}", library.root().display());
    }
    if check {
        ctx.client()?.ping()?;
        eprintln!("token accepted by {}", ctx.client()?.endpoint().base_url());
    }
    if show {
        write!(out, "{}", ctx.config.show())?;
    }
    if !any_flag && !check && !show {
        return Err(CliError::usage(
            "nothing to configure; pass --library, --registry, --token, --parallel, --check or --show",
        ));
    }
    Ok(())
}

fn repro(dir: &Path, dry_run: bool, json: bool, jobs: usize, out: &mut dyn Write) -> CliResult {
    let (manifest, lock) = pipeline::load_workspace(dir)?;
    if dry_run {
        let plan = pipeline::plan(dir, &manifest, lock.as_ref())?;
        if json {
            return json_line(out, &plan);
        }
        writeln!(out, "stage\tstate\treason")?;
        for s in &plan {
            let reason = s.reasons.first().map_or_else(|| "-".to_string(), |r| r.to_string());
            writeln!(out, "{}\t{}\t{}", s.stage, s.state, reason)?;
        }
        return Ok(());
    }
    let opts = RunOptions {
        jobs: jobs.max(1),
        echo: !json,
    };
    let report = pipeline::repro(dir, &manifest, lock.as_ref(), &opts)?;
    if json {
        json_line(out, &report)?;
    } else {
        for name in &report.executed {
            let state = if report.failed.contains(name) { "failed" } else { "ran" };
            writeln!(out, "{state}\t{name}")?;
        }
        for name in &report.skipped {
            writeln!(out, "skipped\t{name}")?;
        }
    }
    if report.is_success() {
        Ok(())
    } else {
        Err(CliError::failure(format!("stage {} failed", report.failed.join(", "))))
    }
}

#[derive(serde::Serialize)]
struct DependencyState {
    brick: String,
    commit: String,
    installed: bool,
}

fn status(ctx: &Context, dir: &Path, json: bool, out: &mut dyn Write) -> CliResult {
    let (manifest, lock) = pipeline::load_workspace(dir)?;
    let plan = pipeline::plan(dir, &manifest, lock.as_ref())?;
    let deps = match install::read_dependencies(dir) {
        Ok(set) => Some(set),
        Err(InstallError::Io { source, .. }) if source.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let library = ctx.config.library.as_ref().map(|_| ctx.library()).transpose()?;
    let dep_states: Vec<DependencyState> = deps
        .iter()
        .flat_map(|set| set.entries())
        .map(|e| DependencyState {
            brick: e.brick.slug(),
            commit: e.commit().to_string(),
            installed: library
                .as_ref()
                .is_some_and(|l| l.is_installed(&e.brick.org, &e.brick.name, e.commit())),
        })
        .collect();
    if json {
        return json_line(
            out,
            &serde_json::json!({ "stages": plan, "dependencies": dep_states }),
        );
    }
    for s in &plan {
        let reason = s.reasons.first().map_or_else(String::new, |r| format!("\t{r}"));
        writeln!(out, "stage\t{}\t{}{reason}", s.stage, s.state)?;
    }
    for d in &dep_states {
        let state = if d.installed { "installed" } else { "missing" };
        writeln!(out, "dependency\t{}@{}\t{state}", d.brick, d.commit)?;
    }
    let stale = plan.iter().filter(|s| s.state != StageState::Fresh).count();
    log::info!("{stale} of {} stages need to run", plan.len());
    Ok(())
}
