//! Command-line interface.
//!
//! Exit codes: 0 success, 1 run or check failure, 2 usage or configuration
//! error, 3 rollback failed and an operator must intervene.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::{ExecutionMode, ExecutorKind, PipelineSpec, ENV_STORE_ROOT};
use crate::deploy::{self, DeployContext, DeployError};
use crate::executor::log::{ConsoleLog, LogSink};
use crate::executor::{close_channel, ChannelOptions, Connector, SshOptions};
use crate::model::{ComponentKind, HostRole};
use crate::orchestrator::daemon::{self, DaemonOptions};
use crate::orchestrator::{Orchestrator, PipelineRun};
use crate::packaging::{self, archive};
use crate::report::{emit_stage_table, Comparison, StageTable};
use crate::stamp::{ReleaseStamp, StampAllocator};
use crate::store::ArtifactStore;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_ALERT: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "shiplight",
    version,
    about = "Controller-light build, package and deploy pipelines"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run one pipeline to completion.
    Run(RunArgs),
    /// Start runs from trigger files dropped into a directory.
    Serve(ServeArgs),
    /// Put a deploy target back on an earlier release.
    Rollback(RollbackArgs),
    /// Inspect the artifact store.
    Releases {
        #[command(subcommand)]
        action: ReleasesAction,
    },
    /// Check an archive against its sidecar manifest.
    Verify(VerifyArgs),
    /// Stage timing table over run records, optionally compared with another.
    Report(ReportArgs),
    /// Archive an assembled bundle directory (used as the packager).
    #[command(hide = true)]
    Pack { bundle_dir: PathBuf, archive: PathBuf },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ExecutorArg {
    Local,
    Ssh,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ModeArg {
    Light,
    Local,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long)]
    pub spec: PathBuf,
    /// Branch or commit to build.
    #[arg(long = "ref")]
    pub reference: String,
    #[arg(long, value_enum)]
    pub executor: Option<ExecutorArg>,
    #[arg(long)]
    pub parallel_builds: bool,
    /// `local` runs builds inside the controller process tree.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
}

#[derive(Args, Debug)]
pub struct ServeArgs {
    /// Spec for triggers that do not name one.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub watch: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub max_concurrent: usize,
}

#[derive(Args, Debug)]
pub struct RollbackArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub target: ComponentKind,
    #[arg(long)]
    pub to: Option<ReleaseStamp>,
}

#[derive(Subcommand, Debug)]
pub enum ReleasesAction {
    /// Newest first.
    List {
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Store root; defaults to the spec's, then $SHIPLIGHT_STORE_ROOT.
        #[arg(long)]
        store: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    pub archive: PathBuf,
    /// Defaults to `<archive>.manifest.json`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Glob matching run.json files or run directories.
    #[arg(long)]
    pub runs: String,
    #[arg(long)]
    pub mode: String,
    /// A report JSON from the other mode to compare against.
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Write the machine-readable JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `args` and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    dispatch(cli)
}

pub fn dispatch(cli: Cli) -> i32 {
    match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Rollback(a) => cmd_rollback(a),
        Command::Releases {
            action: ReleasesAction::List { spec, store },
        } => cmd_releases_list(spec.as_deref(), store),
        Command::Verify(a) => cmd_verify(a),
        Command::Report(a) => cmd_report(a),
        Command::Pack { bundle_dir, archive } => match archive::pack(&bundle_dir, &archive) {
            Ok(m) => {
                println!(
                    "{} ({} entries, sha256 {})",
                    archive.display(),
                    m.entries.len(),
                    m.archive_checksum
                );
                EXIT_OK
            }
            Err(e) => {
                eprintln!("pack failed: {e}");
                EXIT_FAILED
            }
        },
    }
}

fn load_spec(path: &Path) -> Result<PipelineSpec, i32> {
    PipelineSpec::load(path).map_err(|e| {
        eprintln!("{e}");
        EXIT_USAGE
    })
}

fn print_run(run: &PipelineRun) {
    println!("run {} ({}): {}", run.stamp, run.commit.short_id(), run.state);
    for r in &run.reports {
        println!(
            "  {:<16} {:>8.2}s  {:?}  {}",
            r.stage.as_str(),
            r.duration,
            r.outcome,
            r.detail
        );
    }
    if let Some(link) = &run.download_link {
        println!("download: {link}");
    }
    if let Some(rb) = &run.rollback {
        for t in &rb.targets {
            match (&t.error, &t.restored) {
                (Some(e), _) => println!("rollback {}: FAILED {e}", t.target),
                (None, Some(r)) => println!("rollback {}: restored {r}", t.target),
                (None, None) => println!("rollback {}: emptied", t.target),
            }
        }
    }
    if run.alert {
        println!("ALERT: rollback did not complete; operator action required");
    }
    if let Some(e) = &run.error {
        println!("error: {e}");
    }
    println!(
        "record: {}",
        run.run_dir().join(crate::orchestrator::RUN_FILE).display()
    );
}

fn cmd_run(a: RunArgs) -> i32 {
    let mut spec = match load_spec(&a.spec) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if let Some(e) = a.executor {
        spec.executor = match e {
            ExecutorArg::Local => ExecutorKind::Local,
            ExecutorArg::Ssh => ExecutorKind::Ssh,
        };
    }
    if let Some(m) = a.mode {
        spec.mode = match m {
            ModeArg::Light => ExecutionMode::Light,
            ModeArg::Local => ExecutionMode::Local,
        };
    }
    spec.parallel_builds |= a.parallel_builds;
    if let Err(e) = spec.validate() {
        eprintln!("{}: {e}", a.spec.display());
        return EXIT_USAGE;
    }
    let run = Orchestrator::new(spec).run(&a.reference);
    print_run(&run);
    run.exit_code()
}

fn cmd_serve(a: ServeArgs) -> i32 {
    if let Some(spec) = &a.spec {
        if let Err(code) = load_spec(spec) {
            return code;
        }
    }
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        if let Err(e) = signal_hook::flag::register(sig, stop.clone()) {
            eprintln!("cannot install signal handler: {e}");
            return EXIT_FAILED;
        }
    }
    let opts = DaemonOptions {
        watch: a.watch.clone(),
        default_spec: a.spec.clone(),
        max_concurrent: a.max_concurrent.max(1),
        ..DaemonOptions::new(&a.watch)
    };
    println!("watching {} for triggers", a.watch.display());
    match daemon::serve(&opts, stop) {
        Ok(results) => {
            for r in &results {
                let state = r.state.map(|s| s.to_string()).unwrap_or_else(|| "rejected".into());
                println!(
                    "{}: {} {}",
                    r.trigger,
                    r.stamp.as_ref().map(|s| s.as_str()).unwrap_or("-"),
                    state
                );
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("serve failed: {e}");
            EXIT_FAILED
        }
    }
}

fn cmd_rollback(a: RollbackArgs) -> i32 {
    let spec = match load_spec(&a.spec) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let ctx = match DeployContext::from_spec(&spec.deploy) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    let stamp = StampAllocator::system().next_with(|s| {
        !spec.runs_dir.join(s.as_str()).exists() && std::fs::create_dir_all(spec.runs_dir.join(s.as_str())).is_ok()
    });
    let log: Arc<dyn LogSink> = match ConsoleLog::create(&spec.runs_dir.join(stamp.as_str()).join("console.log")) {
        Ok(c) => Arc::new(c),
        Err(e) => {
            eprintln!("cannot open log: {e}");
            return EXIT_FAILED;
        }
    };
    let connector = match spec.executor {
        ExecutorKind::Local => Connector::Local,
        ExecutorKind::Ssh => Connector::Ssh(SshOptions::default()),
    };
    let host = spec.deploy_host.remote_host(HostRole::Deploy);
    let ch = match connector.open(
        &host,
        spec.deploy_host.connect_timeout(),
        ChannelOptions {
            policy: spec.deploy_policy(),
            log,
            transfer: spec.transfer.policy(),
            ..ChannelOptions::default()
        },
    ) {
        Ok(ch) => ch,
        Err(e) => {
            eprintln!("cannot reach deploy host: {e}");
            return EXIT_FAILED;
        }
    };
    let label = match spec.executor {
        ExecutorKind::Local => "local".to_string(),
        ExecutorKind::Ssh => host.label(),
    };
    let _locks = deploy::lock_targets([deploy::target_key(&label, &ctx.root, a.target.as_str())]);
    let check = (a.target == ComponentKind::Backend)
        .then_some(spec.health_check.as_ref())
        .flatten();
    let result = deploy::manual_rollback(&ch, &ctx, a.target, a.to.as_ref(), &stamp, check);
    close_channel(&ch);
    match result {
        Ok(r) => {
            match &r.restored {
                Some(id) => println!("{}: {} is live", a.target, id),
                None => println!("{}: target emptied", a.target),
            }
            EXIT_OK
        }
        Err(e @ DeployError::RollbackFailed { .. }) => {
            eprintln!("ALERT: {e}");
            EXIT_ALERT
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_FAILED
        }
    }
}

fn cmd_releases_list(spec: Option<&Path>, store: Option<PathBuf>) -> i32 {
    let store = match (store, spec) {
        (Some(root), _) => ArtifactStore::new(root),
        (None, Some(path)) => match load_spec(path) {
            Ok(s) => ArtifactStore::from_spec(&s.store),
            Err(code) => return code,
        },
        (None, None) => match std::env::var_os(ENV_STORE_ROOT) {
            Some(root) => ArtifactStore::new(PathBuf::from(root)),
            None => {
                eprintln!("no store: pass --store, --spec or set {ENV_STORE_ROOT}");
                return EXIT_USAGE;
            }
        },
    };
    match store.list_releases() {
        Ok(releases) => {
            for r in releases {
                let link = store.download_link(&r.stamp).unwrap_or_default();
                println!("{}  {}  {}  {}", r.stamp, r.commit.short_id(), r.commit.branch, link);
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            EXIT_FAILED
        }
    }
}

fn cmd_verify(a: VerifyArgs) -> i32 {
    let manifest_path = a.manifest.unwrap_or_else(|| archive::sidecar_path(&a.archive));
    let manifest = match archive::read_manifest(&manifest_path) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("cannot read manifest {}: {e}", manifest_path.display());
            return EXIT_FAILED;
        }
    };
    let report = packaging::verify_bundle(&a.archive, &manifest);
    if let Some(e) = &report.archive_error {
        println!("archive unreadable: {e}");
    }
    if !report.archive_checksum_ok {
        println!(
            "archive checksum mismatch: {} vs manifest {}",
            report.actual_archive_checksum.as_deref().unwrap_or("-"),
            manifest.archive_checksum
        );
    }
    for m in &report.mismatches {
        println!("mismatch {m}");
    }
    if report.verified() {
        println!("{}: OK ({} entries)", a.archive.display(), manifest.entries.len());
        EXIT_OK
    } else {
        println!(
            "{}: FAILED ({} mismatches)",
            a.archive.display(),
            report.mismatches.len()
        );
        EXIT_FAILED
    }
}

/// Loads run records matching `pattern` (files or run directories).
pub fn load_runs(pattern: &str) -> Result<Vec<PipelineRun>, String> {
    let paths = glob::glob(pattern).map_err(|e| format!("bad glob {pattern:?}: {e}"))?;
    let mut runs = Vec::new();
    for entry in paths {
        let path = entry.map_err(|e| e.to_string())?;
        let file = if path.is_dir() {
            path.join(crate::orchestrator::RUN_FILE)
        } else {
            path
        };
        if !file.is_file() {
            continue;
        }
        runs.push(PipelineRun::load(&file).map_err(|e| format!("{}: {e}", file.display()))?);
    }
    runs.sort_by(|a, b| a.stamp.cmp(&b.stamp));
    Ok(runs)
}

fn cmd_report(a: ReportArgs) -> i32 {
    let runs = match load_runs(&a.runs) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("{e}");
            return EXIT_USAGE;
        }
    };
    if runs.is_empty() {
        eprintln!("no run records match {}", a.runs);
        return EXIT_FAILED;
    }
    let table = emit_stage_table(&runs, &a.mode);
    print!("{}", table.to_text());
    let json = match &a.compare {
        None => table.to_json(),
        Some(other) => {
            let other = match std::fs::read_to_string(other)
                .map_err(|e| e.to_string())
                .and_then(|t| StageTable::from_json(&t).map_err(|e| e.to_string()))
            {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read {}: {e}", other.display());
                    return EXIT_USAGE;
                }
            };
            let cmp = if other.mode == "local" || table.mode == "light" {
                Comparison::join(&other, &table)
            } else {
                Comparison::join(&table, &other)
            };
            println!();
            print!("{}", cmp.to_text());
            cmp.to_json()
        }
    };
    match &a.out {
        Some(path) => {
            if let Err(e) = std::fs::write(path, &json) {
                eprintln!("cannot write {}: {e}", path.display());
                return EXIT_FAILED;
            }
        }
        None => {
            println!();
            print!("{json}");
        }
    }
    EXIT_OK
}
