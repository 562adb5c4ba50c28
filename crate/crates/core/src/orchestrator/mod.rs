//! Pipeline runs: checkout, channels, builds, packaging, deploys, health
//! gate, rollback and notification, with stage timing and run records.

pub mod checkout;
pub mod daemon;
pub mod scheduler;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::accounting::{ControllerLoad, ControllerMonitor, ControllerUsage};
use crate::build::{self, cleanup_sweep};
use crate::config::{ExecutionMode, ExecutorKind, PipelineSpec};
use crate::deploy::{self, DeployContext, DeployTargetState, HealthResult};
use crate::executor::log::{ConsoleLog, LogSink};
use crate::executor::{close_channel, Channel, ChannelOptions, Connector, FaultInjector, SshOptions};
use crate::model::{
    CommitMeta, ComponentArtifact, ComponentKind, HostRole, Outcome, RollbackPoint, Stage, StageReport,
};
use crate::notify::{self, Delivery, Notification, Sink};
use crate::packaging;
use crate::stamp::{ReleaseStamp, StampAllocator};
use crate::store::ArtifactStore;

pub use checkout::{checkout, Checkout, CheckoutError};
pub use scheduler::{Slot, WorkerPool};

pub const RUN_FILE: &str = "run.json";
pub const CONSOLE_FILE: &str = "console.log";

/// Component, start, seconds, and the artifact with its summary or an error.
type TimedBuild = (
    ComponentKind,
    DateTime<Utc>,
    f64,
    Result<(ComponentArtifact, String), String>,
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Queued,
    Running,
    Succeeded,
    Failed,
    RolledBack,
}

impl RunState {
    pub fn is_terminal(self) -> bool {
        matches!(self, RunState::Succeeded | RunState::Failed | RunState::RolledBack)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RunState::Queued => "queued",
            RunState::Running => "running",
            RunState::Succeeded => "succeeded",
            RunState::Failed => "failed",
            RunState::RolledBack => "rolled_back",
        }
    }
}

impl std::fmt::Display for RunState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackEntry {
    pub target: ComponentKind,
    pub ok: bool,
    /// Release live after the rollback, `null` if the target was emptied.
    #[serde(default)]
    pub restored: Option<String>,
    #[serde(default)]
    pub reused_release: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackSummary {
    pub succeeded: bool,
    pub targets: Vec<RollbackEntry>,
}

/// Record of one pipeline run, persisted as `runs/<stamp>/run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub stamp: ReleaseStamp,
    pub source_ref: String,
    pub commit: CommitMeta,
    pub mode: ExecutionMode,
    pub executor: ExecutorKind,
    pub state: RunState,
    /// A rollback failed and an operator has to step in.
    #[serde(default)]
    pub alert: bool,
    pub started: DateTime<Utc>,
    #[serde(default)]
    pub finished: Option<DateTime<Utc>>,
    /// Seconds from start to the final record.
    #[serde(default)]
    pub duration: f64,
    /// Seconds spent waiting for a worker slot, a free release stamp and
    /// deploy target locks.
    #[serde(default)]
    pub queue_wait: f64,
    pub reports: Vec<StageReport>,
    #[serde(default)]
    pub failed_stage: Option<Stage>,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub archive: Option<PathBuf>,
    #[serde(default)]
    pub download_link: Option<String>,
    #[serde(default)]
    pub backup_refs: BTreeMap<String, String>,
    #[serde(default)]
    pub health: Option<HealthResult>,
    #[serde(default)]
    pub rollback: Option<RollbackSummary>,
    #[serde(default)]
    pub controller: Option<ControllerUsage>,
    #[serde(default)]
    pub cleanup: Option<String>,
    #[serde(default)]
    pub notification: Option<Delivery>,
    pub log_path: PathBuf,
}

impl PipelineRun {
    /// 0 succeeded, 1 failed or rolled back, 3 when a rollback failed.
    pub fn exit_code(&self) -> i32 {
        match (self.state, self.alert) {
            (_, true) => 3,
            (RunState::Succeeded, false) => 0,
            _ => 1,
        }
    }

    pub fn report(&self, stage: Stage) -> Option<&StageReport> {
        self.reports.iter().find(|r| r.stage == stage)
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let bytes = std::fs::read(path)?;
        serde_json::from_slice(&bytes).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.log_path.parent().map(Path::to_path_buf).unwrap_or_default()
    }

    fn save(&self) -> std::io::Result<()> {
        let dir = self.run_dir();
        let mut tmp = tempfile::NamedTempFile::new_in(&dir)?;
        serde_json::to_writer_pretty(&mut tmp, self).map_err(std::io::Error::other)?;
        tmp.persist(dir.join(RUN_FILE)).map_err(|e| e.error)?;
        Ok(())
    }
}

struct Failure {
    stage: Stage,
    message: String,
}

/// Times `body` as `stage` and appends its report.
fn timed<T>(
    reports: &mut Vec<StageReport>,
    console: &ConsoleLog,
    stage: Stage,
    body: impl FnOnce() -> Result<(T, String), String>,
) -> Result<T, Failure> {
    console.line(&format!("stage {stage} started"));
    let started = Utc::now();
    let clock = Instant::now();
    let result = body();
    let duration = clock.elapsed().as_secs_f64();
    let (outcome, detail) = match &result {
        Ok((_, d)) => (Outcome::Success, d.clone()),
        Err(e) => (Outcome::Failure, e.clone()),
    };
    console.line(&format!("stage {stage} {outcome:?} after {duration:.2}s: {detail}"));
    reports.push(StageReport {
        stage,
        started,
        duration,
        outcome,
        detail,
    });
    result.map(|(v, _)| v).map_err(|message| Failure { stage, message })
}

fn skipped(reports: &mut Vec<StageReport>, console: &ConsoleLog, stage: Stage, why: &str) {
    console.line(&format!("stage {stage} skipped: {why}"));
    reports.push(StageReport {
        stage,
        started: Utc::now(),
        duration: 0.0,
        outcome: Outcome::Skipped,
        detail: why.to_string(),
    });
}

/// Drives pipeline runs for one spec.
pub struct Orchestrator {
    spec: PipelineSpec,
    stamps: Arc<StampAllocator>,
    pool: Arc<WorkerPool>,
    sinks: Vec<Box<dyn Sink>>,
    build_faults: Option<Arc<dyn FaultInjector>>,
    deploy_faults: Option<Arc<dyn FaultInjector>>,
    ssh: SshOptions,
    monitor_interval: Duration,
}

impl Orchestrator {
    /// Sinks come from the spec's `notify` list.
    pub fn new(spec: PipelineSpec) -> Self {
        let sinks = spec.notify.iter().map(|s| notify::sink_from_spec(s, None)).collect();
        let pool = WorkerPool::new(spec.max_concurrent);
        Orchestrator {
            spec,
            stamps: Arc::new(StampAllocator::system()),
            pool,
            sinks,
            build_faults: None,
            deploy_faults: None,
            ssh: SshOptions::default(),
            monitor_interval: Duration::from_secs(1),
        }
    }

    pub fn with_stamps(mut self, stamps: Arc<StampAllocator>) -> Self {
        self.stamps = stamps;
        self
    }

    pub fn with_pool(mut self, pool: Arc<WorkerPool>) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_sink(mut self, sink: impl Sink + 'static) -> Self {
        self.sinks.push(Box::new(sink));
        self
    }

    pub fn with_build_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.build_faults = Some(faults);
        self
    }

    pub fn with_deploy_faults(mut self, faults: Arc<dyn FaultInjector>) -> Self {
        self.deploy_faults = Some(faults);
        self
    }

    pub fn with_ssh_options(mut self, ssh: SshOptions) -> Self {
        self.ssh = ssh;
        self
    }

    pub fn with_monitor_interval(mut self, interval: Duration) -> Self {
        self.monitor_interval = interval;
        self
    }

    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn store(&self) -> ArtifactStore {
        ArtifactStore::from_spec(&self.spec.store)
    }

    fn connector(&self) -> Connector {
        match self.spec.executor {
            ExecutorKind::Local => Connector::Local,
            ExecutorKind::Ssh => Connector::Ssh(self.ssh.clone()),
        }
    }

    fn deploy_host_label(&self) -> String {
        match self.spec.executor {
            ExecutorKind::Local => "local".into(),
            ExecutorKind::Ssh => self.spec.deploy_host.remote_host(HostRole::Deploy).label(),
        }
    }

    fn open_channels(
        &self,
        console: &Arc<ConsoleLog>,
        load: &Arc<ControllerLoad>,
    ) -> Result<(Channel, Channel), String> {
        let spec = &self.spec;
        let log: Arc<dyn LogSink> = console.clone();
        let build_opts = ChannelOptions {
            policy: spec.build_policy(),
            log: log.clone(),
            transfer: spec.transfer.policy(),
            faults: self.build_faults.clone(),
            attribute_to: None,
            ..ChannelOptions::default()
        };
        let build = match spec.mode {
            ExecutionMode::Local => Channel::local(ChannelOptions {
                attribute_to: Some(load.clone()),
                ..build_opts
            }),
            ExecutionMode::Light => self
                .connector()
                .open(
                    &spec.build_host.remote_host(HostRole::Build),
                    spec.build_host.connect_timeout(),
                    build_opts,
                )
                .map_err(|e| format!("build host: {e}"))?,
        };
        let deploy_opts = ChannelOptions {
            policy: spec.deploy_policy(),
            log,
            transfer: spec.transfer.policy(),
            faults: self.deploy_faults.clone(),
            ..ChannelOptions::default()
        };
        let deploy = self
            .connector()
            .open(
                &spec.deploy_host.remote_host(HostRole::Deploy),
                spec.deploy_host.connect_timeout(),
                deploy_opts,
            )
            .map_err(|e| format!("deploy host: {e}"))?;
        Ok((build, deploy))
    }

    /// Runs the pipeline for `source_ref` to a terminal state. Never panics on
    /// stage errors; the returned record says what happened.
    pub fn run(&self, source_ref: &str) -> PipelineRun {
        let slot = self.pool.acquire();
        let run_started = Instant::now();
        let runs_dir = self.spec.runs_dir.clone();
        if let Err(e) = std::fs::create_dir_all(&runs_dir) {
            log::error!("cannot create {}: {e}", runs_dir.display());
        }
        let stamp_wait = Instant::now();
        let stamp = self
            .stamps
            .next_with(|s| match std::fs::create_dir(runs_dir.join(s.as_str())) {
                Ok(()) => true,
                Err(e) => e.kind() != std::io::ErrorKind::AlreadyExists,
            });
        let run_dir = runs_dir.join(stamp.as_str());
        let log_path = run_dir.join(CONSOLE_FILE);
        let mut run = PipelineRun {
            stamp: stamp.clone(),
            source_ref: source_ref.to_string(),
            commit: CommitMeta::unversioned(Utc::now()),
            mode: self.spec.mode,
            executor: self.spec.executor,
            state: RunState::Running,
            alert: false,
            started: Utc::now(),
            finished: None,
            duration: 0.0,
            queue_wait: (slot.waited() + stamp_wait.elapsed()).as_secs_f64(),
            reports: Vec::new(),
            failed_stage: None,
            error: None,
            archive: None,
            download_link: None,
            backup_refs: BTreeMap::new(),
            health: None,
            rollback: None,
            controller: None,
            cleanup: None,
            notification: None,
            log_path: log_path.clone(),
        };
        let console = match ConsoleLog::create(&log_path) {
            Ok(c) => Arc::new(c),
            Err(e) => {
                run.state = RunState::Failed;
                run.failed_stage = Some(Stage::Checkout);
                run.error = Some(format!("cannot open run log {}: {e}", log_path.display()));
                run.finished = Some(Utc::now());
                return run;
            }
        };
        console.line(&format!(
            "run {stamp} for {source_ref} ({} mode)",
            self.spec.mode.label()
        ));
        let _ = run.save();

        let load = ControllerLoad::new();
        let monitor = ControllerMonitor::start_with_interval(load.clone(), self.monitor_interval);
        let mut channels: Option<(Channel, Channel)> = None;
        let result = self.execute(&mut run, &console, &load, &mut channels);

        match result {
            Ok(()) => run.state = RunState::Succeeded,
            Err(f) => {
                console.line(&format!("run failed at {}: {}", f.stage, f.message));
                run.failed_stage = Some(f.stage);
                run.error = Some(f.message);
                run.state = match &run.rollback {
                    Some(r) if r.succeeded => RunState::RolledBack,
                    Some(_) => {
                        run.alert = true;
                        RunState::Failed
                    }
                    None => RunState::Failed,
                };
            }
        }

        if let Some((build_ch, deploy_ch)) = channels.take() {
            let sweep = cleanup_sweep(&build_ch, &self.spec.engine, &self.spec.work_root, &stamp);
            for w in &sweep.warnings {
                console.line(&format!("cleanup warning: {w}"));
            }
            console.line(&format!("cleanup: {}", sweep.summary()));
            run.cleanup = Some(sweep.summary());
            close_channel(&build_ch);
            close_channel(&deploy_ch);
        }
        run.controller = Some(monitor.finish());
        run.finished = Some(Utc::now());
        run.duration = run_started.elapsed().as_secs_f64();
        if let Err(e) = run.save() {
            log::error!("cannot write run record for {stamp}: {e}");
        }

        let note = Notification::for_run(&run);
        let mut reports = std::mem::take(&mut run.reports);
        let mut delivery = Delivery::default();
        let _ = timed(&mut reports, &console, Stage::Notify, || {
            delivery = notify::deliver_all(&self.sinks, &note);
            let detail = format!("{:?} to {} sink(s)", note.kind, delivery.delivered.len());
            if delivery.failed.is_empty() {
                Ok(((), detail))
            } else {
                Err(format!("{detail}; failed: {}", delivery.failed.join("; ")))
            }
        });
        run.reports = reports;
        run.notification = Some(delivery);
        run.duration = run_started.elapsed().as_secs_f64();
        if let Err(e) = run.save() {
            log::error!("cannot write run record for {stamp}: {e}");
        }
        console.line(&format!("run {stamp} finished: {}", run.state));
        drop(slot);
        run
    }

    fn execute(
        &self,
        run: &mut PipelineRun,
        console: &Arc<ConsoleLog>,
        load: &Arc<ControllerLoad>,
        channels: &mut Option<(Channel, Channel)>,
    ) -> Result<(), Failure> {
        let spec = &self.spec;
        let stamp = run.stamp.clone();
        let store = self.store();
        let scratch = tempfile::Builder::new()
            .prefix("shiplight-run-")
            .tempdir()
            .map_err(|e| Failure {
                stage: Stage::Checkout,
                message: format!("scratch directory: {e}"),
            })?;

        let source_ref = run.source_ref.clone();
        let co = timed(&mut run.reports, console, Stage::Checkout, || {
            let co = checkout(&spec.source, &source_ref, Some(scratch.path())).map_err(|e| e.to_string())?;
            let detail = format!("{} on {}", co.commit.short_id(), co.commit.branch);
            Ok((co, detail))
        })?;
        run.commit = co.commit.clone();

        let (build_ch, deploy_ch) = timed(&mut run.reports, console, Stage::OpenChannel, || {
            store.ensure_root().map_err(|e| format!("artifact store: {e}"))?;
            let (b, d) = self.open_channels(console, load)?;
            let detail = format!("build={} deploy={}", b.host_label(), d.host_label());
            Ok(((b, d), detail))
        })?;
        let (build_ch, deploy_ch) = channels.insert((build_ch, deploy_ch));
        let build_ch: &Channel = build_ch;
        let deploy_ch: &Channel = deploy_ch;

        // Builds
        let register = spec.store.keep_components.then_some(&store);
        let build_one = |kind: ComponentKind| -> Result<(ComponentArtifact, String), String> {
            let a = build::build_remote(build_ch, spec, kind, &stamp, &co.dir, register).map_err(|e| e.to_string())?;
            let detail = format!("{} files, {} bytes", a.files.len(), a.total_bytes());
            Ok((a, detail))
        };
        let mut artifacts = Vec::new();
        let kinds: Vec<ComponentKind> = ComponentKind::ALL
            .into_iter()
            .filter(|k| spec.components.contains_key(k))
            .collect();
        if spec.parallel_builds && kinds.len() > 1 {
            let outcomes: Vec<TimedBuild> = std::thread::scope(|s| {
                let handles: Vec<_> = kinds
                    .iter()
                    .map(|&k| {
                        let build_one = &build_one;
                        s.spawn(move || {
                            let started = Utc::now();
                            let t = Instant::now();
                            let r = build_one(k);
                            (k, started, t.elapsed().as_secs_f64(), r)
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().expect("build thread panicked"))
                    .collect()
            });
            let mut first_failure = None;
            for (kind, started, duration, r) in outcomes {
                let stage = Stage::build_for(kind);
                let (outcome, detail) = match &r {
                    Ok((_, d)) => (Outcome::Success, d.clone()),
                    Err(e) => (Outcome::Failure, e.clone()),
                };
                console.line(&format!("stage {stage} {outcome:?} after {duration:.2}s: {detail}"));
                run.reports.push(StageReport {
                    stage,
                    started,
                    duration,
                    outcome,
                    detail,
                });
                match r {
                    Ok((a, _)) => artifacts.push(a),
                    Err(message) => {
                        first_failure.get_or_insert(Failure { stage, message });
                    }
                }
            }
            if let Some(f) = first_failure {
                return Err(f);
            }
        } else {
            for kind in ComponentKind::ALL {
                if !kinds.contains(&kind) {
                    skipped(
                        &mut run.reports,
                        console,
                        Stage::build_for(kind),
                        "component not configured",
                    );
                    continue;
                }
                artifacts.push(timed(&mut run.reports, console, Stage::build_for(kind), || {
                    build_one(kind)
                })?);
            }
        }

        // Package
        let stored = timed(&mut run.reports, console, Stage::Package, || {
            let bundle_dir = build::bundle_dir(&spec.work_root, &stamp);
            let dist_dir = build::dist_dir(&spec.work_root, &stamp);
            let config = spec.packaging.config_dir.as_ref().map(|c| co.dir.join(c));
            packaging::assemble_bundle(build_ch, &bundle_dir, &artifacts, &stamp, config.as_deref())
                .map_err(|e| e.to_string())?;
            let bundle = packaging::zip_bundle(
                build_ch,
                &bundle_dir,
                &dist_dir,
                &co.commit,
                &stamp,
                &build_ch.host_label(),
                &spec.packaging.packager,
            )
            .map_err(|e| e.to_string())?;
            let stored = store.publish_bundle(build_ch, &bundle).map_err(|e| e.to_string())?;
            let detail = format!("{} ({} entries)", bundle.file_name(), bundle.manifest.entries.len());
            Ok((stored, detail))
        })?;
        run.archive = Some(stored.archive.clone());
        run.download_link = store.download_link(&stamp).ok();

        // Deploy, under the target locks for the whole sequence.
        let ctx = DeployContext::from_spec(&spec.deploy).map_err(|e| Failure {
            stage: Stage::DeployFrontend,
            message: e.to_string(),
        })?;
        let host = self.deploy_host_label();
        let keys: Vec<String> = kinds
            .iter()
            .map(|k| deploy::target_key(&host, &ctx.root, k.as_str()))
            .collect();
        let locks = deploy::lock_targets(keys);
        run.queue_wait += locks.waited().as_secs_f64();
        if !locks.waited().is_zero() {
            console.line(&format!(
                "waited {:.2}s for deploy targets",
                locks.waited().as_secs_f64()
            ));
        }

        let mut touched: Vec<(DeployTargetState, RollbackPoint)> = Vec::new();
        let deployed = self.deploy_phase(
            run,
            console,
            deploy_ch,
            &ctx,
            &stored.archive,
            scratch.path(),
            &kinds,
            &mut touched,
        );

        match deployed {
            Ok(()) => {
                self.prune_after_success(console, deploy_ch, &ctx, &store, &stamp, &touched);
                drop(locks);
                Ok(())
            }
            Err(failure) => {
                if !touched.is_empty() {
                    let summary = self.roll_back(run, console, deploy_ch, &ctx, &mut touched);
                    run.rollback = Some(summary);
                }
                drop(locks);
                Err(failure)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn deploy_phase(
        &self,
        run: &mut PipelineRun,
        console: &Arc<ConsoleLog>,
        ch: &Channel,
        ctx: &DeployContext,
        archive: &Path,
        scratch: &Path,
        kinds: &[ComponentKind],
        touched: &mut Vec<(DeployTargetState, RollbackPoint)>,
    ) -> Result<(), Failure> {
        let stamp = run.stamp.clone();
        for kind in [ComponentKind::Frontend, ComponentKind::Backend] {
            let stage = Stage::deploy_for(kind);
            if !kinds.contains(&kind) {
                skipped(&mut run.reports, console, stage, "component not configured");
                continue;
            }
            let mut backup_ref = None;
            let result = timed(&mut run.reports, console, stage, || {
                let tree = scratch.join(format!("release-{kind}"));
                deploy::extract_release_tree(archive, kind, &tree).map_err(|e| e.to_string())?;
                let mut state = DeployTargetState::inspect(ch, ctx, kind).map_err(|e| e.to_string())?;
                let point = deploy::backup_target(ch, &state, &stamp, ctx.retention).map_err(|e| e.to_string())?;
                backup_ref = Some(point.backup_path.display().to_string());
                let previous = state.active.clone();
                match deploy::deploy_target(ch, ctx, &mut state, &point, &stamp, &tree) {
                    Ok(done) => {
                        touched.push((state, point));
                        let from = previous.map(|p| p.to_string()).unwrap_or_else(|| "nothing".into());
                        let mut detail = format!("{from} -> {stamp}");
                        if !done.restored_config.is_empty() {
                            detail.push_str(&format!(", restored {}", done.restored_config.join(", ")));
                        }
                        Ok(((), detail))
                    }
                    Err(e) => {
                        if e.touched_live() {
                            touched.push((state, point));
                        }
                        Err(e.to_string())
                    }
                }
            });
            if let Some(b) = backup_ref {
                run.backup_refs.insert(kind.to_string(), b);
            }
            result?;
        }

        if kinds.contains(&ComponentKind::Backend) {
            if let Some(hc) = &self.spec.health_check {
                let result = timed(&mut run.reports, console, Stage::HealthCheck, || {
                    let r = deploy::health_check(hc);
                    for line in r.log_lines() {
                        console.line(&format!("health {line}"));
                    }
                    if r.healthy {
                        let summary = r.summary();
                        Ok((r, summary))
                    } else {
                        Err(r.summary())
                    }
                });
                run.health = Some(result?);
                return Ok(());
            }
        }
        skipped(
            &mut run.reports,
            console,
            Stage::HealthCheck,
            "no backend health check configured",
        );
        Ok(())
    }

    fn roll_back(
        &self,
        run: &mut PipelineRun,
        console: &Arc<ConsoleLog>,
        ch: &Channel,
        ctx: &DeployContext,
        touched: &mut [(DeployTargetState, RollbackPoint)],
    ) -> RollbackSummary {
        let mut entries = Vec::new();
        let _ = timed(&mut run.reports, console, Stage::Rollback, || {
            for (state, point) in touched.iter_mut().rev() {
                let check = (state.target == ComponentKind::Backend)
                    .then_some(self.spec.health_check.as_ref())
                    .flatten();
                match deploy::rollback(ch, ctx, state, point, check) {
                    Ok(r) => entries.push(RollbackEntry {
                        target: state.target,
                        ok: true,
                        restored: r.restored.map(|id| id.to_string()),
                        reused_release: r.reused_release,
                        error: None,
                    }),
                    Err(e) => {
                        console.line(&format!("rollback of {} failed: {e}", state.target));
                        entries.push(RollbackEntry {
                            target: state.target,
                            ok: false,
                            restored: None,
                            reused_release: false,
                            error: Some(e.to_string()),
                        })
                    }
                }
            }
            let detail = entries
                .iter()
                .map(|e| match (&e.error, &e.restored) {
                    (Some(err), _) => format!("{}: FAILED {err}", e.target),
                    (None, Some(r)) => format!("{}: restored {r}", e.target),
                    (None, None) => format!("{}: emptied", e.target),
                })
                .collect::<Vec<_>>()
                .join("; ");
            if entries.iter().all(|e| e.ok) {
                Ok(((), detail))
            } else {
                Err(detail)
            }
        });
        RollbackSummary {
            succeeded: entries.iter().all(|e| e.ok),
            targets: entries,
        }
    }

    fn prune_after_success(
        &self,
        console: &ConsoleLog,
        ch: &Channel,
        ctx: &DeployContext,
        store: &ArtifactStore,
        stamp: &ReleaseStamp,
        touched: &[(DeployTargetState, RollbackPoint)],
    ) {
        let protect: BTreeSet<_> = [crate::model::ReleaseId::Stamped(stamp.clone())].into();
        for (state, _) in touched {
            match deploy::prune_releases(ch, state, &protect) {
                Ok(removed) if !removed.is_empty() => console.line(&format!(
                    "pruned {} release(s) of {}: {}",
                    removed.len(),
                    state.target,
                    removed.join(", ")
                )),
                Ok(_) => {}
                Err(e) => console.line(&format!("release pruning for {} failed: {e}", state.target)),
            }
        }
        let mut referenced = match deploy::referenced_stamps(ch, ctx) {
            Ok(r) => r,
            Err(e) => {
                console.line(&format!("store pruning skipped: {e}"));
                return;
            }
        };
        referenced.insert(stamp.clone());
        match store.prune(&referenced) {
            Ok(removed) if !removed.is_empty() => console.line(&format!(
                "pruned {} stored release(s): {}",
                removed.len(),
                removed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )),
            Ok(_) => {}
            Err(e) => console.line(&format!("store pruning failed: {e}")),
        }
    }
}

/// Runs every ref concurrently, bounded by the orchestrator's worker pool.
/// Results come back in input order.
pub fn run_concurrent(orch: &Orchestrator, refs: &[String]) -> Vec<PipelineRun> {
    std::thread::scope(|s| {
        let handles: Vec<_> = refs.iter().map(|r| s.spawn(move || orch.run(r))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("pipeline thread panicked"))
            .collect()
    })
}

/// Pairs of runs whose deploy-phase intervals (first deploy stage start to
/// last deploy stage end, rollback included) overlap.
pub fn overlapping_deploys(runs: &[PipelineRun]) -> Vec<(ReleaseStamp, ReleaseStamp)> {
    let spans: Vec<(ReleaseStamp, DateTime<Utc>, DateTime<Utc>)> = runs
        .iter()
        .filter_map(|r| {
            let deploys: Vec<&StageReport> = r
                .reports
                .iter()
                .filter(|s| s.stage.is_deploy() && s.outcome != Outcome::Skipped)
                .collect();
            let start = deploys.iter().map(|s| s.started).min()?;
            let end = deploys.iter().map(|s| s.finished()).max()?;
            Some((r.stamp.clone(), start, end))
        })
        .collect();
    let mut out = Vec::new();
    for (i, a) in spans.iter().enumerate() {
        for b in &spans[i + 1..] {
            if a.1 < b.2 && b.1 < a.2 {
                out.push((a.0.clone(), b.0.clone()));
            }
        }
    }
    out
}
