//! Run notifications and the sinks that deliver them.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::SinkSpec;
use crate::executor::log::tail_lines;
use crate::model::CommitMeta;
use crate::orchestrator::{PipelineRun, RollbackSummary, RunState};
use crate::stamp::ReleaseStamp;

/// Lines of the run log carried by a failure notification.
pub const LOG_TAIL_LINES: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NotificationKind {
    Success,
    Failure,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Info,
    Warning,
    /// An operator has to intervene: a rollback did not complete.
    Alert,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Notification {
    pub kind: NotificationKind,
    pub severity: Severity,
    pub stamp: ReleaseStamp,
    pub state: RunState,
    pub commit: CommitMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub download_link: Option<String>,
    /// Backup directory of the displaced release, per target.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup_ref: Option<BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failed_stage: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_tail: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rollback: Option<RollbackSummary>,
}

impl Notification {
    /// Success message for a succeeded run.
    pub fn post_success(run: &PipelineRun) -> Self {
        Notification {
            kind: NotificationKind::Success,
            severity: Severity::Info,
            stamp: run.stamp.clone(),
            state: run.state,
            commit: run.commit.clone(),
            download_link: run.download_link.clone(),
            backup_ref: (!run.backup_refs.is_empty()).then(|| run.backup_refs.clone()),
            failed_stage: None,
            error: None,
            log_tail: None,
            rollback: None,
        }
    }

    /// Failure message with diagnostics: failing stage, log tail and the
    /// rollback outcome.
    pub fn post_failure(run: &PipelineRun) -> Self {
        let log_tail = tail_lines(&run.log_path, LOG_TAIL_LINES).ok();
        let severity = if run.alert { Severity::Alert } else { Severity::Warning };
        Notification {
            kind: NotificationKind::Failure,
            severity,
            stamp: run.stamp.clone(),
            state: run.state,
            commit: run.commit.clone(),
            download_link: run.download_link.clone(),
            backup_ref: (!run.backup_refs.is_empty()).then(|| run.backup_refs.clone()),
            failed_stage: run.failed_stage.map(|s| s.as_str().to_string()),
            error: run.error.clone(),
            log_tail,
            rollback: run.rollback.clone(),
        }
    }

    /// The message matching a terminal run.
    pub fn for_run(run: &PipelineRun) -> Self {
        if run.state == RunState::Succeeded {
            Self::post_success(run)
        } else {
            Self::post_failure(run)
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("notification serializes")
    }
}

#[derive(Debug, thiserror::Error)]
#[error("sink {sink} failed: {detail}")]
pub struct SinkFailed {
    pub sink: String,
    pub detail: String,
}

pub trait Sink: Send + Sync {
    fn name(&self) -> String;
    fn deliver(&self, n: &Notification) -> Result<(), SinkFailed>;
}

/// Writes `<dir>/<stamp>-<kind>.json`, atomically.
#[derive(Clone, Debug)]
pub struct FileSink {
    pub dir: PathBuf,
}

impl FileSink {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        FileSink { dir: dir.into() }
    }

    pub fn path_for(&self, n: &Notification) -> PathBuf {
        let kind = match n.kind {
            NotificationKind::Success => "success",
            NotificationKind::Failure => "failure",
        };
        self.dir.join(format!("{}-{kind}.json", n.stamp))
    }
}

impl Sink for FileSink {
    fn name(&self) -> String {
        format!("file:{}", self.dir.display())
    }

    fn deliver(&self, n: &Notification) -> Result<(), SinkFailed> {
        let fail = |e: std::io::Error| SinkFailed {
            sink: self.name(),
            detail: e.to_string(),
        };
        std::fs::create_dir_all(&self.dir).map_err(fail)?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(fail)?;
        tmp.write_all(n.to_json().as_bytes()).map_err(fail)?;
        tmp.persist(self.path_for(n)).map_err(|e| fail(e.error))?;
        Ok(())
    }
}

/// Runs a program with the notification JSON on standard input. Point it at
/// a mailer or chat hook.
#[derive(Clone, Debug)]
pub struct CommandSink {
    pub argv: Vec<String>,
    pub timeout: Duration,
}

impl CommandSink {
    pub fn new(argv: Vec<String>) -> Self {
        CommandSink {
            argv,
            timeout: Duration::from_secs(30),
        }
    }
}

impl Sink for CommandSink {
    fn name(&self) -> String {
        format!("command:{}", self.argv.first().map(String::as_str).unwrap_or(""))
    }

    fn deliver(&self, n: &Notification) -> Result<(), SinkFailed> {
        let fail = |detail: String| SinkFailed {
            sink: self.name(),
            detail,
        };
        let (program, args) = self.argv.split_first().ok_or_else(|| fail("empty argv".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| fail(e.to_string()))?;
        let body = n.to_json();
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(body.as_bytes());
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            match child.try_wait().map_err(|e| fail(e.to_string()))? {
                Some(status) if status.success() => return Ok(()),
                Some(status) => {
                    let mut err = String::new();
                    if let Some(mut s) = child.stderr.take() {
                        let _ = std::io::Read::read_to_string(&mut s, &mut err);
                    }
                    return Err(fail(format!("exited {status}: {}", err.trim())));
                }
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Err(fail(format!("timed out after {:?}", self.timeout)));
                }
                None => std::thread::sleep(Duration::from_millis(20)),
            }
        }
    }
}

/// Keeps notifications in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    received: Mutex<Vec<Notification>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn received(&self) -> Vec<Notification> {
        self.received.lock().unwrap().clone()
    }
}

impl Sink for MemorySink {
    fn name(&self) -> String {
        "memory".into()
    }

    fn deliver(&self, n: &Notification) -> Result<(), SinkFailed> {
        self.received.lock().unwrap().push(n.clone());
        Ok(())
    }
}

impl<S: Sink + ?Sized> Sink for std::sync::Arc<S> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn deliver(&self, n: &Notification) -> Result<(), SinkFailed> {
        (**self).deliver(n)
    }
}

pub fn sink_from_spec(spec: &SinkSpec, base_dir: Option<&Path>) -> Box<dyn Sink> {
    match spec {
        SinkSpec::File { dir } => {
            let dir = match base_dir {
                Some(b) if dir.is_relative() => b.join(dir),
                _ => dir.clone(),
            };
            Box::new(FileSink::new(dir))
        }
        SinkSpec::Command { argv } => Box::new(CommandSink::new(argv.clone())),
    }
}

/// Outcome of delivering one notification to every sink.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub delivered: Vec<String>,
    pub failed: Vec<String>,
}

/// Sends `n` to each sink in turn. Failures are logged and collected; they
/// never stop later sinks.
pub fn deliver_all(sinks: &[Box<dyn Sink>], n: &Notification) -> Delivery {
    let mut out = Delivery::default();
    for sink in sinks {
        match sink.deliver(n) {
            Ok(()) => out.delivered.push(sink.name()),
            Err(e) => {
                log::warn!("{e}");
                out.failed.push(e.to_string());
            }
        }
    }
    out
}
