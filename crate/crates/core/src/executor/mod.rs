//! Command execution and file transfer to a host.
//!
//! A [`Channel`] is the controller's only way to act on a build or deploy
//! host. It enforces the command allow-list before anything reaches the
//! transport, streams output into the run log, and supervises timeouts.
//! Two transports exist: [`SshTransport`] for real remote hosts and
//! [`LocalTransport`], which runs commands as local subprocesses so the whole
//! pipeline can be exercised on one machine.

mod local;
pub mod log;
mod process;
pub mod remote;
mod ssh;
mod transfer;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::log::{LogEvent, LogSink, NullLog, Stream};
use self::process::{Ending, RunRequest, StdinFeeder, StdoutMode};
use crate::accounting::ControllerLoad;
use crate::model::RemoteHost;

pub use self::local::LocalTransport;
pub use self::ssh::{SshOptions, SshTransport};
pub use self::transfer::TransferDirection;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub exit_code: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration: Duration,
}

impl CommandResult {
    pub fn success(&self) -> bool {
        self.exit_code == 0
    }

    pub fn stdout_text(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("connection to {host} timed out after {seconds:.1}s")]
    ConnectTimeout { host: String, seconds: f64 },
    #[error("{host} unreachable: {detail}")]
    Unreachable { host: String, detail: String },
    #[error("authentication to {host} failed: {detail}")]
    AuthFailure { host: String, detail: String },
    #[error("host key for {host} rejected: {detail}")]
    HostKeyRejected { host: String, detail: String },
    #[error("channel is closed")]
    ChannelClosed,
    #[error("command {program:?} is not on the allow-list")]
    CommandDenied { program: String },
    #[error("command timed out after {seconds:.1}s: {argv:?}")]
    CommandTimeout {
        argv: Vec<String>,
        seconds: f64,
        partial: Box<CommandResult>,
    },
    #[error("channel broken: {detail}")]
    ChannelBroken { detail: String },
    #[error("transfer interrupted after {attempts} attempt(s): {detail}")]
    TransferInterrupted { attempts: u32, detail: String },
    #[error("insufficient space on destination: {detail}")]
    InsufficientSpace { detail: String },
    #[error("remote path missing: {}", .0.display())]
    RemotePathMissing(PathBuf),
    #[error("local path missing: {}", .0.display())]
    LocalPathMissing(PathBuf),
    #[error("{argv:?} exited with {exit_code}: {stderr}")]
    CommandFailed {
        argv: Vec<String>,
        exit_code: i32,
        stderr: String,
    },
    #[error("failed to start {program}: {source}")]
    Spawn {
        program: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Programs that infrastructure operations (workspaces, transfers, link
/// swaps) need on every host.
pub const BASE_PROGRAMS: &[&str] = &["sh", "mkdir", "mv", "ln", "rm", "cp", "tar", "test", "readlink", "true"];

/// Which programs may be started on a host. Checked on `argv[0]` before
/// anything is sent.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandPolicy {
    allowed: BTreeSet<String>,
}

impl CommandPolicy {
    pub fn only<I, S>(programs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        CommandPolicy {
            allowed: programs.into_iter().map(Into::into).collect(),
        }
    }

    /// [`BASE_PROGRAMS`] plus `extra`.
    pub fn standard<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut policy = CommandPolicy::only(BASE_PROGRAMS.iter().copied());
        policy.allowed.extend(extra.into_iter().map(Into::into));
        policy
    }

    pub fn allow(&mut self, program: impl Into<String>) {
        self.allowed.insert(program.into());
    }

    pub fn permits(&self, program: &str) -> bool {
        self.allowed.contains(program)
    }

    pub fn programs(&self) -> impl Iterator<Item = &str> {
        self.allowed.iter().map(String::as_str)
    }
}

impl Default for CommandPolicy {
    fn default() -> Self {
        CommandPolicy::standard(std::iter::empty::<String>())
    }
}

/// Retry behaviour for file transfers. Commands are never retried.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransferPolicy {
    pub retries: u32,
    pub initial_backoff: Duration,
    /// Re-checksum both sides after each transfer.
    pub verify: bool,
}

impl Default for TransferPolicy {
    fn default() -> Self {
        TransferPolicy {
            retries: 2,
            initial_backoff: Duration::from_secs(1),
            verify: false,
        }
    }
}

/// What a [`FaultInjector`] does to an operation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The command "runs" and exits with this code without reaching the host.
    Exit(i32),
    /// The connection drops before the command is sent.
    Break,
    /// The transfer stream is cut after this many bytes.
    InterruptAfter(u64),
}

/// Hook for fault-injection tests. Consulted before each command and each
/// transfer attempt.
pub trait FaultInjector: Send + Sync {
    fn on_command(&self, _argv: &[String]) -> Option<Fault> {
        None
    }

    fn on_transfer(&self, _direction: TransferDirection, _attempt: u32) -> Option<Fault> {
        None
    }
}

/// The link between the controller and one host.
pub trait Transport: Send + Sync {
    /// Identifier for logs, e.g. `ci@build-1:22` or `local`.
    fn host_label(&self) -> String;

    fn is_local(&self) -> bool;

    /// Process that runs `argv` on the host with `env` added.
    fn command(&self, argv: &[String], env: &BTreeMap<String, String>) -> Command;

    /// False once the underlying connection is gone.
    fn healthy(&self) -> bool {
        true
    }

    fn shutdown(&self) {}
}

/// Wraps a transport and records every argv actually handed to it.
pub struct RecordingTransport<T> {
    inner: T,
    seen: Arc<Mutex<Vec<Vec<String>>>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T) -> (Self, Arc<Mutex<Vec<Vec<String>>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        (
            RecordingTransport {
                inner,
                seen: seen.clone(),
            },
            seen,
        )
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn host_label(&self) -> String {
        self.inner.host_label()
    }

    fn is_local(&self) -> bool {
        self.inner.is_local()
    }

    fn command(&self, argv: &[String], env: &BTreeMap<String, String>) -> Command {
        self.seen.lock().unwrap().push(argv.to_vec());
        self.inner.command(argv, env)
    }

    fn healthy(&self) -> bool {
        self.inner.healthy()
    }

    fn shutdown(&self) {
        self.inner.shutdown()
    }
}

static OPENED: AtomicU64 = AtomicU64::new(0);
static CLOSED: AtomicU64 = AtomicU64::new(0);
static SESSION_SEQ: AtomicU64 = AtomicU64::new(0);

/// `(opened, closed)` channel counts for this process.
pub fn channel_stats() -> (u64, u64) {
    (OPENED.load(Ordering::SeqCst), CLOSED.load(Ordering::SeqCst))
}

#[derive(Clone)]
pub struct ChannelOptions {
    pub policy: CommandPolicy,
    pub log: Arc<dyn LogSink>,
    pub transfer: TransferPolicy,
    pub faults: Option<Arc<dyn FaultInjector>>,
    /// When set, processes started by this channel count as controller load.
    pub attribute_to: Option<Arc<ControllerLoad>>,
    pub default_timeout: Duration,
}

impl Default for ChannelOptions {
    fn default() -> Self {
        ChannelOptions {
            policy: CommandPolicy::default(),
            log: Arc::new(NullLog),
            transfer: TransferPolicy::default(),
            faults: None,
            attribute_to: None,
            default_timeout: Duration::from_secs(600),
        }
    }
}

/// How to reach hosts.
#[derive(Clone, Debug, Default)]
pub enum Connector {
    /// Local subprocesses; the host's paths are local paths.
    #[default]
    Local,
    Ssh(SshOptions),
}

impl Connector {
    pub fn open(
        &self,
        host: &RemoteHost,
        connect_timeout: Duration,
        options: ChannelOptions,
    ) -> Result<Channel, ExecError> {
        open_channel(self, host, connect_timeout, options)
    }
}

/// Opens a channel to `host`. Key-based authentication happens exactly once
/// here; later commands reuse the session.
pub fn open_channel(
    connector: &Connector,
    host: &RemoteHost,
    connect_timeout: Duration,
    options: ChannelOptions,
) -> Result<Channel, ExecError> {
    let transport: Box<dyn Transport> = match connector {
        Connector::Local => Box::new(LocalTransport::new()),
        Connector::Ssh(opts) => Box::new(SshTransport::connect(host, connect_timeout, opts)?),
    };
    Ok(Channel::new(transport, options))
}

struct Inflight {
    pids: BTreeSet<i32>,
}

pub struct Channel {
    transport: Box<dyn Transport>,
    session_id: String,
    opts: ChannelOptions,
    open: AtomicBool,
    cancel: Arc<AtomicBool>,
    inflight: Mutex<Inflight>,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("host", &self.transport.host_label())
            .field("session_id", &self.session_id)
            .field("open", &self.is_open())
            .finish()
    }
}

pub(crate) struct Exec {
    pub timeout: Option<Duration>,
    pub env: BTreeMap<String, String>,
    pub stdin: Option<StdinFeeder>,
    pub stdout: StdoutMode,
    /// Log output bytes (false for binary transfer streams).
    pub log_output: bool,
}

impl Exec {
    pub fn plain(timeout: Option<Duration>) -> Self {
        Exec {
            timeout,
            env: BTreeMap::new(),
            stdin: None,
            stdout: StdoutMode::Capture,
            log_output: true,
        }
    }
}

impl Channel {
    pub fn new(transport: Box<dyn Transport>, opts: ChannelOptions) -> Self {
        let seq = SESSION_SEQ.fetch_add(1, Ordering::SeqCst);
        let session_id = format!("ch{}-{}", std::process::id(), seq);
        OPENED.fetch_add(1, Ordering::SeqCst);
        opts.log
            .note(&session_id, &format!("channel open to {}", transport.host_label()));
        Channel {
            transport,
            session_id,
            opts,
            open: AtomicBool::new(true),
            cancel: Arc::new(AtomicBool::new(false)),
            inflight: Mutex::new(Inflight { pids: BTreeSet::new() }),
        }
    }

    pub fn local(opts: ChannelOptions) -> Self {
        Channel::new(Box::new(LocalTransport::new()), opts)
    }

    pub fn session_id(&self) -> &str {
        &self.session_id
    }

    pub fn host_label(&self) -> String {
        self.transport.host_label()
    }

    pub fn is_local(&self) -> bool {
        self.transport.is_local()
    }

    pub fn is_open(&self) -> bool {
        self.open.load(Ordering::SeqCst)
    }

    pub fn policy(&self) -> &CommandPolicy {
        &self.opts.policy
    }

    pub fn log(&self) -> &Arc<dyn LogSink> {
        &self.opts.log
    }

    pub fn transfer_policy(&self) -> TransferPolicy {
        self.opts.transfer
    }

    pub(crate) fn faults(&self) -> Option<&Arc<dyn FaultInjector>> {
        self.opts.faults.as_ref()
    }

    pub fn default_timeout(&self) -> Duration {
        self.opts.default_timeout
    }

    pub fn note(&self, text: &str) {
        self.opts.log.note(&self.session_id, text);
    }

    /// Runs `argv` on the host. Output is streamed into the log as it arrives
    /// and also returned. A non-zero exit is not an error here.
    pub fn run_command(
        &self,
        argv: &[String],
        timeout: Duration,
        env: &BTreeMap<String, String>,
    ) -> Result<CommandResult, ExecError> {
        let mut exec = Exec::plain(Some(timeout));
        exec.env = env.clone();
        self.exec(argv, exec)
    }

    /// [`run_command`](Self::run_command) with the channel's default timeout
    /// and no extra environment.
    pub fn run<S: AsRef<str>>(&self, argv: &[S]) -> Result<CommandResult, ExecError> {
        let argv: Vec<String> = argv.iter().map(|s| s.as_ref().to_string()).collect();
        self.exec(&argv, Exec::plain(Some(self.opts.default_timeout)))
    }

    /// Like [`run`](Self::run) but a non-zero exit becomes
    /// [`ExecError::CommandFailed`].
    pub fn run_ok<S: AsRef<str>>(&self, argv: &[S]) -> Result<CommandResult, ExecError> {
        let result = self.run(argv)?;
        if result.success() {
            Ok(result)
        } else {
            Err(ExecError::CommandFailed {
                argv: argv.iter().map(|s| s.as_ref().to_string()).collect(),
                exit_code: result.exit_code,
                stderr: result.stderr_text().trim().to_string(),
            })
        }
    }

    pub(crate) fn exec(&self, argv: &[String], exec: Exec) -> Result<CommandResult, ExecError> {
        if !self.is_open() {
            return Err(ExecError::ChannelClosed);
        }
        let program = argv.first().map(String::as_str).unwrap_or("");
        if !self.opts.policy.permits(program) {
            self.note(&format!("refused {program:?}: not on allow-list"));
            return Err(ExecError::CommandDenied {
                program: program.to_string(),
            });
        }
        if let Some(fault) = self.opts.faults.as_ref().and_then(|f| f.on_command(argv)) {
            match fault {
                Fault::Exit(code) => {
                    self.opts.log.record(LogEvent::Command {
                        session: self.session_id.clone(),
                        argv: argv.to_vec(),
                    });
                    self.note(&format!("injected exit {code}"));
                    return Ok(CommandResult {
                        exit_code: code,
                        stderr: b"injected fault\n".to_vec(),
                        ..CommandResult::default()
                    });
                }
                Fault::Break | Fault::InterruptAfter(_) => {
                    return Err(ExecError::ChannelBroken {
                        detail: "injected connection loss".into(),
                    })
                }
            }
        }

        self.opts.log.record(LogEvent::Command {
            session: self.session_id.clone(),
            argv: argv.to_vec(),
        });
        let cmd = self.transport.command(argv, &exec.env);
        let hook: Option<process::OutputHook> = if exec.log_output {
            let log = self.opts.log.clone();
            let session = self.session_id.clone();
            Some(Arc::new(move |stream: Stream, data: &[u8]| {
                log.record(LogEvent::Output {
                    session: session.clone(),
                    stream,
                    data: data.to_vec(),
                })
            }))
        } else {
            None
        };
        let on_spawn = |pid: i32| {
            self.inflight.lock().unwrap().pids.insert(pid);
        };
        let outcome = process::run(
            cmd,
            RunRequest {
                timeout: exec.timeout,
                cancel: &self.cancel,
                stdin: exec.stdin,
                stdout: exec.stdout,
                hook,
                load: self.opts.attribute_to.as_deref(),
                on_spawn: &on_spawn,
            },
        )
        .map_err(|source| ExecError::Spawn {
            program: program.to_string(),
            source,
        });
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                self.note(&e.to_string());
                return Err(e);
            }
        };
        {
            // Pids are only used for bookkeeping; the process is reaped.
            let mut inflight = self.inflight.lock().unwrap();
            inflight.pids.clear();
        }

        let mut result = CommandResult {
            exit_code: -1,
            stdout: outcome.stdout,
            stderr: outcome.stderr,
            duration: outcome.duration,
        };
        if let Some(Err(e)) = &outcome.consumed {
            self.note(&format!("stream consumer failed: {e}"));
        }
        match outcome.ending {
            Ending::Exited(code) => {
                result.exit_code = code;
                self.opts.log.record(LogEvent::Exit {
                    session: self.session_id.clone(),
                    code,
                    seconds: result.duration.as_secs_f64(),
                });
                if code == 255 && !self.transport.is_local() && !self.transport.healthy() {
                    return Err(ExecError::ChannelBroken {
                        detail: format!("connection to {} lost", self.transport.host_label()),
                    });
                }
                if let Some(Err(e)) = outcome.consumed {
                    return Err(ExecError::Io(e));
                }
                if let Some(Err(e)) = outcome.fed {
                    if result.success() {
                        return Err(ExecError::Io(e));
                    }
                    result
                        .stderr
                        .extend_from_slice(format!("\nstdin feed failed: {e}\n").as_bytes());
                }
                Ok(result)
            }
            Ending::TimedOut => {
                let seconds = exec.timeout.map_or(0.0, |t| t.as_secs_f64());
                self.note(&format!("timed out after {seconds:.1}s; killed"));
                Err(ExecError::CommandTimeout {
                    argv: argv.to_vec(),
                    seconds,
                    partial: Box::new(result),
                })
            }
            Ending::Cancelled => {
                self.note("channel closed while command was running");
                Err(ExecError::ChannelBroken {
                    detail: "channel closed while command was running".into(),
                })
            }
        }
    }

    /// Closes the channel. Commands still running are killed and report
    /// [`ExecError::ChannelBroken`]. A second close does nothing.
    pub fn close(&self) {
        if self
            .open
            .compare_exchange(true, false, Ordering::SeqCst, Ordering::SeqCst)
            .is_err()
        {
            return;
        }
        self.cancel.store(true, Ordering::SeqCst);
        self.transport.shutdown();
        CLOSED.fetch_add(1, Ordering::SeqCst);
        self.note("channel closed");
    }
}

impl Drop for Channel {
    fn drop(&mut self) {
        self.close();
    }
}

pub fn close_channel(channel: &Channel) {
    channel.close();
}
