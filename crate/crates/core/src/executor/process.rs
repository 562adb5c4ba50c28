//! Child process supervision shared by every transport: streaming capture,
//! timeouts, cancellation, and process-group kills.

use std::io::{self, Read};
use std::os::unix::process::CommandExt;
use std::process::{ChildStdin, ChildStdout, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::log::Stream;
use crate::accounting::ControllerLoad;

pub(crate) type StdinFeeder = Box<dyn FnOnce(ChildStdin) -> io::Result<()> + Send>;
pub(crate) type StdoutConsumer = Box<dyn FnOnce(ChildStdout) -> io::Result<u64> + Send>;
pub(crate) type OutputHook = Arc<dyn Fn(Stream, &[u8]) + Send + Sync>;

pub(crate) enum StdoutMode {
    Capture,
    Consume(StdoutConsumer),
}

pub(crate) enum Ending {
    Exited(i32),
    TimedOut,
    Cancelled,
}

pub(crate) struct ProcOutcome {
    pub ending: Ending,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
    pub duration: Duration,
    pub consumed: Option<io::Result<u64>>,
    pub fed: Option<io::Result<()>>,
}

/// How long to keep reading pipes after the child exits. Background
/// processes that inherited the pipes would otherwise hold us forever.
const DRAIN_GRACE: Duration = Duration::from_secs(2);

fn spawn_capture(
    mut pipe: impl Read + Send + 'static,
    stream: Stream,
    sink: Arc<Mutex<Vec<u8>>>,
    hook: Option<OutputHook>,
    done: mpsc::Sender<()>,
) {
    std::thread::spawn(move || {
        let mut buf = [0u8; 8192];
        loop {
            match pipe.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => {
                    sink.lock().unwrap().extend_from_slice(&buf[..n]);
                    if let Some(h) = &hook {
                        h(stream, &buf[..n]);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(_) => break,
            }
        }
        let _ = done.send(());
    });
}

fn decode_status(status: libc::c_int) -> i32 {
    if libc::WIFEXITED(status) {
        libc::WEXITSTATUS(status)
    } else if libc::WIFSIGNALED(status) {
        128 + libc::WTERMSIG(status)
    } else {
        -1
    }
}

fn kill_group(pid: i32) {
    // SAFETY: signalling a process group we created; errors are ignored.
    unsafe {
        libc::kill(-pid, libc::SIGKILL);
        libc::kill(pid, libc::SIGKILL);
    }
}

/// Blocking or non-blocking reap with resource usage.
fn reap(pid: i32, block: bool) -> io::Result<Option<(i32, libc::rusage)>> {
    let mut status: libc::c_int = 0;
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    let flags = if block { 0 } else { libc::WNOHANG };
    loop {
        // SAFETY: pid is our own child; pointers refer to live locals.
        let r = unsafe { libc::wait4(pid, &mut status, flags, &mut usage) };
        if r == pid {
            return Ok(Some((decode_status(status), usage)));
        }
        if r == 0 {
            return Ok(None);
        }
        let err = io::Error::last_os_error();
        if err.kind() == io::ErrorKind::Interrupted {
            continue;
        }
        return Err(err);
    }
}

pub(crate) struct RunRequest<'a> {
    pub timeout: Option<Duration>,
    pub cancel: &'a AtomicBool,
    pub stdin: Option<StdinFeeder>,
    pub stdout: StdoutMode,
    pub hook: Option<OutputHook>,
    pub load: Option<&'a ControllerLoad>,
    pub on_spawn: &'a dyn Fn(i32),
}

pub(crate) fn run(mut cmd: Command, req: RunRequest<'_>) -> io::Result<ProcOutcome> {
    let started = Instant::now();
    cmd.stdin(if req.stdin.is_some() {
        Stdio::piped()
    } else {
        Stdio::null()
    })
    .stdout(Stdio::piped())
    .stderr(Stdio::piped())
    .process_group(0);
    let mut child = cmd.spawn()?;
    let pid = child.id() as i32;
    if let Some(load) = req.load {
        load.track(pid);
    }
    (req.on_spawn)(pid);

    let stdout_buf = Arc::new(Mutex::new(Vec::new()));
    let stderr_buf = Arc::new(Mutex::new(Vec::new()));
    let (done_tx, done_rx) = mpsc::channel();
    let mut capture_threads = 0;

    let mut consumer: Option<JoinHandle<io::Result<u64>>> = None;
    let out = child.stdout.take().expect("stdout piped");
    match req.stdout {
        StdoutMode::Capture => {
            spawn_capture(
                out,
                Stream::Stdout,
                stdout_buf.clone(),
                req.hook.clone(),
                done_tx.clone(),
            );
            capture_threads += 1;
        }
        StdoutMode::Consume(f) => {
            consumer = Some(std::thread::spawn(move || f(out)));
        }
    }
    let err = child.stderr.take().expect("stderr piped");
    spawn_capture(err, Stream::Stderr, stderr_buf.clone(), req.hook.clone(), done_tx);
    capture_threads += 1;

    let feeder = match (req.stdin, child.stdin.take()) {
        (Some(f), Some(pipe)) => Some(std::thread::spawn(move || f(pipe))),
        _ => None,
    };

    let deadline = req.timeout.map(|t| started + t);
    let mut nap = Duration::from_millis(1);
    let (ending, usage) = loop {
        if let Some((code, usage)) = reap(pid, false)? {
            break (Ending::Exited(code), Some(usage));
        }
        if req.cancel.load(Ordering::SeqCst) {
            kill_group(pid);
            let usage = reap(pid, true)?.map(|(_, u)| u);
            break (Ending::Cancelled, usage);
        }
        if deadline.is_some_and(|d| Instant::now() >= d) {
            kill_group(pid);
            let usage = reap(pid, true)?.map(|(_, u)| u);
            break (Ending::TimedOut, usage);
        }
        std::thread::sleep(nap);
        nap = (nap * 2).min(Duration::from_millis(20));
    };
    match (req.load, &usage) {
        (Some(load), Some(u)) => load.finish(pid, u),
        (Some(load), None) => load.forget(pid),
        _ => {}
    }
    // The child is reaped; keep std from trying again.
    std::mem::forget(child);

    let grace_until = Instant::now() + DRAIN_GRACE;
    for _ in 0..capture_threads {
        let left = grace_until.saturating_duration_since(Instant::now());
        if done_rx.recv_timeout(left).is_err() {
            break;
        }
    }
    let consumed = consumer.map(|h| h.join().unwrap_or_else(|_| Err(io::Error::other("consumer panicked"))));
    let fed = feeder.map(|h| h.join().unwrap_or_else(|_| Err(io::Error::other("feeder panicked"))));

    let stdout = std::mem::take(&mut *stdout_buf.lock().unwrap());
    let stderr = std::mem::take(&mut *stderr_buf.lock().unwrap());
    Ok(ProcOutcome {
        ending,
        stdout,
        stderr,
        duration: started.elapsed(),
        consumed,
        fed,
    })
}
