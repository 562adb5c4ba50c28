//! Aggregated run log. Every channel streams command output here as it
//! arrives, so the controller keeps one console log per run covering both the
//! controller and the remote hosts.

use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::Utc;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Stdout,
    Stderr,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogEvent {
    Command {
        session: String,
        argv: Vec<String>,
    },
    Output {
        session: String,
        stream: Stream,
        data: Vec<u8>,
    },
    Exit {
        session: String,
        code: i32,
        seconds: f64,
    },
    Note {
        session: String,
        text: String,
    },
}

pub trait LogSink: Send + Sync {
    fn record(&self, event: LogEvent);

    fn note(&self, session: &str, text: &str) {
        self.record(LogEvent::Note {
            session: session.to_string(),
            text: text.to_string(),
        });
    }
}

/// Discards everything.
#[derive(Debug, Default)]
pub struct NullLog;

impl LogSink for NullLog {
    fn record(&self, _event: LogEvent) {}
}

/// Keeps every event in memory.
#[derive(Debug, Default)]
pub struct MemoryLog {
    events: Mutex<Vec<LogEvent>>,
}

impl MemoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn events(&self) -> Vec<LogEvent> {
        self.events.lock().unwrap().clone()
    }

    /// Concatenation of one stream across all commands of a session.
    pub fn stream_bytes(&self, session: &str, which: Stream) -> Vec<u8> {
        self.events
            .lock()
            .unwrap()
            .iter()
            .filter_map(|e| match e {
                LogEvent::Output {
                    session: s,
                    stream,
                    data,
                } if s == session && *stream == which => Some(data.clone()),
                _ => None,
            })
            .flatten()
            .collect()
    }
}

impl LogSink for MemoryLog {
    fn record(&self, event: LogEvent) {
        self.events.lock().unwrap().push(event);
    }
}

/// Appends a human-readable transcript to a file. Output bytes are written
/// verbatim; command, exit and note lines are prefixed with the time and the
/// session id.
pub struct ConsoleLog {
    path: PathBuf,
    file: Mutex<File>,
}

impl ConsoleLog {
    pub fn create(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ConsoleLog {
            path: path.to_path_buf(),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn line(&self, text: &str) {
        let mut f = self.file.lock().unwrap();
        let _ = writeln!(f, "[{}] {}", Utc::now().format("%H:%M:%S%.3f"), text);
    }
}

impl LogSink for ConsoleLog {
    fn record(&self, event: LogEvent) {
        let ts = Utc::now().format("%H:%M:%S%.3f");
        let mut f = self.file.lock().unwrap();
        let _ = match event {
            LogEvent::Command { session, argv } => {
                let shown = shlex::try_join(argv.iter().map(String::as_str)).unwrap_or_else(|_| argv.join(" "));
                writeln!(f, "[{ts} {session}] $ {shown}")
            }
            LogEvent::Output { data, .. } => f.write_all(&data),
            LogEvent::Exit { session, code, seconds } => {
                writeln!(f, "[{ts} {session}] exit {code} after {seconds:.2}s")
            }
            LogEvent::Note { session, text } => writeln!(f, "[{ts} {session}] {text}"),
        };
    }
}

/// Last `n` lines of a log file, lossily decoded.
pub fn tail_lines(path: &Path, n: usize) -> io::Result<String> {
    let bytes = std::fs::read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    let lines: Vec<&str> = text.lines().collect();
    let start = lines.len().saturating_sub(n);
    Ok(lines[start..].join("\n"))
}
