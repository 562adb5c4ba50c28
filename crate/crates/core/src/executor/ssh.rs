//! SSH transport on top of the system OpenSSH client.
//!
//! `connect` starts a control master that authenticates once with the host's
//! private key and a pinned known_hosts file. Every command afterwards is a
//! multiplexed session over that master, so there is no per-command
//! handshake.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use tempfile::TempDir;

use super::{ExecError, Transport};
use crate::model::RemoteHost;

#[derive(Clone, Debug)]
pub struct SshOptions {
    /// Client binary, `ssh` by default.
    pub program: PathBuf,
    /// Used when the host does not name its own known_hosts file.
    pub known_hosts: Option<PathBuf>,
    /// Seconds between keepalive probes on the master connection.
    pub keepalive_secs: u32,
}

impl Default for SshOptions {
    fn default() -> Self {
        SshOptions {
            program: PathBuf::from("ssh"),
            known_hosts: None,
            keepalive_secs: 15,
        }
    }
}

pub struct SshTransport {
    program: PathBuf,
    label: String,
    destination: String,
    control_path: PathBuf,
    _control_dir: TempDir,
}

impl std::fmt::Debug for SshTransport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SshTransport").field("host", &self.label).finish()
    }
}

fn classify(host: &str, stderr: &str, waited: Duration) -> ExecError {
    let lower = stderr.to_lowercase();
    let detail = stderr.trim().to_string();
    if lower.contains("host key verification failed")
        || lower.contains("remote host identification has changed")
        || lower.contains("no matching host key")
        || lower.contains("host key for")
    {
        ExecError::HostKeyRejected {
            host: host.into(),
            detail,
        }
    } else if lower.contains("permission denied") || lower.contains("too many authentication failures") {
        ExecError::AuthFailure {
            host: host.into(),
            detail,
        }
    } else if lower.contains("timed out") {
        ExecError::ConnectTimeout {
            host: host.into(),
            seconds: waited.as_secs_f64(),
        }
    } else {
        ExecError::Unreachable {
            host: host.into(),
            detail,
        }
    }
}

fn base_options(cmd: &mut Command, keepalive: u32) {
    cmd.args(["-F", "/dev/null"])
        .args(["-o", "BatchMode=yes"])
        .args(["-o", "LogLevel=ERROR"])
        .args(["-o", &format!("ServerAliveInterval={keepalive}")])
        .args(["-o", "ServerAliveCountMax=3"]);
}

impl SshTransport {
    pub fn connect(host: &RemoteHost, timeout: Duration, opts: &SshOptions) -> Result<Self, ExecError> {
        let label = host.label();
        let known_hosts = host
            .known_hosts
            .clone()
            .or_else(|| opts.known_hosts.clone())
            .ok_or_else(|| ExecError::HostKeyRejected {
                host: label.clone(),
                detail: "no pinned known_hosts file configured".into(),
            })?;
        if !known_hosts.is_file() {
            return Err(ExecError::HostKeyRejected {
                host: label.clone(),
                detail: format!("known_hosts file {} not found", known_hosts.display()),
            });
        }
        if !host.identity.is_file() {
            return Err(ExecError::AuthFailure {
                host: label.clone(),
                detail: format!("identity {} not found", host.identity.display()),
            });
        }
        // Control socket paths are limited to ~100 bytes; keep them short.
        let control_dir = tempfile::Builder::new().prefix("slssh").tempdir_in("/tmp")?;
        let control_path = control_dir.path().join("m");
        let err_path = control_dir.path().join("connect.err");
        let destination = format!("{}@{}", host.user, host.address);

        let mut cmd = Command::new(&opts.program);
        base_options(&mut cmd, opts.keepalive_secs);
        cmd.args(["-o", "PasswordAuthentication=no"])
            .args(["-o", "KbdInteractiveAuthentication=no"])
            .args(["-o", "PreferredAuthentications=publickey"])
            .args(["-o", "IdentitiesOnly=yes"])
            .arg("-i")
            .arg(&host.identity)
            .args(["-o", "StrictHostKeyChecking=yes"])
            .arg("-o")
            .arg(format!("UserKnownHostsFile={}", known_hosts.display()))
            .args(["-o", "GlobalKnownHostsFile=/dev/null"])
            .args(["-o", "ControlMaster=yes"])
            .args(["-o", "ControlPersist=yes"])
            .arg("-o")
            .arg(format!("ControlPath={}", control_path.display()))
            .arg("-o")
            .arg(format!("ConnectTimeout={}", timeout.as_secs().max(1)))
            .args(["-f", "-N"])
            .arg("-p")
            .arg(host.port.to_string())
            .arg(&destination)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            // The backgrounded master keeps its stderr open, so a pipe would
            // never reach EOF.
            .stderr(File::create(&err_path)?);

        let started = Instant::now();
        let mut child = cmd.spawn().map_err(|e| ExecError::Spawn {
            program: opts.program.display().to_string(),
            source: e,
        })?;
        let deadline = started + timeout + Duration::from_secs(2);
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break Some(status);
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                let _ = child.wait();
                break None;
            }
            std::thread::sleep(Duration::from_millis(20));
        };
        let stderr = std::fs::read_to_string(&err_path).unwrap_or_default();
        let transport = SshTransport {
            program: opts.program.clone(),
            label: label.clone(),
            destination,
            control_path,
            _control_dir: control_dir,
        };
        match status {
            None => Err(ExecError::ConnectTimeout {
                host: label,
                seconds: started.elapsed().as_secs_f64(),
            }),
            Some(s) if s.success() && transport.healthy() => Ok(transport),
            Some(_) => {
                transport.shutdown();
                Err(classify(&label, &stderr, started.elapsed()))
            }
        }
    }

    fn control(&self, op: &str) -> Command {
        let mut cmd = Command::new(&self.program);
        cmd.args(["-F", "/dev/null", "-o", "LogLevel=ERROR", "-S"])
            .arg(&self.control_path)
            .args(["-O", op])
            .arg(&self.destination)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null());
        cmd
    }

    pub fn control_path(&self) -> &Path {
        &self.control_path
    }
}

/// `argv` and `env` as one POSIX shell command line.
pub(crate) fn remote_command_line(argv: &[String], env: &BTreeMap<String, String>) -> String {
    let quote = |s: &str| {
        shlex::try_quote(s)
            .map(|c| c.into_owned())
            .unwrap_or_else(|_| format!("'{}'", s.replace('\'', "'\\''")))
    };
    let mut parts: Vec<String> = Vec::new();
    if !env.is_empty() {
        parts.push("env".into());
        for (k, v) in env {
            parts.push(quote(&format!("{k}={v}")));
        }
    }
    parts.extend(argv.iter().map(|a| quote(a)));
    parts.join(" ")
}

impl Transport for SshTransport {
    fn host_label(&self) -> String {
        self.label.clone()
    }

    fn is_local(&self) -> bool {
        false
    }

    fn command(&self, argv: &[String], env: &BTreeMap<String, String>) -> Command {
        let mut cmd = Command::new(&self.program);
        base_options(&mut cmd, 15);
        cmd.arg("-S")
            .arg(&self.control_path)
            .args(["-o", "ControlMaster=no", "-T"])
            .arg(&self.destination)
            .arg("--")
            .arg(remote_command_line(argv, env));
        cmd
    }

    fn healthy(&self) -> bool {
        self.control_path.exists() && self.control("check").status().map(|s| s.success()).unwrap_or(false)
    }

    fn shutdown(&self) {
        if self.control_path.exists() {
            let _ = self.control("exit").status();
        }
    }
}

impl Drop for SshTransport {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_line_quotes_arguments() {
        let argv: Vec<String> = ["sh", "-c", "echo 'a b'; ls"].iter().map(|s| s.to_string()).collect();
        let line = remote_command_line(&argv, &BTreeMap::new());
        let back = shlex::split(&line).unwrap();
        assert_eq!(back, argv);
        let env = BTreeMap::from([("K".to_string(), "v w".to_string())]);
        let back = shlex::split(&remote_command_line(&argv, &env)).unwrap();
        assert_eq!(back[..2], ["env".to_string(), "K=v w".to_string()]);
    }

    #[test]
    fn stderr_classification() {
        let w = Duration::from_secs(1);
        assert!(matches!(
            classify("h", "Permission denied (publickey).", w),
            ExecError::AuthFailure { .. }
        ));
        assert!(matches!(
            classify("h", "Host key verification failed.", w),
            ExecError::HostKeyRejected { .. }
        ));
        assert!(matches!(
            classify("h", "ssh: connect to host 10.0.0.1 port 22: Connection timed out", w),
            ExecError::ConnectTimeout { .. }
        ));
        assert!(matches!(
            classify("h", "ssh: connect to host 127.0.0.1 port 1: Connection refused", w),
            ExecError::Unreachable { .. }
        ));
    }

    #[test]
    fn missing_known_hosts_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let key = dir.path().join("id");
        std::fs::write(&key, "x").unwrap();
        let host = RemoteHost {
            address: "127.0.0.1".into(),
            port: 1,
            user: "ci".into(),
            identity: key,
            known_hosts: Some(dir.path().join("absent")),
            role: crate::model::HostRole::Build,
        };
        let err = SshTransport::connect(&host, Duration::from_secs(1), &SshOptions::default()).unwrap_err();
        assert!(matches!(err, ExecError::HostKeyRejected { .. }));
    }
}
