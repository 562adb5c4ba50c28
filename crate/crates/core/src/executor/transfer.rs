//! File transfer over a channel as tar streams.
//!
//! Uploads pipe a tar stream into `tar -x` on the host; downloads read the
//! output of `tar -c` and unpack it into a staging directory beside the
//! destination, which is renamed into place only once complete.

use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::{ChildStdin, ChildStdout};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::process::StdoutMode;
use super::{remote, Channel, Exec, ExecError, Fault};
use crate::checksum::scan_tree;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferDirection {
    ToHost,
    FromHost,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub direction: TransferDirection,
    /// Sum of regular file sizes moved.
    pub bytes: u64,
    pub files: usize,
    pub attempts: u32,
    pub duration: Duration,
}

struct CutWriter<W> {
    inner: W,
    left: Option<u64>,
}

impl<W: Write> Write for CutWriter<W> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = match self.left {
            Some(0) => return Err(io::Error::new(io::ErrorKind::BrokenPipe, "stream cut")),
            Some(left) => buf.len().min(left as usize),
            None => buf.len(),
        };
        let written = self.inner.write(&buf[..n])?;
        if let Some(left) = self.left.as_mut() {
            *left -= written as u64;
        }
        Ok(written)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

struct CutReader<R> {
    inner: R,
    left: Option<u64>,
}

impl<R: Read> Read for CutReader<R> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = match self.left {
            Some(0) => return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "stream cut")),
            Some(left) => buf.len().min(left as usize),
            None => buf.len(),
        };
        let read = self.inner.read(&mut buf[..n])?;
        if let Some(left) = self.left.as_mut() {
            *left -= read as u64;
        }
        Ok(read)
    }
}

enum Source {
    Dir(PathBuf),
    File { path: PathBuf, name: String },
}

fn write_archive(source: &Source, out: impl Write) -> io::Result<()> {
    let mut builder = tar::Builder::new(out);
    builder.follow_symlinks(false);
    match source {
        Source::Dir(dir) => builder.append_dir_all(".", dir)?,
        Source::File { path, name } => builder.append_path_with_name(path, name)?,
    }
    builder.into_inner()?.flush()
}

fn file_name_of(path: &Path) -> io::Result<String> {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| {
            io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} has no file name", path.display()),
            )
        })
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn is_no_space(stderr: &str) -> bool {
    stderr.contains("No space left") || stderr.contains("Disk quota exceeded")
}

impl Channel {
    /// Copies a local file or directory to the host. A directory's contents
    /// land inside `remote`; a file is written at `remote`. Failed attempts
    /// are cleaned up and retried per the transfer policy.
    pub fn copy_to_host(&self, local: &Path, remote: &Path) -> Result<TransferReport, ExecError> {
        let started = Instant::now();
        let meta = std::fs::symlink_metadata(local).map_err(|_| ExecError::LocalPathMissing(local.to_path_buf()))?;
        let (source, dest_dir, top_level): (Source, PathBuf, Vec<String>) = if meta.is_dir() {
            let mut names: Vec<String> = std::fs::read_dir(local)?
                .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
                .collect::<io::Result<_>>()?;
            names.sort();
            (Source::Dir(local.to_path_buf()), remote.to_path_buf(), names)
        } else {
            let name = file_name_of(remote)?;
            let parent = remote.parent().unwrap_or(Path::new("/")).to_path_buf();
            (
                Source::File {
                    path: local.to_path_buf(),
                    name: name.clone(),
                },
                parent,
                vec![name],
            )
        };
        let local_files = if meta.is_dir() {
            scan_tree(local)?
        } else {
            let (sha256, size) = crate::checksum::sha256_reader(std::fs::File::open(local)?)?;
            vec![crate::model::FileEntry {
                path: top_level[0].clone(),
                size,
                sha256,
            }]
        };
        let bytes: u64 = local_files.iter().map(|f| f.size).sum();

        let policy = self.transfer_policy();
        let attempts_allowed = policy.retries + 1;
        let mut backoff = policy.initial_backoff;
        let mut last_error = String::new();
        let source = std::sync::Arc::new(source);
        for attempt in 1..=attempts_allowed {
            let cut = match self
                .faults()
                .and_then(|f| f.on_transfer(TransferDirection::ToHost, attempt))
            {
                Some(Fault::Break) => {
                    return Err(ExecError::ChannelBroken {
                        detail: "injected connection loss during transfer".into(),
                    })
                }
                Some(Fault::InterruptAfter(n)) => Some(n),
                Some(Fault::Exit(_)) => Some(0),
                None => None,
            };
            remote::mkdir_p(self, &dest_dir)?;
            let feed_source = source.clone();
            let feeder = Box::new(move |stdin: ChildStdin| -> io::Result<()> {
                let mut w = CutWriter {
                    inner: stdin,
                    left: cut,
                };
                write_archive(&feed_source, &mut w)
            });
            let argv: Vec<String> = vec![
                "tar".into(),
                "-x".into(),
                "-m".into(),
                "-p".into(),
                "--no-same-owner".into(),
                "-f".into(),
                "-".into(),
                "-C".into(),
                p(&dest_dir),
            ];
            let exec = Exec {
                stdin: Some(feeder),
                ..Exec::plain(Some(self.default_timeout()))
            };
            let outcome = self.exec(&argv, exec);
            let failure = match outcome {
                Ok(r) if r.success() && cut.is_none() => {
                    if policy.verify {
                        let remote_files = if meta.is_dir() {
                            remote::tree_manifest(self, &dest_dir)?
                        } else {
                            remote::tree_manifest(self, remote)?
                        };
                        let expect: Vec<_> = local_files.clone();
                        let got: Vec<_> = if meta.is_dir() {
                            remote_files
                        } else {
                            remote_files
                                .into_iter()
                                .map(|mut e| {
                                    e.path = top_level[0].clone();
                                    e
                                })
                                .collect()
                        };
                        if expect == got {
                            None
                        } else {
                            Some("checksum mismatch after upload".to_string())
                        }
                    } else {
                        None
                    }
                }
                Ok(r) => {
                    let stderr = r.stderr_text();
                    if is_no_space(&stderr) {
                        self.cleanup_partial(&dest_dir, &top_level);
                        return Err(ExecError::InsufficientSpace {
                            detail: stderr.trim().to_string(),
                        });
                    }
                    Some(if cut.is_some() {
                        "stream interrupted".to_string()
                    } else {
                        format!("tar exited {}: {}", r.exit_code, stderr.trim())
                    })
                }
                Err(e @ (ExecError::ChannelBroken { .. } | ExecError::ChannelClosed)) => return Err(e),
                Err(e) => Some(e.to_string()),
            };
            match failure {
                None => {
                    return Ok(TransferReport {
                        direction: TransferDirection::ToHost,
                        bytes,
                        files: local_files.len(),
                        attempts: attempt,
                        duration: started.elapsed(),
                    })
                }
                Some(msg) => {
                    self.note(&format!("upload attempt {attempt}/{attempts_allowed} failed: {msg}"));
                    self.cleanup_partial(&dest_dir, &top_level);
                    last_error = msg;
                    if attempt < attempts_allowed {
                        std::thread::sleep(backoff);
                        backoff *= 2;
                    }
                }
            }
        }
        Err(ExecError::TransferInterrupted {
            attempts: attempts_allowed,
            detail: last_error,
        })
    }

    fn cleanup_partial(&self, dir: &Path, names: &[String]) {
        for name in names {
            let _ = remote::remove_tree(self, &dir.join(name));
        }
    }

    /// Copies a file or directory from the host. A directory's contents are
    /// merged into `local`; a file is written at `local`. Nothing appears at
    /// the destination unless the whole stream arrived.
    pub fn copy_from_host(&self, remote_path: &Path, local: &Path) -> Result<TransferReport, ExecError> {
        let started = Instant::now();
        if !remote::exists(self, remote_path)? {
            return Err(ExecError::RemotePathMissing(remote_path.to_path_buf()));
        }
        let is_dir = remote::is_dir(self, remote_path)?;
        let argv: Vec<String> = if is_dir {
            vec![
                "tar".into(),
                "-c".into(),
                "-f".into(),
                "-".into(),
                "-C".into(),
                p(remote_path),
                ".".into(),
            ]
        } else {
            let parent = remote_path.parent().unwrap_or(Path::new("/"));
            vec![
                "tar".into(),
                "-c".into(),
                "-f".into(),
                "-".into(),
                "-C".into(),
                p(parent),
                file_name_of(remote_path)?,
            ]
        };
        let local_parent = local
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new("."))
            .to_path_buf();
        std::fs::create_dir_all(&local_parent)?;
        let local_name = file_name_of(local)?;

        let policy = self.transfer_policy();
        let attempts_allowed = policy.retries + 1;
        let mut backoff = policy.initial_backoff;
        let mut last_error = String::new();
        for attempt in 1..=attempts_allowed {
            let cut = match self
                .faults()
                .and_then(|f| f.on_transfer(TransferDirection::FromHost, attempt))
            {
                Some(Fault::Break) => {
                    return Err(ExecError::ChannelBroken {
                        detail: "injected connection loss during transfer".into(),
                    })
                }
                Some(Fault::InterruptAfter(n)) => Some(n),
                Some(Fault::Exit(_)) => Some(0),
                None => None,
            };
            let staging = tempfile::Builder::new()
                .prefix(&format!(".{local_name}.incoming-"))
                .tempdir_in(&local_parent)?;
            let unpack_into = staging.path().to_path_buf();
            let consumer = Box::new(move |stdout: ChildStdout| -> io::Result<u64> {
                let reader = CutReader {
                    inner: stdout,
                    left: cut,
                };
                let mut archive = tar::Archive::new(reader);
                archive.set_preserve_permissions(true);
                archive.set_overwrite(true);
                archive.unpack(&unpack_into)?;
                // Drain trailing padding so the producer never sees a broken pipe.
                let mut rest = archive.into_inner();
                io::copy(&mut rest, &mut io::sink())
            });
            let exec = Exec {
                stdout: StdoutMode::Consume(consumer),
                log_output: false,
                ..Exec::plain(Some(self.default_timeout()))
            };
            let failure = match self.exec(&argv, exec) {
                Ok(r) if r.success() && cut.is_none() => None,
                Ok(r) => Some(if cut.is_some() {
                    "stream interrupted".to_string()
                } else {
                    format!("tar exited {}: {}", r.exit_code, r.stderr_text().trim())
                }),
                Err(e @ (ExecError::ChannelBroken { .. } | ExecError::ChannelClosed)) => return Err(e),
                Err(e) => Some(e.to_string()),
            };
            let failure = match failure {
                Some(f) => Some(f),
                None if policy.verify => {
                    let got = if is_dir {
                        scan_tree(staging.path())?
                    } else {
                        scan_tree(staging.path())?
                            .into_iter()
                            .map(|mut e| {
                                e.path = String::new();
                                e
                            })
                            .collect()
                    };
                    let mut want = remote::tree_manifest(self, remote_path)?;
                    if !is_dir {
                        for e in &mut want {
                            e.path = String::new();
                        }
                    }
                    (got != want).then(|| "checksum mismatch after download".to_string())
                }
                None => None,
            };
            if let Some(msg) = failure {
                self.note(&format!("download attempt {attempt}/{attempts_allowed} failed: {msg}"));
                last_error = msg;
                drop(staging);
                if attempt < attempts_allowed {
                    std::thread::sleep(backoff);
                    backoff *= 2;
                }
                continue;
            }

            let (bytes, files) = if is_dir {
                let entries = scan_tree(staging.path())?;
                std::fs::create_dir_all(local)?;
                for item in std::fs::read_dir(staging.path())? {
                    let item = item?;
                    let dest = local.join(item.file_name());
                    remove_any(&dest)?;
                    std::fs::rename(item.path(), dest)?;
                }
                (entries.iter().map(|e| e.size).sum(), entries.len())
            } else {
                let staged = staging.path().join(file_name_of(remote_path)?);
                let size = std::fs::symlink_metadata(&staged)?.len();
                remove_any(local)?;
                std::fs::rename(&staged, local)?;
                (size, 1)
            };
            return Ok(TransferReport {
                direction: TransferDirection::FromHost,
                bytes,
                files,
                attempts: attempt,
                duration: started.elapsed(),
            });
        }
        Err(ExecError::TransferInterrupted {
            attempts: attempts_allowed,
            detail: last_error,
        })
    }
}

fn remove_any(path: &Path) -> io::Result<()> {
    match std::fs::symlink_metadata(path) {
        Ok(m) if m.is_dir() => std::fs::remove_dir_all(path),
        Ok(_) => std::fs::remove_file(path),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(e),
    }
}
