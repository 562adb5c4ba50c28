//! Filesystem operations on a channel's host, built from allow-listed
//! programs only.

use std::io::{self, Write};
use std::path::Path;
use std::process::ChildStdin;

use super::{Channel, Exec, ExecError};
use crate::model::FileEntry;

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

fn ok(ch: &Channel, argv: Vec<String>) -> Result<(), ExecError> {
    ch.run_ok(&argv).map(|_| ())
}

fn test(ch: &Channel, flag: &str, path: &Path) -> Result<bool, ExecError> {
    Ok(ch.run(&["test", flag, &p(path)])?.success())
}

/// Runs a shell script with positional arguments.
pub fn sh(ch: &Channel, script: &str, args: &[&str]) -> Result<super::CommandResult, ExecError> {
    let mut argv = vec!["sh".to_string(), "-c".to_string(), script.to_string(), "sh".to_string()];
    argv.extend(args.iter().map(|a| a.to_string()));
    ch.run(&argv)
}

pub fn exists(ch: &Channel, path: &Path) -> Result<bool, ExecError> {
    // `test -e` is false for dangling symlinks; those still occupy the name.
    Ok(test(ch, "-e", path)? || test(ch, "-L", path)?)
}

pub fn is_dir(ch: &Channel, path: &Path) -> Result<bool, ExecError> {
    test(ch, "-d", path)
}

pub fn is_symlink(ch: &Channel, path: &Path) -> Result<bool, ExecError> {
    test(ch, "-L", path)
}

pub fn mkdir_p(ch: &Channel, path: &Path) -> Result<(), ExecError> {
    ok(ch, vec!["mkdir".into(), "-p".into(), p(path)])
}

/// Creates `path` (and its parents). Returns false when `path` already
/// existed, so two callers can never both claim it.
pub fn mkdir_exclusive(ch: &Channel, path: &Path) -> Result<bool, ExecError> {
    if let Some(parent) = path.parent() {
        mkdir_p(ch, parent)?;
    }
    let r = ch.run(&["mkdir", &p(path)])?;
    if r.success() {
        return Ok(true);
    }
    if exists(ch, path)? {
        return Ok(false);
    }
    Err(ExecError::CommandFailed {
        argv: vec!["mkdir".into(), p(path)],
        exit_code: r.exit_code,
        stderr: r.stderr_text().trim().to_string(),
    })
}

pub fn remove_tree(ch: &Channel, path: &Path) -> Result<(), ExecError> {
    ok(ch, vec!["rm".into(), "-rf".into(), p(path)])
}

/// `mv -T`: renames `from` to exactly `to`, replacing a file or symlink at
/// `to` atomically.
pub fn rename(ch: &Channel, from: &Path, to: &Path) -> Result<(), ExecError> {
    ok(ch, vec!["mv".into(), "-T".into(), p(from), p(to)])
}

/// Points `link` at `target` atomically: a temporary link is created next to
/// it and renamed over it. Readers see either the old or the new target.
pub fn symlink_swap(ch: &Channel, target: &str, link: &Path) -> Result<(), ExecError> {
    let tmp = link.with_file_name(format!(
        ".{}.tmp",
        link.file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    ));
    ok(ch, vec!["rm".into(), "-f".into(), p(&tmp)])?;
    ok(ch, vec!["ln".into(), "-s".into(), target.into(), p(&tmp)])?;
    rename(ch, &tmp, link)
}

pub fn read_link(ch: &Channel, path: &Path) -> Result<Option<String>, ExecError> {
    let r = ch.run(&["readlink", &p(path)])?;
    Ok(r.success().then(|| r.stdout_text().trim_end_matches('\n').to_string()))
}

pub fn copy_tree(ch: &Channel, from: &Path, to: &Path) -> Result<(), ExecError> {
    ok(ch, vec!["cp".into(), "-a".into(), p(from), p(to)])
}

/// Sorted names directly inside `dir`; empty when it does not exist.
pub fn list_dir(ch: &Channel, dir: &Path) -> Result<Vec<String>, ExecError> {
    let r = sh(ch, r#"[ -d "$1" ] || exit 0; cd "$1" && ls -1A"#, &[&p(dir)])?;
    if !r.success() {
        return Err(ExecError::CommandFailed {
            argv: vec!["ls".into(), p(dir)],
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        });
    }
    let mut names: Vec<String> = r.stdout_text().lines().map(str::to_string).collect();
    names.sort();
    Ok(names)
}

pub fn read_file(ch: &Channel, path: &Path) -> Result<Vec<u8>, ExecError> {
    let r = sh(ch, r#"cat "$1""#, &[&p(path)])?;
    if !r.success() {
        if !exists(ch, path)? {
            return Err(ExecError::RemotePathMissing(path.to_path_buf()));
        }
        return Err(ExecError::CommandFailed {
            argv: vec!["cat".into(), p(path)],
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        });
    }
    Ok(r.stdout)
}

pub fn write_file(ch: &Channel, path: &Path, data: &[u8]) -> Result<(), ExecError> {
    let data = data.to_vec();
    let feeder = Box::new(move |mut stdin: ChildStdin| -> io::Result<()> { stdin.write_all(&data) });
    let argv: Vec<String> = vec!["sh".into(), "-c".into(), r#"cat > "$1""#.into(), "sh".into(), p(path)];
    let r = ch.exec(
        &argv,
        Exec {
            stdin: Some(feeder),
            ..Exec::plain(Some(ch.default_timeout()))
        },
    )?;
    if r.success() {
        Ok(())
    } else {
        Err(ExecError::CommandFailed {
            argv,
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        })
    }
}

const MANIFEST_SCRIPT: &str = r#"
if [ -f "$1" ]; then
  cd "$(dirname "$1")" || exit 1
  set -- "./$(basename "$1")"
  list() { printf '%s\n' "$1"; }
else
  cd "$1" || exit 1
  list() { find . -type f; }
fi
list "$1" | LC_ALL=C sort | while IFS= read -r f; do
  s=$(wc -c < "$f") || exit 1
  h=$(sha256sum "$f" | cut -d' ' -f1) || exit 1
  printf '%s\t%s\t%s\n' "${f#./}" $s "$h"
done
"#;

/// Path, size and SHA-256 of every regular file under `root` on the host. A
/// regular file yields a single entry named by its basename.
pub fn tree_manifest(ch: &Channel, root: &Path) -> Result<Vec<FileEntry>, ExecError> {
    let r = sh(ch, MANIFEST_SCRIPT, &[&p(root)])?;
    if !r.success() {
        return Err(ExecError::CommandFailed {
            argv: vec!["manifest".into(), p(root)],
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        });
    }
    let mut entries = Vec::new();
    for line in r.stdout_text().lines() {
        let mut parts = line.splitn(3, '\t');
        let (Some(path), Some(size), Some(hash)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(ExecError::Io(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("bad manifest line {line:?}"),
            )));
        };
        entries.push(FileEntry {
            path: path.to_string(),
            size: size.trim().parse().map_err(|_| {
                ExecError::Io(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("bad size in {line:?}"),
                ))
            })?,
            sha256: hash.to_string(),
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}
