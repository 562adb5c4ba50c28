//! Source checkout on the controller.
//!
//! A git repository is cloned into a scratch directory and detached at the
//! requested ref. A plain directory is used as is, with unversioned commit
//! metadata.

use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::{DateTime, Utc};

use crate::model::CommitMeta;

#[derive(Debug, thiserror::Error)]
pub enum CheckoutError {
    #[error("source {0} does not exist")]
    SourceMissing(PathBuf),
    #[error("ref {reference:?} not found in {}: {detail}", repo.display())]
    UnknownRef {
        repo: PathBuf,
        reference: String,
        detail: String,
    },
    #[error("git {args}: {detail}")]
    Git { args: String, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A checked-out tree. A clone is deleted on drop; a plain directory is not.
#[derive(Debug)]
pub struct Checkout {
    pub dir: PathBuf,
    pub commit: CommitMeta,
    _scratch: Option<tempfile::TempDir>,
}

impl Checkout {
    pub fn is_clone(&self) -> bool {
        self._scratch.is_some()
    }
}

fn git(dir: Option<&Path>, args: &[&str]) -> Result<String, CheckoutError> {
    let mut cmd = Command::new("git");
    if let Some(d) = dir {
        cmd.arg("-C").arg(d);
    }
    cmd.args(args).env("GIT_TERMINAL_PROMPT", "0");
    let out = cmd.output().map_err(|e| CheckoutError::Git {
        args: args.join(" "),
        detail: e.to_string(),
    })?;
    if !out.status.success() {
        return Err(CheckoutError::Git {
            args: args.join(" "),
            detail: String::from_utf8_lossy(&out.stderr).trim().to_string(),
        });
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

/// Whether `source` looks like a git repository (work tree or bare).
pub fn is_repository(source: &Path) -> bool {
    source.join(".git").exists() || (source.join("HEAD").is_file() && source.join("objects").is_dir())
}

/// Checks out `reference` from `source` into a scratch directory under
/// `scratch_parent` (the system temp dir when `None`).
pub fn checkout(source: &Path, reference: &str, scratch_parent: Option<&Path>) -> Result<Checkout, CheckoutError> {
    if !source.exists() {
        return Err(CheckoutError::SourceMissing(source.to_path_buf()));
    }
    if !is_repository(source) {
        log::info!(
            "{} is not a repository; building it as an unversioned tree",
            source.display()
        );
        return Ok(Checkout {
            dir: source.to_path_buf(),
            commit: CommitMeta::unversioned(Utc::now()),
            _scratch: None,
        });
    }
    let scratch = match scratch_parent {
        Some(p) => {
            std::fs::create_dir_all(p)?;
            tempfile::Builder::new().prefix("checkout-").tempdir_in(p)?
        }
        None => tempfile::Builder::new().prefix("shiplight-checkout-").tempdir()?,
    };
    let dir = scratch.path().join("src");
    let src = source.to_string_lossy();
    let dest = dir.to_string_lossy();
    git(None, &["clone", "--quiet", "--no-checkout", &src, &dest])?;

    let resolve = |r: &str| {
        git(
            Some(&dir),
            &["rev-parse", "--verify", "--quiet", &format!("{r}^{{commit}}")],
        )
    };
    let (sha, branch) = match resolve(&format!("origin/{reference}")) {
        Ok(sha) => (sha.trim().to_string(), Some(reference.to_string())),
        Err(_) => match resolve(reference) {
            Ok(sha) => (sha.trim().to_string(), None),
            Err(e) => {
                return Err(CheckoutError::UnknownRef {
                    repo: source.to_path_buf(),
                    reference: reference.to_string(),
                    detail: e.to_string(),
                })
            }
        },
    };
    git(Some(&dir), &["checkout", "--quiet", "--detach", &sha])?;

    let branch = match branch {
        Some(b) => b,
        None => containing_branch(&dir, &sha).unwrap_or_else(|| "detached".to_string()),
    };
    let meta = git(Some(&dir), &["log", "-1", "--format=%H%x00%cI%x00%B", &sha])?;
    let mut parts = meta.splitn(3, '\0');
    let id = parts.next().unwrap_or_default().trim().to_string();
    let time = parts
        .next()
        .and_then(|t| DateTime::parse_from_rfc3339(t.trim()).ok())
        .map(|t| t.with_timezone(&Utc))
        .unwrap_or_else(Utc::now);
    let message = parts.next().unwrap_or_default().trim().to_string();
    let commit = CommitMeta::new(id, message, time, branch).map_err(|e| CheckoutError::Git {
        args: "log".into(),
        detail: e.to_string(),
    })?;
    Ok(Checkout {
        dir,
        commit,
        _scratch: Some(scratch),
    })
}

fn containing_branch(dir: &Path, sha: &str) -> Option<String> {
    let out = git(
        Some(dir),
        &["branch", "-r", "--contains", sha, "--format=%(refname:short)"],
    )
    .ok()?;
    out.lines()
        .map(str::trim)
        .filter(|l| !l.ends_with("/HEAD") && !l.is_empty())
        .map(|l| l.strip_prefix("origin/").unwrap_or(l).to_string())
        .next()
}
