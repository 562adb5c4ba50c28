//! Promotion of releases on the deploy host, backups, service control and
//! rollback.
//!
//! Each target lives in `<deploy_root>/<target>`:
//!
//! ```text
//! current -> releases/<stamp>      live tree (symlink promotion)
//! releases/<stamp>/                one directory per deployed release
//! backups/<run-stamp>/tree/        copy of the live tree before a run
//! backups/<run-stamp>/PREVIOUS     release that was live before the run
//! backups/<run-stamp>/rollback.json
//! ```
//!
//! With directory promotion `current` is a real directory and
//! `current.release` names the release it holds.

pub mod health;
pub mod lock;

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{DeploySpec, HealthCheckSpec, PromotionMode};
use crate::executor::{remote, Channel, CommandResult, ExecError};
use crate::model::{ComponentKind, FileEntry, ReleaseId, RollbackPoint};
use crate::packaging::archive::{self, Extracted, RELEASE_FILE};
use crate::stamp::ReleaseStamp;

pub use health::{health_check, HealthAttempt, HealthResult};
pub use lock::{lock_targets, target_key, try_lock_targets, TargetLocks};

pub const CURRENT: &str = "current";
pub const RELEASES: &str = "releases";
pub const BACKUPS: &str = "backups";
pub const MARKER: &str = "current.release";
pub const PREVIOUS_FILE: &str = "PREVIOUS";
pub const POINT_FILE: &str = "rollback.json";
const BACKUP_TREE: &str = "tree";

#[derive(Debug, thiserror::Error)]
pub enum DeployError {
    #[error("backup of {target} failed: {detail}")]
    BackupFailed { target: ComponentKind, detail: String },
    #[error("staging release {release} for {target} failed: {detail}")]
    StageFailed {
        target: ComponentKind,
        release: String,
        detail: String,
    },
    #[error("promoting {target} to {release} failed: {detail}")]
    PromoteFailed {
        target: ComponentKind,
        release: String,
        detail: String,
    },
    #[error("stop script for {target} exited {exit_code}: {stderr}")]
    StopFailed {
        target: ComponentKind,
        exit_code: i32,
        stderr: String,
    },
    #[error("start script for {target} exited {exit_code}: {stderr}")]
    StartFailed {
        target: ComponentKind,
        exit_code: i32,
        stderr: String,
    },
    #[error("health check failed: {0}")]
    HealthFailed(String),
    #[error("rollback of {target} failed: {detail}")]
    RollbackFailed { target: ComponentKind, detail: String },
    #[error("no rollback point for {target}{}", wanted.as_ref().map(|w| format!(" matching {w}")).unwrap_or_default())]
    NoRollbackPoint {
        target: ComponentKind,
        wanted: Option<String>,
    },
    #[error("bad config restore pattern {pattern:?}: {message}")]
    BadPattern { pattern: String, message: String },
    #[error("release extraction failed: {0}")]
    Extract(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl DeployError {
    /// Whether the live target may have changed before the error, so a
    /// rollback is needed.
    pub fn touched_live(&self) -> bool {
        !matches!(
            self,
            DeployError::BackupFailed { .. }
                | DeployError::StageFailed { .. }
                | DeployError::StopFailed { .. }
                | DeployError::BadPattern { .. }
                | DeployError::Extract(_)
        )
    }
}

/// Settings shared by every target on one deploy host.
#[derive(Clone, Debug)]
pub struct DeployContext {
    pub root: PathBuf,
    pub mode: PromotionMode,
    pub config_restore: Vec<glob::Pattern>,
    pub retention: u32,
    pub stop_script: Option<String>,
    pub start_script: Option<String>,
    pub service_timeout: Duration,
}

impl DeployContext {
    pub fn from_spec(spec: &DeploySpec) -> Result<Self, DeployError> {
        let config_restore = spec
            .config_restore
            .iter()
            .map(|p| {
                glob::Pattern::new(p).map_err(|e| DeployError::BadPattern {
                    pattern: p.clone(),
                    message: e.to_string(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(DeployContext {
            root: spec.root.clone(),
            mode: spec.promotion,
            config_restore,
            retention: spec.backup_retention.max(1),
            stop_script: spec.stop_script.clone(),
            start_script: spec.start_script.clone(),
            service_timeout: Duration::from_secs(spec.service_timeout_secs),
        })
    }

    /// Symlink promotion, default config restore, retention 3, no scripts.
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DeployContext::from_spec(&DeploySpec {
            root: root.into(),
            config_restore: vec!["config/*.conf".into()],
            backup_retention: 3,
            promotion: PromotionMode::Symlink,
            stop_script: None,
            start_script: None,
            service_timeout_secs: 60,
        })
        .expect("default patterns are valid")
    }

    pub fn target_root(&self, target: ComponentKind) -> PathBuf {
        self.root.join(target.as_str())
    }

    /// Whether this target has a service to stop and start.
    pub fn manages_service(&self, target: ComponentKind) -> bool {
        target == ComponentKind::Backend && (self.stop_script.is_some() || self.start_script.is_some())
    }
}

/// What a target is serving right now.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeployTargetState {
    pub target: ComponentKind,
    pub root: PathBuf,
    pub mode: PromotionMode,
    pub active: Option<ReleaseId>,
    /// `current` is a plain directory left from before symlink promotion.
    pub legacy_dir: bool,
}

impl DeployTargetState {
    pub fn current(&self) -> PathBuf {
        self.root.join(CURRENT)
    }

    pub fn releases_dir(&self) -> PathBuf {
        self.root.join(RELEASES)
    }

    pub fn release_dir(&self, id: &ReleaseId) -> PathBuf {
        self.releases_dir().join(id.dir_name())
    }

    pub fn backups_dir(&self) -> PathBuf {
        self.root.join(BACKUPS)
    }

    pub fn marker(&self) -> PathBuf {
        self.root.join(MARKER)
    }

    /// Reads the live state of `target` from the host.
    pub fn inspect(ch: &Channel, ctx: &DeployContext, target: ComponentKind) -> Result<Self, ExecError> {
        let root = ctx.target_root(target);
        let mut state = DeployTargetState {
            target,
            root,
            mode: ctx.mode,
            active: None,
            legacy_dir: false,
        };
        let current = state.current();
        match ctx.mode {
            PromotionMode::Symlink => {
                if let Some(link) = remote::read_link(ch, &current)? {
                    let name = link.trim_end_matches('/').rsplit('/').next().unwrap_or("");
                    state.active = Some(name.parse().unwrap_or(ReleaseId::Unstamped));
                } else if remote::is_dir(ch, &current)? {
                    state.active = Some(ReleaseId::Unstamped);
                    state.legacy_dir = true;
                }
            }
            PromotionMode::Directory => {
                if remote::is_dir(ch, &current)? {
                    let id = match remote::read_file(ch, &state.marker()) {
                        Ok(bytes) => String::from_utf8_lossy(&bytes)
                            .trim()
                            .parse()
                            .unwrap_or(ReleaseId::Unstamped),
                        Err(ExecError::RemotePathMissing(_)) => ReleaseId::Unstamped,
                        Err(e) => return Err(e),
                    };
                    state.active = Some(id);
                }
            }
        }
        Ok(state)
    }
}

fn p(path: &Path) -> String {
    path.to_string_lossy().into_owned()
}

/// Copies the live tree of `state` into `backups/<run_stamp>` and records
/// what was live. Older backups beyond `retention` are pruned; the new one
/// is always kept.
pub fn backup_target(
    ch: &Channel,
    state: &DeployTargetState,
    run_stamp: &ReleaseStamp,
    retention: u32,
) -> Result<RollbackPoint, DeployError> {
    let target = state.target;
    let fail = |detail: String| DeployError::BackupFailed { target, detail };
    let dir = state.backups_dir().join(run_stamp.as_str());
    if !remote::mkdir_exclusive(ch, &dir).map_err(|e| fail(e.to_string()))? {
        return Err(fail(format!("{} already exists", dir.display())));
    }
    let point = RollbackPoint {
        stamp_of_backup: run_stamp.clone(),
        target,
        backup_path: dir.clone(),
        previous_stamp: state.active.clone().unwrap_or(ReleaseId::Unstamped),
        has_content: state.active.is_some(),
    };
    let written = (|| -> Result<(), ExecError> {
        let tree = dir.join(BACKUP_TREE);
        if point.has_content {
            ch.run_ok(&["cp", "-a", &format!("{}/.", p(&state.current())), &p(&tree)])?;
        } else {
            remote::mkdir_p(ch, &tree)?;
        }
        remote::write_file(
            ch,
            &dir.join(PREVIOUS_FILE),
            format!("{}\n", point.previous_stamp).as_bytes(),
        )?;
        let json = serde_json::to_vec_pretty(&point).expect("rollback point serializes");
        remote::write_file(ch, &dir.join(POINT_FILE), &json)
    })();
    if let Err(e) = written {
        let _ = remote::remove_tree(ch, &dir);
        return Err(fail(e.to_string()));
    }
    prune_backups(ch, state, retention, run_stamp).map_err(|e| fail(format!("pruning: {e}")))?;
    Ok(point)
}

fn backup_stamps(ch: &Channel, state: &DeployTargetState) -> Result<Vec<ReleaseStamp>, ExecError> {
    let mut stamps: Vec<ReleaseStamp> = remote::list_dir(ch, &state.backups_dir())?
        .into_iter()
        .filter_map(|n| ReleaseStamp::parse(&n).ok())
        .collect();
    stamps.sort();
    Ok(stamps)
}

/// Removes the oldest backups until at most `retention` remain. `keep` and
/// the newest backup survive regardless.
pub fn prune_backups(
    ch: &Channel,
    state: &DeployTargetState,
    retention: u32,
    keep: &ReleaseStamp,
) -> Result<Vec<ReleaseStamp>, ExecError> {
    let stamps = backup_stamps(ch, state)?;
    let retention = retention.max(1) as usize;
    let newest = stamps.last().cloned();
    let mut removed = Vec::new();
    let mut remaining = stamps.len();
    for s in &stamps {
        if remaining <= retention {
            break;
        }
        if s == keep || Some(s) == newest.as_ref() {
            continue;
        }
        remote::remove_tree(ch, &state.backups_dir().join(s.as_str()))?;
        removed.push(s.clone());
        remaining -= 1;
    }
    Ok(removed)
}

/// Rollback points recorded for a target, newest first.
pub fn rollback_points(ch: &Channel, state: &DeployTargetState) -> Result<Vec<RollbackPoint>, ExecError> {
    let mut points = Vec::new();
    for s in backup_stamps(ch, state)?.into_iter().rev() {
        let dir = state.backups_dir().join(s.as_str());
        match remote::read_file(ch, &dir.join(POINT_FILE)) {
            Ok(bytes) => match serde_json::from_slice::<RollbackPoint>(&bytes) {
                Ok(point) => points.push(point),
                Err(e) => log::warn!("ignoring backup {}: {e}", dir.display()),
            },
            Err(ExecError::RemotePathMissing(_)) => {
                log::warn!("ignoring backup {} without {POINT_FILE}", dir.display())
            }
            Err(e) => return Err(e),
        }
    }
    Ok(points)
}

/// Releases under `releases/` that are neither live, `protect`ed, nor
/// referenced by a remaining backup are removed.
pub fn prune_releases(
    ch: &Channel,
    state: &DeployTargetState,
    protect: &BTreeSet<ReleaseId>,
) -> Result<Vec<String>, ExecError> {
    let mut keep: BTreeSet<ReleaseId> = protect.clone();
    keep.extend(state.active.clone());
    keep.extend(rollback_points(ch, state)?.into_iter().map(|pt| pt.previous_stamp));
    let mut removed = Vec::new();
    for name in remote::list_dir(ch, &state.releases_dir())? {
        let Ok(id) = name.parse::<ReleaseId>() else { continue };
        if keep.contains(&id) {
            continue;
        }
        remote::remove_tree(ch, &state.releases_dir().join(&name))?;
        removed.push(name);
    }
    Ok(removed)
}

/// Every stamp a deploy root still depends on: live releases, release
/// directories and rollback points.
pub fn referenced_stamps(ch: &Channel, ctx: &DeployContext) -> Result<BTreeSet<ReleaseStamp>, ExecError> {
    let mut out = BTreeSet::new();
    for target in ComponentKind::ALL {
        let state = DeployTargetState::inspect(ch, ctx, target)?;
        out.extend(state.active.as_ref().and_then(|a| a.stamp().cloned()));
        for name in remote::list_dir(ch, &state.releases_dir())? {
            if let Ok(s) = ReleaseStamp::parse(&name) {
                out.insert(s);
            }
        }
        for pt in rollback_points(ch, &state)? {
            out.extend(pt.previous_stamp.stamp().cloned());
        }
    }
    Ok(out)
}

/// Extracts the part of a bundle archive that `target` serves: the
/// component's own files at the top level plus `config/` and the release
/// metadata.
pub fn extract_release_tree(archive: &Path, target: ComponentKind, dest: &Path) -> Result<Vec<FileEntry>, DeployError> {
    let prefix = format!("{}/", target.as_str());
    std::fs::create_dir_all(dest)?;
    let got = archive::extract_zip(archive, dest, |name| {
        if let Some(rest) = name.strip_prefix(&prefix) {
            (!rest.is_empty()).then(|| rest.to_string())
        } else if name.starts_with("config/") || name == RELEASE_FILE {
            Some(name.to_string())
        } else {
            None
        }
    })?;
    let mut files = Vec::new();
    for item in got {
        match item {
            Extracted::File(f) => files.push(f),
            Extracted::Unreadable { path, error } => return Err(DeployError::Extract(format!("{path}: {error}"))),
        }
    }
    Ok(files)
}

/// Copies a prepared tree into `releases/<stamp>` through a staging name,
/// so a partially transferred release is never visible under its stamp.
pub fn stage_release(
    ch: &Channel,
    state: &DeployTargetState,
    stamp: &ReleaseStamp,
    local_tree: &Path,
) -> Result<PathBuf, DeployError> {
    let fail = |detail: String| DeployError::StageFailed {
        target: state.target,
        release: stamp.to_string(),
        detail,
    };
    let id = ReleaseId::Stamped(stamp.clone());
    let dest = state.release_dir(&id);
    let incoming = state.releases_dir().join(format!(".incoming-{stamp}"));
    (|| -> Result<(), DeployError> {
        remote::mkdir_p(ch, &state.releases_dir())?;
        if remote::exists(ch, &dest)? {
            return Err(fail(format!("{} already exists", dest.display())));
        }
        remote::remove_tree(ch, &incoming)?;
        ch.copy_to_host(local_tree, &incoming)?;
        remote::rename(ch, &incoming, &dest)?;
        Ok(())
    })()
    .map_err(|e| match e {
        e @ DeployError::StageFailed { .. } => e,
        other => {
            let _ = remote::remove_tree(ch, &incoming);
            fail(other.to_string())
        }
    })?;
    Ok(dest)
}

/// Copies files matching the restore patterns from the backed-up live tree
/// into a staged release. Returns the restored paths.
pub fn restore_config(
    ch: &Channel,
    ctx: &DeployContext,
    point: &RollbackPoint,
    release_dir: &Path,
) -> Result<Vec<String>, DeployError> {
    if !point.has_content || ctx.config_restore.is_empty() {
        return Ok(Vec::new());
    }
    let opts = glob::MatchOptions {
        case_sensitive: true,
        require_literal_separator: true,
        require_literal_leading_dot: false,
    };
    let tree = point.backup_path.join(BACKUP_TREE);
    let mut restored = Vec::new();
    for entry in remote::tree_manifest(ch, &tree)? {
        if !ctx.config_restore.iter().any(|pat| pat.matches_with(&entry.path, opts)) {
            continue;
        }
        let dest = release_dir.join(&entry.path);
        if let Some(parent) = dest.parent() {
            remote::mkdir_p(ch, parent)?;
        }
        ch.run_ok(&["cp", "-p", &p(&tree.join(&entry.path)), &p(&dest)])?;
        restored.push(entry.path);
    }
    Ok(restored)
}

fn migrate_legacy(ch: &Channel, state: &mut DeployTargetState) -> Result<(), ExecError> {
    let dest = state.release_dir(&ReleaseId::Unstamped);
    remote::mkdir_p(ch, &state.releases_dir())?;
    if remote::exists(ch, &dest)? {
        remote::rename(
            ch,
            &dest,
            &state
                .releases_dir()
                .join(format!(".displaced-unstamped-{}", std::process::id())),
        )?;
    }
    remote::rename(ch, &state.current(), &dest)?;
    remote::symlink_swap(ch, &format!("{RELEASES}/{}", ReleaseId::Unstamped), &state.current())?;
    state.legacy_dir = false;
    ch.note(&format!(
        "moved legacy {} to {}",
        state.current().display(),
        dest.display()
    ));
    Ok(())
}

fn swap_symlink(ch: &Channel, state: &DeployTargetState, id: &ReleaseId) -> Result<(), ExecError> {
    remote::symlink_swap(ch, &format!("{RELEASES}/{}", id.dir_name()), &state.current())
}

fn swap_directory(ch: &Channel, state: &DeployTargetState, id: &ReleaseId) -> Result<(), ExecError> {
    let next = state.root.join(".current.next");
    let prev = state.root.join(".current.prev");
    remote::remove_tree(ch, &next)?;
    remote::remove_tree(ch, &prev)?;
    remote::copy_tree(ch, &state.release_dir(id), &next)?;
    let had_current = remote::is_dir(ch, &state.current())?;
    if had_current {
        remote::rename(ch, &state.current(), &prev)?;
    }
    if let Err(e) = remote::rename(ch, &next, &state.current()) {
        if had_current {
            let _ = remote::rename(ch, &prev, &state.current());
        }
        return Err(e);
    }
    let tmp = state.root.join(".current.release.tmp");
    remote::write_file(ch, &tmp, format!("{id}\n").as_bytes())?;
    remote::rename(ch, &tmp, &state.marker())?;
    remote::remove_tree(ch, &prev)?;
    Ok(())
}

/// Makes `id` (already under `releases/`) the live release. With symlink
/// promotion the switch is a single rename; if it fails the previous
/// target is put back.
pub fn promote(ch: &Channel, state: &mut DeployTargetState, id: &ReleaseId) -> Result<(), DeployError> {
    let target = state.target;
    let fail = |detail: String| DeployError::PromoteFailed {
        target,
        release: id.to_string(),
        detail,
    };
    if !remote::is_dir(ch, &state.release_dir(id))? {
        return Err(fail(format!("{} is not staged", state.release_dir(id).display())));
    }
    let result = match state.mode {
        PromotionMode::Symlink => {
            if state.legacy_dir {
                migrate_legacy(ch, state).map_err(|e| fail(format!("migrating legacy directory: {e}")))?;
            }
            swap_symlink(ch, state, id)
        }
        PromotionMode::Directory => swap_directory(ch, state, id),
    };
    if let Err(e) = result {
        if state.mode == PromotionMode::Symlink {
            restore_link(ch, state);
        }
        return Err(fail(e.to_string()));
    }
    state.active = Some(id.clone());
    Ok(())
}

fn restore_link(ch: &Channel, state: &DeployTargetState) {
    let expected = state.active.as_ref().map(|a| format!("{RELEASES}/{}", a.dir_name()));
    let now = remote::read_link(ch, &state.current()).ok().flatten();
    if now == expected {
        return;
    }
    let outcome = match &expected {
        Some(_) => swap_symlink(ch, state, state.active.as_ref().expect("checked")),
        None => ch.run_ok(&["rm", "-f", &p(&state.current())]).map(|_| ()),
    };
    if let Err(e) = outcome {
        log::error!("could not restore {}: {e}", state.current().display());
    }
}

fn run_script(
    ch: &Channel,
    ctx: &DeployContext,
    script: &str,
    target: ComponentKind,
    id: &ReleaseId,
) -> Result<CommandResult, ExecError> {
    let argv = vec![script.to_string(), target.as_str().to_string(), id.to_string()];
    ch.run_command(&argv, ctx.service_timeout, &BTreeMap::new())
}

pub fn stop_service(
    ch: &Channel,
    ctx: &DeployContext,
    target: ComponentKind,
    id: &ReleaseId,
) -> Result<(), DeployError> {
    let Some(script) = ctx.stop_script.as_deref().filter(|_| target == ComponentKind::Backend) else {
        return Ok(());
    };
    let r = run_script(ch, ctx, script, target, id)?;
    if !r.success() {
        return Err(DeployError::StopFailed {
            target,
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        });
    }
    Ok(())
}

pub fn start_service(
    ch: &Channel,
    ctx: &DeployContext,
    target: ComponentKind,
    id: &ReleaseId,
) -> Result<(), DeployError> {
    let Some(script) = ctx.start_script.as_deref().filter(|_| target == ComponentKind::Backend) else {
        return Ok(());
    };
    let r = run_script(ch, ctx, script, target, id)?;
    if !r.success() {
        return Err(DeployError::StartFailed {
            target,
            exit_code: r.exit_code,
            stderr: r.stderr_text().trim().to_string(),
        });
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeployedRelease {
    pub target: ComponentKind,
    pub release: ReleaseStamp,
    pub path: PathBuf,
    pub restored_config: Vec<String>,
}

/// Stages, restores config into, and promotes a release. For the backend
/// the service is stopped after staging and started after the swap; a stop
/// failure leaves the target untouched.
pub fn deploy_target(
    ch: &Channel,
    ctx: &DeployContext,
    state: &mut DeployTargetState,
    point: &RollbackPoint,
    stamp: &ReleaseStamp,
    local_tree: &Path,
) -> Result<DeployedRelease, DeployError> {
    let target = state.target;
    let path = stage_release(ch, state, stamp, local_tree)?;
    let restored_config = restore_config(ch, ctx, point, &path).map_err(|e| DeployError::StageFailed {
        target,
        release: stamp.to_string(),
        detail: format!("config restore: {e}"),
    })?;
    let id = ReleaseId::Stamped(stamp.clone());
    stop_service(ch, ctx, target, &id)?;
    promote(ch, state, &id)?;
    start_service(ch, ctx, target, &id)?;
    Ok(DeployedRelease {
        target,
        release: stamp.clone(),
        path,
        restored_config,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RollbackReport {
    pub target: ComponentKind,
    /// Release live after the rollback; `None` when the target was emptied.
    pub restored: Option<ReleaseId>,
    /// The release directory matched the backup and was reused.
    pub reused_release: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub health: Option<HealthResult>,
}

/// Returns `state` to what `point` recorded. The previous release directory
/// is reused when its content still matches the backup; otherwise it is
/// set aside and rebuilt from the backup. The backend service is restarted
/// and, when `check` is given, must pass the health gate again.
pub fn rollback(
    ch: &Channel,
    ctx: &DeployContext,
    state: &mut DeployTargetState,
    point: &RollbackPoint,
    check: Option<&HealthCheckSpec>,
) -> Result<RollbackReport, DeployError> {
    let target = state.target;
    let fail = |detail: String| DeployError::RollbackFailed { target, detail };
    if let Some(live) = state.active.clone() {
        if let Err(e) = stop_service(ch, ctx, target, &live) {
            ch.note(&format!("rollback: stop before restore failed: {e}"));
        }
    }
    if !point.has_content {
        let current = state.current();
        let cleared = match state.mode {
            PromotionMode::Symlink => ch.run_ok(&["rm", "-f", &p(&current)]).map(|_| ()),
            PromotionMode::Directory => remote::remove_tree(ch, &current)
                .and_then(|_| ch.run_ok(&["rm", "-f", &p(&state.marker())]).map(|_| ())),
        };
        cleared.map_err(|e| fail(e.to_string()))?;
        state.active = None;
        state.legacy_dir = false;
        return Ok(RollbackReport {
            target,
            restored: None,
            reused_release: false,
            health: None,
        });
    }

    let prev = point.previous_stamp.clone();
    let tree = point.backup_path.join(BACKUP_TREE);
    let release = state.release_dir(&prev);
    let expected = remote::tree_manifest(ch, &tree).map_err(|e| fail(format!("reading backup: {e}")))?;
    let reusable = !state.legacy_dir
        && remote::is_dir(ch, &release).map_err(|e| fail(e.to_string()))?
        && remote::tree_manifest(ch, &release).map_err(|e| fail(e.to_string()))? == expected;
    if !reusable {
        (|| -> Result<(), ExecError> {
            remote::mkdir_p(ch, &state.releases_dir())?;
            if remote::exists(ch, &release)? {
                let aside = state
                    .releases_dir()
                    .join(format!(".quarantine-{prev}-{}", point.stamp_of_backup));
                remote::remove_tree(ch, &aside)?;
                remote::rename(ch, &release, &aside)?;
                ch.note(&format!("set aside {} as {}", release.display(), aside.display()));
            }
            remote::copy_tree(ch, &tree, &release)
        })()
        .map_err(|e| fail(format!("rebuilding {}: {e}", release.display())))?;
    }
    if state.legacy_dir {
        // The legacy directory is replaced by the rebuilt release.
        remote::remove_tree(ch, &state.current()).map_err(|e| fail(e.to_string()))?;
        state.legacy_dir = false;
    }
    promote(ch, state, &prev).map_err(|e| fail(e.to_string()))?;
    let live = remote::tree_manifest(ch, &state.current()).map_err(|e| fail(e.to_string()))?;
    if live != expected {
        return Err(fail("live tree differs from backup after restore".into()));
    }
    start_service(ch, ctx, target, &prev).map_err(|e| fail(e.to_string()))?;
    let health = match check {
        Some(spec) if target == ComponentKind::Backend => {
            let result = health_check(spec);
            if !result.healthy {
                return Err(fail(format!("health re-check: {}", result.summary())));
            }
            Some(result)
        }
        _ => None,
    };
    Ok(RollbackReport {
        target,
        restored: Some(prev),
        reused_release: reusable,
        health,
    })
}

/// Where an operator-requested rollback goes.
#[derive(Clone, Debug, PartialEq)]
pub enum RollbackTarget {
    Point(RollbackPoint),
    /// A release directory with no matching backup.
    Release(ReleaseId),
}

/// Without `to`, the newest rollback point recording a release older than
/// the live one, so repeated rollbacks keep walking back. With `to`, the newest
/// point recording that release, else its release directory.
pub fn find_rollback_target(
    ch: &Channel,
    state: &DeployTargetState,
    to: Option<&ReleaseStamp>,
) -> Result<RollbackTarget, DeployError> {
    let points = rollback_points(ch, state)?;
    let pick = match to {
        None => points
            .into_iter()
            .find(|pt| pt.has_content && state.active.as_ref().is_none_or(|live| &pt.previous_stamp < live)),
        Some(want) => points
            .into_iter()
            .find(|pt| pt.has_content && pt.previous_stamp.stamp() == Some(want)),
    };
    if let Some(pt) = pick {
        return Ok(RollbackTarget::Point(pt));
    }
    if let Some(want) = to {
        let id = ReleaseId::Stamped(want.clone());
        if remote::is_dir(ch, &state.release_dir(&id))? {
            return Ok(RollbackTarget::Release(id));
        }
    }
    Err(DeployError::NoRollbackPoint {
        target: state.target,
        wanted: to.map(|s| s.to_string()),
    })
}

/// Operator rollback of one target. The live state is backed up under
/// `run_stamp` first, so the rollback can itself be undone.
pub fn manual_rollback(
    ch: &Channel,
    ctx: &DeployContext,
    target: ComponentKind,
    to: Option<&ReleaseStamp>,
    run_stamp: &ReleaseStamp,
    check: Option<&HealthCheckSpec>,
) -> Result<RollbackReport, DeployError> {
    let mut state = DeployTargetState::inspect(ch, ctx, target)?;
    let dest = find_rollback_target(ch, &state, to)?;
    backup_target(ch, &state, run_stamp, ctx.retention + 1)?;
    match dest {
        RollbackTarget::Point(pt) => rollback(ch, ctx, &mut state, &pt, check),
        RollbackTarget::Release(id) => {
            let fail = |detail: String| DeployError::RollbackFailed { target, detail };
            if let Some(live) = state.active.clone() {
                stop_service(ch, ctx, target, &live).map_err(|e| fail(e.to_string()))?;
            }
            promote(ch, &mut state, &id).map_err(|e| fail(e.to_string()))?;
            start_service(ch, ctx, target, &id).map_err(|e| fail(e.to_string()))?;
            let health = match check {
                Some(spec) if target == ComponentKind::Backend => {
                    let r = health_check(spec);
                    if !r.healthy {
                        return Err(fail(format!("health re-check: {}", r.summary())));
                    }
                    Some(r)
                }
                _ => None,
            };
            Ok(RollbackReport {
                target,
                restored: Some(id),
                reused_release: true,
                health,
            })
        }
    }
}
