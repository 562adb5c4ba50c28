//! Ephemeral container builds on the build host.
//!
//! Sources are staged into a fresh per-run workspace, built inside a
//! throwaway container from a pinned image, and the outputs are enumerated
//! with checksums computed on the host. A labelled sweep removes every
//! container and workspace of the run afterwards, keeping only the logs.
//!
//! Workspace layout on the build host:
//!
//! ```text
//! <work_root>/<stamp>/<kind>/src      staged sources, mounted at /workspace/src
//! <work_root>/<stamp>/<kind>/output   collected build output
//! <work_root>/<stamp>/<kind>/logs     build.log (kept after the sweep)
//! ```

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ComponentSpec, PipelineSpec};
use crate::executor::{remote, Channel, CommandResult, ExecError};
use crate::model::{BuilderImageRef, ComponentArtifact, ComponentKind};
use crate::stamp::ReleaseStamp;
use crate::store::{ArtifactStore, StoreError};

pub const LABEL_STAMP: &str = "shiplight.stamp";
pub const LABEL_COMPONENT: &str = "shiplight.component";
/// Where the workspace is mounted inside the container.
pub const CONTAINER_WORKSPACE: &str = "/workspace";

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("sources for {kind} not found at {}", path.display())]
    SourceMissing { kind: ComponentKind, path: PathBuf },
    #[error("workspace {} already exists (stamp reused?)", .0.display())]
    WorkspaceCollision(PathBuf),
    #[error("could not start builder image {image}: {detail}")]
    ImagePullFailed { image: String, detail: String },
    #[error("{kind} build exited with {exit_code}; log at {}", log.display())]
    BuildFailed {
        kind: ComponentKind,
        exit_code: i32,
        log: PathBuf,
    },
    #[error("{kind} build exceeded {seconds}s")]
    BuildTimeout { kind: ComponentKind, seconds: u64 },
    #[error("{kind} build container was killed (exit {exit_code})")]
    ContainerKilled { kind: ComponentKind, exit_code: i32 },
    #[error("{kind} build produced no files under {}", path.display())]
    CollectEmpty { kind: ComponentKind, path: PathBuf },
    #[error("registering {kind} artifact: {source}")]
    Register {
        kind: ComponentKind,
        #[source]
        source: StoreError,
    },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Paths of one component's workspace on the build host.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn for_run(work_root: &Path, kind: ComponentKind, stamp: &ReleaseStamp) -> Self {
        Workspace {
            root: work_root.join(stamp.as_str()).join(kind.as_str()),
        }
    }

    pub fn src(&self) -> PathBuf {
        self.root.join("src")
    }

    pub fn output(&self) -> PathBuf {
        self.root.join("output")
    }

    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn build_log(&self) -> PathBuf {
        self.logs().join("build.log")
    }
}

/// Creates a fresh, empty workspace for `(kind, stamp)`. Never reuses one.
pub fn prepare_workspace(
    ch: &Channel,
    work_root: &Path,
    kind: ComponentKind,
    stamp: &ReleaseStamp,
) -> Result<Workspace, BuildError> {
    let ws = Workspace::for_run(work_root, kind, stamp);
    if !remote::mkdir_exclusive(ch, &ws.root)? {
        return Err(BuildError::WorkspaceCollision(ws.root));
    }
    remote::mkdir_p(ch, &ws.src())?;
    remote::mkdir_p(ch, &ws.logs())?;
    Ok(ws)
}

pub fn container_name(stamp: &ReleaseStamp, kind: ComponentKind) -> String {
    format!("shiplight-{}-{}", stamp.as_str().to_lowercase(), kind)
}

/// One container build.
#[derive(Clone, Debug)]
pub struct ContainerRun<'a> {
    pub engine: &'a str,
    pub image: &'a BuilderImageRef,
    pub workspace: &'a Workspace,
    pub kind: ComponentKind,
    pub stamp: &'a ReleaseStamp,
    pub command: &'a [String],
    pub timeout: Duration,
    /// `(volume, mount point)` for a dependency cache.
    pub cache: Option<(&'a str, &'a str)>,
}

impl ContainerRun<'_> {
    pub fn argv(&self) -> Vec<String> {
        let mut argv: Vec<String> = vec![
            self.engine.into(),
            "run".into(),
            "--rm".into(),
            "--name".into(),
            container_name(self.stamp, self.kind),
            "--label".into(),
            format!("{LABEL_STAMP}={}", self.stamp),
            "--label".into(),
            format!("{LABEL_COMPONENT}={}", self.kind),
            "-v".into(),
            format!("{}:{CONTAINER_WORKSPACE}", self.workspace.root.display()),
            "-w".into(),
            format!("{CONTAINER_WORKSPACE}/src"),
        ];
        if let Some((volume, mount)) = self.cache {
            argv.push("-v".into());
            argv.push(format!("{volume}:{mount}"));
        }
        argv.push(self.image.reference());
        argv.extend(self.command.iter().cloned());
        argv
    }
}

/// Runs the build in a container that is removed when it exits. Only files
/// written under the mounted workspace survive. The build's output is saved
/// to the workspace's `logs/build.log`.
pub fn ephemeral_container_build(ch: &Channel, run: &ContainerRun<'_>) -> Result<CommandResult, BuildError> {
    let argv = run.argv();
    let outcome = ch.run_command(&argv, run.timeout, &Default::default());
    let (result, timed_out) = match outcome {
        Ok(r) => (r, false),
        Err(ExecError::CommandTimeout { partial, .. }) => (*partial, true),
        Err(e) => return Err(e.into()),
    };
    let mut log = result.stdout.clone();
    log.extend_from_slice(&result.stderr);
    if let Err(e) = remote::write_file(ch, &run.workspace.build_log(), &log) {
        ch.note(&format!("could not save build log: {e}"));
    }
    if timed_out {
        return Err(BuildError::BuildTimeout {
            kind: run.kind,
            seconds: run.timeout.as_secs(),
        });
    }
    match result.exit_code {
        0 => Ok(result),
        125 => Err(BuildError::ImagePullFailed {
            image: run.image.reference(),
            detail: result.stderr_text().trim().to_string(),
        }),
        137 | 143 => Err(BuildError::ContainerKilled {
            kind: run.kind,
            exit_code: result.exit_code,
        }),
        code => Err(BuildError::BuildFailed {
            kind: run.kind,
            exit_code: code,
            log: run.workspace.build_log(),
        }),
    }
}

/// Moves the build output out of the sources and lists it with sizes and
/// checksums computed on the build host.
pub fn collect_outputs(
    ch: &Channel,
    workspace: &Workspace,
    kind: ComponentKind,
    stamp: &ReleaseStamp,
    output_rel: &str,
) -> Result<ComponentArtifact, BuildError> {
    let produced = workspace.src().join(output_rel);
    if !remote::is_dir(ch, &produced)? {
        return Err(BuildError::CollectEmpty { kind, path: produced });
    }
    let root = workspace.output();
    remote::rename(ch, &produced, &root)?;
    let files = remote::tree_manifest(ch, &root)?;
    if files.is_empty() {
        return Err(BuildError::CollectEmpty { kind, path: root });
    }
    Ok(ComponentArtifact {
        kind,
        stamp: stamp.clone(),
        root,
        files,
    })
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepReport {
    pub containers_removed: usize,
    pub paths_removed: usize,
    /// Failures that were logged rather than raised.
    pub warnings: Vec<String>,
}

impl SweepReport {
    pub fn removed(&self) -> usize {
        self.containers_removed + self.paths_removed
    }

    pub fn summary(&self) -> String {
        let mut text = format!(
            "cleanup removed {} container(s) and {} path(s)",
            self.containers_removed, self.paths_removed
        );
        for w in &self.warnings {
            text.push_str("; warning: ");
            text.push_str(w);
        }
        text
    }
}

/// Containers on the host carrying the run's label.
pub fn labelled_containers(ch: &Channel, engine: &str, stamp: &ReleaseStamp) -> Result<Vec<String>, ExecError> {
    let r = ch.run_ok(&[
        engine,
        "ps",
        "-a",
        "-q",
        "--filter",
        &format!("label={LABEL_STAMP}={stamp}"),
    ])?;
    Ok(r.stdout_text().split_whitespace().map(str::to_string).collect())
}

/// Removes every container labelled with `stamp`, the run's workspaces
/// except their logs, and the run's bundle staging directories. Failures
/// are retried once and then reported as warnings, never raised.
pub fn cleanup_sweep(ch: &Channel, engine: &str, work_root: &Path, stamp: &ReleaseStamp) -> SweepReport {
    let mut report = SweepReport::default();
    for pass in 0..2 {
        report.warnings.clear();
        match labelled_containers(ch, engine, stamp) {
            Ok(ids) if !ids.is_empty() => {
                let mut argv = vec![engine.to_string(), "rm".into(), "-f".into()];
                argv.extend(ids.iter().cloned());
                match ch.run_ok(&argv) {
                    Ok(_) => report.containers_removed += ids.len(),
                    Err(e) => report.warnings.push(format!("container removal failed: {e}")),
                }
            }
            Ok(_) => {}
            Err(e) => report.warnings.push(format!("container listing failed: {e}")),
        }
        let run_dir = work_root.join(stamp.as_str());
        match remote::list_dir(ch, &run_dir) {
            Ok(kinds) => {
                for kind in kinds {
                    let ws = run_dir.join(&kind);
                    let entries = match remote::list_dir(ch, &ws) {
                        Ok(e) => e,
                        Err(e) => {
                            report.warnings.push(format!("listing {}: {e}", ws.display()));
                            continue;
                        }
                    };
                    for entry in entries.into_iter().filter(|e| e != "logs") {
                        match remote::remove_tree(ch, &ws.join(&entry)) {
                            Ok(()) => report.paths_removed += 1,
                            Err(e) => report.warnings.push(format!("removing {entry}: {e}")),
                        }
                    }
                }
            }
            Err(e) => report.warnings.push(format!("listing {}: {e}", run_dir.display())),
        }
        for staging in [bundle_dir(work_root, stamp), dist_dir(work_root, stamp)] {
            match remote::exists(ch, &staging) {
                Ok(true) => match remote::remove_tree(ch, &staging) {
                    Ok(()) => report.paths_removed += 1,
                    Err(e) => report.warnings.push(format!("removing {}: {e}", staging.display())),
                },
                Ok(false) => {}
                Err(e) => report.warnings.push(e.to_string()),
            }
        }
        if report.warnings.is_empty() {
            break;
        }
        if pass == 0 {
            ch.note("cleanup incomplete; retrying");
        }
    }
    for w in &report.warnings {
        log::warn!("{w}");
        ch.note(&format!("cleanup warning: {w}"));
    }
    report
}

/// `<work_root>/bundle/<stamp>`: assembly directory for the run's bundle.
pub fn bundle_dir(work_root: &Path, stamp: &ReleaseStamp) -> PathBuf {
    work_root.join("bundle").join(stamp.as_str())
}

/// `<work_root>/dist/<stamp>`: where the run's archive is written.
pub fn dist_dir(work_root: &Path, stamp: &ReleaseStamp) -> PathBuf {
    work_root.join("dist").join(stamp.as_str())
}

/// Stages sources, builds in an ephemeral container, collects the outputs
/// and, when a store is given, registers the artifact there. Cleanup of the
/// run's containers and workspaces is left to [`cleanup_sweep`], which the
/// caller runs on every exit path.
pub fn build_remote(
    ch: &Channel,
    spec: &PipelineSpec,
    kind: ComponentKind,
    stamp: &ReleaseStamp,
    checkout: &Path,
    store: Option<&ArtifactStore>,
) -> Result<ComponentArtifact, BuildError> {
    let component: &ComponentSpec = spec.components.get(&kind).ok_or_else(|| BuildError::SourceMissing {
        kind,
        path: checkout.to_path_buf(),
    })?;
    let source = checkout.join(&component.source);
    if !source.is_dir() {
        return Err(BuildError::SourceMissing { kind, path: source });
    }
    let ws = prepare_workspace(ch, &spec.work_root, kind, stamp)?;
    ch.copy_to_host(&source, &ws.src())?;
    let run = ContainerRun {
        engine: &spec.engine,
        image: &component.image,
        workspace: &ws,
        kind,
        stamp,
        command: &component.command,
        timeout: component.timeout(),
        cache: component
            .cache_volume
            .as_deref()
            .map(|v| (v, component.cache_mount.as_str())),
    };
    ephemeral_container_build(ch, &run)?;
    let artifact = collect_outputs(ch, &ws, kind, stamp, &component.output)?;
    if let Some(store) = store {
        store
            .publish_component(ch, &artifact)
            .map_err(|source| BuildError::Register { kind, source })?;
    }
    Ok(artifact)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::{ChannelOptions, CommandPolicy};
    use shiplight_testkit::FakeEngine;

    fn stamp() -> ReleaseStamp {
        ReleaseStamp::parse("20250102-130455Z").unwrap()
    }

    fn setup() -> (tempfile::TempDir, FakeEngine, Channel) {
        let t = tempfile::tempdir().unwrap();
        let engine = FakeEngine::install(t.path());
        let ch = Channel::local(ChannelOptions {
            policy: CommandPolicy::standard([engine.path.to_string_lossy().into_owned()]),
            ..Default::default()
        });
        (t, engine, ch)
    }

    fn build(
        ch: &Channel,
        engine: &FakeEngine,
        ws: &Workspace,
        image: &str,
        script: &str,
        timeout: Duration,
    ) -> Result<CommandResult, BuildError> {
        let image = BuilderImageRef::parse(image).unwrap();
        let command = vec!["sh".to_string(), "-c".to_string(), script.to_string()];
        let engine_path = engine.path.to_string_lossy().into_owned();
        ephemeral_container_build(
            ch,
            &ContainerRun {
                engine: &engine_path,
                image: &image,
                workspace: ws,
                kind: ComponentKind::Backend,
                stamp: &stamp(),
                command: &command,
                timeout,
                cache: None,
            },
        )
    }

    #[test]
    fn argv_names_labels_and_mounts() {
        let image = BuilderImageRef::parse("maven:3.9.6").unwrap();
        let ws = Workspace::for_run(Path::new("/w"), ComponentKind::Frontend, &stamp());
        let command = vec!["npm".to_string(), "ci".to_string()];
        let run = ContainerRun {
            engine: "docker",
            image: &image,
            workspace: &ws,
            kind: ComponentKind::Frontend,
            stamp: &stamp(),
            command: &command,
            timeout: Duration::from_secs(1),
            cache: Some(("npm-cache", "/root/.npm")),
        };
        let argv = run.argv();
        assert_eq!(&argv[..3], ["docker", "run", "--rm"]);
        assert!(argv.contains(&"shiplight-20250102-130455z-frontend".to_string()));
        assert!(argv.contains(&"shiplight.stamp=20250102-130455Z".to_string()));
        assert!(argv.contains(&"shiplight.component=frontend".to_string()));
        assert!(argv.contains(&"/w/20250102-130455Z/frontend:/workspace".to_string()));
        assert!(argv.contains(&"npm-cache:/root/.npm".to_string()));
        assert_eq!(&argv[argv.len() - 3..], ["maven:3.9.6", "npm", "ci"]);
    }

    #[test]
    fn workspace_is_never_reused() {
        let (t, _engine, ch) = setup();
        let ws = prepare_workspace(&ch, t.path(), ComponentKind::Backend, &stamp()).unwrap();
        assert!(ws.src().is_dir() && ws.logs().is_dir());
        assert!(matches!(
            prepare_workspace(&ch, t.path(), ComponentKind::Backend, &stamp()),
            Err(BuildError::WorkspaceCollision(_))
        ));
    }

    #[test]
    fn engine_exits_map_to_failures() {
        let (t, engine, ch) = setup();
        let ws = prepare_workspace(&ch, t.path(), ComponentKind::Backend, &stamp()).unwrap();
        let quick = Duration::from_secs(30);

        match build(&ch, &engine, &ws, "maven:3.9.6", "echo broken >&2; exit 3", quick) {
            Err(BuildError::BuildFailed { exit_code: 3, log, .. }) => {
                assert!(std::fs::read_to_string(log).unwrap().contains("broken"));
            }
            other => panic!("{other:?}"),
        }
        engine.fail_pull("maven:3.9.6");
        assert!(matches!(
            build(&ch, &engine, &ws, "maven:3.9.6", "true", quick),
            Err(BuildError::ImagePullFailed { .. })
        ));
        assert!(matches!(
            build(&ch, &engine, &ws, "maven:missing", "true", quick),
            Err(BuildError::ImagePullFailed { .. })
        ));
        assert!(matches!(
            build(&ch, &engine, &ws, "node:20", "sleep 10", Duration::from_millis(500)),
            Err(BuildError::BuildTimeout { .. })
        ));
        let report = cleanup_sweep(&ch, &engine.path.to_string_lossy(), t.path(), &stamp());
        assert!(report.warnings.is_empty(), "{report:?}");
        assert!(engine.labelled(stamp().as_str()).is_empty());
    }

    #[test]
    fn outputs_are_collected_and_the_sweep_keeps_logs() {
        let (t, engine, ch) = setup();
        let ws = prepare_workspace(&ch, t.path(), ComponentKind::Backend, &stamp()).unwrap();
        let r = build(
            &ch,
            &engine,
            &ws,
            "maven:3.9.6",
            "mkdir -p dist/lib && echo hi > dist/lib/a && echo done",
            Duration::from_secs(30),
        )
        .unwrap();
        assert!(r.stdout_text().contains("done"));
        assert!(matches!(
            collect_outputs(&ch, &ws, ComponentKind::Backend, &stamp(), "target"),
            Err(BuildError::CollectEmpty { .. })
        ));
        let art = collect_outputs(&ch, &ws, ComponentKind::Backend, &stamp(), "dist").unwrap();
        assert_eq!(art.root, ws.output());
        let paths: Vec<&str> = art.files.iter().map(|f| f.path.as_str()).collect();
        assert_eq!(paths, ["lib/a"]);

        let report = cleanup_sweep(&ch, &engine.path.to_string_lossy(), t.path(), &stamp());
        assert_eq!(report.containers_removed, 0);
        assert_eq!(report.paths_removed, 2);
        let left: Vec<String> = std::fs::read_dir(&ws.root)
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(left, ["logs"]);
        assert!(ws.build_log().is_file());
    }
}
