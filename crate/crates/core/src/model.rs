//! Domain values shared by every stage of a pipeline run.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::stamp::ReleaseStamp;

/// Commit id used when the source tree carries no version-control metadata.
pub const UNVERSIONED: &str = "unversioned";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitMeta {
    pub id: String,
    pub message: String,
    pub time: DateTime<Utc>,
    pub branch: String,
}

impl CommitMeta {
    pub fn new(
        id: impl Into<String>,
        message: impl Into<String>,
        time: DateTime<Utc>,
        branch: impl Into<String>,
    ) -> Result<Self, ModelError> {
        let meta = CommitMeta {
            id: id.into(),
            message: first_line(&message.into()),
            time,
            branch: branch.into(),
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Metadata for a plain directory with no history.
    pub fn unversioned(time: DateTime<Utc>) -> Self {
        CommitMeta {
            id: UNVERSIONED.to_string(),
            message: String::new(),
            time,
            branch: "detached".to_string(),
        }
    }

    pub fn is_versioned(&self) -> bool {
        self.id != UNVERSIONED
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let hex = !self.id.is_empty() && self.id.chars().all(|c| c.is_ascii_hexdigit());
        if hex || self.id == UNVERSIONED {
            Ok(())
        } else {
            Err(ModelError::InvalidCommitId(self.id.clone()))
        }
    }

    pub fn short_id(&self) -> &str {
        let end = self.id.len().min(8);
        &self.id[..end]
    }
}

fn first_line(text: &str) -> String {
    text.lines().next().unwrap_or("").trim_end().to_string()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComponentKind {
    Backend,
    Frontend,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 2] = [ComponentKind::Backend, ComponentKind::Frontend];

    pub fn as_str(self) -> &'static str {
        match self {
            ComponentKind::Backend => "backend",
            ComponentKind::Frontend => "frontend",
        }
    }
}

impl fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ComponentKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "backend" => Ok(ComponentKind::Backend),
            "frontend" => Ok(ComponentKind::Frontend),
            other => Err(ModelError::UnknownComponent(other.to_string())),
        }
    }
}

/// A container image pinned to an exact tag.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BuilderImageRef {
    pub image: String,
    pub tag: String,
}

impl BuilderImageRef {
    pub fn new(image: impl Into<String>, tag: impl Into<String>) -> Result<Self, ModelError> {
        let image = image.into();
        let tag = tag.into();
        if image.is_empty() {
            return Err(ModelError::InvalidImage("empty image name".into()));
        }
        if tag.is_empty() {
            return Err(ModelError::UnpinnedImage(format!("{image} has no tag")));
        }
        if tag == "latest" {
            return Err(ModelError::UnpinnedImage(format!("{image}:latest is a floating tag")));
        }
        Ok(BuilderImageRef { image, tag })
    }

    /// Parses `image:tag` or `image@sha256:...`. The tag separator is the last
    /// colon after the final slash so registry ports survive.
    pub fn parse(reference: &str) -> Result<Self, ModelError> {
        if let Some((image, digest)) = reference.split_once('@') {
            return BuilderImageRef::new(image, format!("@{digest}"));
        }
        let name_start = reference.rfind('/').map_or(0, |i| i + 1);
        match reference[name_start..].rfind(':') {
            Some(i) => {
                let split = name_start + i;
                BuilderImageRef::new(&reference[..split], &reference[split + 1..])
            }
            None => Err(ModelError::UnpinnedImage(format!("{reference} has no tag"))),
        }
    }

    pub fn reference(&self) -> String {
        if self.tag.starts_with('@') {
            format!("{}{}", self.image, self.tag)
        } else {
            format!("{}:{}", self.image, self.tag)
        }
    }
}

impl fmt::Display for BuilderImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.reference())
    }
}

impl TryFrom<String> for BuilderImageRef {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        BuilderImageRef::parse(&value)
    }
}

impl From<BuilderImageRef> for String {
    fn from(value: BuilderImageRef) -> Self {
        value.reference()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostRole {
    Build,
    Deploy,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemoteHost {
    pub address: String,
    pub port: u16,
    pub user: String,
    pub identity: PathBuf,
    /// Pinned known-hosts file; host keys are never learned on first use.
    pub known_hosts: Option<PathBuf>,
    pub role: HostRole,
}

impl RemoteHost {
    pub fn label(&self) -> String {
        format!("{}@{}:{}", self.user, self.address, self.port)
    }
}

/// One regular file of an artifact or bundle.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub size: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentArtifact {
    pub kind: ComponentKind,
    pub stamp: ReleaseStamp,
    /// Directory on the host that produced the files.
    pub root: PathBuf,
    pub files: Vec<FileEntry>,
}

impl ComponentArtifact {
    pub fn total_bytes(&self) -> u64 {
        self.files.iter().map(|f| f.size).sum()
    }
}

pub const CHECKSUM_ALGORITHM: &str = "sha256";

/// Sidecar manifest describing every member of a release archive.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub stamp: ReleaseStamp,
    pub algorithm: String,
    pub archive_checksum: String,
    pub entries: Vec<FileEntry>,
}

impl BundleManifest {
    pub fn new(stamp: ReleaseStamp, archive_checksum: String, mut entries: Vec<FileEntry>) -> Self {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        BundleManifest {
            stamp,
            algorithm: CHECKSUM_ALGORITHM.to_string(),
            archive_checksum,
            entries,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bundle {
    pub stamp: ReleaseStamp,
    pub archive_path: PathBuf,
    pub manifest: BundleManifest,
    pub commit: CommitMeta,
}

impl Bundle {
    pub fn file_name(&self) -> String {
        archive_file_name(&self.stamp, &self.commit)
    }
}

/// Contents of `RELEASE.json` at the archive root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReleaseInfo {
    pub stamp: ReleaseStamp,
    pub commit_id: String,
    pub commit_message: String,
    pub branch: String,
    pub built_on: String,
    /// Not part of the fixed key set; older bundles may lack it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub commit_time: Option<DateTime<Utc>>,
}

impl ReleaseInfo {
    pub fn new(stamp: &ReleaseStamp, commit: &CommitMeta, built_on: &str) -> Self {
        ReleaseInfo {
            stamp: stamp.clone(),
            commit_id: commit.id.clone(),
            commit_message: commit.message.clone(),
            branch: commit.branch.clone(),
            built_on: built_on.to_string(),
            commit_time: Some(commit.time),
        }
    }

    pub fn commit(&self) -> CommitMeta {
        CommitMeta {
            id: self.commit_id.clone(),
            message: self.commit_message.clone(),
            time: self.commit_time.unwrap_or_else(|| self.stamp.to_datetime()),
            branch: self.branch.clone(),
        }
    }
}

/// Replaces every character outside `[A-Za-z0-9._-]` with `-`.
pub fn sanitize_branch(branch: &str) -> String {
    branch
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// `release_<stamp>_<branch>_<short-commit-8>.zip`
pub fn archive_file_name(stamp: &ReleaseStamp, commit: &CommitMeta) -> String {
    format!(
        "release_{}_{}_{}.zip",
        stamp,
        sanitize_branch(&commit.branch),
        commit.short_id()
    )
}

/// Which release a deploy target serves: a stamped release, or content that
/// predates the system.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReleaseId {
    Unstamped,
    Stamped(ReleaseStamp),
}

impl ReleaseId {
    pub fn stamp(&self) -> Option<&ReleaseStamp> {
        match self {
            ReleaseId::Unstamped => None,
            ReleaseId::Stamped(s) => Some(s),
        }
    }

    /// Directory name used under `releases/`.
    pub fn dir_name(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for ReleaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReleaseId::Unstamped => f.write_str("unstamped"),
            ReleaseId::Stamped(s) => s.fmt(f),
        }
    }
}

impl FromStr for ReleaseId {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "unstamped" {
            Ok(ReleaseId::Unstamped)
        } else {
            ReleaseStamp::parse(s).map(ReleaseId::Stamped)
        }
    }
}

impl TryFrom<String> for ReleaseId {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ReleaseId> for String {
    fn from(value: ReleaseId) -> Self {
        value.to_string()
    }
}

impl From<ReleaseStamp> for ReleaseId {
    fn from(value: ReleaseStamp) -> Self {
        ReleaseId::Stamped(value)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollbackPoint {
    pub stamp_of_backup: ReleaseStamp,
    pub target: ComponentKind,
    pub backup_path: PathBuf,
    pub previous_stamp: ReleaseId,
    /// False when there was nothing live to preserve.
    pub has_content: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Checkout,
    OpenChannel,
    BuildBackend,
    BuildFrontend,
    Package,
    DeployFrontend,
    DeployBackend,
    HealthCheck,
    Rollback,
    Notify,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Checkout => "checkout",
            Stage::OpenChannel => "open_channel",
            Stage::BuildBackend => "build_backend",
            Stage::BuildFrontend => "build_frontend",
            Stage::Package => "package",
            Stage::DeployFrontend => "deploy_frontend",
            Stage::DeployBackend => "deploy_backend",
            Stage::HealthCheck => "health_check",
            Stage::Rollback => "rollback",
            Stage::Notify => "notify",
        }
    }

    pub fn build_for(kind: ComponentKind) -> Stage {
        match kind {
            ComponentKind::Backend => Stage::BuildBackend,
            ComponentKind::Frontend => Stage::BuildFrontend,
        }
    }

    pub fn deploy_for(kind: ComponentKind) -> Stage {
        match kind {
            ComponentKind::Backend => Stage::DeployBackend,
            ComponentKind::Frontend => Stage::DeployFrontend,
        }
    }

    pub fn is_deploy(self) -> bool {
        matches!(
            self,
            Stage::DeployFrontend | Stage::DeployBackend | Stage::HealthCheck | Stage::Rollback
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Failure,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub started: DateTime<Utc>,
    /// Seconds.
    pub duration: f64,
    pub outcome: Outcome,
    pub detail: String,
}

impl StageReport {
    pub fn finished(&self) -> DateTime<Utc> {
        self.started + chrono::Duration::microseconds((self.duration * 1e6) as i64)
    }
}
