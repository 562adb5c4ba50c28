//! Pipeline configuration: a single TOML document describing components,
//! hosts, store, deploy targets, health gate and notification sinks.
//!
//! Unknown keys and bad values are rejected with the dotted key path of the
//! offending value. Relative controller-side paths resolve against the
//! directory holding the config file; paths on build and deploy hosts must be
//! absolute.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::executor::{CommandPolicy, TransferPolicy};
use crate::model::{BuilderImageRef, ComponentKind, HostRole, RemoteHost};

pub const ENV_SSH_IDENTITY: &str = "SHIPLIGHT_SSH_IDENTITY";
pub const ENV_STORE_ROOT: &str = "SHIPLIGHT_STORE_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {key}: {message}", path.display())]
    Parse {
        path: PathBuf,
        key: String,
        message: String,
    },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

/// Where commands run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutorKind {
    /// Local subprocesses stand in for the hosts.
    #[default]
    Local,
    Ssh,
}

impl fmt::Display for ExecutorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutorKind::Local => "local",
            ExecutorKind::Ssh => "ssh",
        })
    }
}

/// Whether the controller does build work itself or only coordinates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExecutionMode {
    /// Builds and packaging run on the build host; the controller only
    /// coordinates.
    #[default]
    Light,
    /// Builds and packaging run as the controller's own child processes and
    /// count towards its load.
    Local,
}

impl ExecutionMode {
    pub fn label(self) -> &'static str {
        match self {
            ExecutionMode::Light => "light",
            ExecutionMode::Local => "local",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub address: String,
    #[serde(default = "default_port")]
    pub port: u16,
    pub user: String,
    /// Private key for the SSH executor.
    #[serde(default)]
    pub identity: Option<PathBuf>,
    /// Pinned host keys.
    #[serde(default)]
    pub known_hosts: Option<PathBuf>,
    #[serde(default = "default_connect_timeout")]
    pub connect_timeout_secs: f64,
    /// Programs allowed in addition to the built-in set.
    #[serde(default)]
    pub allow: Vec<String>,
}

fn default_port() -> u16 {
    22
}

fn default_connect_timeout() -> f64 {
    10.0
}

impl HostSpec {
    pub fn remote_host(&self, role: HostRole) -> RemoteHost {
        RemoteHost {
            address: self.address.clone(),
            port: self.port,
            user: self.user.clone(),
            identity: self.identity.clone().unwrap_or_default(),
            known_hosts: self.known_hosts.clone(),
            role,
        }
    }

    pub fn connect_timeout(&self) -> Duration {
        Duration::from_secs_f64(self.connect_timeout_secs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Directory inside the checked-out tree holding this component's sources.
    pub source: PathBuf,
    /// Builder image, pinned: `name:tag` or `name@sha256:...`.
    pub image: BuilderImageRef,
    pub command: Vec<String>,
    /// Directory, relative to the sources inside the container, that holds
    /// the build output.
    pub output: String,
    #[serde(default = "default_build_timeout")]
    pub timeout_secs: u64,
    /// Named engine volume mounted as a dependency cache.
    #[serde(default)]
    pub cache_volume: Option<String>,
    #[serde(default = "default_cache_mount")]
    pub cache_mount: String,
}

fn default_build_timeout() -> u64 {
    30 * 60
}

fn default_cache_mount() -> String {
    "/cache".to_string()
}

impl ComponentSpec {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs(self.timeout_secs)
    }
}

/// How the bundle archive is produced on the build host.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PackagerSpec {
    /// `"builtin"`: zipped by the controller process itself. Only valid when
    /// the build host is reached through the local executor.
    Named(String),
    /// Program run on the build host as `argv... <bundle_dir> <archive>`.
    Command(Vec<String>),
}

impl Default for PackagerSpec {
    fn default() -> Self {
        PackagerSpec::Command(vec!["shiplight".into(), "pack".into()])
    }
}

impl PackagerSpec {
    pub fn is_builtin(&self) -> bool {
        matches!(self, PackagerSpec::Named(n) if n == "builtin")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackagingSpec {
    #[serde(default)]
    pub packager: PackagerSpec,
    /// Directory inside the checked-out tree copied into the bundle's
    /// `config/`.
    #[serde(default)]
    pub config_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreSpec {
    pub root: PathBuf,
    /// Prefix for download links, e.g. `https://artifacts.example/rel`.
    #[serde(default)]
    pub base_url: Option<String>,
    /// Oldest releases beyond this count are pruned after each publish.
    #[serde(default)]
    pub max_releases: Option<usize>,
    /// Keep per-component artifacts next to the bundle.
    #[serde(default = "yes")]
    pub keep_components: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromotionMode {
    /// `current` is a symlink replaced by an atomic rename.
    #[default]
    Symlink,
    /// `current` is a real directory swapped by two renames; for filesystems
    /// without symlinks. Briefly absent between the renames.
    Directory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploySpec {
    /// Root on the deploy host; each target lives in `<root>/<target>`.
    pub root: PathBuf,
    #[serde(default = "default_config_restore")]
    pub config_restore: Vec<String>,
    #[serde(default = "default_retention")]
    pub backup_retention: u32,
    #[serde(default)]
    pub promotion: PromotionMode,
    /// Invoked as `[script, target, stamp]` on the deploy host.
    #[serde(default)]
    pub stop_script: Option<String>,
    #[serde(default)]
    pub start_script: Option<String>,
    #[serde(default = "default_service_timeout")]
    pub service_timeout_secs: u64,
}

fn default_config_restore() -> Vec<String> {
    vec!["config/*.conf".to_string()]
}

fn default_retention() -> u32 {
    3
}

fn default_service_timeout() -> u64 {
    60
}

impl DeploySpec {
    pub fn target_root(&self, kind: ComponentKind) -> PathBuf {
        self.root.join(kind.as_str())
    }
}

/// Inclusive range of HTTP status codes; written `200` or `"200-299"`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "StatusRepr", into = "String")]
pub struct StatusRange {
    pub low: u16,
    pub high: u16,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StatusRepr {
    One(u16),
    Text(String),
}

impl TryFrom<StatusRepr> for StatusRange {
    type Error = String;

    fn try_from(value: StatusRepr) -> Result<Self, Self::Error> {
        let (low, high) = match value {
            StatusRepr::One(n) => (n, n),
            StatusRepr::Text(t) => {
                let parse = |s: &str| s.trim().parse::<u16>().map_err(|_| format!("bad status {t:?}"));
                match t.split_once('-') {
                    Some((a, b)) => (parse(a)?, parse(b)?),
                    None => {
                        let n = parse(&t)?;
                        (n, n)
                    }
                }
            }
        };
        if !(100..=599).contains(&low) || !(100..=599).contains(&high) || low > high {
            return Err(format!("status range {low}-{high} is not valid"));
        }
        Ok(StatusRange { low, high })
    }
}

impl From<StatusRange> for String {
    fn from(r: StatusRange) -> Self {
        if r.low == r.high {
            r.low.to_string()
        } else {
            format!("{}-{}", r.low, r.high)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HealthCheckSpec {
    pub url: String,
    #[serde(default = "default_hc_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_hc_attempts")]
    pub attempts: u32,
    #[serde(default = "default_hc_delay")]
    pub delay_secs: f64,
    #[serde(default = "default_statuses")]
    pub success_statuses: Vec<StatusRange>,
}

fn default_hc_timeout() -> f64 {
    5.0
}

fn default_hc_attempts() -> u32 {
    5
}

fn default_hc_delay() -> f64 {
    2.0
}

fn default_statuses() -> Vec<StatusRange> {
    vec![StatusRange { low: 200, high: 299 }]
}

impl HealthCheckSpec {
    pub fn new(url: impl Into<String>) -> Self {
        HealthCheckSpec {
            url: url.into(),
            timeout_secs: default_hc_timeout(),
            attempts: default_hc_attempts(),
            delay_secs: default_hc_delay(),
            success_statuses: default_statuses(),
        }
    }

    pub fn accepts(&self, status: u16) -> bool {
        self.success_statuses.iter().any(|r| (r.low..=r.high).contains(&status))
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }

    pub fn delay(&self) -> Duration {
        Duration::from_secs_f64(self.delay_secs)
    }

    /// Upper bound on the whole gate: attempts × (timeout + delay).
    pub fn max_duration(&self) -> Duration {
        (self.timeout() + self.delay()) * self.attempts
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum SinkSpec {
    /// One JSON file per notification in `dir`.
    File { dir: PathBuf },
    /// Runs `argv` with the notification JSON on standard input.
    Command { argv: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferSpec {
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_backoff")]
    pub backoff_secs: f64,
    #[serde(default)]
    pub verify: bool,
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> f64 {
    1.0
}

impl Default for TransferSpec {
    fn default() -> Self {
        TransferSpec {
            retries: default_retries(),
            backoff_secs: default_backoff(),
            verify: false,
        }
    }
}

impl TransferSpec {
    pub fn policy(&self) -> TransferPolicy {
        TransferPolicy {
            retries: self.retries,
            initial_backoff: Duration::from_secs_f64(self.backoff_secs),
            verify: self.verify,
        }
    }
}

/// Everything one pipeline needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    /// Git repository or plain directory holding the sources.
    pub source: PathBuf,
    #[serde(default)]
    pub executor: ExecutorKind,
    #[serde(default)]
    pub mode: ExecutionMode,
    #[serde(default)]
    pub parallel_builds: bool,
    #[serde(default = "default_max_concurrent")]
    pub max_concurrent: usize,
    /// Controller-side directory for run records.
    #[serde(default = "default_runs_dir")]
    pub runs_dir: PathBuf,
    /// Workspace root on the build host.
    pub work_root: PathBuf,
    /// Container engine CLI on the build host.
    #[serde(default = "default_engine")]
    pub engine: String,
    pub build_host: HostSpec,
    pub deploy_host: HostSpec,
    #[serde(deserialize_with = "components_by_name")]
    pub components: BTreeMap<ComponentKind, ComponentSpec>,
    #[serde(default)]
    pub packaging: PackagingSpec,
    pub store: StoreSpec,
    pub deploy: DeploySpec,
    #[serde(default)]
    pub health_check: Option<HealthCheckSpec>,
    #[serde(default)]
    pub notify: Vec<SinkSpec>,
    #[serde(default)]
    pub transfer: TransferSpec,
}

fn components_by_name<'de, D>(de: D) -> Result<BTreeMap<ComponentKind, ComponentSpec>, D::Error>
where
    D: serde::Deserializer<'de>,
{
    let named = BTreeMap::<String, ComponentSpec>::deserialize(de)?;
    named
        .into_iter()
        .map(|(name, spec)| {
            name.parse::<ComponentKind>()
                .map(|kind| (kind, spec))
                .map_err(serde::de::Error::custom)
        })
        .collect()
}

fn default_max_concurrent() -> usize {
    10
}

fn default_runs_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_engine() -> String {
    "docker".to_string()
}

impl PipelineSpec {
    /// Parses and validates a spec. Relative controller paths are resolved
    /// against `base_dir`. Environment overrides are not applied.
    pub fn from_toml_str(text: &str, origin: &Path, base_dir: &Path) -> Result<Self, ConfigError> {
        let de = toml::Deserializer::parse(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            key: String::from("(document)"),
            message: e.message().to_string(),
        })?;
        let mut spec: PipelineSpec = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            key: e.path().to_string(),
            message: e.inner().message().to_string(),
        })?;
        spec.resolve_paths(base_dir);
        spec.validate()?;
        Ok(spec)
    }

    /// Reads `path`, applies environment overrides and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let base = std::path::absolute(&base).unwrap_or(base);
        let mut spec = PipelineSpec::from_toml_str(&text, path, &base)?;
        spec.apply_env(|k| std::env::var(k).ok());
        spec.validate()?;
        Ok(spec)
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        if let Some(identity) = get(ENV_SSH_IDENTITY).filter(|v| !v.is_empty()) {
            self.build_host.identity = Some(PathBuf::from(&identity));
            self.deploy_host.identity = Some(PathBuf::from(identity));
        }
        if let Some(root) = get(ENV_STORE_ROOT).filter(|v| !v.is_empty()) {
            self.store.root = PathBuf::from(root);
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.source);
        fix(&mut self.runs_dir);
        fix(&mut self.store.root);
        for host in [&mut self.build_host, &mut self.deploy_host] {
            if let Some(p) = host.identity.as_mut() {
                fix(p);
            }
            if let Some(p) = host.known_hosts.as_mut() {
                fix(p);
            }
        }
        for sink in &mut self.notify {
            if let SinkSpec::File { dir } = sink {
                fix(dir);
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.components.is_empty() {
            return Err(invalid("components", "at least one component must be declared"));
        }
        for (kind, c) in &self.components {
            let key = format!("components.{kind}");
            if c.command.is_empty() {
                return Err(invalid(&format!("{key}.command"), "must not be empty"));
            }
            if c.output.is_empty() || Path::new(&c.output).is_absolute() || c.output.split('/').any(|s| s == "..") {
                return Err(invalid(
                    &format!("{key}.output"),
                    "must be a relative path inside the sources",
                ));
            }
            if c.source.is_absolute() || c.source.components().any(|s| s.as_os_str() == "..") {
                return Err(invalid(
                    &format!("{key}.source"),
                    "must be a relative path inside the checkout",
                ));
            }
            if c.timeout_secs == 0 {
                return Err(invalid(&format!("{key}.timeout_secs"), "must be positive"));
            }
        }
        if self.deploy.backup_retention < 1 {
            return Err(invalid("deploy.backup_retention", "must be at least 1"));
        }
        if self.max_concurrent < 1 {
            return Err(invalid("max_concurrent", "must be at least 1"));
        }
        if !self.work_root.is_absolute() {
            return Err(invalid("work_root", "must be an absolute path on the build host"));
        }
        if !self.deploy.root.is_absolute() {
            return Err(invalid("deploy.root", "must be an absolute path on the deploy host"));
        }
        if self.components.contains_key(&ComponentKind::Backend) && self.health_check.is_none() {
            return Err(invalid("health_check", "required when a backend component is declared"));
        }
        if let Some(hc) = &self.health_check {
            if hc.attempts < 1 {
                return Err(invalid("health_check.attempts", "must be at least 1"));
            }
            if hc.timeout_secs <= 0.0 || hc.delay_secs < 0.0 {
                return Err(invalid(
                    "health_check",
                    "timeout must be positive and delay non-negative",
                ));
            }
            if hc.success_statuses.is_empty() {
                return Err(invalid("health_check.success_statuses", "must not be empty"));
            }
        }
        if let PackagerSpec::Named(name) = &self.packaging.packager {
            if name != "builtin" {
                return Err(invalid("packaging.packager", format!("unknown packager {name:?}")));
            }
            if self.executor != ExecutorKind::Local {
                return Err(invalid(
                    "packaging.packager",
                    "builtin packager needs the local executor",
                ));
            }
        }
        if let PackagerSpec::Command(argv) = &self.packaging.packager {
            if argv.is_empty() {
                return Err(invalid("packaging.packager", "must not be empty"));
            }
        }
        if let Some(dir) = &self.packaging.config_dir {
            if dir.is_absolute() {
                return Err(invalid("packaging.config_dir", "must be relative to the checkout"));
            }
        }
        if self.executor == ExecutorKind::Ssh {
            for (name, host) in [("build_host", &self.build_host), ("deploy_host", &self.deploy_host)] {
                if host.identity.is_none() {
                    return Err(invalid(&format!("{name}.identity"), "required for the ssh executor"));
                }
                if host.known_hosts.is_none() {
                    return Err(invalid(&format!("{name}.known_hosts"), "required for the ssh executor"));
                }
            }
        }
        for pattern in &self.deploy.config_restore {
            glob::Pattern::new(pattern).map_err(|e| invalid("deploy.config_restore", format!("{pattern:?}: {e}")))?;
        }
        for (i, sink) in self.notify.iter().enumerate() {
            if let SinkSpec::Command { argv } = sink {
                if argv.is_empty() {
                    return Err(invalid(&format!("notify[{i}].argv"), "must not be empty"));
                }
            }
        }
        Ok(())
    }

    /// Allow-list for the build host.
    pub fn build_policy(&self) -> CommandPolicy {
        let mut policy = CommandPolicy::standard(self.build_host.allow.iter().cloned());
        policy.allow(self.engine.clone());
        if let PackagerSpec::Command(argv) = &self.packaging.packager {
            policy.allow(argv[0].clone());
        }
        policy
    }

    /// Allow-list for the deploy host.
    pub fn deploy_policy(&self) -> CommandPolicy {
        let mut policy = CommandPolicy::standard(self.deploy_host.allow.iter().cloned());
        for script in [&self.deploy.stop_script, &self.deploy.start_script]
            .into_iter()
            .flatten()
        {
            policy.allow(script.clone());
        }
        policy
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
source = "src"
work_root = "/tmp/work"

[build_host]
address = "127.0.0.1"
user = "ci"

[deploy_host]
address = "127.0.0.1"
user = "deploy"

[components.backend]
source = "backend"
image = "maven:3.9.6"
command = ["sh", "-c", "make"]
output = "out"

[store]
root = "store"

[deploy]
root = "/srv/app"
stop_script = "/opt/stop.sh"
start_script = "/opt/start.sh"

[health_check]
url = "http://127.0.0.1:8080/health"
success_statuses = [200, "300-302"]
"#;

    fn parse(text: &str) -> Result<PipelineSpec, ConfigError> {
        PipelineSpec::from_toml_str(text, Path::new("spec.toml"), Path::new("/cfg"))
    }

    #[test]
    fn minimal_spec_gets_defaults() {
        let spec = parse(MINIMAL).unwrap();
        assert_eq!(spec.source, PathBuf::from("/cfg/src"));
        assert_eq!(spec.store.root, PathBuf::from("/cfg/store"));
        assert_eq!(spec.runs_dir, PathBuf::from("/cfg/runs"));
        assert_eq!(spec.max_concurrent, 10);
        assert_eq!(spec.deploy.backup_retention, 3);
        assert_eq!(spec.deploy.config_restore, ["config/*.conf"]);
        let c = &spec.components[&ComponentKind::Backend];
        assert_eq!(c.timeout(), Duration::from_secs(1800));
        let hc = spec.health_check.as_ref().unwrap();
        assert_eq!((hc.timeout_secs, hc.attempts, hc.delay_secs), (5.0, 5, 2.0));
        assert!(hc.accepts(200) && hc.accepts(301) && !hc.accepts(299));
        assert_eq!(spec.transfer.policy(), TransferPolicy::default());
    }

    #[test]
    fn latest_tag_is_rejected_with_key_path() {
        let text = MINIMAL.replace("maven:3.9.6", "maven:latest");
        match parse(&text).unwrap_err() {
            ConfigError::Parse { key, message, .. } => {
                assert_eq!(key, "components.backend.image");
                assert!(message.contains("floating"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let untagged = MINIMAL.replace("maven:3.9.6", "maven");
        assert!(parse(&untagged).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replace("[store]\nroot", "[store]\nrooot = \"x\"\nroot");
        match parse(&text).unwrap_err() {
            ConfigError::Parse { key, .. } => assert_eq!(key, "store.rooot"),
            other => panic!("unexpected {other:?}"),
        }
        let text = MINIMAL.replace("[components.backend]", "[components.database]");
        match parse(&text).unwrap_err() {
            ConfigError::Parse { key, .. } => assert!(key.starts_with("components"), "{key}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_checks() {
        let text = MINIMAL.replace("[deploy]\n", "[deploy]\nbackup_retention = 0\n");
        assert!(matches!(parse(&text), Err(ConfigError::Invalid { key, .. }) if key == "deploy.backup_retention"));
        let text = MINIMAL.replace("work_root = \"/tmp/work\"", "work_root = \"work\"");
        assert!(matches!(parse(&text), Err(ConfigError::Invalid { key, .. }) if key == "work_root"));
        let text = MINIMAL.replace("output = \"out\"", "output = \"../x\"");
        assert!(parse(&text).is_err());
        let text = MINIMAL.replace("source = \"src\"", "source = \"src\"\nexecutor = \"ssh\"");
        assert!(matches!(parse(&text), Err(ConfigError::Invalid { key, .. }) if key == "build_host.identity"));
    }

    #[test]
    fn env_overrides() {
        let mut spec = parse(MINIMAL).unwrap();
        spec.apply_env(|k| match k {
            ENV_SSH_IDENTITY => Some("/keys/id".into()),
            ENV_STORE_ROOT => Some("/mnt/store".into()),
            _ => None,
        });
        assert_eq!(spec.build_host.identity.as_deref(), Some(Path::new("/keys/id")));
        assert_eq!(spec.deploy_host.identity.as_deref(), Some(Path::new("/keys/id")));
        assert_eq!(spec.store.root, PathBuf::from("/mnt/store"));
    }

    #[test]
    fn round_trips_through_toml() {
        let spec = parse(MINIMAL).unwrap();
        let again = PipelineSpec::from_toml_str(&spec.to_toml(), Path::new("x"), Path::new("/other")).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn policies_include_configured_programs() {
        let spec = parse(MINIMAL).unwrap();
        assert!(spec.build_policy().permits("docker"));
        assert!(spec.build_policy().permits("shiplight"));
        assert!(!spec.build_policy().permits("/opt/stop.sh"));
        assert!(spec.deploy_policy().permits("/opt/stop.sh"));
        assert!(!spec.deploy_policy().permits("docker"));
    }
}
