//! Test doubles for the pipeline: a container engine, service scripts, a
//! health endpoint, an SSH daemon and a source repository, all running on
//! the local machine.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Deserialize;

const ENGINE_SCRIPT: &str = include_str!("assets/engine.py");
const SSHD_SCRIPT: &str = include_str!("assets/sshd.py");

fn write_executable(path: &Path, body: &str) {
    fs::write(path, body).unwrap();
    fs::set_permissions(path, fs::Permissions::from_mode(0o755)).unwrap();
}

/// Name of the user running the tests.
pub fn current_user() -> String {
    if let Ok(u) = std::env::var("USER") {
        if !u.is_empty() {
            return u;
        }
    }
    let out = Command::new("id").arg("-un").output().expect("id");
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

/// Polls `cond` every 20 ms until it holds or `timeout` passes.
pub fn wait_until(timeout: Duration, mut cond: impl FnMut() -> bool) -> bool {
    let end = Instant::now() + timeout;
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= end {
            return false;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct Container {
    pub id: String,
    pub name: String,
    pub image: String,
    pub labels: BTreeMap<String, String>,
    pub status: String,
    pub pid: Option<i32>,
    #[serde(default)]
    pub exit_code: Option<i32>,
}

impl Container {
    pub fn label(&self, key: &str) -> Option<&str> {
        self.labels.get(key).map(String::as_str)
    }
}

/// Whether a process exists and is not a zombie.
pub fn process_alive(pid: i32) -> bool {
    match fs::read_to_string(format!("/proc/{pid}/stat")) {
        Ok(stat) => {
            let state = stat.rsplit(')').next().and_then(|s| s.split_whitespace().next());
            !matches!(state, Some("Z") | Some("X"))
        }
        Err(_) => false,
    }
}

/// Engine CLI stand-in. Containers are process groups; records persist in
/// the state directory until removed.
#[derive(Clone, Debug)]
pub struct FakeEngine {
    pub path: PathBuf,
    pub state: PathBuf,
}

impl FakeEngine {
    pub fn install(dir: &Path) -> FakeEngine {
        let state = dir.join("engine-state");
        fs::create_dir_all(state.join("containers")).unwrap();
        let path = dir.join("engine");
        write_executable(&path, &ENGINE_SCRIPT.replace("@STATE@", &state.to_string_lossy()));
        FakeEngine { path, state }
    }

    pub fn containers(&self) -> Vec<Container> {
        let mut out = Vec::new();
        let Ok(rd) = fs::read_dir(self.state.join("containers")) else {
            return out;
        };
        for entry in rd.flatten() {
            let p = entry.path();
            if p.extension().is_some_and(|e| e == "json") {
                if let Ok(c) = fs::read(&p)
                    .map_err(|_| ())
                    .and_then(|b| serde_json::from_slice(&b).map_err(|_| ()))
                {
                    out.push(c);
                }
            }
        }
        out.sort_by(|a: &Container, b| a.name.cmp(&b.name));
        out
    }

    /// Containers carrying `shiplight.stamp=<stamp>`.
    pub fn labelled(&self, stamp: &str) -> Vec<Container> {
        self.containers()
            .into_iter()
            .filter(|c| c.label("shiplight.stamp") == Some(stamp))
            .collect()
    }

    /// Processes of any recorded container that are still alive.
    pub fn live_processes(&self) -> Vec<i32> {
        self.containers()
            .iter()
            .filter_map(|c| c.pid)
            .filter(|p| process_alive(*p))
            .collect()
    }

    /// Waits for a running container for `component` and returns it.
    pub fn wait_running(&self, component: &str, timeout: Duration) -> Option<Container> {
        let mut found = None;
        wait_until(timeout, || {
            found = self
                .containers()
                .into_iter()
                .find(|c| c.status == "running" && c.label("shiplight.component") == Some(component));
            found.is_some()
        });
        found
    }

    pub fn kill(&self, name: &str) -> bool {
        Command::new(&self.path)
            .args(["kill", name])
            .status()
            .map(|s| s.success())
            .unwrap_or(false)
    }

    /// Killed containers stay behind even when started with `--rm`.
    pub fn keep_killed(&self, on: bool) {
        self.toggle("keep-killed", on);
    }

    pub fn fail_pull(&self, image: &str) {
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.state.join("pull-fail"))
            .unwrap();
        writeln!(f, "{image}").unwrap();
    }

    /// Every argv the engine was invoked with, oldest first.
    pub fn calls(&self) -> Vec<Vec<String>> {
        fs::read_to_string(self.state.join("calls.log"))
            .unwrap_or_default()
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect()
    }

    fn toggle(&self, name: &str, on: bool) {
        let p = self.state.join(name);
        if on {
            fs::write(p, "").unwrap();
        } else {
            let _ = fs::remove_file(p);
        }
    }
}

/// Stop and start scripts invoked as `[script, target, stamp]`. They record
/// calls in `service.log` and which release runs in `running-<target>`.
#[derive(Clone, Debug)]
pub struct ServiceStub {
    pub start: PathBuf,
    pub stop: PathBuf,
    pub state: PathBuf,
}

impl ServiceStub {
    pub fn install(dir: &Path) -> ServiceStub {
        let state = dir.join("service-state");
        fs::create_dir_all(&state).unwrap();
        let s = state.to_string_lossy();
        let start = dir.join("start-service");
        write_executable(
            &start,
            &format!(
                "#!/bin/sh\nS='{s}'\necho \"start $1 $2\" >> \"$S/service.log\"\n\
                 if [ -e \"$S/fail-start\" ]; then echo 'service refused to start' >&2; exit 1; fi\n\
                 echo \"$2\" > \"$S/running-$1\"\n"
            ),
        );
        let stop = dir.join("stop-service");
        write_executable(
            &stop,
            &format!(
                "#!/bin/sh\nS='{s}'\necho \"stop $1 $2\" >> \"$S/service.log\"\n\
                 if [ -e \"$S/fail-stop\" ]; then echo 'service refused to stop' >&2; exit 1; fi\n\
                 if [ -s \"$S/stop-delay\" ]; then sleep \"$(cat \"$S/stop-delay\")\"; fi\n\
                 rm -f \"$S/running-$1\"\n"
            ),
        );
        ServiceStub { start, stop, state }
    }

    /// Release the service for `target` was last started with.
    pub fn running(&self, target: &str) -> Option<String> {
        fs::read_to_string(self.state.join(format!("running-{target}")))
            .ok()
            .map(|s| s.trim().to_string())
    }

    pub fn log(&self) -> Vec<String> {
        fs::read_to_string(self.state.join("service.log"))
            .unwrap_or_default()
            .lines()
            .map(str::to_string)
            .collect()
    }

    pub fn fail_start(&self, on: bool) {
        self.toggle("fail-start", on);
    }

    pub fn fail_stop(&self, on: bool) {
        self.toggle("fail-stop", on);
    }

    /// Makes every stop take `secs` seconds; 0 turns the delay off.
    pub fn stop_delay(&self, secs: f64) {
        let p = self.state.join("stop-delay");
        if secs > 0.0 {
            fs::write(p, format!("{secs}")).unwrap();
        } else {
            let _ = fs::remove_file(p);
        }
    }

    fn toggle(&self, name: &str, on: bool) {
        let p = self.state.join(name);
        if on {
            fs::write(p, "").unwrap();
        } else {
            let _ = fs::remove_file(p);
        }
    }
}

/// HTTP endpoint answering for the live backend. Replies 503 while the
/// service is stopped, otherwise the status written in the live release's
/// `health_status` file, or 200 when there is none.
pub struct HealthServer {
    pub url: String,
    server: Arc<tiny_http::Server>,
    worker: Option<JoinHandle<()>>,
}

impl HealthServer {
    pub fn start(deploy_root: &Path, services: &ServiceStub) -> HealthServer {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").expect("bind health server"));
        let port = server.server_addr().to_ip().expect("ip listener").port();
        let status_file = deploy_root.join("backend").join("current").join("health_status");
        let running = services.state.join("running-backend");
        let s = server.clone();
        let worker = std::thread::spawn(move || {
            for req in s.incoming_requests() {
                let code = if !running.exists() {
                    503
                } else {
                    fs::read_to_string(&status_file)
                        .ok()
                        .and_then(|t| t.trim().parse::<u16>().ok())
                        .unwrap_or(200)
                };
                let _ = req.respond(tiny_http::Response::from_string(code.to_string()).with_status_code(code));
            }
        });
        HealthServer {
            url: format!("http://127.0.0.1:{port}/health"),
            server,
            worker: Some(worker),
        }
    }
}

impl Drop for HealthServer {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}

/// SSH server on 127.0.0.1 that accepts one client key and runs exec
/// requests with `/bin/sh -c`.
pub struct SshDaemon {
    pub port: u16,
    pub user: String,
    pub identity: PathBuf,
    pub known_hosts: PathBuf,
    dir: PathBuf,
    child: Child,
}

fn keygen(path: &Path) -> Result<(), String> {
    let out = Command::new("ssh-keygen")
        .args(["-q", "-t", "ed25519", "-N", "", "-f"])
        .arg(path)
        .output()
        .map_err(|e| format!("ssh-keygen: {e}"))?;
    if !out.status.success() {
        return Err(String::from_utf8_lossy(&out.stderr).into_owned());
    }
    Ok(())
}

fn public_key(path: &Path) -> String {
    let text = fs::read_to_string(path.with_extension("pub")).unwrap();
    text.split_whitespace().take(2).collect::<Vec<_>>().join(" ")
}

impl SshDaemon {
    /// Starts a daemon with fresh keys under `dir`. Fails when python3,
    /// asyncssh or the OpenSSH tools are missing.
    pub fn start(dir: &Path) -> Result<SshDaemon, String> {
        let probe = Command::new("python3")
            .args(["-c", "import asyncssh"])
            .stderr(Stdio::null())
            .status()
            .map_err(|e| format!("python3: {e}"))?;
        if !probe.success() {
            return Err("asyncssh is not installed".into());
        }
        if Command::new("ssh").arg("-V").stderr(Stdio::null()).status().is_err() {
            return Err("ssh client not found".into());
        }
        fs::create_dir_all(dir).map_err(|e| e.to_string())?;
        let host_key = dir.join("host_key");
        let identity = dir.join("client_key");
        keygen(&host_key)?;
        keygen(&identity)?;
        let authorized = dir.join("authorized_keys");
        fs::write(&authorized, public_key(&identity) + "\n").map_err(|e| e.to_string())?;
        let script = dir.join("sshd.py");
        write_executable(&script, SSHD_SCRIPT);
        let port_file = dir.join("port");
        let log = fs::File::create(dir.join("sshd.log")).map_err(|e| e.to_string())?;
        let mut child = Command::new("python3")
            .arg(&script)
            .arg("--host-key")
            .arg(&host_key)
            .arg("--authorized")
            .arg(&authorized)
            .arg("--port-file")
            .arg(&port_file)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(log)
            .spawn()
            .map_err(|e| format!("spawn sshd: {e}"))?;
        let ready = wait_until(Duration::from_secs(20), || port_file.exists());
        if !ready {
            let _ = child.kill();
            let _ = child.wait();
            let log = fs::read_to_string(dir.join("sshd.log")).unwrap_or_default();
            return Err(format!("ssh daemon did not start: {log}"));
        }
        let port: u16 = fs::read_to_string(&port_file)
            .map_err(|e| e.to_string())?
            .trim()
            .parse()
            .map_err(|e| format!("bad port file: {e}"))?;
        let known_hosts = dir.join("known_hosts");
        fs::write(&known_hosts, format!("[127.0.0.1]:{port} {}\n", public_key(&host_key)))
            .map_err(|e| e.to_string())?;
        Ok(SshDaemon {
            port,
            user: current_user(),
            identity,
            known_hosts,
            dir: dir.to_path_buf(),
            child,
        })
    }

    /// A known_hosts file pinning a different key for this daemon.
    pub fn forged_known_hosts(&self) -> PathBuf {
        let other = self.dir.join("other_host_key");
        if !other.exists() {
            keygen(&other).unwrap();
        }
        let path = self.dir.join("known_hosts.forged");
        fs::write(&path, format!("[127.0.0.1]:{} {}\n", self.port, public_key(&other))).unwrap();
        path
    }

    /// A client key the daemon does not accept.
    pub fn stranger_identity(&self) -> PathBuf {
        let path = self.dir.join("stranger_key");
        if !path.exists() {
            keygen(&path).unwrap();
        }
        path
    }
}

impl Drop for SshDaemon {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn git(dir: &Path, args: &[&str]) -> String {
    let out = Command::new("git")
        .arg("-C")
        .arg(dir)
        .args(args)
        .env("GIT_AUTHOR_NAME", "Release Bot")
        .env("GIT_AUTHOR_EMAIL", "release@example.com")
        .env("GIT_COMMITTER_NAME", "Release Bot")
        .env("GIT_COMMITTER_EMAIL", "release@example.com")
        .output()
        .expect("git");
    assert!(
        out.status.success(),
        "git {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).trim().to_string()
}

/// Git repository with `backend/`, `frontend/` and `config/` trees on
/// branch `main`.
#[derive(Clone, Debug)]
pub struct SourceRepo {
    pub path: PathBuf,
}

impl SourceRepo {
    pub fn create(path: &Path) -> SourceRepo {
        fs::create_dir_all(path).unwrap();
        git(path, &["init", "--quiet", "-b", "main"]);
        let repo = SourceRepo {
            path: path.to_path_buf(),
        };
        repo.put("backend/app.txt", "backend v1\n");
        repo.put("backend/lib/core.txt", "core library\n");
        repo.put("frontend/index.html", "<h1>v1</h1>\n");
        repo.put("frontend/assets/app.js", "console.log('v1');\n");
        repo.put("config/app.conf", "setting=repository\n");
        repo.commit("initial import");
        repo
    }

    /// Writes a file without committing.
    pub fn put(&self, rel: &str, contents: &str) {
        let p = self.path.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(p, contents).unwrap();
    }

    pub fn delete(&self, rel: &str) {
        let _ = fs::remove_file(self.path.join(rel));
    }

    /// Commits everything and returns the new head.
    pub fn commit(&self, message: &str) -> String {
        git(&self.path, &["add", "-A"]);
        git(&self.path, &["commit", "--quiet", "--allow-empty", "-m", message]);
        self.head()
    }

    pub fn commit_file(&self, rel: &str, contents: &str, message: &str) -> String {
        self.put(rel, contents);
        self.commit(message)
    }

    pub fn head(&self) -> String {
        git(&self.path, &["rev-parse", "HEAD"])
    }

    pub fn branch(&self, name: &str) {
        git(&self.path, &["branch", "-f", name]);
    }
}

/// How [`Fixture::spec_toml`] shapes the pipeline.
#[derive(Clone, Debug)]
pub struct SpecOptions {
    pub mode: &'static str,
    pub parallel_builds: bool,
    /// Seconds of busy CPU in each backend build.
    pub backend_burn_s: f64,
    pub frontend_burn_s: f64,
    pub build_timeout_s: u64,
    /// `None` for the in-process packager.
    pub packager: Option<Vec<String>>,
    pub health: bool,
    pub retention: u32,
    pub max_concurrent: usize,
    pub promotion: &'static str,
    pub components: Vec<&'static str>,
    pub max_releases: Option<usize>,
    pub verify_transfers: bool,
}

impl Default for SpecOptions {
    fn default() -> Self {
        SpecOptions {
            mode: "light",
            parallel_builds: false,
            backend_burn_s: 0.0,
            frontend_burn_s: 0.0,
            build_timeout_s: 120,
            packager: None,
            health: true,
            retention: 3,
            max_concurrent: 10,
            promotion: "symlink",
            components: vec!["backend", "frontend"],
            max_releases: None,
            verify_transfers: true,
        }
    }
}

fn q(s: &str) -> String {
    serde_json::to_string(s).unwrap()
}

fn q_list(items: &[String]) -> String {
    format!("[{}]", items.iter().map(|s| q(s)).collect::<Vec<_>>().join(", "))
}

/// Build command: optional CPU burn, `fail_build` marker fails with exit 3,
/// `sleep_build` holds seconds to sleep, then every source entry is copied
/// into `dist/`.
pub fn build_command(burn_s: f64) -> Vec<String> {
    let mut script = String::new();
    if burn_s > 0.0 {
        script.push_str(&format!(
            "python3 -c 'import time;t=time.time()+{burn_s};[0 for _ in iter(lambda: time.time()<t, False)]' && "
        ));
    }
    script.push_str(
        "if [ -e fail_build ]; then echo 'compilation failed' >&2; exit 3; fi; \
         if [ -e sleep_build ]; then sleep \"$(cat sleep_build)\"; fi; \
         mkdir -p dist && for f in *; do [ \"$f\" = dist ] || [ \"$f\" = sleep_build ] || cp -R \"$f\" dist/; done",
    );
    vec!["sh".into(), "-c".into(), script]
}

/// A complete local environment: source repository, engine, service
/// scripts and health endpoint, with controller and host directories
/// under one temporary root.
pub struct Fixture {
    pub root: PathBuf,
    pub repo: SourceRepo,
    pub engine: FakeEngine,
    pub services: ServiceStub,
    pub health: HealthServer,
    pub work_root: PathBuf,
    pub store_root: PathBuf,
    pub deploy_root: PathBuf,
    pub runs_dir: PathBuf,
    pub notify_dir: PathBuf,
    _dir: tempfile::TempDir,
}

impl Fixture {
    pub fn new() -> Fixture {
        let dir = tempfile::Builder::new().prefix("shiplight-fx").tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let tools = root.join("tools");
        fs::create_dir_all(&tools).unwrap();
        let repo = SourceRepo::create(&root.join("repo"));
        let engine = FakeEngine::install(&tools);
        let services = ServiceStub::install(&tools);
        let deploy_root = root.join("deploy");
        let health = HealthServer::start(&deploy_root, &services);
        Fixture {
            repo,
            engine,
            services,
            health,
            work_root: root.join("build-host"),
            store_root: root.join("store"),
            deploy_root,
            runs_dir: root.join("runs"),
            notify_dir: root.join("notifications"),
            root,
            _dir: dir,
        }
    }

    /// Spec with both hosts reached through the local executor.
    pub fn spec_toml(&self, opts: &SpecOptions) -> String {
        self.render(opts, None)
    }

    /// Spec with both hosts reached through `daemon`.
    pub fn ssh_spec_toml(&self, opts: &SpecOptions, daemon: &SshDaemon) -> String {
        self.render(opts, Some(daemon))
    }

    fn render(&self, opts: &SpecOptions, daemon: Option<&SshDaemon>) -> String {
        let p = |path: &Path| q(&path.to_string_lossy());
        let mut t = String::new();
        t.push_str(&format!("source = {}\n", p(&self.repo.path)));
        t.push_str(&format!(
            "executor = {}\n",
            q(if daemon.is_some() { "ssh" } else { "local" })
        ));
        t.push_str(&format!("mode = {}\n", q(opts.mode)));
        t.push_str(&format!("parallel_builds = {}\n", opts.parallel_builds));
        t.push_str(&format!("max_concurrent = {}\n", opts.max_concurrent));
        t.push_str(&format!("runs_dir = {}\n", p(&self.runs_dir)));
        t.push_str(&format!("work_root = {}\n", p(&self.work_root)));
        t.push_str(&format!("engine = {}\n\n", p(&self.engine.path)));
        for host in ["build_host", "deploy_host"] {
            t.push_str(&format!("[{host}]\naddress = \"127.0.0.1\"\n"));
            match daemon {
                Some(d) => {
                    t.push_str(&format!("port = {}\nuser = {}\n", d.port, q(&d.user)));
                    t.push_str(&format!(
                        "identity = {}\nknown_hosts = {}\n",
                        p(&d.identity),
                        p(&d.known_hosts)
                    ));
                    t.push_str("allow = [\"python3\"]\n\n");
                }
                None => t.push_str(&format!("user = {}\nallow = [\"python3\"]\n\n", q(&current_user()))),
            }
        }
        for kind in &opts.components {
            let burn = if *kind == "backend" {
                opts.backend_burn_s
            } else {
                opts.frontend_burn_s
            };
            t.push_str(&format!("[components.{kind}]\n"));
            t.push_str(&format!("source = {}\n", q(kind)));
            t.push_str(&format!(
                "image = {}\n",
                q(if *kind == "backend" {
                    "maven:3.9.6-jdk17"
                } else {
                    "node:20.11.1"
                })
            ));
            t.push_str(&format!("command = {}\n", q_list(&build_command(burn))));
            t.push_str("output = \"dist\"\n");
            t.push_str(&format!("timeout_secs = {}\n\n", opts.build_timeout_s));
        }
        t.push_str("[packaging]\nconfig_dir = \"config\"\n");
        match &opts.packager {
            Some(argv) => t.push_str(&format!("packager = {}\n\n", q_list(argv))),
            None => t.push_str("packager = \"builtin\"\n\n"),
        }
        t.push_str(&format!(
            "[store]\nroot = {}\nbase_url = \"https://artifacts.example/releases\"\n",
            p(&self.store_root)
        ));
        if let Some(n) = opts.max_releases {
            t.push_str(&format!("max_releases = {n}\n"));
        }
        t.push('\n');
        t.push_str(&format!("[deploy]\nroot = {}\n", p(&self.deploy_root)));
        t.push_str(&format!("backup_retention = {}\n", opts.retention));
        t.push_str(&format!("promotion = {}\n", q(opts.promotion)));
        t.push_str(&format!(
            "stop_script = {}\nstart_script = {}\n\n",
            p(&self.services.stop),
            p(&self.services.start)
        ));
        if opts.health && opts.components.contains(&"backend") {
            t.push_str(&format!(
                "[health_check]\nurl = {}\ntimeout_secs = 1.0\nattempts = 3\ndelay_secs = 0.2\n\n",
                q(&self.health.url)
            ));
        }
        t.push_str(&format!(
            "[[notify]]\ntype = \"file\"\ndir = {}\n\n",
            p(&self.notify_dir)
        ));
        t.push_str(&format!(
            "[transfer]\nretries = 2\nbackoff_secs = 0.05\nverify = {}\n",
            opts.verify_transfers
        ));
        t
    }

    /// Writes the spec to `<root>/<name>` and returns its path.
    pub fn write_spec(&self, name: &str, toml: &str) -> PathBuf {
        let path = self.root.join(name);
        fs::write(&path, toml).unwrap();
        path
    }

    /// Notification files written by the file sink, sorted by name.
    pub fn notifications(&self) -> Vec<serde_json::Value> {
        let Ok(rd) = fs::read_dir(&self.notify_dir) else {
            return Vec::new();
        };
        let mut paths: Vec<PathBuf> = rd.flatten().map(|e| e.path()).collect();
        paths.sort();
        paths
            .iter()
            .filter_map(|p| fs::read(p).ok())
            .filter_map(|b| serde_json::from_slice(&b).ok())
            .collect()
    }

    pub fn live_dir(&self, target: &str) -> PathBuf {
        self.deploy_root.join(target).join("current")
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Fixture::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn engine_runs_with_translated_workspace() {
        let t = tempfile::tempdir().unwrap();
        let engine = FakeEngine::install(t.path());
        let ws = t.path().join("ws");
        fs::create_dir_all(ws.join("src")).unwrap();
        let out = Command::new(&engine.path)
            .args(["run", "--rm", "--name", "c1", "--label", "shiplight.stamp=S", "-v"])
            .arg(format!("{}:/workspace", ws.display()))
            .args(["-w", "/workspace/src", "img:1", "sh", "-c", "echo built > out.txt; pwd"])
            .output()
            .unwrap();
        assert!(out.status.success());
        assert_eq!(fs::read_to_string(ws.join("src/out.txt")).unwrap(), "built\n");
        assert!(engine.containers().is_empty());
    }

    #[test]
    fn engine_pull_failure_and_kill() {
        let t = tempfile::tempdir().unwrap();
        let engine = FakeEngine::install(t.path());
        engine.fail_pull("img:bad");
        let s = Command::new(&engine.path)
            .args(["run", "--rm", "img:bad", "true"])
            .status()
            .unwrap();
        assert_eq!(s.code(), Some(125));

        engine.keep_killed(true);
        let mut child = Command::new(&engine.path)
            .args([
                "run",
                "--rm",
                "--name",
                "k1",
                "--label",
                "shiplight.component=backend",
                "img:1",
                "sleep",
                "30",
            ])
            .spawn()
            .unwrap();
        let c = engine
            .wait_running("backend", Duration::from_secs(10))
            .expect("running");
        assert!(engine.kill(&c.name));
        assert_eq!(child.wait().unwrap().code(), Some(137));
        assert_eq!(engine.containers().len(), 1);
        let s = Command::new(&engine.path).args(["rm", "-f", &c.id]).status().unwrap();
        assert!(s.success());
        assert!(engine.containers().is_empty());
    }

    #[test]
    fn service_stub_and_health() {
        let t = tempfile::tempdir().unwrap();
        let svc = ServiceStub::install(t.path());
        let deploy = t.path().join("deploy");
        let health = HealthServer::start(&deploy, &svc);
        let get = |url: &str| -> u16 {
            let out = Command::new("curl")
                .args(["-s", "-o", "/dev/null", "-w", "%{http_code}", url])
                .output();
            match out {
                Ok(o) => String::from_utf8_lossy(&o.stdout).parse().unwrap_or(0),
                Err(_) => 0,
            }
        };
        if Command::new("curl")
            .arg("--version")
            .stdout(Stdio::null())
            .status()
            .is_err()
        {
            return;
        }
        assert_eq!(get(&health.url), 503);
        assert!(Command::new(&svc.start)
            .args(["backend", "S1"])
            .status()
            .unwrap()
            .success());
        assert_eq!(svc.running("backend").as_deref(), Some("S1"));
        assert_eq!(get(&health.url), 200);
        fs::create_dir_all(deploy.join("backend/current")).unwrap();
        fs::write(deploy.join("backend/current/health_status"), "500").unwrap();
        assert_eq!(get(&health.url), 500);
        svc.fail_stop(true);
        assert!(!Command::new(&svc.stop)
            .args(["backend", "S1"])
            .status()
            .unwrap()
            .success());
    }
}
