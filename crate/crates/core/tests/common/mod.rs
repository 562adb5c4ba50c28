//! Helpers shared by the integration suites and the acceptance run.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{TimeZone, Utc};
use proptest::prelude::*;
use proptest::strategy::ValueTree;
use proptest::test_runner::TestRunner;

use shiplight::checksum::{scan_tree, sha256_file};
use shiplight::config::{HealthCheckSpec, PipelineSpec, StatusRange};
use shiplight::deploy::{self, health_check, DeployContext, DeployTargetState};
use shiplight::executor::{Channel, ChannelOptions, CommandPolicy};
use shiplight::model::{archive_file_name, CommitMeta, ComponentKind, FileEntry, ReleaseInfo};
use shiplight::orchestrator::PipelineRun;
use shiplight::packaging::archive::{list_members, member_data_range, pack};
use shiplight::packaging::verify_bundle;
use shiplight::stamp::ReleaseStamp;
use shiplight::store::{ArtifactStore, StoreError};
use shiplight_testkit::{Fixture, HealthServer, ServiceStub, SpecOptions};

pub fn load_spec(fx: &Fixture, opts: &SpecOptions) -> PipelineSpec {
    PipelineSpec::from_toml_str(&fx.spec_toml(opts), Path::new("spec.toml"), &fx.root).expect("fixture spec parses")
}

/// Stamp `n` seconds after a fixed instant.
pub fn stamp_at(n: u64) -> ReleaseStamp {
    let base = Utc.with_ymd_and_hms(2030, 1, 1, 0, 0, 0).unwrap();
    ReleaseStamp::from_datetime(base + chrono::Duration::seconds(n as i64))
}

/// File checksums of whatever `path` resolves to; empty when it is missing.
pub fn snapshot(path: &Path) -> Vec<FileEntry> {
    match std::fs::canonicalize(path) {
        Ok(real) => scan_tree(&real).unwrap_or_default(),
        Err(_) => Vec::new(),
    }
}

pub fn write_tree(root: &Path, files: &BTreeMap<String, Vec<u8>>) {
    for (rel, data) in files {
        let p = root.join(rel);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, data).unwrap();
    }
}

/// Small random file trees: 1 to 8 files up to three levels deep.
pub fn tree_strategy() -> impl Strategy<Value = BTreeMap<String, Vec<u8>>> {
    let path = prop::collection::vec("[a-z0-9_]{1,8}", 1..4).prop_map(|parts| parts.join("/"));
    prop::collection::btree_map(path, prop::collection::vec(any::<u8>(), 0..600), 1..8).prop_map(|mut files| {
        let paths: Vec<String> = files.keys().cloned().collect();
        for p in &paths {
            let prefix = format!("{p}/");
            if paths.iter().any(|q| q.starts_with(&prefix)) {
                files.remove(p);
            }
        }
        files
    })
}

/// One value from `strategy`, drawn with `runner`.
pub fn draw<S: Strategy>(strategy: &S, runner: &mut TestRunner) -> S::Value {
    strategy.new_tree(runner).expect("strategy yields a value").current()
}

pub fn commit_for(n: u64) -> CommitMeta {
    CommitMeta::new(format!("{n:040x}"), format!("change {n}"), Utc::now(), "main").unwrap()
}

/// What one publish-verify-overwrite-corrupt cycle observed.
#[derive(Debug)]
pub struct StoreCheck {
    pub verified: bool,
    pub manifest_total: bool,
    pub overwrite_rejected: bool,
    pub original_intact: bool,
    pub flipped_member: String,
    pub flip_mismatches: Vec<String>,
}

impl StoreCheck {
    pub fn holds(&self) -> bool {
        self.verified
            && self.manifest_total
            && self.overwrite_rejected
            && self.original_intact
            && self.flip_mismatches.len() == 1
            && self.flip_mismatches[0].starts_with(&self.flipped_member)
    }
}

/// Packs `files` under `backend/`, publishes the archive as `stamp`, checks
/// it verifies, tries to publish over it, then flips one bit of one member
/// in a copy and verifies that.
pub fn store_cycle(
    store: &ArtifactStore,
    scratch: &Path,
    n: u64,
    files: &BTreeMap<String, Vec<u8>>,
    pick: usize,
) -> StoreCheck {
    let stamp = stamp_at(n);
    let commit = commit_for(n);
    let bundle = scratch.join(format!("bundle-{n}"));
    let prefixed: BTreeMap<String, Vec<u8>> = files.iter().map(|(k, v)| (format!("backend/{k}"), v.clone())).collect();
    write_tree(&bundle, &prefixed);
    std::fs::write(
        bundle.join("RELEASE.json"),
        serde_json::to_vec(&ReleaseInfo::new(&stamp, &commit, "test-host")).unwrap(),
    )
    .unwrap();
    let archive = scratch.join(archive_file_name(&stamp, &commit));
    let manifest = pack(&bundle, &archive).unwrap();
    let stored = store.publish_local(&archive, &manifest, &commit).unwrap();

    let verified = verify_bundle(&stored.archive, &stored.manifest).verified();
    let mut members: Vec<String> = list_members(&stored.archive)
        .unwrap()
        .into_iter()
        .filter(|m| !m.ends_with('/'))
        .collect();
    members.sort();
    let listed: Vec<String> = stored.manifest.entries.iter().map(|e| e.path.clone()).collect();
    let manifest_total = members == listed;

    let before = sha256_file(&stored.archive).unwrap();
    let overwrite_rejected = matches!(
        store.publish_local(&archive, &manifest, &commit),
        Err(StoreError::DuplicateStamp { .. })
    );
    let original_intact = sha256_file(&stored.archive).unwrap() == before;

    let candidates: Vec<&FileEntry> = stored.manifest.entries.iter().filter(|e| e.size > 0).collect();
    let target = candidates[pick % candidates.len()];
    let corrupt = scratch.join(format!("corrupt-{n}.zip"));
    std::fs::copy(&stored.archive, &corrupt).unwrap();
    let range = member_data_range(&corrupt, &target.path).unwrap();
    let offset = range.start + (pick as u64 % (range.end - range.start));
    let mut bytes = std::fs::read(&corrupt).unwrap();
    bytes[offset as usize] ^= 1 << (pick % 8);
    std::fs::write(&corrupt, bytes).unwrap();
    let report = verify_bundle(&corrupt, &stored.manifest);
    StoreCheck {
        verified,
        manifest_total,
        overwrite_rejected,
        original_intact,
        flipped_member: target.path.clone(),
        flip_mismatches: report.mismatches.iter().map(|m| m.to_string()).collect(),
    }
}

pub fn channel_with(policy: CommandPolicy) -> Channel {
    Channel::local(ChannelOptions {
        policy,
        default_timeout: Duration::from_secs(60),
        ..Default::default()
    })
}

/// Files of the release deployed as `stamp` in the promotion watch.
fn watched_release(stamp: &ReleaseStamp) -> BTreeMap<String, Vec<u8>> {
    [
        "BUILD",
        "index.html",
        "assets/app.js",
        "assets/vendor.js",
        "assets/img/logo.svg",
    ]
    .iter()
    .map(|name| {
        let body = if *name == "BUILD" {
            stamp.to_string()
        } else {
            format!("{stamp}:{name}:{}", "x".repeat(64))
        };
        (name.to_string(), body.into_bytes())
    })
    .collect()
}

fn read_all(root: &Path) -> std::io::Result<BTreeMap<String, Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let entry = entry?;
            let p = entry.path();
            if entry.file_type()?.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p)?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Default)]
pub struct WatchOutcome {
    pub deploys: usize,
    pub observations: u64,
    pub releases_seen: usize,
    pub violations: Vec<String>,
}

/// Deploys `count` frontend releases while a reader resolves `current`
/// every millisecond and checks it reaches one complete release.
pub fn promotion_watch(count: usize) -> WatchOutcome {
    let t = tempfile::tempdir().unwrap();
    let root = t.path().join("deploy");
    let ctx = DeployContext::new(&root);
    let ch = channel_with(CommandPolicy::default());
    let current = root.join("frontend").join("current");
    let stop = Arc::new(AtomicBool::new(false));
    let live = Arc::new(AtomicBool::new(false));
    let observations = Arc::new(AtomicU64::new(0));
    let violations = Arc::new(Mutex::new(Vec::new()));
    let seen = Arc::new(Mutex::new(std::collections::BTreeSet::new()));

    let reader = {
        let (stop, live, observations, violations, seen, current) = (
            stop.clone(),
            live.clone(),
            observations.clone(),
            violations.clone(),
            seen.clone(),
            current.clone(),
        );
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(1));
                let was_live = live.load(Ordering::SeqCst);
                let resolved = match std::fs::canonicalize(&current) {
                    Ok(p) => p,
                    Err(e) => {
                        if was_live {
                            violations.lock().unwrap().push(format!("current did not resolve: {e}"));
                        }
                        continue;
                    }
                };
                observations.fetch_add(1, Ordering::SeqCst);
                let tree = match read_all(&resolved) {
                    Ok(t) => t,
                    Err(e) => {
                        violations.lock().unwrap().push(format!("{}: {e}", resolved.display()));
                        continue;
                    }
                };
                let Some(stamp) = tree
                    .get("BUILD")
                    .and_then(|b| String::from_utf8(b.clone()).ok())
                    .and_then(|s| ReleaseStamp::parse(&s).ok())
                else {
                    violations
                        .lock()
                        .unwrap()
                        .push(format!("{}: no BUILD marker", resolved.display()));
                    continue;
                };
                if tree != watched_release(&stamp) {
                    violations
                        .lock()
                        .unwrap()
                        .push(format!("{}: partial or mixed tree", resolved.display()));
                    continue;
                }
                seen.lock().unwrap().insert(stamp);
            }
        })
    };

    let scratch = t.path().join("builds");
    let mut outcome = WatchOutcome::default();
    for i in 0..count {
        let stamp = stamp_at(i as u64);
        let tree = scratch.join(stamp.as_str());
        write_tree(&tree, &watched_release(&stamp));
        let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Frontend).unwrap();
        let point = deploy::backup_target(&ch, &state, &stamp, ctx.retention).unwrap();
        deploy::deploy_target(&ch, &ctx, &mut state, &point, &stamp, &tree).unwrap();
        live.store(true, Ordering::SeqCst);
        outcome.deploys += 1;
        std::thread::sleep(Duration::from_millis(3));
    }
    std::thread::sleep(Duration::from_millis(20));
    stop.store(true, Ordering::SeqCst);
    reader.join().unwrap();
    outcome.observations = observations.load(Ordering::SeqCst);
    outcome.releases_seen = seen.lock().unwrap().len();
    outcome.violations = violations.lock().unwrap().clone();
    outcome
}

#[derive(Debug, Default)]
pub struct FidelityOutcome {
    pub cycles: usize,
    pub failures_caught: usize,
    pub mismatches: Vec<String>,
}

fn health_spec(url: &str) -> HealthCheckSpec {
    HealthCheckSpec {
        url: url.to_string(),
        timeout_secs: 1.0,
        attempts: 2,
        delay_secs: 0.02,
        success_statuses: vec![StatusRange { low: 200, high: 299 }],
    }
}

/// Deploys a good backend release, then a release whose health check
/// fails, rolls back, and compares the live tree with its state before the
/// failed deploy. Every other cycle the displaced release directory is
/// tampered with first, so the restore must come from the backup copy.
pub fn rollback_fidelity(cycles: usize, seed: u64) -> FidelityOutcome {
    let t = tempfile::tempdir().unwrap();
    let services = ServiceStub::install(t.path());
    let root = t.path().join("deploy");
    let health = HealthServer::start(&root, &services);
    let hc = health_spec(&health.url);
    let mut ctx = DeployContext::new(&root);
    ctx.stop_script = Some(services.stop.to_string_lossy().into_owned());
    ctx.start_script = Some(services.start.to_string_lossy().into_owned());
    let ch = channel_with(CommandPolicy::standard([
        ctx.stop_script.clone().unwrap(),
        ctx.start_script.clone().unwrap(),
    ]));
    let mut runner = TestRunner::new_with_rng(
        proptest::test_runner::Config::default(),
        proptest::test_runner::TestRng::from_seed(proptest::test_runner::RngAlgorithm::ChaCha, &seed_bytes(seed)),
    );
    let strategy = tree_strategy();
    let current = root.join("backend").join("current");
    let mut outcome = FidelityOutcome::default();

    for i in 0..cycles {
        let good_stamp = stamp_at(2 * i as u64);
        let bad_stamp = stamp_at(2 * i as u64 + 1);

        let mut good = draw(&strategy, &mut runner);
        good.insert("config/app.conf".into(), format!("cycle={i}\n").into_bytes());
        let good_dir = t.path().join("trees").join(good_stamp.as_str());
        write_tree(&good_dir, &good);
        let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Backend).unwrap();
        let point = deploy::backup_target(&ch, &state, &good_stamp, ctx.retention).unwrap();
        deploy::deploy_target(&ch, &ctx, &mut state, &point, &good_stamp, &good_dir).unwrap();
        if !health_check(&hc).healthy {
            outcome
                .mismatches
                .push(format!("cycle {i}: good release reported unhealthy"));
        }
        // An operator edit to the live config.
        std::fs::write(current.join("config/app.conf"), format!("cycle={i}\nedited=true\n")).unwrap();
        let before = snapshot(&current);

        let mut bad = draw(&strategy, &mut runner);
        bad.insert("health_status".into(), b"500".to_vec());
        let bad_dir = t.path().join("trees").join(bad_stamp.as_str());
        write_tree(&bad_dir, &bad);
        let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Backend).unwrap();
        let point = deploy::backup_target(&ch, &state, &bad_stamp, ctx.retention).unwrap();
        deploy::deploy_target(&ch, &ctx, &mut state, &point, &bad_stamp, &bad_dir).unwrap();
        if i % 2 == 1 {
            let displaced = root.join("backend/releases").join(good_stamp.as_str());
            std::fs::write(displaced.join("config/app.conf"), "tampered\n").unwrap();
        }
        if health_check(&hc).healthy {
            outcome
                .mismatches
                .push(format!("cycle {i}: failing release passed its health check"));
            continue;
        }
        outcome.failures_caught += 1;
        match deploy::rollback(&ch, &ctx, &mut state, &point, Some(&hc)) {
            Ok(_) => {}
            Err(e) => {
                outcome.mismatches.push(format!("cycle {i}: rollback failed: {e}"));
                continue;
            }
        }
        let after = snapshot(&current);
        if after != before {
            outcome
                .mismatches
                .push(format!("cycle {i}: live tree differs from the pre-deploy snapshot"));
        }
        if services.running("backend").as_deref() != Some(good_stamp.as_str()) {
            outcome
                .mismatches
                .push(format!("cycle {i}: service not restarted on {good_stamp}"));
        }
        outcome.cycles += 1;
    }
    outcome
}

fn seed_bytes(seed: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (i, chunk) in out.chunks_mut(8).enumerate() {
        chunk.copy_from_slice(&(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64)).to_le_bytes());
    }
    out
}

/// Everything a run left behind on the build host: labelled containers,
/// workspace entries other than logs, and bundle staging directories.
pub fn leftovers(fx: &Fixture, run: &PipelineRun) -> Vec<String> {
    let stamp = run.stamp.as_str();
    let mut out: Vec<String> = fx
        .engine
        .labelled(stamp)
        .iter()
        .map(|c| format!("container {} ({})", c.name, c.status))
        .collect();
    for pid in fx.engine.live_processes() {
        out.push(format!("container process {pid} still running"));
    }
    let run_dir = fx.work_root.join(stamp);
    if let Ok(kinds) = std::fs::read_dir(&run_dir) {
        for kind in kinds.flatten() {
            for entry in std::fs::read_dir(kind.path()).into_iter().flatten().flatten() {
                if entry.file_name() != "logs" {
                    out.push(format!("workspace entry {}", entry.path().display()));
                }
            }
        }
    }
    for staging in ["bundle", "dist"] {
        let p = fx.work_root.join(staging).join(stamp);
        if p.exists() {
            out.push(format!("staging {}", p.display()));
        }
    }
    out
}

pub fn deploy_trees(fx: &Fixture) -> Vec<(PathBuf, Vec<FileEntry>)> {
    ["backend", "frontend"]
        .iter()
        .map(|t| {
            let live = fx.live_dir(t);
            let snap = snapshot(&live);
            (live, snap)
        })
        .collect()
}

pub fn run_once(fx: &Fixture, opts: &SpecOptions, source_ref: &str) -> PipelineRun {
    shiplight::orchestrator::Orchestrator::new(load_spec(fx, opts)).run(source_ref)
}

/// Maps a download link under the fixture's base URL to the store file.
pub fn resolve_link(fx: &Fixture, link: &str) -> Option<PathBuf> {
    let rel = link.strip_prefix("https://artifacts.example/releases/")?;
    Some(fx.store_root.join(rel))
}

/// Problems with the notifications written for `runs`: each run must have
/// exactly one, of the kind matching its state, carrying the required keys;
/// success links must fetch a bundle that verifies.
pub fn notification_problems(fx: &Fixture, runs: &[&PipelineRun]) -> Vec<String> {
    use shiplight::orchestrator::RunState;
    let mut problems = Vec::new();
    let all = fx.notifications();
    for run in runs {
        let stamp = run.stamp.as_str();
        let mine: Vec<&serde_json::Value> = all.iter().filter(|n| n["stamp"] == stamp).collect();
        if mine.len() != 1 {
            problems.push(format!("{stamp}: {} notifications", mine.len()));
            continue;
        }
        let n = mine[0];
        let want_kind = if run.state == RunState::Succeeded {
            "success"
        } else {
            "failure"
        };
        if n["kind"] != want_kind {
            problems.push(format!("{stamp}: kind {} for state {}", n["kind"], run.state));
        }
        if n["state"] != run.state.as_str() {
            problems.push(format!("{stamp}: state {}", n["state"]));
        }
        for key in ["id", "message", "time", "branch"] {
            if !n["commit"][key].is_string() {
                problems.push(format!("{stamp}: commit.{key} missing"));
            }
        }
        if !n["severity"].is_string() {
            problems.push(format!("{stamp}: severity missing"));
        }
        if want_kind == "success" {
            if !n["backup_ref"].is_object() {
                problems.push(format!("{stamp}: backup_ref missing"));
            }
            match n["download_link"].as_str().and_then(|l| resolve_link(fx, l)) {
                None => problems.push(format!("{stamp}: download_link missing")),
                Some(archive) => {
                    let manifest =
                        shiplight::packaging::archive::read_manifest(&shiplight::packaging::sidecar_path(&archive));
                    match manifest {
                        Ok(m) if verify_bundle(&archive, &m).verified() => {}
                        Ok(_) => problems.push(format!("{stamp}: linked bundle fails verification")),
                        Err(e) => problems.push(format!("{stamp}: linked bundle unreadable: {e}")),
                    }
                }
            }
        } else {
            for key in ["failed_stage", "log_tail", "error"] {
                if !n[key].is_string() {
                    problems.push(format!("{stamp}: {key} missing"));
                }
            }
            if run.rollback.is_some() != n["rollback"].is_object() {
                problems.push(format!("{stamp}: rollback outcome missing"));
            }
            let alert = n["severity"] == "alert";
            if alert != run.alert {
                problems.push(format!("{stamp}: severity {} with alert={}", n["severity"], run.alert));
            }
        }
    }
    problems
}

/// Sum of stage durations fits in the run, and every report is finished.
pub fn reports_consistent(run: &PipelineRun) -> bool {
    let total: f64 = run.reports.iter().map(|r| r.duration).sum();
    total <= run.duration + 1e-6 && run.reports.iter().all(|r| r.duration >= 0.0)
}

/// Kills the backend build container of the run in progress, once it is
/// running. Returns its name.
pub fn kill_backend_build(fx: &Fixture) -> Option<String> {
    let c = fx.engine.wait_running("backend", Duration::from_secs(60))?;
    fx.engine.kill(&c.name).then_some(c.name)
}

/// `releases list` answered by this process through the CLI entry point.
pub fn releases_list_answers(fx: &Fixture) -> bool {
    let store = fx.store_root.to_string_lossy().into_owned();
    shiplight::cli::main_with_args(["shiplight", "releases", "list", "--store", &store]) == 0
}
