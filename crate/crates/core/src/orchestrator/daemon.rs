//! Trigger-directory daemon.
//!
//! Each `*.json` file dropped into the watched directory holds
//! `{"source_ref": "...", "spec": "path/to/spec.toml"}` and starts one run.
//! Claimed triggers move to `.claimed/`; results land in `done/` (or
//! `failed/` for triggers that could not start).

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{Orchestrator, RunState, WorkerPool};
use crate::config::PipelineSpec;
use crate::stamp::{ReleaseStamp, StampAllocator};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trigger {
    pub source_ref: String,
    #[serde(default)]
    pub spec: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerResult {
    pub trigger: String,
    pub source_ref: String,
    #[serde(default)]
    pub stamp: Option<ReleaseStamp>,
    #[serde(default)]
    pub state: Option<RunState>,
    pub exit_code: i32,
    #[serde(default)]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct DaemonOptions {
    pub watch: PathBuf,
    /// Used when a trigger names no spec.
    pub default_spec: Option<PathBuf>,
    pub max_concurrent: usize,
    pub poll: Duration,
}

impl DaemonOptions {
    pub fn new(watch: impl Into<PathBuf>) -> Self {
        DaemonOptions {
            watch: watch.into(),
            default_spec: None,
            max_concurrent: 10,
            poll: Duration::from_millis(250),
        }
    }
}

fn write_json(path: &Path, value: &impl Serialize) {
    let body = serde_json::to_vec_pretty(value).expect("serializes");
    let tmp = path.with_extension("tmp");
    if let Err(e) = std::fs::write(&tmp, body).and_then(|_| std::fs::rename(&tmp, path)) {
        log::error!("cannot write {}: {e}", path.display());
    }
}

/// Pending trigger files, oldest name first.
fn pending(watch: &Path) -> Vec<PathBuf> {
    let Ok(rd) = std::fs::read_dir(watch) else {
        return Vec::new();
    };
    let mut out: Vec<PathBuf> = rd
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    out
}

struct Shared {
    stamps: Arc<StampAllocator>,
    pool: Arc<WorkerPool>,
    specs: Mutex<HashMap<PathBuf, Arc<PipelineSpec>>>,
}

impl Shared {
    fn spec(&self, path: &Path) -> Result<Arc<PipelineSpec>, String> {
        let mut cache = self.specs.lock().unwrap();
        if let Some(s) = cache.get(path) {
            return Ok(s.clone());
        }
        let spec = Arc::new(PipelineSpec::load(path).map_err(|e| e.to_string())?);
        cache.insert(path.to_path_buf(), spec.clone());
        Ok(spec)
    }
}

/// Watches `opts.watch` until `stop` is set, then waits for in-flight runs
/// (including any rollback they are doing) before returning their results.
pub fn serve(opts: &DaemonOptions, stop: Arc<AtomicBool>) -> std::io::Result<Vec<TriggerResult>> {
    let claimed = opts.watch.join(".claimed");
    let done = opts.watch.join("done");
    let failed = opts.watch.join("failed");
    for d in [&claimed, &done, &failed] {
        std::fs::create_dir_all(d)?;
    }
    let shared = Arc::new(Shared {
        stamps: Arc::new(StampAllocator::system()),
        pool: WorkerPool::new(opts.max_concurrent),
        specs: Mutex::new(HashMap::new()),
    });
    let results = Arc::new(Mutex::new(Vec::new()));
    let mut workers = Vec::new();
    log::info!(
        "watching {} (max {} concurrent runs)",
        opts.watch.display(),
        opts.max_concurrent
    );

    while !stop.load(Ordering::SeqCst) {
        for path in pending(&opts.watch) {
            let name = path.file_name().expect("file").to_string_lossy().into_owned();
            let claim = claimed.join(&name);
            if std::fs::rename(&path, &claim).is_err() {
                continue;
            }
            let reject = |error: String| {
                log::warn!("trigger {name}: {error}");
                let r = TriggerResult {
                    trigger: name.clone(),
                    source_ref: String::new(),
                    stamp: None,
                    state: None,
                    exit_code: 2,
                    error: Some(error),
                };
                write_json(&failed.join(&name), &r);
                results.lock().unwrap().push(r);
            };
            let trigger: Trigger = match std::fs::read(&claim)
                .map_err(|e| e.to_string())
                .and_then(|b| serde_json::from_slice(&b).map_err(|e| e.to_string()))
            {
                Ok(t) => t,
                Err(e) => {
                    reject(format!("bad trigger: {e}"));
                    continue;
                }
            };
            let spec_path = match trigger.spec.clone().or_else(|| opts.default_spec.clone()) {
                Some(p) if p.is_relative() => opts.watch.join(p),
                Some(p) => p,
                None => {
                    reject("trigger names no spec and no default was given".into());
                    continue;
                }
            };
            let spec = match shared.spec(&spec_path) {
                Ok(s) => s,
                Err(e) => {
                    reject(e);
                    continue;
                }
            };
            let (shared, results, done) = (shared.clone(), results.clone(), done.clone());
            workers.push(std::thread::spawn(move || {
                let orch = Orchestrator::new((*spec).clone())
                    .with_stamps(shared.stamps.clone())
                    .with_pool(shared.pool.clone());
                let run = orch.run(&trigger.source_ref);
                let r = TriggerResult {
                    trigger: name.clone(),
                    source_ref: trigger.source_ref.clone(),
                    stamp: Some(run.stamp.clone()),
                    state: Some(run.state),
                    exit_code: run.exit_code(),
                    error: run.error.clone(),
                };
                log::info!("trigger {name}: run {} {}", run.stamp, run.state);
                write_json(&done.join(&name), &r);
                results.lock().unwrap().push(r);
            }));
        }
        workers.retain(|w| !w.is_finished());
        std::thread::sleep(opts.poll);
    }
    log::info!("stopping; waiting for {} in-flight run(s)", workers.len());
    for w in workers {
        let _ = w.join();
    }
    let out = results.lock().unwrap().clone();
    Ok(out)
}
