//! Per-target exclusion between concurrent runs in one controller process.
//!
//! A run claims all of its targets at once, so two runs that share several
//! targets can never each hold half of them.

use std::collections::BTreeSet;
use std::sync::{Condvar, Mutex, OnceLock};
use std::time::{Duration, Instant};

struct Registry {
    held: Mutex<BTreeSet<String>>,
    freed: Condvar,
}

fn registry() -> &'static Registry {
    static REG: OnceLock<Registry> = OnceLock::new();
    REG.get_or_init(|| Registry {
        held: Mutex::new(BTreeSet::new()),
        freed: Condvar::new(),
    })
}

/// Key identifying one deploy target on one host.
pub fn target_key(host: &str, deploy_root: &std::path::Path, target: &str) -> String {
    format!("{host}:{}/{target}", deploy_root.display())
}

/// Held target locks; released on drop.
#[derive(Debug)]
pub struct TargetLocks {
    keys: BTreeSet<String>,
    waited: Duration,
}

impl TargetLocks {
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }

    /// Time spent blocked before the locks were granted.
    pub fn waited(&self) -> Duration {
        self.waited
    }
}

impl Drop for TargetLocks {
    fn drop(&mut self) {
        let reg = registry();
        let mut held = reg.held.lock().unwrap_or_else(|e| e.into_inner());
        for k in &self.keys {
            held.remove(k);
        }
        reg.freed.notify_all();
    }
}

/// Blocks until none of `keys` is held by another run, then takes them all.
pub fn lock_targets<I, S>(keys: I) -> TargetLocks
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let keys: BTreeSet<String> = keys.into_iter().map(Into::into).collect();
    let started = Instant::now();
    let reg = registry();
    let mut held = reg.held.lock().unwrap_or_else(|e| e.into_inner());
    while keys.iter().any(|k| held.contains(k)) {
        held = reg.freed.wait(held).unwrap_or_else(|e| e.into_inner());
    }
    held.extend(keys.iter().cloned());
    TargetLocks {
        keys,
        waited: started.elapsed(),
    }
}

/// Takes the locks only if all are free right now.
pub fn try_lock_targets<I, S>(keys: I) -> Option<TargetLocks>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let keys: BTreeSet<String> = keys.into_iter().map(Into::into).collect();
    let reg = registry();
    let mut held = reg.held.lock().unwrap_or_else(|e| e.into_inner());
    if keys.iter().any(|k| held.contains(k)) {
        return None;
    }
    held.extend(keys.iter().cloned());
    Some(TargetLocks {
        keys,
        waited: Duration::ZERO,
    })
}
