//! Controller resource accounting.
//!
//! The controller's load is its own process plus any child processes that do
//! controller-side work (builds run in controller-local mode). Children that
//! stand in for a remote host are not attributed. Linux only: reads
//! `/proc/self/stat` and `/proc/<pid>/{stat,status}`.

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Children whose CPU and memory count towards the controller.
#[derive(Debug, Default)]
pub struct ControllerLoad {
    live: Mutex<BTreeSet<i32>>,
    finished_cpu_micros: AtomicU64,
    finished_peak_rss_kb: AtomicU64,
}

impl ControllerLoad {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub(crate) fn track(&self, pid: i32) {
        self.live.lock().unwrap().insert(pid);
    }

    pub(crate) fn finish(&self, pid: i32, usage: &libc::rusage) {
        self.live.lock().unwrap().remove(&pid);
        let micros = timeval_micros(&usage.ru_utime) + timeval_micros(&usage.ru_stime);
        self.finished_cpu_micros.fetch_add(micros, Ordering::Relaxed);
        self.finished_peak_rss_kb
            .fetch_max(usage.ru_maxrss.max(0) as u64, Ordering::Relaxed);
    }

    pub(crate) fn forget(&self, pid: i32) {
        self.live.lock().unwrap().remove(&pid);
    }

    /// CPU consumed by attributed children and their descendants, finished
    /// or still running.
    pub fn child_cpu(&self) -> Duration {
        let live: Vec<i32> = self.live.lock().unwrap().iter().copied().collect();
        let running: u64 = if live.is_empty() {
            0
        } else {
            descendants_of(&live).iter().filter_map(|&p| proc_cpu_micros(p)).sum()
        };
        Duration::from_micros(self.finished_cpu_micros.load(Ordering::Relaxed) + running)
    }

    pub fn child_rss_bytes(&self) -> u64 {
        let live: Vec<i32> = self.live.lock().unwrap().iter().copied().collect();
        if live.is_empty() {
            return 0;
        }
        descendants_of(&live).iter().filter_map(|&p| proc_rss_bytes(p)).sum()
    }

    pub fn finished_peak_rss_bytes(&self) -> u64 {
        self.finished_peak_rss_kb.load(Ordering::Relaxed) * 1024
    }
}

fn timeval_micros(tv: &libc::timeval) -> u64 {
    (tv.tv_sec.max(0) as u64) * 1_000_000 + tv.tv_usec.max(0) as u64
}

/// CPU time of the calling process (all threads), excluding children.
pub fn self_cpu() -> Duration {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: getrusage writes into the provided struct only.
    let rc = unsafe { libc::getrusage(libc::RUSAGE_SELF, &mut usage) };
    if rc != 0 {
        return Duration::ZERO;
    }
    Duration::from_micros(timeval_micros(&usage.ru_utime) + timeval_micros(&usage.ru_stime))
}

fn clock_ticks() -> u64 {
    // SAFETY: sysconf has no side effects.
    let t = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if t > 0 {
        t as u64
    } else {
        100
    }
}

/// utime + stime + cutime + cstime of a live process, in microseconds.
fn proc_cpu_micros(pid: i32) -> Option<u64> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // The command name may contain spaces; fields resume after the last ')'.
    let rest = &stat[stat.rfind(')')? + 2..];
    let fields: Vec<&str> = rest.split_whitespace().collect();
    // rest[0] is field 3 (state); utime is field 14.
    let ticks: u64 = fields.get(11..15)?.iter().filter_map(|f| f.parse::<u64>().ok()).sum();
    Some(ticks * 1_000_000 / clock_ticks())
}

fn parent_of(pid: i32) -> Option<i32> {
    let stat = std::fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    let rest = &stat[stat.rfind(')')? + 2..];
    rest.split_whitespace().nth(1)?.parse().ok()
}

/// `roots` plus every live process descending from them.
fn descendants_of(roots: &[i32]) -> Vec<i32> {
    let mut tree: BTreeSet<i32> = roots.iter().copied().collect();
    let Ok(dir) = std::fs::read_dir("/proc") else {
        return tree.into_iter().collect();
    };
    let parents: Vec<(i32, i32)> = dir
        .filter_map(|e| e.ok()?.file_name().to_str()?.parse::<i32>().ok())
        .filter_map(|pid| Some((pid, parent_of(pid)?)))
        .collect();
    loop {
        let before = tree.len();
        for &(pid, ppid) in &parents {
            if tree.contains(&ppid) {
                tree.insert(pid);
            }
        }
        if tree.len() == before {
            break;
        }
    }
    tree.into_iter().collect()
}

fn proc_rss_bytes(pid: i32) -> Option<u64> {
    status_field_kb(&format!("/proc/{pid}/status"), "VmRSS:").map(|kb| kb * 1024)
}

fn status_field_kb(path: &str, key: &str) -> Option<u64> {
    let status = std::fs::read_to_string(path).ok()?;
    status
        .lines()
        .find(|l| l.starts_with(key))?
        .split_whitespace()
        .nth(1)?
        .parse()
        .ok()
}

pub fn self_rss_bytes() -> u64 {
    status_field_kb("/proc/self/status", "VmRSS:").map_or(0, |kb| kb * 1024)
}

/// Summary of one monitoring window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerUsage {
    /// CPU seconds attributed to the controller during the window.
    pub cpu_time_s: f64,
    /// Highest CPU utilisation over any sampling interval, in percent of one core.
    pub cpu_peak_pct: f64,
    pub rss_peak_mb: f64,
    pub samples: u32,
}

#[derive(Default)]
struct Peaks {
    cpu_peak_pct: f64,
    rss_peak: u64,
    samples: u32,
}

/// Samples controller CPU and memory at a fixed interval (1 Hz by default)
/// until stopped.
pub struct ControllerMonitor {
    load: Arc<ControllerLoad>,
    start_cpu: Duration,
    stop: Arc<AtomicBool>,
    peaks: Arc<Mutex<Peaks>>,
    handle: Option<JoinHandle<()>>,
}

impl ControllerMonitor {
    pub fn start(load: Arc<ControllerLoad>) -> Self {
        Self::start_with_interval(load, Duration::from_secs(1))
    }

    pub fn start_with_interval(load: Arc<ControllerLoad>, interval: Duration) -> Self {
        let total = {
            let load = load.clone();
            move || self_cpu() + load.child_cpu()
        };
        let start_cpu = total();
        let stop = Arc::new(AtomicBool::new(false));
        let peaks = Arc::new(Mutex::new(Peaks {
            rss_peak: self_rss_bytes() + load.child_rss_bytes(),
            samples: 1,
            ..Peaks::default()
        }));
        let handle = {
            let (stop, peaks, load) = (stop.clone(), peaks.clone(), load.clone());
            std::thread::Builder::new()
                .name("controller-monitor".into())
                .spawn(move || {
                    let mut last_cpu = total();
                    let mut last_at = Instant::now();
                    while !stop.load(Ordering::Relaxed) {
                        let tick = Instant::now() + interval;
                        while Instant::now() < tick && !stop.load(Ordering::Relaxed) {
                            std::thread::sleep(Duration::from_millis(10).min(interval));
                        }
                        let now_cpu = total();
                        let elapsed = last_at.elapsed().as_secs_f64();
                        let rss = self_rss_bytes() + load.child_rss_bytes();
                        let mut p = peaks.lock().unwrap();
                        if elapsed > 0.0 {
                            let pct = (now_cpu.saturating_sub(last_cpu)).as_secs_f64() / elapsed * 100.0;
                            p.cpu_peak_pct = p.cpu_peak_pct.max(pct);
                        }
                        p.rss_peak = p.rss_peak.max(rss);
                        p.samples += 1;
                        last_cpu = now_cpu;
                        last_at = Instant::now();
                    }
                })
                .expect("spawn monitor thread")
        };
        ControllerMonitor {
            load,
            start_cpu,
            stop,
            peaks,
            handle: Some(handle),
        }
    }

    pub fn finish(mut self) -> ControllerUsage {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        let cpu = (self_cpu() + self.load.child_cpu()).saturating_sub(self.start_cpu);
        let p = self.peaks.lock().unwrap();
        let rss_peak = p.rss_peak.max(self.load.finished_peak_rss_bytes() + self_rss_bytes());
        ControllerUsage {
            cpu_time_s: cpu.as_secs_f64(),
            cpu_peak_pct: p.cpu_peak_pct,
            rss_peak_mb: rss_peak as f64 / (1024.0 * 1024.0),
            samples: p.samples,
        }
    }
}

impl Drop for ControllerMonitor {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}
