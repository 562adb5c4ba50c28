//! Bounded worker pool for pipeline runs.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

/// Counting semaphore limiting how many runs execute at once.
#[derive(Debug)]
pub struct WorkerPool {
    limit: usize,
    busy: Mutex<usize>,
    freed: Condvar,
}

impl WorkerPool {
    pub fn new(limit: usize) -> Arc<Self> {
        Arc::new(WorkerPool {
            limit: limit.max(1),
            busy: Mutex::new(0),
            freed: Condvar::new(),
        })
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn busy(&self) -> usize {
        *self.busy.lock().unwrap()
    }

    /// Waits for a free slot.
    pub fn acquire(self: &Arc<Self>) -> Slot {
        let started = Instant::now();
        let mut busy = self.busy.lock().unwrap();
        while *busy >= self.limit {
            busy = self.freed.wait(busy).unwrap();
        }
        *busy += 1;
        Slot {
            pool: self.clone(),
            waited: started.elapsed(),
        }
    }
}

/// A held pool slot; freed on drop.
#[derive(Debug)]
pub struct Slot {
    pool: Arc<WorkerPool>,
    waited: Duration,
}

impl Slot {
    pub fn waited(&self) -> Duration {
        self.waited
    }
}

impl Drop for Slot {
    fn drop(&mut self) {
        let mut busy = self.pool.busy.lock().unwrap_or_else(|e| e.into_inner());
        *busy -= 1;
        self.pool.freed.notify_one();
    }
}
