//! Release stamps: the UTC second-precision timestamp that names one pipeline
//! run and everything it produces.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, NaiveDateTime, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

const STAMP_FORMAT: &str = "%Y%m%d-%H%M%SZ";

/// `YYYYMMDD-HHMMSSZ` in UTC.
///
/// Rendered stamps sort lexicographically in chronological order for every
/// instant between years 0000 and 9999.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ReleaseStamp(String);

impl ReleaseStamp {
    pub fn from_datetime(instant: DateTime<Utc>) -> Self {
        ReleaseStamp(instant.format(STAMP_FORMAT).to_string())
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let bytes = text.as_bytes();
        let shape_ok = bytes.len() == 16
            && bytes[..8].iter().all(u8::is_ascii_digit)
            && bytes[8] == b'-'
            && bytes[9..15].iter().all(u8::is_ascii_digit)
            && bytes[15] == b'Z';
        if !shape_ok || NaiveDateTime::parse_from_str(text, STAMP_FORMAT).is_err() {
            return Err(ModelError::InvalidStamp(text.to_string()));
        }
        Ok(ReleaseStamp(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn to_datetime(&self) -> DateTime<Utc> {
        let naive = NaiveDateTime::parse_from_str(&self.0, STAMP_FORMAT).expect("stamp validated at construction");
        Utc.from_utc_datetime(&naive)
    }
}

impl fmt::Display for ReleaseStamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ReleaseStamp {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReleaseStamp::parse(s)
    }
}

impl TryFrom<String> for ReleaseStamp {
    type Error = ModelError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        ReleaseStamp::parse(&value)
    }
}

impl From<ReleaseStamp> for String {
    fn from(value: ReleaseStamp) -> Self {
        value.0
    }
}

/// Source of the current UTC instant.
pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// A clock that only moves when told to, optionally stepping forward on
/// every read.
#[derive(Debug)]
pub struct ManualClock {
    now: Mutex<DateTime<Utc>>,
    step_per_read: chrono::Duration,
}

impl ManualClock {
    pub fn new(start: DateTime<Utc>) -> Self {
        ManualClock {
            now: Mutex::new(start),
            step_per_read: chrono::Duration::zero(),
        }
    }

    /// Every call to `now` returns the current value and then advances by `step`.
    pub fn stepping(start: DateTime<Utc>, step: chrono::Duration) -> Self {
        ManualClock {
            now: Mutex::new(start),
            step_per_read: step,
        }
    }

    pub fn set(&self, instant: DateTime<Utc>) {
        *self.now.lock().unwrap() = instant;
    }

    pub fn advance(&self, by: chrono::Duration) {
        let mut now = self.now.lock().unwrap();
        *now += by;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> DateTime<Utc> {
        let mut now = self.now.lock().unwrap();
        let current = *now;
        *now += self.step_per_read;
        current
    }
}

/// Renders the clock's current instant as a stamp.
pub fn make_release_stamp(clock: &dyn Clock) -> ReleaseStamp {
    ReleaseStamp::from_datetime(clock.now())
}

/// Hands out strictly increasing, never repeated stamps.
///
/// When the clock has not yet moved past the last issued stamp the allocator
/// waits for the next second instead of inventing sub-second suffixes.
pub struct StampAllocator {
    clock: Arc<dyn Clock>,
    issued: Mutex<BTreeSet<ReleaseStamp>>,
    poll: Duration,
}

impl StampAllocator {
    pub fn new(clock: Arc<dyn Clock>) -> Self {
        StampAllocator {
            clock,
            issued: Mutex::new(BTreeSet::new()),
            poll: Duration::from_millis(50),
        }
    }

    pub fn system() -> Self {
        StampAllocator::new(Arc::new(SystemClock))
    }

    pub fn clock(&self) -> &Arc<dyn Clock> {
        &self.clock
    }

    /// Next unused stamp. `claim` is consulted for candidates the allocator has
    /// not issued itself (for example a run directory left by an earlier
    /// process); returning `false` rejects the candidate and the allocator
    /// moves on to a later second.
    pub fn next_with(&self, mut claim: impl FnMut(&ReleaseStamp) -> bool) -> ReleaseStamp {
        let mut floor: Option<ReleaseStamp> = None;
        loop {
            let candidate = make_release_stamp(self.clock.as_ref());
            let mut issued = self.issued.lock().unwrap();
            let newest = issued.iter().next_back().cloned();
            let blocked_by = [newest, floor.clone()].into_iter().flatten().max();
            let fresh = blocked_by.as_ref().is_none_or(|b| candidate > *b);
            if fresh {
                if claim(&candidate) {
                    issued.insert(candidate.clone());
                    return candidate;
                }
                floor = Some(candidate);
                continue;
            }
            drop(issued);
            std::thread::sleep(self.poll);
        }
    }

    pub fn next(&self) -> ReleaseStamp {
        self.next_with(|_| true)
    }
}
