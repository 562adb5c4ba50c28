//! HTTP health gate run from the controller after a backend restart.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::config::HealthCheckSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthAttempt {
    pub attempt: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub status: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub elapsed: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthResult {
    pub url: String,
    pub healthy: bool,
    pub attempts: Vec<HealthAttempt>,
    pub duration: f64,
}

impl HealthResult {
    /// One line per attempt, for logs and notifications.
    pub fn log_lines(&self) -> Vec<String> {
        self.attempts
            .iter()
            .map(|a| match (&a.status, &a.error) {
                (Some(s), _) => format!("attempt {}: {} -> {} ({:.2}s)", a.attempt, self.url, s, a.elapsed),
                (None, Some(e)) => format!(
                    "attempt {}: {} -> error: {} ({:.2}s)",
                    a.attempt, self.url, e, a.elapsed
                ),
                _ => format!("attempt {}: {}", a.attempt, self.url),
            })
            .collect()
    }

    pub fn summary(&self) -> String {
        let last = self.log_lines().pop().unwrap_or_default();
        if self.healthy {
            format!("healthy after {} attempt(s)", self.attempts.len())
        } else {
            format!("unhealthy after {} attempt(s); last {}", self.attempts.len(), last)
        }
    }
}

/// Probes `spec.url` until a response with an accepted status arrives or the
/// attempt budget runs out.
pub fn health_check(spec: &HealthCheckSpec) -> HealthResult {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(spec.timeout()))
        .http_status_as_error(false)
        .build()
        .into();
    let started = Instant::now();
    let mut attempts = Vec::new();
    let mut healthy = false;
    let budget = spec.attempts.max(1);
    for n in 1..=budget {
        let t = Instant::now();
        let (status, error) = match agent.get(&spec.url).call() {
            Ok(resp) => (Some(resp.status().as_u16()), None),
            Err(e) => (None, Some(e.to_string())),
        };
        let ok = status.is_some_and(|s| spec.accepts(s));
        log::debug!("health {} attempt {n}: {status:?} {error:?}", spec.url);
        attempts.push(HealthAttempt {
            attempt: n,
            status,
            error,
            elapsed: t.elapsed().as_secs_f64(),
        });
        if ok {
            healthy = true;
            break;
        }
        if n < budget {
            std::thread::sleep(spec.delay());
        }
    }
    HealthResult {
        url: spec.url.clone(),
        healthy,
        attempts,
        duration: started.elapsed().as_secs_f64(),
    }
}

/// Upper bound on how long [`health_check`] can take.
pub fn worst_case(spec: &HealthCheckSpec) -> Duration {
    spec.max_duration()
}
