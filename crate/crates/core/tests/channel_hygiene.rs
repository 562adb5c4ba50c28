//! Every channel a run opens is closed again, whatever the outcome.

mod common;

use shiplight::executor::channel_stats;
use shiplight::orchestrator::RunState;
use shiplight_testkit::{Fixture, SpecOptions};

use common::run_once;

#[test]
fn runs_close_every_channel_they_open() {
    let fx = Fixture::new();
    let opts = SpecOptions::default();
    let (opened0, closed0) = channel_stats();
    assert_eq!(run_once(&fx, &opts, "main").state, RunState::Succeeded);
    fx.repo.commit_file("backend/fail_build", "", "break");
    assert_eq!(run_once(&fx, &opts, "main").state, RunState::Failed);
    fx.repo.delete("backend/fail_build");
    fx.repo.commit_file("backend/health_status", "500", "unhealthy");
    assert_eq!(run_once(&fx, &opts, "main").state, RunState::RolledBack);
    let (opened, closed) = channel_stats();
    assert!(opened > opened0);
    assert_eq!(opened - opened0, closed - closed0);
}
