//! A whole pipeline with both hosts reached over SSH.

mod common;

use std::path::Path;

use shiplight::config::{ExecutorKind, PipelineSpec};
use shiplight::orchestrator::{Orchestrator, RunState};
use shiplight_testkit::{Fixture, SpecOptions, SshDaemon};

use common::{deploy_trees, leftovers, notification_problems, reports_consistent};

fn ssh_spec(fx: &Fixture, daemon: &SshDaemon) -> PipelineSpec {
    let opts = SpecOptions {
        packager: Some(vec![env!("CARGO_BIN_EXE_shiplight").to_string(), "pack".to_string()]),
        ..Default::default()
    };
    PipelineSpec::from_toml_str(&fx.ssh_spec_toml(&opts, daemon), Path::new("spec.toml"), &fx.root).unwrap()
}

#[test]
fn ssh_runs_deploy_and_roll_back() {
    let fx = Fixture::new();
    let daemon = match SshDaemon::start(&fx.root.join("sshd")) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("skipping: {e}");
            return;
        }
    };
    let good = Orchestrator::new(ssh_spec(&fx, &daemon)).run("main");
    assert_eq!(good.state, RunState::Succeeded, "{:?}", good.error);
    assert_eq!(good.executor, ExecutorKind::Ssh);
    assert!(reports_consistent(&good));
    assert!(leftovers(&fx, &good).is_empty(), "{:?}", leftovers(&fx, &good));
    let before = deploy_trees(&fx);

    fx.repo.commit_file("backend/health_status", "500", "unhealthy");
    let bad = Orchestrator::new(ssh_spec(&fx, &daemon)).run("main");
    assert_eq!(bad.state, RunState::RolledBack, "{:?}", bad.error);
    assert_eq!(deploy_trees(&fx), before);
    assert!(notification_problems(&fx, &[&good, &bad]).is_empty());
}
