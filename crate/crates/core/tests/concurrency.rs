//! Many runs against one deploy target.

mod common;

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use shiplight::orchestrator::daemon::{serve, DaemonOptions, TriggerResult};
use shiplight::orchestrator::{overlapping_deploys, run_concurrent, Orchestrator, RunState};
use shiplight_testkit::{wait_until, Fixture, SpecOptions};

use common::{load_spec, notification_problems};

#[test]
fn concurrent_runs_deploy_one_at_a_time() {
    let fx = Fixture::new();
    // Deploys outlast the one-second stamp spacing, so they would overlap
    // without the target locks.
    fx.services.stop_delay(0.8);
    let orch = Orchestrator::new(load_spec(&fx, &SpecOptions::default()));
    let refs = vec!["main".to_string(); 6];
    let runs = run_concurrent(&orch, &refs);
    for run in &runs {
        assert_eq!(run.state, RunState::Succeeded, "{:?}", run.error);
    }
    assert!(overlapping_deploys(&runs).is_empty());
    let lock_waits = runs
        .iter()
        .filter(|r| {
            std::fs::read_to_string(&r.log_path)
                .unwrap()
                .contains("for deploy targets")
        })
        .count();
    assert!(lock_waits > 0, "no run ever waited for a deploy lock");
    let mut stamps: Vec<_> = runs.iter().map(|r| r.stamp.clone()).collect();
    stamps.sort();
    stamps.dedup();
    assert_eq!(stamps.len(), runs.len());
    let refs: Vec<_> = runs.iter().collect();
    assert!(
        notification_problems(&fx, &refs).is_empty(),
        "{:?}",
        notification_problems(&fx, &refs)
    );
    // The last release promoted is the one live.
    let last = runs
        .iter()
        .max_by_key(|r| r.report(shiplight::model::Stage::DeployFrontend).unwrap().started)
        .unwrap();
    let live = std::fs::read_link(fx.live_dir("frontend")).unwrap();
    assert!(live.ends_with(last.stamp.as_str()), "{live:?}");
}

#[test]
fn daemon_runs_dropped_triggers() {
    let fx = Fixture::new();
    let spec = fx.write_spec("spec.toml", &fx.spec_toml(&SpecOptions::default()));
    let watch = fx.root.join("triggers");
    std::fs::create_dir_all(&watch).unwrap();
    let mut opts = DaemonOptions::new(&watch);
    opts.default_spec = Some(spec);
    opts.poll = Duration::from_millis(50);
    let stop = Arc::new(AtomicBool::new(false));
    let daemon = {
        let stop = stop.clone();
        std::thread::spawn(move || serve(&opts, stop))
    };
    std::fs::write(watch.join("a.json"), r#"{"source_ref": "main"}"#).unwrap();
    std::fs::write(watch.join("b.json"), r#"{"source_ref": "main"}"#).unwrap();
    std::fs::write(watch.join("c.json"), "not json").unwrap();
    let done = watch.join("done");
    assert!(wait_until(Duration::from_secs(120), || {
        done.join("a.json").is_file() && done.join("b.json").is_file()
    }));
    stop.store(true, Ordering::SeqCst);
    let results = daemon.join().unwrap().unwrap();
    assert_eq!(results.len(), 3);
    for name in ["a.json", "b.json"] {
        let r: TriggerResult = serde_json::from_slice(&std::fs::read(done.join(name)).unwrap()).unwrap();
        assert_eq!(r.state, Some(RunState::Succeeded), "{:?}", r.error);
        assert_eq!(r.exit_code, 0);
    }
    let bad: TriggerResult = serde_json::from_slice(&std::fs::read(watch.join("failed/c.json")).unwrap()).unwrap();
    assert_eq!(bad.exit_code, 2);
    assert!(watch.join(".claimed/a.json").is_file());
}
