//! Acceptance criteria at full scale. Prints one PASS/FAIL line per
//! criterion, then fails if any criterion failed.
//!
//! Run with `cargo test --release -p shiplight --test acceptance -- --nocapture`
//! to see the lines.

mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use shiplight::model::Stage;
use shiplight::orchestrator::{overlapping_deploys, run_concurrent, Orchestrator, PipelineRun, RunState};
use shiplight::report::{emit_stage_table, improvement_pct, Comparison, METRICS};
use shiplight::store::ArtifactStore;
use shiplight_testkit::{Fixture, SpecOptions, SshDaemon};

use common::{
    deploy_trees, kill_backend_build, leftovers, load_spec, notification_problems, promotion_watch,
    releases_list_answers, rollback_fidelity, run_once, store_cycle, tree_strategy,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn within(start: Instant, limit: Duration) -> (bool, String) {
    let took = start.elapsed();
    (
        took < limit,
        format!("{:.1}s of {}s", took.as_secs_f64(), limit.as_secs()),
    )
}

/// Fixtures with the runs made in them, for the notification check.
type Ledger = Vec<(Fixture, Vec<PipelineRun>)>;

fn controller_offload(ledger: &mut Ledger) -> Outcome {
    let start = Instant::now();
    let burn = SpecOptions {
        backend_burn_s: 10.0,
        ..Default::default()
    };
    let fx_local = Fixture::new();
    let local = run_once(
        &fx_local,
        &SpecOptions {
            mode: "local",
            ..burn.clone()
        },
        "main",
    );

    let fx_light = Fixture::new();
    let daemon = SshDaemon::start(&fx_light.root.join("sshd"));
    let (light, via) = match &daemon {
        Ok(d) => {
            let remote = SpecOptions {
                packager: Some(vec![env!("CARGO_BIN_EXE_shiplight").to_string(), "pack".to_string()]),
                ..burn.clone()
            };
            let text = fx_light.ssh_spec_toml(&remote, d);
            let spec = shiplight::config::PipelineSpec::from_toml_str(
                &text,
                std::path::Path::new("spec.toml"),
                &fx_light.root,
            )
            .expect("ssh spec parses");
            (Orchestrator::new(spec).run("main"), "ssh")
        }
        Err(_) => (run_once(&fx_light, &burn, "main"), "local executor"),
    };
    drop(daemon);

    let cpu = |r: &PipelineRun| r.controller.map(|c| c.cpu_time_s).unwrap_or(f64::NAN);
    let (cl, cg) = (cpu(&local), cpu(&light));
    let ratio = cg / cl;
    let (fast, took) = within(start, Duration::from_secs(120));
    let ok = local.state == RunState::Succeeded && light.state == RunState::Succeeded;
    let detail = format!(
        "controller cpu local {cl:.2}s, light {cg:.2}s ({via}), ratio {:.1}%, {took}{}",
        ratio * 100.0,
        if ok {
            String::new()
        } else {
            format!(", runs {} / {}", local.state, light.state)
        }
    );
    ledger.push((fx_local, vec![local]));
    ledger.push((fx_light, vec![light]));
    Outcome {
        pass: ok && ratio <= 0.5 && fast,
        detail,
    }
}

fn atomic_promotion() -> Outcome {
    let start = Instant::now();
    let w = promotion_watch(100);
    let (fast, took) = within(start, Duration::from_secs(300));
    Outcome {
        pass: w.deploys == 100 && w.violations.is_empty() && w.observations > 0 && fast,
        detail: format!(
            "{} deploys, {} observations, {} releases seen, {} violations, {took}",
            w.deploys,
            w.observations,
            w.releases_seen,
            w.violations.len()
        ),
    }
}

fn rollback_fidelity_check() -> Outcome {
    let start = Instant::now();
    let f = rollback_fidelity(50, 0x5eed);
    let (fast, took) = within(start, Duration::from_secs(300));
    Outcome {
        pass: f.cycles == 50 && f.failures_caught == 50 && f.mismatches.is_empty() && fast,
        detail: format!(
            "{} cycles, {} health failures caught, {} mismatches, {took}{}",
            f.cycles,
            f.failures_caught,
            f.mismatches.len(),
            f.mismatches
                .first()
                .map(|m| format!(" (first: {m})"))
                .unwrap_or_default()
        ),
    }
}

fn store_soundness() -> Outcome {
    let start = Instant::now();
    let t = tempfile::tempdir().unwrap();
    let store = ArtifactStore::new(t.path().join("store"));
    let next = AtomicU64::new(0);
    let failures = AtomicU64::new(0);
    let mut runner = TestRunner::new(Config {
        cases: 200,
        failure_persistence: None,
        ..Config::default()
    });
    let result = runner.run(&(tree_strategy(), any::<usize>()), |(files, pick)| {
        let n = next.fetch_add(1, Ordering::SeqCst);
        let scratch = t.path().join(format!("case-{n}"));
        std::fs::create_dir_all(&scratch).unwrap();
        let check = store_cycle(&store, &scratch, n, &files, pick);
        if !check.holds() {
            failures.fetch_add(1, Ordering::SeqCst);
        }
        prop_assert!(check.holds(), "{check:?}");
        Ok(())
    });
    let cases = next.load(Ordering::SeqCst);
    let (fast, took) = within(start, Duration::from_secs(180));
    Outcome {
        pass: result.is_ok() && cases >= 200 && fast,
        detail: format!(
            "{cases} trees, {} failing, {took}{}",
            failures.load(Ordering::SeqCst),
            result.err().map(|e| format!(" ({e})")).unwrap_or_default()
        ),
    }
}

fn ephemerality(ledger: &mut Ledger) -> Outcome {
    let fx = Fixture::new();
    let opts = SpecOptions::default();
    let mut runs = Vec::new();
    runs.push(run_once(&fx, &opts, "main"));
    fx.repo.commit_file("backend/fail_build", "", "break the build");
    runs.push(run_once(&fx, &opts, "main"));
    fx.repo.delete("backend/fail_build");
    fx.repo.commit_file("backend/sleep_build", "30", "slow build");
    fx.engine.keep_killed(true);
    let killed = {
        let spec = load_spec(&fx, &opts);
        let handle = std::thread::spawn(move || Orchestrator::new(spec).run("main"));
        let victim = kill_backend_build(&fx);
        (victim, handle.join().unwrap())
    };
    runs.push(killed.1);
    let states: Vec<String> = runs.iter().map(|r| r.state.to_string()).collect();
    let expected = [RunState::Succeeded, RunState::Failed, RunState::Failed];
    let shapes = runs.iter().map(|r| r.state).eq(expected) && killed.0.is_some();
    let left: Vec<String> = runs.iter().flat_map(|r| leftovers(&fx, r)).collect();
    let detail = format!(
        "runs {}, {} leftovers{}",
        states.join("/"),
        left.len(),
        left.first().map(|l| format!(" (first: {l})")).unwrap_or_default()
    );
    ledger.push((fx, runs));
    Outcome {
        pass: shapes && left.is_empty(),
        detail,
    }
}

fn failure_injection(ledger: &mut Ledger) -> Outcome {
    let fx = Fixture::new();
    let opts = SpecOptions::default();
    let first = run_once(&fx, &opts, "main");
    let before = deploy_trees(&fx);
    fx.repo.commit_file("backend/sleep_build", "30", "slow build");
    let spec = load_spec(&fx, &opts);
    let handle = std::thread::spawn(move || Orchestrator::new(spec).run("main"));
    let victim = kill_backend_build(&fx);
    let during = releases_list_answers(&fx);
    let run = handle.join().unwrap();
    let after = releases_list_answers(&fx);
    let deploy_reports = run.reports.iter().filter(|r| r.stage.is_deploy()).count();
    let unchanged = deploy_trees(&fx) == before;
    let pass = first.state == RunState::Succeeded
        && victim.is_some()
        && run.state == RunState::Failed
        && run.failed_stage == Some(Stage::BuildBackend)
        && deploy_reports == 0
        && unchanged
        && during
        && after;
    let detail = format!(
        "state {}, failed stage {}, {deploy_reports} deploy reports, tree {}, releases list during {during} after {after}",
        run.state,
        run.failed_stage.map(|s| s.as_str()).unwrap_or("-"),
        if unchanged { "unchanged" } else { "CHANGED" }
    );
    ledger.push((fx, vec![first, run]));
    Outcome { pass, detail }
}

fn concurrency(ledger: &mut Ledger) -> Outcome {
    let fx = Fixture::new();
    fx.services.stop_delay(0.5);
    let orch = Orchestrator::new(load_spec(&fx, &SpecOptions::default()));
    let runs = run_concurrent(&orch, &vec!["main".to_string(); 10]);
    let lock_waits = runs
        .iter()
        .filter(|r| {
            std::fs::read_to_string(&r.log_path)
                .unwrap_or_default()
                .contains("for deploy targets")
        })
        .count();
    let succeeded = runs.iter().filter(|r| r.state == RunState::Succeeded).count();
    let overlaps = overlapping_deploys(&runs);
    let mut waits: Vec<f64> = runs.iter().map(|r| r.queue_wait).collect();
    waits.sort_by(f64::total_cmp);
    let median = (waits[4] + waits[5]) / 2.0;
    let detail = format!(
        "{succeeded}/10 succeeded, {} overlapping deploy pairs, {lock_waits} runs waited for deploy locks, median queue wait {median:.2}s (max {:.2}s)",
        overlaps.len(),
        waits[9]
    );
    ledger.push((fx, runs));
    Outcome {
        pass: succeeded == 10 && overlaps.is_empty() && median < 10.0,
        detail,
    }
}

const PUBLISHED: [(&str, f64, f64, f64); 7] = [
    ("backend_build_s", 126.67, 95.0, 25.0),
    ("frontend_build_s", 86.25, 69.0, 20.0),
    ("packaging_s", 8.33, 5.0, 40.0),
    ("frontend_deploy_s", 0.50, 0.30, 40.0),
    ("backend_deploy_s", 0.55, 0.33, 40.0),
    ("controller_cpu_peak_pct", 82.0, 42.0, 49.0),
    ("controller_ram_peak_mb", 1680.0, 820.0, 51.0),
];

fn report_reproduction(ledger: &mut Ledger) -> Outcome {
    let mut tables = Vec::new();
    for mode in ["local", "light"] {
        let fx = Fixture::new();
        let opts = SpecOptions {
            mode,
            backend_burn_s: 2.0,
            frontend_burn_s: 1.0,
            ..Default::default()
        };
        let runs: Vec<PipelineRun> = (0..5).map(|_| run_once(&fx, &opts, "main")).collect();
        let all_ok = runs.iter().all(|r| r.state == RunState::Succeeded);
        tables.push((emit_stage_table(&runs, mode), all_ok));
        ledger.push((fx, runs));
    }
    let measured = Comparison::join(&tables[0].0, &tables[1].0);
    println!("{}", measured.to_text());
    let populated = measured.rows.len() == METRICS.len()
        && measured
            .rows
            .iter()
            .all(|r| r.local > 0.0 && r.light.is_finite() && r.light >= 0.0 && r.improvement_pct.is_finite());

    let published = Comparison::from_values(["local", "light"], PUBLISHED.iter().map(|(m, a, b, _)| (*m, *a, *b)));
    let misses: Vec<String> = PUBLISHED
        .iter()
        .filter(|(m, a, b, want)| {
            improvement_pct(*a, *b).round() != *want
                || published.row(m).map(|r| r.improvement_pct.round()) != Some(*want)
        })
        .map(|(m, ..)| m.to_string())
        .collect();
    let rounded: Vec<String> = published
        .rows
        .iter()
        .map(|r| format!("{:.0}%", r.improvement_pct))
        .collect();
    Outcome {
        pass: tables.iter().all(|t| t.1) && populated && misses.is_empty(),
        detail: format!(
            "{} measured rows populated: {populated}; published values give {}",
            measured.rows.len(),
            rounded.join(", ")
        ),
    }
}

fn notification_contract(ledger: &Ledger) -> Outcome {
    let mut runs = 0;
    let mut problems = Vec::new();
    for (fx, group) in ledger {
        runs += group.len();
        let refs: Vec<&PipelineRun> = group.iter().collect();
        problems.extend(notification_problems(fx, &refs));
    }
    Outcome {
        pass: runs > 0 && problems.is_empty(),
        detail: format!(
            "{runs} terminal runs, {} problems{}",
            problems.len(),
            problems.first().map(|p| format!(" (first: {p})")).unwrap_or_default()
        ),
    }
}

#[test]
fn acceptance() {
    let mut ledger: Ledger = Vec::new();
    let results: Vec<(&str, Outcome)> = vec![
        ("1 controller offload", controller_offload(&mut ledger)),
        ("2 atomic promotion", atomic_promotion()),
        ("3 rollback fidelity", rollback_fidelity_check()),
        ("4 immutability and manifest soundness", store_soundness()),
        ("5 ephemerality", ephemerality(&mut ledger)),
        ("6 failure injection", failure_injection(&mut ledger)),
        ("7 concurrency", concurrency(&mut ledger)),
        ("8 report reproduction", report_reproduction(&mut ledger)),
        ("9 notification contract", notification_contract(&ledger)),
    ];

    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    }
    let failed: Vec<&str> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
