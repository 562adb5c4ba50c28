//! A full pipeline run against a local fixture: checkout, remote builds,
//! bundle, store, deploy, health check and notification. A second commit
//! breaks the health endpoint and the run rolls back.

use std::path::Path;

use shiplight::config::PipelineSpec;
use shiplight::orchestrator::Orchestrator;
use shiplight_testkit::{Fixture, SpecOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    let spec = PipelineSpec::from_toml_str(&fx.spec_toml(&SpecOptions::default()), Path::new("spec.toml"), &fx.root)?;
    let orch = Orchestrator::new(spec);

    let run = orch.run("main");
    println!("{} {} (exit {})", run.stamp, run.state.as_str(), run.exit_code());
    for r in &run.reports {
        println!(
            "  {:<16} {:>7.3}s {:?} {}",
            r.stage.to_string(),
            r.duration,
            r.outcome,
            r.detail
        );
    }
    println!("download: {}", run.download_link.as_deref().unwrap_or("-"));
    println!(
        "frontend live -> {}",
        std::fs::read_link(fx.live_dir("frontend"))?.display()
    );

    fx.repo
        .commit_file("backend/health_status", "500", "Break the health endpoint");
    let run = orch.run("main");
    println!("{} {} (exit {})", run.stamp, run.state.as_str(), run.exit_code());
    println!(
        "  failed at {:?}: {}",
        run.failed_stage,
        run.error.as_deref().unwrap_or("")
    );
    for (target, backup) in &run.backup_refs {
        println!("  backup for {target}: {backup}");
    }
    println!(
        "frontend live -> {}",
        std::fs::read_link(fx.live_dir("frontend"))?.display()
    );
    println!("run record: {}", run.run_dir().join("run.json").display());
    Ok(())
}
