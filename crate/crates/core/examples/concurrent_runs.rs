//! Several pipeline runs started together. Builds proceed in parallel,
//! each run gets its own stamp, and deploys to a target never overlap.

use std::path::Path;

use shiplight::config::PipelineSpec;
use shiplight::orchestrator::{overlapping_deploys, run_concurrent, Orchestrator};
use shiplight_testkit::{Fixture, SpecOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    fx.services.stop_delay(0.5);
    let spec = PipelineSpec::from_toml_str(&fx.spec_toml(&SpecOptions::default()), Path::new("spec.toml"), &fx.root)?;
    let orch = Orchestrator::new(spec);
    let refs = vec!["main".to_string(); 4];
    let runs = run_concurrent(&orch, &refs);
    for run in &runs {
        println!(
            "{} {:<10} duration {:>5.2}s queue wait {:>5.2}s",
            run.stamp,
            run.state.as_str(),
            run.duration,
            run.queue_wait
        );
    }
    println!("overlapping deploys: {:?}", overlapping_deploys(&runs));
    println!(
        "frontend live -> {}",
        std::fs::read_link(fx.live_dir("frontend"))?.display()
    );
    Ok(())
}
