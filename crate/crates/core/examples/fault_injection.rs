//! Injected faults: a transfer cut mid-stream is retried, a broken build
//! fails the run with its log tail, and a failing service start raises an
//! operator alert.

use std::path::Path;
use std::sync::Arc;

use shiplight::config::PipelineSpec;
use shiplight::executor::{Fault, FaultInjector, TransferDirection};
use shiplight::orchestrator::{Orchestrator, PipelineRun};
use shiplight_testkit::{Fixture, SpecOptions};

struct CutFirstFetch;

impl FaultInjector for CutFirstFetch {
    fn on_transfer(&self, direction: TransferDirection, attempt: u32) -> Option<Fault> {
        (direction == TransferDirection::FromHost && attempt == 1).then_some(Fault::InterruptAfter(64))
    }
}

fn show(label: &str, run: &PipelineRun) {
    println!(
        "{label}: {} exit {} alert {}",
        run.state.as_str(),
        run.exit_code(),
        run.alert
    );
    if let Some(e) = &run.error {
        println!("  {:?}: {e}", run.failed_stage);
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    let spec = PipelineSpec::from_toml_str(&fx.spec_toml(&SpecOptions::default()), Path::new("spec.toml"), &fx.root)?;

    let run = Orchestrator::new(spec.clone())
        .with_build_faults(Arc::new(CutFirstFetch))
        .run("main");
    show("interrupted transfers", &run);

    fx.repo.commit_file("backend/fail_build", "", "Break the build");
    show("broken build", &Orchestrator::new(spec.clone()).run("main"));
    fx.repo.delete("backend/fail_build");
    fx.repo.commit("Fix the build");

    fx.services.fail_start(true);
    show("service will not start", &Orchestrator::new(spec).run("main"));
    Ok(())
}
