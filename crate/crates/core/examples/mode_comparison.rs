//! Runs the same pipeline with builds on the controller and on the build
//! host, and prints per-stage timings and controller load side by side.

use std::path::Path;

use shiplight::config::PipelineSpec;
use shiplight::orchestrator::Orchestrator;
use shiplight::report::{emit_stage_table, Comparison};
use shiplight_testkit::{Fixture, SpecOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    let mut tables = Vec::new();
    for mode in ["local", "light"] {
        let opts = SpecOptions {
            mode,
            backend_burn_s: 1.0,
            frontend_burn_s: 0.5,
            ..Default::default()
        };
        let spec = PipelineSpec::from_toml_str(&fx.spec_toml(&opts), Path::new("spec.toml"), &fx.root)?;
        let orch = Orchestrator::new(spec);
        let runs: Vec<_> = (0..2).map(|_| orch.run("main")).collect();
        let table = emit_stage_table(&runs, mode);
        println!("{}", table.to_text());
        tables.push(table);
    }
    println!("{}", Comparison::join(&tables[0], &tables[1]).to_text());
    Ok(())
}
