//! Notification payloads for a successful and a failed run, delivered to a
//! file sink, a command sink and a sink that always fails.

use std::path::Path;

use shiplight::config::PipelineSpec;
use shiplight::orchestrator::Orchestrator;
use shiplight_testkit::{Fixture, SpecOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    let captured = fx.root.join("captured.jsonl");
    let mut toml = fx.spec_toml(&SpecOptions::default());
    toml.push_str(&format!(
        "\n[[notify]]\ntype = \"command\"\nargv = [\"sh\", \"-c\", \"cat >> {}; echo >> {}\"]\n",
        captured.display(),
        captured.display()
    ));
    toml.push_str("\n[[notify]]\ntype = \"command\"\nargv = [\"sh\", \"-c\", \"echo 'mailer down' >&2; exit 1\"]\n");
    let spec = PipelineSpec::from_toml_str(&toml, Path::new("spec.toml"), &fx.root)?;
    let orch = Orchestrator::new(spec);

    let ok = orch.run("main");
    fx.repo.commit_file("frontend/fail_build", "", "Break the frontend");
    let failed = orch.run("main");
    for run in [&ok, &failed] {
        let d = run.notification.clone().unwrap_or_default();
        println!(
            "{} {}: delivered {:?}, failed {:?}",
            run.stamp,
            run.state.as_str(),
            d.delivered,
            d.failed
        );
    }
    for mut n in fx.notifications() {
        if let Some(tail) = n.get_mut("log_tail") {
            let lines = tail.as_str().unwrap_or_default().lines().count();
            *tail = format!("<{lines} lines>").into();
        }
        println!("{}", serde_json::to_string_pretty(&n)?);
    }
    let captured = std::fs::read_to_string(&captured)?;
    println!(
        "command sink received {} payload(s)",
        captured.matches("\"kind\"").count()
    );
    Ok(())
}
