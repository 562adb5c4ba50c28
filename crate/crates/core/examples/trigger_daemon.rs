//! Watches a directory for trigger files and runs a pipeline for each one.
//! Results land in `done/` or `failed/` next to the trigger.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use shiplight::orchestrator::daemon::{serve, DaemonOptions};
use shiplight_testkit::{wait_until, Fixture, SpecOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let fx = Fixture::new();
    let spec = fx.write_spec("spec.toml", &fx.spec_toml(&SpecOptions::default()));
    let watch = fx.root.join("triggers");
    std::fs::create_dir_all(&watch)?;
    let mut opts = DaemonOptions::new(&watch);
    opts.default_spec = Some(spec);
    opts.poll = Duration::from_millis(100);
    let stop = Arc::new(AtomicBool::new(false));
    let daemon = {
        let stop = stop.clone();
        std::thread::spawn(move || serve(&opts, stop))
    };

    std::fs::write(watch.join("deploy-main.json"), r#"{"source_ref": "main"}"#)?;
    std::fs::write(watch.join("garbled.json"), "{")?;
    let finished = wait_until(Duration::from_secs(120), || {
        watch.join("done/deploy-main.json").is_file()
    });
    stop.store(true, Ordering::SeqCst);
    let results = daemon.join().expect("daemon thread")?;
    println!("finished in time: {finished}");
    for r in &results {
        println!("{}", serde_json::to_string(r)?);
    }
    Ok(())
}
