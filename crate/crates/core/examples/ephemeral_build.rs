//! One container build in a fresh workspace: labelled container, collected
//! outputs, failure mapping and the cleanup sweep. A fake engine stands in
//! for docker.

use std::time::Duration;

use shiplight::build::{cleanup_sweep, collect_outputs, ephemeral_container_build, prepare_workspace, ContainerRun};
use shiplight::executor::{Channel, ChannelOptions, CommandPolicy};
use shiplight::model::{BuilderImageRef, ComponentKind};
use shiplight::stamp::StampAllocator;
use shiplight_testkit::FakeEngine;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = tempfile::tempdir()?;
    let engine = FakeEngine::install(&t.path().join("tools"));
    let engine_path = engine.path.to_string_lossy().into_owned();
    let work_root = t.path().join("work");
    let ch = Channel::local(ChannelOptions {
        policy: CommandPolicy::standard([engine_path.clone()]),
        ..Default::default()
    });
    let stamp = StampAllocator::system().next();
    let image = BuilderImageRef::parse("maven:3.9.6-jdk17")?;

    let ws = prepare_workspace(&ch, &work_root, ComponentKind::Backend, &stamp)?;
    std::fs::write(ws.src().join("Main.java"), "class Main {}\n")?;
    let command: Vec<String> = [
        "sh",
        "-c",
        "mkdir -p target && cp Main.java target/app.jar && echo built",
    ]
    .map(String::from)
    .to_vec();
    let run = ContainerRun {
        engine: &engine_path,
        image: &image,
        workspace: &ws,
        kind: ComponentKind::Backend,
        stamp: &stamp,
        command: &command,
        timeout: Duration::from_secs(60),
        cache: None,
    };
    println!("{}", run.argv().join(" "));
    let result = ephemeral_container_build(&ch, &run)?;
    println!("build said: {}", result.stdout_text().trim());
    let artifact = collect_outputs(&ch, &ws, ComponentKind::Backend, &stamp, "target")?;
    for f in &artifact.files {
        println!("artifact {} ({} bytes)", f.path, f.size);
    }

    let failing: Vec<String> = ["sh", "-c", "echo 'compilation failed' >&2; exit 3"]
        .map(String::from)
        .to_vec();
    let ws2 = prepare_workspace(&ch, &work_root, ComponentKind::Frontend, &stamp)?;
    let run = ContainerRun {
        workspace: &ws2,
        kind: ComponentKind::Frontend,
        command: &failing,
        ..run
    };
    match ephemeral_container_build(&ch, &run) {
        Err(e) => println!("failed build: {e}"),
        Ok(_) => println!("unexpected success"),
    }

    let sweep = cleanup_sweep(&ch, &engine_path, &work_root, &stamp);
    println!("{}", sweep.summary());
    println!(
        "containers left with this stamp: {}",
        engine.labelled(stamp.as_str()).len()
    );
    Ok(())
}
