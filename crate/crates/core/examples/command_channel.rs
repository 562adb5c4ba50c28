//! Runs commands on a host through an allow-listed channel and uses the
//! file helpers the pipeline builds on.

use std::collections::BTreeMap;
use std::time::Duration;

use shiplight::executor::{channel_stats, remote, Channel, ChannelOptions, CommandPolicy, ExecError};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let host = tempfile::tempdir()?;
    let ch = Channel::local(ChannelOptions {
        policy: CommandPolicy::standard(["echo", "sleep"]),
        default_timeout: Duration::from_secs(10),
        ..Default::default()
    });
    println!("session {} on {}", ch.session_id(), ch.host_label());

    let r = ch.run(&["echo", "hello from the build host"])?;
    println!("echo exited {}: {}", r.exit_code, r.stdout_text().trim());

    match ch.run(&["curl", "https://example.com"]) {
        Err(ExecError::CommandDenied { program }) => println!("refused before sending: {program}"),
        other => println!("unexpected: {other:?}"),
    }

    let argv = vec!["sleep".to_string(), "5".to_string()];
    match ch.run_command(&argv, Duration::from_millis(300), &BTreeMap::new()) {
        Err(e @ ExecError::CommandTimeout { .. }) => println!("{e}"),
        other => println!("unexpected: {other:?}"),
    }

    let releases = host.path().join("releases");
    for name in ["a", "b"] {
        remote::mkdir_p(&ch, &releases.join(name))?;
        remote::write_file(&ch, &releases.join(name).join("index.html"), name.as_bytes())?;
    }
    let current = host.path().join("current");
    remote::symlink_swap(&ch, "releases/a", &current)?;
    remote::symlink_swap(&ch, "releases/b", &current)?;
    println!("current -> {:?}", remote::read_link(&ch, &current)?);
    println!(
        "live index.html: {}",
        String::from_utf8_lossy(&remote::read_file(&ch, &current.join("index.html"))?)
    );
    for entry in remote::tree_manifest(&ch, &releases)? {
        println!("{} {} {}", entry.sha256, entry.size, entry.path);
    }

    ch.close();
    let (opened, closed) = channel_stats();
    println!("channels opened {opened}, closed {closed}");
    Ok(())
}
