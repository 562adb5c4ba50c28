//! The same contract run against the local transport and against a real
//! SSH connection to a throwaway daemon.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use shiplight::checksum::scan_tree;
use shiplight::executor::log::{MemoryLog, Stream};
use shiplight::executor::{
    open_channel, remote, Channel, ChannelOptions, CommandPolicy, Connector, ExecError, LocalTransport,
    RecordingTransport, SshOptions, SshTransport, Transport,
};
use shiplight::model::{HostRole, RemoteHost};
use shiplight_testkit::SshDaemon;

fn host_for(daemon: &SshDaemon) -> RemoteHost {
    RemoteHost {
        address: "127.0.0.1".into(),
        port: daemon.port,
        user: daemon.user.clone(),
        identity: daemon.identity.clone(),
        known_hosts: Some(daemon.known_hosts.clone()),
        role: HostRole::Build,
    }
}

fn ssh_daemon(dir: &Path) -> Option<SshDaemon> {
    match SshDaemon::start(dir) {
        Ok(d) => Some(d),
        Err(e) => {
            eprintln!("skipping ssh half of the contract: {e}");
            None
        }
    }
}

fn options(log: Arc<MemoryLog>, policy: CommandPolicy) -> ChannelOptions {
    ChannelOptions {
        policy,
        log,
        default_timeout: Duration::from_secs(30),
        ..Default::default()
    }
}

fn sample_tree(root: &Path) {
    std::fs::create_dir_all(root.join("a/b/c")).unwrap();
    std::fs::create_dir_all(root.join("empty-dir")).unwrap();
    std::fs::write(root.join("top.txt"), "hello\n").unwrap();
    std::fs::write(
        root.join("a/b/c/deep.bin"),
        (0..=255u8).cycle().take(70_000).collect::<Vec<u8>>(),
    )
    .unwrap();
    std::fs::write(root.join("a/empty"), "").unwrap();
    std::fs::write(root.join("a/name with spaces"), "x").unwrap();
}

/// Observable results of the contract, compared across transports.
#[derive(Debug, PartialEq)]
struct Observed {
    echo: (i32, String, String),
    exit7: i32,
    env: String,
    tree: Vec<shiplight::model::FileEntry>,
    exclusive: (bool, bool),
    link: Option<String>,
    file: Vec<u8>,
}

fn contract(ch: &Channel, log: &MemoryLog, scratch: &Path) -> Observed {
    let r = ch.run(&["sh", "-c", "echo out; echo err >&2"]).unwrap();
    let echo = (r.exit_code, r.stdout_text(), r.stderr_text());

    let exit7 = ch.run(&["sh", "-c", "exit 7"]).unwrap().exit_code;
    assert!(matches!(
        ch.run_ok(&["sh", "-c", "exit 7"]),
        Err(ExecError::CommandFailed { exit_code: 7, .. })
    ));

    let mut env = BTreeMap::new();
    env.insert("RELEASE_NAME".to_string(), "it's \"quoted\"".to_string());
    let env = ch
        .run_command(
            &["sh".into(), "-c".into(), "printf %s \"$RELEASE_NAME\"".into()],
            Duration::from_secs(10),
            &env,
        )
        .unwrap()
        .stdout_text();

    // Log completeness: the aggregated log carries exactly the captured bytes.
    let before = log.stream_bytes(ch.session_id(), Stream::Stdout).len();
    let r = ch.run(&["sh", "-c", "seq 1 2000"]).unwrap();
    let logged = log.stream_bytes(ch.session_id(), Stream::Stdout);
    assert_eq!(&logged[before..], &r.stdout[..]);

    match ch.run_command(
        &["sh".into(), "-c".into(), "echo started; sleep 20".into()],
        Duration::from_millis(800),
        &BTreeMap::new(),
    ) {
        Err(ExecError::CommandTimeout { partial, .. }) => assert!(partial.stdout_text().contains("started")),
        other => panic!("expected timeout, got {other:?}"),
    }

    assert!(matches!(
        ch.run(&["curl", "http://example.com"]),
        Err(ExecError::CommandDenied { .. })
    ));

    let local = scratch.join("local");
    sample_tree(&local);
    let remote_dir = scratch.join("remote/tree");
    let report = ch.copy_to_host(&local, &remote_dir).unwrap();
    assert_eq!(report.files, 4);
    let back = scratch.join("back");
    std::fs::create_dir_all(&back).unwrap();
    ch.copy_from_host(&remote_dir, &back).unwrap();
    let tree = scan_tree(&back).unwrap();
    assert_eq!(tree, scan_tree(&local).unwrap());
    assert!(back.join("empty-dir").is_dir());
    assert!(matches!(
        ch.copy_from_host(&scratch.join("nope"), &back),
        Err(ExecError::RemotePathMissing(_))
    ));

    let ws = scratch.join("ws");
    let exclusive = (
        remote::mkdir_exclusive(ch, &ws).unwrap(),
        remote::mkdir_exclusive(ch, &ws).unwrap(),
    );
    remote::symlink_swap(ch, "releases/one", &ws.join("current")).unwrap();
    remote::symlink_swap(ch, "releases/two", &ws.join("current")).unwrap();
    let link = remote::read_link(ch, &ws.join("current")).unwrap();
    remote::write_file(ch, &ws.join("data.bin"), &[0, 1, 2, 255, b'\n']).unwrap();
    let file = remote::read_file(ch, &ws.join("data.bin")).unwrap();

    Observed {
        echo,
        exit7,
        env,
        tree,
        exclusive,
        link,
        file,
    }
}

fn policy() -> CommandPolicy {
    CommandPolicy::standard(["seq", "printf"])
}

#[test]
fn local_and_ssh_transports_behave_alike() {
    let t = tempfile::tempdir().unwrap();
    let log = Arc::new(MemoryLog::new());
    let local = Channel::new(Box::new(LocalTransport::new()), options(log.clone(), policy()));
    std::fs::create_dir_all(t.path().join("local")).unwrap();
    let observed_local = contract(&local, &log, &t.path().join("local"));
    assert_eq!(observed_local.echo, (0, "out\n".into(), "err\n".into()));
    assert_eq!(observed_local.exit7, 7);
    assert_eq!(observed_local.env, "it's \"quoted\"");
    assert_eq!(observed_local.exclusive, (true, false));
    assert_eq!(observed_local.link.as_deref(), Some("releases/two"));
    local.close();

    let Some(daemon) = ssh_daemon(&t.path().join("sshd")) else {
        return;
    };
    let ssh = open_channel(
        &Connector::Ssh(SshOptions::default()),
        &host_for(&daemon),
        Duration::from_secs(10),
        options(log.clone(), policy()),
    )
    .expect("ssh channel");
    assert!(!ssh.is_local());
    std::fs::create_dir_all(t.path().join("ssh")).unwrap();
    let observed_ssh = contract(&ssh, &log, &t.path().join("ssh"));
    assert_eq!(observed_local, observed_ssh);
    ssh.close();
    assert!(!ssh.is_open());
    assert!(matches!(ssh.run(&["true"]), Err(ExecError::ChannelClosed)));
}

fn assert_nothing_denied_reached(seen: &[Vec<String>], policy: &CommandPolicy) {
    for argv in seen {
        assert!(policy.permits(&argv[0]), "{argv:?} reached the transport");
    }
}

fn exercise_denials(ch: &Channel) {
    for argv in [
        vec!["curl", "-s", "http://x"],
        vec!["/bin/sh", "-c", "true"],
        vec!["bash", "-c", "true"],
        vec!["sh;rm", "-rf", "/"],
        vec!["", "x"],
    ] {
        assert!(
            matches!(ch.run(&argv), Err(ExecError::CommandDenied { .. })),
            "{argv:?}"
        );
    }
    ch.run_ok(&["true"]).unwrap();
}

#[test]
fn denied_commands_never_reach_the_transport() {
    let policy = CommandPolicy::only(["true", "sh"]);
    let (rec, seen) = RecordingTransport::new(LocalTransport::new());
    let ch = Channel::new(Box::new(rec), options(Arc::new(MemoryLog::new()), policy.clone()));
    exercise_denials(&ch);
    let seen = seen.lock().unwrap().clone();
    assert_eq!(seen.len(), 1);
    assert_nothing_denied_reached(&seen, &policy);

    let t = tempfile::tempdir().unwrap();
    let Some(daemon) = ssh_daemon(t.path()) else {
        return;
    };
    let transport = SshTransport::connect(&host_for(&daemon), Duration::from_secs(10), &SshOptions::default()).unwrap();
    let (rec, seen) = RecordingTransport::new(transport);
    let ch = Channel::new(Box::new(rec), options(Arc::new(MemoryLog::new()), policy.clone()));
    exercise_denials(&ch);
    assert_nothing_denied_reached(&seen.lock().unwrap(), &policy);
    ch.close();
}

#[test]
fn ssh_connection_failures_are_classified() {
    let t = tempfile::tempdir().unwrap();
    let Some(daemon) = ssh_daemon(t.path()) else {
        return;
    };
    let opts = SshOptions::default();

    let mut forged = host_for(&daemon);
    forged.known_hosts = Some(daemon.forged_known_hosts());
    let err = SshTransport::connect(&forged, Duration::from_secs(10), &opts).unwrap_err();
    assert!(matches!(err, ExecError::HostKeyRejected { .. }), "{err}");

    let mut unpinned = host_for(&daemon);
    unpinned.known_hosts = None;
    let err = SshTransport::connect(&unpinned, Duration::from_secs(10), &opts).unwrap_err();
    assert!(matches!(err, ExecError::HostKeyRejected { .. }), "{err}");

    let mut stranger = host_for(&daemon);
    stranger.identity = daemon.stranger_identity();
    let err = SshTransport::connect(&stranger, Duration::from_secs(10), &opts).unwrap_err();
    assert!(matches!(err, ExecError::AuthFailure { .. }), "{err}");

    let mut closed = host_for(&daemon);
    closed.port = free_port();
    let err = SshTransport::connect(&closed, Duration::from_secs(5), &opts).unwrap_err();
    assert!(
        matches!(err, ExecError::Unreachable { .. } | ExecError::ConnectTimeout { .. }),
        "{err}"
    );
}

fn free_port() -> u16 {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    l.local_addr().unwrap().port()
}

#[test]
fn ssh_session_is_reused_and_survives_parallel_use() {
    let t = tempfile::tempdir().unwrap();
    let Some(daemon) = ssh_daemon(t.path()) else {
        return;
    };
    let transport = SshTransport::connect(&host_for(&daemon), Duration::from_secs(10), &SshOptions::default()).unwrap();
    assert!(transport.healthy());
    let control: PathBuf = transport.control_path().to_path_buf();
    let ch = Arc::new(Channel::new(
        Box::new(transport),
        options(Arc::new(MemoryLog::new()), policy()),
    ));
    let handles: Vec<_> = (0..6)
        .map(|i| {
            let ch = ch.clone();
            std::thread::spawn(move || ch.run_ok(&["sh", "-c", &format!("echo {i}")]).unwrap().stdout_text())
        })
        .collect();
    let mut outs: Vec<String> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    outs.sort();
    assert_eq!(outs, (0..6).map(|i| format!("{i}\n")).collect::<Vec<_>>());
    assert!(control.exists());
    ch.close();
    assert!(shiplight_testkit::wait_until(Duration::from_secs(5), || !control.exists()));
}
