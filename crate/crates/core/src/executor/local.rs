use std::collections::BTreeMap;
use std::process::Command;

use super::Transport;

/// Runs commands as local subprocesses. Host paths are local paths.
#[derive(Debug, Default, Clone)]
pub struct LocalTransport;

impl LocalTransport {
    pub fn new() -> Self {
        LocalTransport
    }
}

impl Transport for LocalTransport {
    fn host_label(&self) -> String {
        "local".to_string()
    }

    fn is_local(&self) -> bool {
        true
    }

    fn command(&self, argv: &[String], env: &BTreeMap<String, String>) -> Command {
        let mut cmd = Command::new(&argv[0]);
        cmd.args(&argv[1..]).envs(env);
        cmd
    }
}
