//! The `shiplight` binary end to end.

use std::path::Path;
use std::process::{Command, Output};

use shiplight::orchestrator::{PipelineRun, RunState};
use shiplight::packaging::archive::member_data_range;
use shiplight_testkit::{Fixture, SpecOptions};

fn shiplight(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shiplight"))
        .args(args)
        .output()
        .unwrap()
}

fn text(out: &Output) -> String {
    format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    )
}

fn record(out: &Output) -> PipelineRun {
    let line = String::from_utf8_lossy(&out.stdout)
        .lines()
        .find_map(|l| l.strip_prefix("record: ").map(str::to_string))
        .expect("record line");
    PipelineRun::load(Path::new(&line)).unwrap()
}

fn spec(fx: &Fixture) -> String {
    fx.write_spec("spec.toml", &fx.spec_toml(&SpecOptions::default()))
        .to_string_lossy()
        .into_owned()
}

#[test]
fn run_verify_list_and_report() {
    let fx = Fixture::new();
    let spec = spec(&fx);
    let out = shiplight(&["run", "--spec", &spec, "--ref", "main"]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let run = record(&out);
    assert_eq!(run.state, RunState::Succeeded);
    assert!(text(&out).contains("download: https://artifacts.example/releases/"));

    let archive = run.archive.clone().unwrap();
    let archive_s = archive.to_string_lossy().into_owned();
    let out = shiplight(&["verify", &archive_s]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("OK"));

    let corrupt = fx.root.join("corrupt.zip");
    std::fs::copy(&archive, &corrupt).unwrap();
    let range = member_data_range(&corrupt, "backend/app.txt").unwrap();
    let mut bytes = std::fs::read(&corrupt).unwrap();
    bytes[range.start as usize] ^= 0x10;
    std::fs::write(&corrupt, bytes).unwrap();
    let manifest = format!("{archive_s}.manifest.json");
    let out = shiplight(&["verify", corrupt.to_str().unwrap(), "--manifest", &manifest]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    let mismatches: Vec<String> = text(&out)
        .lines()
        .filter(|l| l.starts_with("mismatch "))
        .map(str::to_string)
        .collect();
    assert_eq!(mismatches.len(), 1, "{}", text(&out));
    assert!(mismatches[0].contains("backend/app.txt"));

    let out = shiplight(&["releases", "list", "--spec", &spec]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).lines().next().unwrap().starts_with(run.stamp.as_str()));

    let runs = format!("{}/*/run.json", fx.runs_dir.display());
    let json = fx.root.join("light.json");
    let out = shiplight(&[
        "report",
        "--runs",
        &runs,
        "--mode",
        "light",
        "--out",
        json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("Backend build (s)"));
    let out = shiplight(&[
        "report",
        "--runs",
        &runs,
        "--mode",
        "local",
        "--compare",
        json.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    assert!(text(&out).contains("improvement"));
}

#[test]
fn failing_health_exits_one_and_manual_rollback_works() {
    let fx = Fixture::new();
    let spec = spec(&fx);
    let first = shiplight(&["run", "--spec", &spec, "--ref", "main"]);
    assert_eq!(first.status.code(), Some(0), "{}", text(&first));
    let good = record(&first);
    fx.repo.commit_file("frontend/index.html", "<h1>v2</h1>\n", "v2");
    let second = shiplight(&["run", "--spec", &spec, "--ref", "main"]);
    assert_eq!(second.status.code(), Some(0), "{}", text(&second));

    let out = shiplight(&[
        "rollback",
        "--spec",
        &spec,
        "--target",
        "frontend",
        "--to",
        good.stamp.as_str(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let old = Command::new("git")
        .arg("-C")
        .arg(&fx.repo.path)
        .args(["show", &format!("{}:frontend/index.html", good.commit.id)])
        .output()
        .unwrap();
    assert_eq!(
        std::fs::read(fx.live_dir("frontend").join("index.html")).unwrap(),
        old.stdout
    );

    fx.repo.commit_file("backend/health_status", "500", "unhealthy");
    let out = shiplight(&["run", "--spec", &spec, "--ref", "main"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert_eq!(record(&out).state, RunState::RolledBack);
    assert!(text(&out).contains("rollback backend: restored"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(shiplight(&["run"]).status.code(), Some(2));
    assert_eq!(shiplight(&["frobnicate"]).status.code(), Some(2));
    let out = shiplight(&["run", "--spec", "/nonexistent/spec.toml", "--ref", "main"]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
}
