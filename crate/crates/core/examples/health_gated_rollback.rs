//! Deploys a healthy backend, then one whose health endpoint answers 500,
//! and rolls back to the previous release with its live config edits.

use shiplight::config::{HealthCheckSpec, StatusRange};
use shiplight::deploy::{self, health_check, DeployContext, DeployTargetState};
use shiplight::executor::{Channel, ChannelOptions, CommandPolicy};
use shiplight::model::ComponentKind;
use shiplight::stamp::StampAllocator;
use shiplight_testkit::{HealthServer, ServiceStub};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = tempfile::tempdir()?;
    let services = ServiceStub::install(&t.path().join("tools"));
    let root = t.path().join("deploy");
    let health = HealthServer::start(&root, &services);
    let check = HealthCheckSpec {
        url: health.url.clone(),
        timeout_secs: 1.0,
        attempts: 3,
        delay_secs: 0.1,
        success_statuses: vec![StatusRange { low: 200, high: 299 }],
    };
    let mut ctx = DeployContext::new(&root);
    ctx.stop_script = Some(services.stop.to_string_lossy().into_owned());
    ctx.start_script = Some(services.start.to_string_lossy().into_owned());
    let ch = Channel::local(ChannelOptions {
        policy: CommandPolicy::standard([ctx.stop_script.clone().unwrap(), ctx.start_script.clone().unwrap()]),
        ..Default::default()
    });
    let stamps = StampAllocator::system();
    let current = root.join("backend/current");

    let good = stamps.next();
    let good_tree = t.path().join("builds/good");
    std::fs::create_dir_all(good_tree.join("config"))?;
    std::fs::write(good_tree.join("app.jar"), "v1")?;
    std::fs::write(good_tree.join("config/app.conf"), "pool=10\n")?;
    let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Backend)?;
    let point = deploy::backup_target(&ch, &state, &good, ctx.retention)?;
    deploy::deploy_target(&ch, &ctx, &mut state, &point, &good, &good_tree)?;
    println!("{good} healthy: {}", health_check(&check).healthy);
    std::fs::write(current.join("config/app.conf"), "pool=25\n")?;

    let bad = stamps.next();
    let bad_tree = t.path().join("builds/bad");
    std::fs::create_dir_all(&bad_tree)?;
    std::fs::write(bad_tree.join("app.jar"), "v2")?;
    std::fs::write(bad_tree.join("health_status"), "500")?;
    let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Backend)?;
    let point = deploy::backup_target(&ch, &state, &bad, ctx.retention)?;
    let deployed = deploy::deploy_target(&ch, &ctx, &mut state, &point, &bad, &bad_tree)?;
    println!(
        "{bad} deployed, config restored into it: {:?}",
        deployed.restored_config
    );
    let result = health_check(&check);
    for a in &result.attempts {
        println!("  attempt: {a:?}");
    }
    if !result.healthy {
        let report = deploy::rollback(&ch, &ctx, &mut state, &point, Some(&check))?;
        println!(
            "rolled back to {:?}, reused release dir: {}",
            report.restored, report.reused_release
        );
    }
    println!("live app.jar: {}", std::fs::read_to_string(current.join("app.jar"))?);
    println!(
        "live app.conf: {}",
        std::fs::read_to_string(current.join("config/app.conf"))?.trim()
    );
    println!("service running: {:?}", services.running("backend"));
    Ok(())
}
