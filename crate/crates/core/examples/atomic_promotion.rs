//! Deploys a series of frontend releases while a reader keeps resolving the
//! live link. Every read sees one complete release, never a mix.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{TimeZone, Utc};
use shiplight::deploy::{self, DeployContext, DeployTargetState};
use shiplight::executor::{Channel, ChannelOptions};
use shiplight::model::ComponentKind;
use shiplight::stamp::ReleaseStamp;

const FILES: [&str; 3] = ["index.html", "assets/app.js", "assets/app.css"];

fn write_release(dir: &Path, stamp: &ReleaseStamp) {
    for f in FILES {
        let p = dir.join(f);
        std::fs::create_dir_all(p.parent().unwrap()).unwrap();
        std::fs::write(p, stamp.as_str()).unwrap();
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = tempfile::tempdir()?;
    let ctx = DeployContext::new(t.path().join("deploy"));
    let ch = Channel::local(ChannelOptions::default());
    let current = t.path().join("deploy/frontend/current");

    let stop = Arc::new(AtomicBool::new(false));
    let seen = Arc::new(Mutex::new(BTreeSet::new()));
    let torn = Arc::new(Mutex::new(0usize));
    let reader = {
        let (stop, seen, torn, current) = (stop.clone(), seen.clone(), torn.clone(), current.clone());
        std::thread::spawn(move || {
            while !stop.load(Ordering::SeqCst) {
                let Ok(real) = std::fs::canonicalize(&current) else {
                    continue;
                };
                let bodies: BTreeSet<String> = FILES
                    .iter()
                    .filter_map(|f| std::fs::read_to_string(real.join(f)).ok())
                    .collect();
                match bodies.len() {
                    1 => {
                        seen.lock().unwrap().insert(bodies.into_iter().next().unwrap());
                    }
                    0 => {}
                    _ => *torn.lock().unwrap() += 1,
                }
            }
        })
    };

    let base = Utc.with_ymd_and_hms(2030, 6, 1, 12, 0, 0).unwrap();
    for n in 0..20 {
        let stamp = ReleaseStamp::from_datetime(base + chrono::Duration::seconds(n));
        let tree = t.path().join("builds").join(stamp.as_str());
        write_release(&tree, &stamp);
        let mut state = DeployTargetState::inspect(&ch, &ctx, ComponentKind::Frontend)?;
        let point = deploy::backup_target(&ch, &state, &stamp, ctx.retention)?;
        let deployed = deploy::deploy_target(&ch, &ctx, &mut state, &point, &stamp, &tree)?;
        if n % 5 == 0 {
            println!("promoted {} at {}", deployed.release, deployed.path.display());
        }
        std::thread::sleep(Duration::from_millis(5));
    }
    std::thread::sleep(Duration::from_millis(20));
    stop.store(true, Ordering::SeqCst);
    reader.join().unwrap();

    println!("live link -> {}", std::fs::read_link(&current)?.display());
    println!("releases observed by the reader: {}", seen.lock().unwrap().len());
    println!("torn reads: {}", torn.lock().unwrap());
    Ok(())
}
