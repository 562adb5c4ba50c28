//! Publishes stamped releases into the store, lists and fetches them, and
//! prunes old ones while keeping protected stamps.

use std::collections::BTreeSet;

use chrono::{TimeZone, Utc};
use shiplight::model::{archive_file_name, CommitMeta, ReleaseInfo};
use shiplight::packaging::archive::pack;
use shiplight::packaging::verify_bundle;
use shiplight::stamp::ReleaseStamp;
use shiplight::store::{ArtifactStore, StoreError};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = tempfile::tempdir()?;
    let store = ArtifactStore::new(t.path().join("store"))
        .with_base_url("https://artifacts.example/releases")
        .with_max_releases(3);

    let base = Utc.with_ymd_and_hms(2030, 1, 1, 9, 0, 0).unwrap();
    let mut stamps = Vec::new();
    for n in 0..5i64 {
        let time = base + chrono::Duration::minutes(n);
        let stamp = ReleaseStamp::from_datetime(time);
        let commit = CommitMeta::new(
            format!("{:08x}{}", (n + 1) * 0x0135_79bd, "0".repeat(32)),
            format!("change {n}"),
            time,
            "main",
        )?;
        let bundle = t.path().join(format!("bundle-{n}"));
        std::fs::create_dir_all(bundle.join("backend"))?;
        std::fs::write(bundle.join("backend/app.txt"), format!("release {n}\n"))?;
        std::fs::write(
            bundle.join("RELEASE.json"),
            serde_json::to_vec(&ReleaseInfo::new(&stamp, &commit, "build-01"))?,
        )?;
        let archive = t.path().join(archive_file_name(&stamp, &commit));
        let manifest = pack(&bundle, &archive)?;
        let stored = store.publish_local(&archive, &manifest, &commit)?;
        println!("published {} -> {}", stamp, store.download_link(&stamp)?);
        if n == 0 {
            match store.publish_local(&archive, &manifest, &commit) {
                Err(e @ StoreError::DuplicateStamp { .. }) => println!("  republish refused: {e}"),
                other => println!("  unexpected: {other:?}"),
            }
        }
        assert!(verify_bundle(&stored.archive, &stored.manifest).verified());
        stamps.push(stamp);
    }

    println!("store holds:");
    for r in store.list_releases()? {
        println!(
            "  {} {}",
            r.manifest.stamp,
            r.archive.file_name().unwrap().to_string_lossy()
        );
    }

    let fetched = store.fetch(&stamps[1], &t.path().join("fetched"))?;
    println!("fetched {}", fetched.display());

    let protected: BTreeSet<ReleaseStamp> = [stamps[0].clone()].into();
    let pruned = store.prune(&protected)?;
    println!("pruned {:?}", pruned.iter().map(|s| s.as_str()).collect::<Vec<_>>());
    let left: Vec<String> = store
        .list_releases()?
        .iter()
        .map(|r| r.manifest.stamp.to_string())
        .collect();
    println!("kept {left:?}");
    Ok(())
}
