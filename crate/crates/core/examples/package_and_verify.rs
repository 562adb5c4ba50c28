//! Assembles a bundle from built components, zips it with a manifest, and
//! shows verification catching a single flipped bit.

use std::path::Path;

use chrono::Utc;
use shiplight::config::PackagerSpec;
use shiplight::executor::{remote, Channel, ChannelOptions};
use shiplight::model::{CommitMeta, ComponentArtifact, ComponentKind};
use shiplight::packaging::archive::member_data_range;
use shiplight::packaging::{assemble_bundle, verify_bundle, zip_bundle};
use shiplight::stamp::StampAllocator;

fn artifact(
    ch: &Channel,
    root: &Path,
    kind: ComponentKind,
    files: &[(&str, &str)],
    stamp: &shiplight::stamp::ReleaseStamp,
) -> ComponentArtifact {
    for (rel, body) in files {
        let p = root.join(rel);
        remote::mkdir_p(ch, p.parent().unwrap()).unwrap();
        remote::write_file(ch, &p, body.as_bytes()).unwrap();
    }
    ComponentArtifact {
        kind,
        stamp: stamp.clone(),
        root: root.to_path_buf(),
        files: remote::tree_manifest(ch, root).unwrap(),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let t = tempfile::tempdir()?;
    let ch = Channel::local(ChannelOptions::default());
    let stamp = StampAllocator::system().next();
    let commit = CommitMeta::new("3f2a9c1d0e4b", "Add checkout page", Utc::now(), "main")?;

    let backend = artifact(
        &ch,
        &t.path().join("out/backend"),
        ComponentKind::Backend,
        &[("app.jar", "jar bytes"), ("lib/core.jar", "core")],
        &stamp,
    );
    let frontend = artifact(
        &ch,
        &t.path().join("out/frontend"),
        ComponentKind::Frontend,
        &[("index.html", "<h1>shop</h1>")],
        &stamp,
    );
    let config = t.path().join("config");
    std::fs::create_dir_all(&config)?;
    std::fs::write(config.join("app.conf"), "db=primary\n")?;

    let bundle_dir = t.path().join("bundle");
    assemble_bundle(&ch, &bundle_dir, &[backend, frontend], &stamp, Some(&config))?;
    let bundle = zip_bundle(
        &ch,
        &bundle_dir,
        &t.path().join("dist"),
        &commit,
        &stamp,
        "build-01",
        &PackagerSpec::Named("builtin".into()),
    )?;
    println!("archive {}", bundle.archive_path.display());
    println!("archive sha256 {}", bundle.manifest.archive_checksum);
    for e in &bundle.manifest.entries {
        println!("  {} {} {}", &e.sha256[..12], e.size, e.path);
    }
    let report = verify_bundle(&bundle.archive_path, &bundle.manifest);
    println!("clean copy verified: {}", report.verified());

    let damaged = t.path().join("damaged.zip");
    std::fs::copy(&bundle.archive_path, &damaged)?;
    let range = member_data_range(&damaged, "backend/app.jar")?;
    let mut bytes = std::fs::read(&damaged)?;
    bytes[range.start as usize] ^= 0x01;
    std::fs::write(&damaged, bytes)?;
    let report = verify_bundle(&damaged, &bundle.manifest);
    println!("damaged copy verified: {}", report.verified());
    for m in &report.mismatches {
        println!("  {m}");
    }
    Ok(())
}
