//! Release bundles: assembly on the build host, deterministic ZIP archive
//! with embedded `RELEASE.json`, sidecar checksum manifest, and verification.

pub mod archive;
pub mod deflate;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::sha256_file;
use crate::config::PackagerSpec;
use crate::executor::{remote, Channel, ExecError};
use crate::model::{archive_file_name, Bundle, BundleManifest, CommitMeta, ComponentArtifact, ReleaseInfo};
use crate::stamp::ReleaseStamp;

pub use self::archive::{sidecar_path, RELEASE_FILE};

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("artifact {kind} has stamp {found}, expected {expected}")]
    StampMismatch {
        kind: String,
        expected: ReleaseStamp,
        found: ReleaseStamp,
    },
    #[error("bundle directory {} already exists", .0.display())]
    BundleCollision(PathBuf),
    #[error("archiving failed: {0}")]
    ArchiveFailed(String),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Lays out `<bundle_dir>/{<kind>/..., config/}` on the build host from the
/// collected artifacts. `config_source` is a controller-side directory whose
/// contents go into `config/`; without it `config/` is left empty.
pub fn assemble_bundle(
    ch: &Channel,
    bundle_dir: &Path,
    artifacts: &[ComponentArtifact],
    stamp: &ReleaseStamp,
    config_source: Option<&Path>,
) -> Result<PathBuf, PackageError> {
    for a in artifacts {
        if &a.stamp != stamp {
            return Err(PackageError::StampMismatch {
                kind: a.kind.to_string(),
                expected: stamp.clone(),
                found: a.stamp.clone(),
            });
        }
    }
    if !remote::mkdir_exclusive(ch, bundle_dir)? {
        return Err(PackageError::BundleCollision(bundle_dir.to_path_buf()));
    }
    for a in artifacts {
        let dest = bundle_dir.join(a.kind.as_str());
        remote::mkdir_p(ch, &dest)?;
        let from = format!("{}/.", a.root.display());
        ch.run_ok(&["cp", "-a", &from, &dest.to_string_lossy()])?;
    }
    let config = bundle_dir.join("config");
    remote::mkdir_p(ch, &config)?;
    if let Some(src) = config_source.filter(|p| p.is_dir()) {
        ch.copy_to_host(src, &config)?;
    }
    Ok(bundle_dir.to_path_buf())
}

/// Writes `RELEASE.json` into the bundle, archives it into `dist_dir` with
/// the packager, and reads back the sidecar manifest.
pub fn zip_bundle(
    ch: &Channel,
    bundle_dir: &Path,
    dist_dir: &Path,
    commit: &CommitMeta,
    stamp: &ReleaseStamp,
    built_on: &str,
    packager: &PackagerSpec,
) -> Result<Bundle, PackageError> {
    let info = ReleaseInfo::new(stamp, commit, built_on);
    let info_json = serde_json::to_vec_pretty(&info).expect("release info serializes");
    remote::write_file(ch, &bundle_dir.join(RELEASE_FILE), &info_json)?;
    remote::mkdir_p(ch, dist_dir)?;
    let archive_path = dist_dir.join(archive_file_name(stamp, commit));

    let manifest = match packager {
        PackagerSpec::Named(name) if name == "builtin" => {
            if !ch.is_local() {
                return Err(PackageError::ArchiveFailed(
                    "the builtin packager only works on a local channel".into(),
                ));
            }
            archive::pack(bundle_dir, &archive_path).map_err(|e| PackageError::ArchiveFailed(e.to_string()))?
        }
        PackagerSpec::Named(other) => return Err(PackageError::ArchiveFailed(format!("unknown packager {other:?}"))),
        PackagerSpec::Command(argv) => {
            let mut full = argv.clone();
            full.push(bundle_dir.to_string_lossy().into_owned());
            full.push(archive_path.to_string_lossy().into_owned());
            match ch.run(&full)? {
                r if r.success() => {}
                r => {
                    return Err(PackageError::ArchiveFailed(format!(
                        "packager exited {}: {}",
                        r.exit_code,
                        r.stderr_text().trim()
                    )))
                }
            }
            let raw = remote::read_file(ch, &sidecar_path(&archive_path))?;
            serde_json::from_slice::<BundleManifest>(&raw)
                .map_err(|e| PackageError::ArchiveFailed(format!("bad manifest from packager: {e}")))?
        }
    };
    if &manifest.stamp != stamp {
        return Err(PackageError::ArchiveFailed(format!(
            "packager stamped {} instead of {}",
            manifest.stamp, stamp
        )));
    }
    Ok(Bundle {
        stamp: stamp.clone(),
        archive_path,
        manifest,
        commit: commit.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "snake_case")]
pub enum Problem {
    Missing,
    Unexpected,
    Size {
        expected: u64,
        actual: u64,
    },
    Checksum {
        expected: String,
        actual: String,
    },
    Unreadable {
        error: String,
    },
    /// Content matches but the stored bytes were altered.
    Encoding {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mismatch {
    pub path: String,
    #[serde(flatten)]
    pub problem: Problem,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.problem {
            Problem::Missing => write!(f, "{}: missing from archive", self.path),
            Problem::Unexpected => write!(f, "{}: not in manifest", self.path),
            Problem::Size { expected, actual } => {
                write!(f, "{}: size {actual}, manifest says {expected}", self.path)
            }
            Problem::Checksum { expected, actual } => {
                write!(f, "{}: sha256 {actual}, manifest says {expected}", self.path)
            }
            Problem::Unreadable { error } => write!(f, "{}: unreadable ({error})", self.path),
            Problem::Encoding { error } => write!(f, "{}: stored data altered ({error})", self.path),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub archive: PathBuf,
    pub archive_checksum_ok: bool,
    pub actual_archive_checksum: Option<String>,
    /// Set when the archive could not be opened as a ZIP at all.
    pub archive_error: Option<String>,
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn verified(&self) -> bool {
        self.archive_checksum_ok && self.archive_error.is_none() && self.mismatches.is_empty()
    }
}

/// Recomputes the archive checksum and, after extracting to a scratch
/// directory, every member's size and checksum against `manifest`.
/// Corruption is reported, never raised.
pub fn verify_bundle(archive: &Path, manifest: &BundleManifest) -> VerifyReport {
    let actual = sha256_file(archive).ok();
    let mut report = VerifyReport {
        archive: archive.to_path_buf(),
        archive_checksum_ok: actual.as_deref() == Some(manifest.archive_checksum.as_str()),
        actual_archive_checksum: actual,
        archive_error: None,
        mismatches: Vec::new(),
    };
    let scratch = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            report.archive_error = Some(format!("no scratch directory: {e}"));
            return report;
        }
    };
    let extracted = match archive::extract_zip(archive, scratch.path(), |n| Some(n.to_string())) {
        Ok(x) => x,
        Err(e) => {
            report.archive_error = Some(e.to_string());
            return report;
        }
    };
    let expected: BTreeMap<&str, &crate::model::FileEntry> =
        manifest.entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let mut seen = std::collections::BTreeSet::new();
    for item in extracted {
        match item {
            archive::Extracted::File(got) => {
                seen.insert(got.path.clone());
                match expected.get(got.path.as_str()) {
                    None => report.mismatches.push(Mismatch {
                        path: got.path,
                        problem: Problem::Unexpected,
                    }),
                    Some(want) if want.size != got.size => report.mismatches.push(Mismatch {
                        path: got.path,
                        problem: Problem::Size {
                            expected: want.size,
                            actual: got.size,
                        },
                    }),
                    Some(want) if want.sha256 != got.sha256 => report.mismatches.push(Mismatch {
                        path: got.path,
                        problem: Problem::Checksum {
                            expected: want.sha256.clone(),
                            actual: got.sha256,
                        },
                    }),
                    Some(_) => {}
                }
            }
            archive::Extracted::Unreadable { path, error } => {
                seen.insert(path.clone());
                let problem = if expected.contains_key(path.as_str()) {
                    Problem::Unreadable { error }
                } else {
                    Problem::Unexpected
                };
                report.mismatches.push(Mismatch { path, problem });
            }
        }
    }
    if !report.archive_checksum_ok && report.mismatches.is_empty() {
        match archive::altered_members(archive, scratch.path(), &manifest.archive_checksum) {
            Ok(Some(altered)) => {
                for path in altered.into_iter().filter(|p| expected.contains_key(p.as_str())) {
                    report.mismatches.push(Mismatch {
                        path,
                        problem: Problem::Encoding {
                            error: "stored bytes differ from the packed original".into(),
                        },
                    });
                }
            }
            Ok(None) => {}
            Err(e) => log::warn!("cannot re-pack {} to locate damage: {e}", archive.display()),
        }
    }
    match archive::stream_faults(archive) {
        Ok(faults) => {
            for (path, error) in faults {
                let flagged = report.mismatches.iter().any(|m| m.path == path);
                if !flagged && expected.contains_key(path.as_str()) {
                    report.mismatches.push(Mismatch {
                        path,
                        problem: Problem::Encoding { error },
                    });
                }
            }
        }
        Err(e) => report.archive_error = Some(e.to_string()),
    }
    for path in expected.keys() {
        if !seen.contains(*path) {
            report.mismatches.push(Mismatch {
                path: path.to_string(),
                problem: Problem::Missing,
            });
        }
    }
    report.mismatches.sort_by(|a, b| a.path.cmp(&b.path));
    report
}

/// Reads `RELEASE.json` from an archive.
pub fn read_release_info(archive: &Path) -> std::io::Result<Option<ReleaseInfo>> {
    match archive::read_member(archive, RELEASE_FILE)? {
        None => Ok(None),
        Some(raw) => serde_json::from_slice(&raw)
            .map(Some)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::ChannelOptions;
    use crate::model::{ComponentKind, FileEntry};
    use chrono::{TimeZone, Utc};

    fn stamp(s: &str) -> ReleaseStamp {
        ReleaseStamp::parse(s).unwrap()
    }

    fn artifact(dir: &Path, kind: ComponentKind, st: &ReleaseStamp, file: &str) -> ComponentArtifact {
        let root = dir.join(kind.as_str());
        std::fs::create_dir_all(&root).unwrap();
        std::fs::write(root.join(file), file.as_bytes()).unwrap();
        ComponentArtifact {
            kind,
            stamp: st.clone(),
            root,
            files: vec![FileEntry {
                path: file.into(),
                size: file.len() as u64,
                sha256: crate::checksum::sha256_bytes(file.as_bytes()),
            }],
        }
    }

    fn commit() -> CommitMeta {
        CommitMeta::new(
            "abcdef1234567890",
            "ship it",
            Utc.with_ymd_and_hms(2025, 1, 2, 13, 0, 0).unwrap(),
            "main",
        )
        .unwrap()
    }

    #[test]
    fn assemble_then_zip_then_verify() {
        let ch = Channel::local(ChannelOptions::default());
        let work = tempfile::tempdir().unwrap();
        let s = stamp("20250102-130455Z");
        let arts = [
            artifact(work.path(), ComponentKind::Backend, &s, "app.jar"),
            artifact(work.path(), ComponentKind::Frontend, &s, "index.html"),
        ];
        let bdir = work.path().join("bundle").join(s.as_str());
        assemble_bundle(&ch, &bdir, &arts, &s, None).unwrap();
        assert!(matches!(
            assemble_bundle(&ch, &bdir, &arts, &s, None),
            Err(PackageError::BundleCollision(_))
        ));
        let bundle = zip_bundle(
            &ch,
            &bdir,
            &work.path().join("dist"),
            &commit(),
            &s,
            "build-1",
            &PackagerSpec::Named("builtin".into()),
        )
        .unwrap();
        assert_eq!(bundle.file_name(), "release_20250102-130455Z_main_abcdef12.zip");
        let paths: Vec<_> = bundle.manifest.entries.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["RELEASE.json", "backend/app.jar", "frontend/index.html"]);
        assert!(verify_bundle(&bundle.archive_path, &bundle.manifest).verified());
        let info = read_release_info(&bundle.archive_path).unwrap().unwrap();
        assert_eq!(info.commit_id, "abcdef1234567890");
        assert_eq!(info.built_on, "build-1");
    }

    #[test]
    fn mixed_stamps_are_rejected() {
        let ch = Channel::local(ChannelOptions::default());
        let work = tempfile::tempdir().unwrap();
        let s1 = stamp("20250102-130455Z");
        let s2 = stamp("20250102-130456Z");
        let arts = [
            artifact(work.path(), ComponentKind::Backend, &s1, "a"),
            artifact(work.path(), ComponentKind::Frontend, &s2, "b"),
        ];
        let err = assemble_bundle(&ch, &work.path().join("b"), &arts, &s1, None).unwrap_err();
        assert!(matches!(err, PackageError::StampMismatch { .. }));
        assert!(!work.path().join("b").exists());
    }

    #[test]
    fn truncation_is_reported_at_archive_level() {
        let ch = Channel::local(ChannelOptions::default());
        let work = tempfile::tempdir().unwrap();
        let s = stamp("20250102-130455Z");
        let arts = [artifact(work.path(), ComponentKind::Backend, &s, "app.jar")];
        let bdir = work.path().join("bundle");
        assemble_bundle(&ch, &bdir, &arts, &s, None).unwrap();
        let bundle = zip_bundle(
            &ch,
            &bdir,
            &work.path().join("dist"),
            &commit(),
            &s,
            "h",
            &PackagerSpec::Named("builtin".into()),
        )
        .unwrap();
        let bytes = std::fs::read(&bundle.archive_path).unwrap();
        std::fs::write(&bundle.archive_path, &bytes[..bytes.len() / 2]).unwrap();
        let report = verify_bundle(&bundle.archive_path, &bundle.manifest);
        assert!(!report.archive_checksum_ok);
        assert!(!report.verified());
    }

    #[test]
    fn altered_padding_bits_are_pinned_to_their_member() {
        let ch = Channel::local(ChannelOptions::default());
        let work = tempfile::tempdir().unwrap();
        let s = stamp("20250102-130455Z");
        let arts = [
            artifact(work.path(), ComponentKind::Backend, &s, "app.jar"),
            artifact(work.path(), ComponentKind::Frontend, &s, "index.html"),
        ];
        let bdir = work.path().join("bundle");
        assemble_bundle(&ch, &bdir, &arts, &s, None).unwrap();
        let bundle = zip_bundle(
            &ch,
            &bdir,
            &work.path().join("dist"),
            &commit(),
            &s,
            "h",
            &PackagerSpec::Named("builtin".into()),
        )
        .unwrap();
        let range = archive::member_data_range(&bundle.archive_path, "backend/app.jar").unwrap();
        let bytes = std::fs::read(&bundle.archive_path).unwrap();
        let raw = &bytes[range.start as usize..range.end as usize];
        let bit = *deflate::padding_bits(raw).unwrap().last().unwrap();
        let mut bad = bytes.clone();
        bad[range.start as usize + bit / 8] ^= 1 << (bit % 8);

        let with_original = work.path().join("repacked.zip");
        std::fs::write(&with_original, &bad).unwrap();
        let report = verify_bundle(&with_original, &bundle.manifest);
        assert_eq!(report.mismatches.len(), 1, "{:?}", report.mismatches);
        assert_eq!(report.mismatches[0].path, "backend/app.jar");

        // Without a reproducible original the stream walk still finds it.
        let mut foreign = bundle.manifest.clone();
        foreign.archive_checksum = "0".repeat(64);
        let report = verify_bundle(&with_original, &foreign);
        assert_eq!(report.mismatches.len(), 1, "{:?}", report.mismatches);
        assert!(
            report.mismatches[0].to_string().contains("padding bits"),
            "{}",
            report.mismatches[0]
        );
    }
}
