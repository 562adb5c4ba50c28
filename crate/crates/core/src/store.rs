//! Controller-side artifact store: a directory tree of immutable, stamped
//! release bundles and per-component artifacts.
//!
//! ```text
//! <root>/<stamp>/release_<...>.zip
//! <root>/<stamp>/release_<...>.zip.manifest.json
//! <root>/<stamp>/components/<kind>/...
//! ```
//!
//! Every item is fetched into a staging directory, verified, and then
//! committed under its final name with a no-clobber link, so a second write
//! for the same stamp is rejected and the original bytes stay untouched.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checksum::scan_tree;
use crate::config::StoreSpec;
use crate::executor::{Channel, ExecError};
use crate::model::{Bundle, BundleManifest, CommitMeta, ComponentArtifact, ComponentKind};
use crate::packaging::archive::{read_manifest, sidecar_path, MANIFEST_SUFFIX};
use crate::packaging::{read_release_info, verify_bundle, Mismatch};
use crate::stamp::ReleaseStamp;

const BUNDLE_CLAIM: &str = ".bundle-claim";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{class} for stamp {stamp} is already stored")]
    DuplicateStamp { stamp: ReleaseStamp, class: String },
    #[error("store at {} unreachable: {detail}", root.display())]
    StoreUnreachable { root: PathBuf, detail: String },
    #[error("no release with stamp {0} in the store")]
    UnknownStamp(ReleaseStamp),
    #[error("fetched {item} failed verification: {}", describe(.mismatches))]
    Corrupt { item: String, mismatches: Vec<String> },
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn describe(items: &[String]) -> String {
    if items.is_empty() {
        "archive checksum differs".to_string()
    } else {
        items.join("; ")
    }
}

/// A bundle as stored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredRelease {
    pub stamp: ReleaseStamp,
    pub commit: CommitMeta,
    pub archive: PathBuf,
    pub manifest: BundleManifest,
}

#[derive(Clone, Debug)]
pub struct ArtifactStore {
    root: PathBuf,
    base_url: Option<String>,
    max_releases: Option<usize>,
}

fn make_read_only(path: &Path) -> io::Result<()> {
    let mut perms = fs::metadata(path)?.permissions();
    perms.set_readonly(true);
    fs::set_permissions(path, perms)
}

impl ArtifactStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ArtifactStore {
            root: root.into(),
            base_url: None,
            max_releases: None,
        }
    }

    pub fn from_spec(spec: &StoreSpec) -> Self {
        ArtifactStore {
            root: spec.root.clone(),
            base_url: spec.base_url.clone(),
            max_releases: spec.max_releases,
        }
    }

    pub fn with_base_url(mut self, url: impl Into<String>) -> Self {
        self.base_url = Some(url.into());
        self
    }

    pub fn with_max_releases(mut self, n: usize) -> Self {
        self.max_releases = Some(n);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn unreachable(&self, detail: impl ToString) -> StoreError {
        StoreError::StoreUnreachable {
            root: self.root.clone(),
            detail: detail.to_string(),
        }
    }

    /// Creates the root if needed and checks it is a writable directory.
    pub fn ensure_root(&self) -> Result<(), StoreError> {
        fs::create_dir_all(&self.root).map_err(|e| self.unreachable(e))?;
        let meta = fs::metadata(&self.root).map_err(|e| self.unreachable(e))?;
        if !meta.is_dir() {
            return Err(self.unreachable("not a directory"));
        }
        Ok(())
    }

    fn stamp_dir(&self, stamp: &ReleaseStamp) -> PathBuf {
        self.root.join(stamp.as_str())
    }

    /// Fetches a bundle's archive and sidecar manifest over `ch`, verifies
    /// them, and commits them under `<root>/<stamp>/`.
    pub fn publish_bundle(&self, ch: &Channel, bundle: &Bundle) -> Result<StoredRelease, StoreError> {
        self.publish_with(
            &bundle.stamp,
            &bundle.commit,
            &bundle.manifest,
            |staged_archive| {
                ch.copy_from_host(&bundle.archive_path, staged_archive)?;
                ch.copy_from_host(&sidecar_path(&bundle.archive_path), &sidecar_path(staged_archive))?;
                Ok(())
            },
            &bundle.file_name(),
        )
    }

    /// Publishes an archive that already sits on the controller.
    pub fn publish_local(
        &self,
        archive: &Path,
        manifest: &BundleManifest,
        commit: &CommitMeta,
    ) -> Result<StoredRelease, StoreError> {
        let name = archive
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "archive has no file name"))?;
        self.publish_with(
            &manifest.stamp,
            commit,
            manifest,
            |staged| {
                fs::copy(archive, staged)?;
                fs::write(sidecar_path(staged), manifest.to_json())?;
                Ok(())
            },
            &name,
        )
    }

    fn publish_with(
        &self,
        stamp: &ReleaseStamp,
        commit: &CommitMeta,
        manifest: &BundleManifest,
        fetch: impl FnOnce(&Path) -> Result<(), StoreError>,
        file_name: &str,
    ) -> Result<StoredRelease, StoreError> {
        self.ensure_root()?;
        let dir = self.stamp_dir(stamp);
        fs::create_dir_all(&dir).map_err(|e| self.unreachable(e))?;
        let claim = dir.join(BUNDLE_CLAIM);
        match OpenOptions::new().write(true).create_new(true).open(&claim) {
            Ok(mut f) => {
                let _ = writeln!(f, "{file_name}");
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::DuplicateStamp {
                    stamp: stamp.clone(),
                    class: "bundle".into(),
                })
            }
            Err(e) => return Err(e.into()),
        }
        let result = self.fetch_verify_commit(&dir, stamp, commit, manifest, fetch, file_name);
        if result.is_err() {
            let _ = fs::remove_file(&claim);
        }
        result
    }

    fn fetch_verify_commit(
        &self,
        dir: &Path,
        stamp: &ReleaseStamp,
        commit: &CommitMeta,
        manifest: &BundleManifest,
        fetch: impl FnOnce(&Path) -> Result<(), StoreError>,
        file_name: &str,
    ) -> Result<StoredRelease, StoreError> {
        let staging = tempfile::Builder::new().prefix(".incoming-").tempdir_in(dir)?;
        let staged = staging.path().join(file_name);
        fetch(&staged)?;
        let fetched_manifest = read_manifest(&sidecar_path(&staged))?;
        if &fetched_manifest != manifest {
            return Err(StoreError::Corrupt {
                item: format!("{file_name}{MANIFEST_SUFFIX}"),
                mismatches: vec!["manifest differs from the packaged one".into()],
            });
        }
        let report = verify_bundle(&staged, manifest);
        if !report.verified() {
            let mut problems: Vec<String> = report.mismatches.iter().map(Mismatch::to_string).collect();
            if let Some(e) = report.archive_error {
                problems.push(e);
            }
            return Err(StoreError::Corrupt {
                item: file_name.to_string(),
                mismatches: problems,
            });
        }
        let archive = dir.join(file_name);
        let sidecar = sidecar_path(&archive);
        for (from, to) in [
            (staged.clone(), archive.clone()),
            (sidecar_path(&staged), sidecar.clone()),
        ] {
            match fs::hard_link(&from, &to) {
                Ok(()) => make_read_only(&to)?,
                Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                    return Err(StoreError::DuplicateStamp {
                        stamp: stamp.clone(),
                        class: "bundle".into(),
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(StoredRelease {
            stamp: stamp.clone(),
            commit: commit.clone(),
            archive,
            manifest: manifest.clone(),
        })
    }

    /// Where a component artifact of `stamp` is kept.
    pub fn component_dir(&self, stamp: &ReleaseStamp, kind: ComponentKind) -> PathBuf {
        self.stamp_dir(stamp).join("components").join(kind.as_str())
    }

    /// Fetches a component artifact over `ch` into
    /// `<root>/<stamp>/components/<kind>`, checking every file against the
    /// checksums computed on the build host.
    pub fn publish_component(&self, ch: &Channel, artifact: &ComponentArtifact) -> Result<PathBuf, StoreError> {
        self.ensure_root()?;
        let dest = self.component_dir(&artifact.stamp, artifact.kind);
        let parent = dest.parent().expect("component dir has a parent");
        fs::create_dir_all(parent).map_err(|e| self.unreachable(e))?;
        match fs::create_dir(&dest) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::DuplicateStamp {
                    stamp: artifact.stamp.clone(),
                    class: format!("{} artifact", artifact.kind),
                })
            }
            Err(e) => return Err(e.into()),
        }
        let result = (|| {
            let staging = tempfile::Builder::new().prefix(".incoming-").tempdir_in(parent)?;
            let staged = staging.path().join(artifact.kind.as_str());
            ch.copy_from_host(&artifact.root, &staged)?;
            let got = scan_tree(&staged)?;
            if got != artifact.files {
                return Err(StoreError::Corrupt {
                    item: format!("{} artifact", artifact.kind),
                    mismatches: vec!["file list or checksums differ from the build host".into()],
                });
            }
            // Renaming onto the empty claimed directory is atomic.
            fs::rename(&staged, &dest)?;
            for entry in &got {
                make_read_only(&dest.join(&entry.path))?;
            }
            Ok(dest.clone())
        })();
        if result.is_err() {
            let _ = fs::remove_dir_all(&dest);
        }
        result
    }

    /// Stored releases, newest first. Entries that are not stamped release
    /// directories are skipped and logged.
    pub fn list_releases(&self) -> Result<Vec<StoredRelease>, StoreError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(self.unreachable(e)),
        };
        let mut releases = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| self.unreachable(e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') {
                continue;
            }
            let stamp = match ReleaseStamp::parse(&name) {
                Ok(s) if entry.path().is_dir() => s,
                _ => {
                    log::info!("ignoring foreign entry {name:?} in store {}", self.root.display());
                    continue;
                }
            };
            match self.read_release(&entry.path(), &stamp) {
                Ok(Some(r)) => releases.push(r),
                Ok(None) => {}
                Err(e) => log::warn!("skipping {name}: {e}"),
            }
        }
        releases.sort_by(|a, b| b.stamp.cmp(&a.stamp));
        Ok(releases)
    }

    fn read_release(&self, dir: &Path, stamp: &ReleaseStamp) -> io::Result<Option<StoredRelease>> {
        let mut archives: Vec<PathBuf> = fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("release_") && n.ends_with(".zip"))
            })
            .collect();
        archives.sort();
        let Some(archive) = archives.into_iter().next() else {
            return Ok(None);
        };
        let manifest = read_manifest(&sidecar_path(&archive))?;
        let info = read_release_info(&archive)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "archive lacks RELEASE.json"))?;
        if &info.stamp != stamp {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "RELEASE.json stamp differs from directory",
            ));
        }
        Ok(Some(StoredRelease {
            stamp: stamp.clone(),
            commit: info.commit(),
            archive,
            manifest,
        }))
    }

    pub fn find(&self, stamp: &ReleaseStamp) -> Result<StoredRelease, StoreError> {
        let dir = self.stamp_dir(stamp);
        if !dir.is_dir() {
            return Err(StoreError::UnknownStamp(stamp.clone()));
        }
        self.read_release(&dir, stamp)?
            .ok_or_else(|| StoreError::UnknownStamp(stamp.clone()))
    }

    /// Copies a stored archive to `dest`.
    pub fn fetch(&self, stamp: &ReleaseStamp, dest: &Path) -> Result<PathBuf, StoreError> {
        let release = self.find(stamp)?;
        fs::copy(&release.archive, dest)?;
        Ok(dest.to_path_buf())
    }

    /// Stable locator for a stored bundle: `<base_url>/<stamp>/<file>` when
    /// a base URL is configured, otherwise the archive's absolute path.
    pub fn download_link(&self, stamp: &ReleaseStamp) -> Result<String, StoreError> {
        let release = self.find(stamp)?;
        let file = release
            .archive
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Ok(match &self.base_url {
            Some(base) => format!("{}/{}/{}", base.trim_end_matches('/'), stamp, file),
            None => std::path::absolute(&release.archive)?.to_string_lossy().into_owned(),
        })
    }

    /// Removes the oldest releases beyond `max_releases`, skipping every
    /// stamp in `protected`. Returns the pruned stamps.
    pub fn prune(&self, protected: &BTreeSet<ReleaseStamp>) -> Result<Vec<ReleaseStamp>, StoreError> {
        let Some(keep) = self.max_releases else {
            return Ok(Vec::new());
        };
        let releases = self.list_releases()?;
        let mut pruned = Vec::new();
        for r in releases.iter().skip(keep) {
            if protected.contains(&r.stamp) {
                continue;
            }
            fs::remove_dir_all(self.stamp_dir(&r.stamp))?;
            pruned.push(r.stamp.clone());
        }
        Ok(pruned)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ReleaseInfo;
    use crate::packaging::archive::pack;
    use chrono::Utc;

    fn make_archive(dir: &Path, stamp: &str) -> (PathBuf, BundleManifest, CommitMeta) {
        let s = ReleaseStamp::parse(stamp).unwrap();
        let commit = CommitMeta::new("0123456789abcdef", "msg", Utc::now(), "main").unwrap();
        let bundle = dir.join(format!("b-{stamp}"));
        fs::create_dir_all(bundle.join("backend")).unwrap();
        fs::write(bundle.join("backend/app"), stamp.as_bytes()).unwrap();
        fs::write(
            bundle.join("RELEASE.json"),
            serde_json::to_vec(&ReleaseInfo::new(&s, &commit, "h")).unwrap(),
        )
        .unwrap();
        let archive = dir.join(crate::model::archive_file_name(&s, &commit));
        let manifest = pack(&bundle, &archive).unwrap();
        (archive, manifest, commit)
    }

    #[test]
    fn publish_list_link_and_duplicate() {
        let work = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(work.path().join("store"));
        assert!(store.list_releases().unwrap().is_empty());
        for s in ["20250101-000000Z", "20250103-000000Z", "20250102-000000Z"] {
            let (a, m, c) = make_archive(work.path(), s);
            store.publish_local(&a, &m, &c).unwrap();
        }
        fs::write(store.root().join("NOTES.txt"), b"hi").unwrap();
        let listed: Vec<String> = store
            .list_releases()
            .unwrap()
            .iter()
            .map(|r| r.stamp.to_string())
            .collect();
        assert_eq!(listed, ["20250103-000000Z", "20250102-000000Z", "20250101-000000Z"]);

        let s = ReleaseStamp::parse("20250102-000000Z").unwrap();
        let stored = store.find(&s).unwrap();
        let before = fs::read(&stored.archive).unwrap();
        let (a, m, c) = make_archive(&work.path().join("again"), "20250102-000000Z");
        assert!(matches!(
            store.publish_local(&a, &m, &c),
            Err(StoreError::DuplicateStamp { .. })
        ));
        assert_eq!(fs::read(&stored.archive).unwrap(), before);

        let link = store.download_link(&s).unwrap();
        assert!(Path::new(&link).is_absolute());
        let http = store.clone().with_base_url("https://a.example/rel/");
        assert_eq!(
            http.download_link(&s).unwrap(),
            format!(
                "https://a.example/rel/20250102-000000Z/{}",
                a.file_name().unwrap().to_string_lossy()
            )
        );
        let missing = ReleaseStamp::parse("20240101-000000Z").unwrap();
        assert!(matches!(
            store.download_link(&missing),
            Err(StoreError::UnknownStamp(_))
        ));
    }

    #[test]
    fn prune_keeps_protected() {
        let work = tempfile::tempdir().unwrap();
        let store = ArtifactStore::new(work.path().join("store")).with_max_releases(1);
        for s in ["20250101-000000Z", "20250102-000000Z", "20250103-000000Z"] {
            let (a, m, c) = make_archive(work.path(), s);
            store.publish_local(&a, &m, &c).unwrap();
        }
        let oldest = ReleaseStamp::parse("20250101-000000Z").unwrap();
        let pruned = store.prune(&BTreeSet::from([oldest.clone()])).unwrap();
        assert_eq!(pruned, [ReleaseStamp::parse("20250102-000000Z").unwrap()]);
        assert!(store.find(&oldest).is_ok());
    }
}
