//! Deterministic ZIP archives and their sidecar manifests.
//!
//! Members are written in sorted path order with timestamps fixed at the ZIP
//! epoch (1980-01-01), so the same tree always yields the same bytes.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use walkdir::WalkDir;
use zip::write::SimpleFileOptions;
use zip::{CompressionMethod, DateTime, ZipArchive, ZipWriter};

use crate::checksum::{rel_path_string, sha256_file};
use crate::model::{BundleManifest, FileEntry, ReleaseInfo};

pub const RELEASE_FILE: &str = "RELEASE.json";
pub const MANIFEST_SUFFIX: &str = ".manifest.json";

/// `<archive>.manifest.json`
pub fn sidecar_path(archive: &Path) -> PathBuf {
    let mut name = archive.as_os_str().to_owned();
    name.push(MANIFEST_SUFFIX);
    PathBuf::from(name)
}

fn zip_err(e: zip::result::ZipError) -> io::Error {
    match e {
        zip::result::ZipError::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other),
    }
}

fn mode_of(meta: &std::fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o7777
}

/// Zips every file and directory under `src` into a new file at `out`.
/// Returns the file members with sizes and checksums. Symlinks are refused.
pub fn write_zip(src: &Path, out: &Path) -> io::Result<Vec<FileEntry>> {
    let mut members: BTreeMap<String, (PathBuf, bool, u32)> = BTreeMap::new();
    for item in WalkDir::new(src).follow_links(false).min_depth(1) {
        let item = item.map_err(io::Error::other)?;
        let rel = rel_path_string(item.path().strip_prefix(src).expect("under src"));
        let ft = item.file_type();
        if ft.is_symlink() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("symlink {rel} cannot be archived"),
            ));
        }
        let meta = item.metadata().map_err(io::Error::other)?;
        if ft.is_dir() {
            members.insert(format!("{rel}/"), (item.path().to_path_buf(), true, mode_of(&meta)));
        } else if ft.is_file() {
            members.insert(rel, (item.path().to_path_buf(), false, mode_of(&meta)));
        }
    }

    let file = OpenOptions::new().write(true).create_new(true).open(out)?;
    let mut zip = ZipWriter::new(BufWriter::new(file));
    let base = SimpleFileOptions::default()
        .compression_method(CompressionMethod::Deflated)
        .last_modified_time(DateTime::default());
    let mut entries = Vec::new();
    for (name, (path, is_dir, mode)) in &members {
        let options = base.unix_permissions(*mode);
        if *is_dir {
            zip.add_directory(name.as_str(), options).map_err(zip_err)?;
            continue;
        }
        zip.start_file(name.as_str(), options).map_err(zip_err)?;
        let mut input = File::open(path)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        let mut size = 0u64;
        loop {
            let n = input.read(&mut buf)?;
            if n == 0 {
                break;
            }
            hasher.update(&buf[..n]);
            zip.write_all(&buf[..n])?;
            size += n as u64;
        }
        entries.push(FileEntry {
            path: name.clone(),
            size,
            sha256: hex::encode(hasher.finalize()),
        });
    }
    zip.finish().map_err(zip_err)?.flush()?;
    Ok(entries)
}

/// Archives an assembled bundle directory and writes its sidecar manifest.
/// The stamp is taken from the bundle's `RELEASE.json`.
pub fn pack(bundle_dir: &Path, archive: &Path) -> io::Result<BundleManifest> {
    let info: ReleaseInfo = serde_json::from_slice(&std::fs::read(bundle_dir.join(RELEASE_FILE))?)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{RELEASE_FILE}: {e}")))?;
    let entries = write_zip(bundle_dir, archive)?;
    let manifest = BundleManifest::new(info.stamp, sha256_file(archive)?, entries);
    let mut sidecar = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(sidecar_path(archive))?;
    sidecar.write_all(manifest.to_json().as_bytes())?;
    sidecar.sync_all()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> io::Result<BundleManifest> {
    serde_json::from_slice(&std::fs::read(path)?).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

/// One member's extraction outcome.
#[derive(Debug)]
pub enum Extracted {
    File(FileEntry),
    /// The member exists but could not be read back (bad CRC, corrupt data).
    Unreadable {
        path: String,
        error: String,
    },
}

/// Extracts file members selected by `select` into `dest`. `select` maps a
/// member name to its destination path relative to `dest`, or `None` to
/// skip it. Directory members are created when selected.
pub fn extract_zip(archive: &Path, dest: &Path, select: impl Fn(&str) -> Option<String>) -> io::Result<Vec<Extracted>> {
    let mut zip = ZipArchive::new(File::open(archive)?).map_err(zip_err)?;
    let mut out = Vec::new();
    for i in 0..zip.len() {
        let mut member = match zip.by_index(i) {
            Ok(m) => m,
            Err(e) => {
                out.push(Extracted::Unreadable {
                    path: format!("#{i}"),
                    error: e.to_string(),
                });
                continue;
            }
        };
        let name = member.name().map_err(zip_err)?.to_string();
        if member.enclosed_name().is_none() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsafe member name {name:?}"),
            ));
        }
        let Some(rel) = select(&name) else { continue };
        let target = dest.join(rel.trim_end_matches('/'));
        if member.is_dir() {
            std::fs::create_dir_all(&target)?;
            continue;
        }
        if let Some(parent) = target.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mode = member.unix_mode();
        let mut file = File::create(&target)?;
        let mut hasher = Sha256::new();
        let mut buf = [0u8; 64 * 1024];
        let mut size = 0u64;
        let read_result: io::Result<()> = loop {
            match member.read(&mut buf) {
                Ok(0) => break Ok(()),
                Ok(n) => {
                    hasher.update(&buf[..n]);
                    file.write_all(&buf[..n])?;
                    size += n as u64;
                }
                Err(e) => break Err(e),
            }
        };
        match read_result {
            Ok(()) => {
                if let Some(mode) = mode {
                    use std::os::unix::fs::PermissionsExt;
                    std::fs::set_permissions(&target, std::fs::Permissions::from_mode(mode & 0o7777))?;
                }
                out.push(Extracted::File(FileEntry {
                    path: name,
                    size,
                    sha256: hex::encode(hasher.finalize()),
                }))
            }
            Err(e) => out.push(Extracted::Unreadable {
                path: name,
                error: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Contents of one member, if present.
pub fn read_member(archive: &Path, name: &str) -> io::Result<Option<Vec<u8>>> {
    let mut zip = ZipArchive::new(File::open(archive)?).map_err(zip_err)?;
    let mut member = match zip.by_name(name) {
        Ok(m) => m,
        Err(zip::result::ZipError::FileNotFound) => return Ok(None),
        Err(e) => return Err(zip_err(e)),
    };
    let mut data = Vec::new();
    member.read_to_end(&mut data)?;
    Ok(Some(data))
}

/// Member names in archive order.
pub fn list_members(archive: &Path) -> io::Result<Vec<String>> {
    let zip = ZipArchive::new(File::open(archive)?).map_err(zip_err)?;
    zip.file_names()
        .map(|n| n.map(|n| n.into_owned()).map_err(zip_err))
        .collect()
}

/// Deflated members whose stored stream has set padding bits or trailing
/// bytes, with the reason.
pub fn stream_faults(archive: &Path) -> io::Result<Vec<(String, String)>> {
    let mut zip = ZipArchive::new(File::open(archive)?).map_err(zip_err)?;
    let mut out = Vec::new();
    for i in 0..zip.len() {
        let Ok(mut member) = zip.by_index_raw(i) else { continue };
        if member.compression() != CompressionMethod::Deflated {
            continue;
        }
        let name = member.name().map_err(zip_err)?.to_string();
        let mut raw = Vec::new();
        member.read_to_end(&mut raw)?;
        if let Err(fault) = super::deflate::check_stream(&raw) {
            out.push((name, fault.to_string()));
        }
    }
    Ok(out)
}

/// Members whose bytes differ from a deterministic re-pack of `tree`, the
/// extracted contents of `archive`. `None` when the re-pack does not hash to
/// `expected_checksum`, so it cannot stand in for the original.
pub fn altered_members(archive: &Path, tree: &Path, expected_checksum: &str) -> io::Result<Option<Vec<String>>> {
    let scratch = tempfile::tempdir()?;
    let rebuilt = scratch.path().join("rebuilt.zip");
    write_zip(tree, &rebuilt)?;
    if sha256_file(&rebuilt)? != expected_checksum {
        return Ok(None);
    }
    let mut zip = ZipArchive::new(File::open(&rebuilt)?).map_err(zip_err)?;
    let mut spans = Vec::new();
    for i in 0..zip.len() {
        let member = zip.by_index_raw(i).map_err(zip_err)?;
        let end = member.data_start().unwrap_or(member.header_start()) + member.compressed_size();
        spans.push((member.name().map_err(zip_err)?.to_string(), member.header_start()..end));
    }
    let (got, want) = (std::fs::read(archive)?, std::fs::read(&rebuilt)?);
    let mut out: Vec<String> = Vec::new();
    for i in 0..got.len().max(want.len()) {
        if got.get(i) == want.get(i) {
            continue;
        }
        if let Some((name, _)) = spans.iter().find(|(_, r)| r.contains(&(i as u64))) {
            if !out.contains(name) {
                out.push(name.clone());
            }
        }
    }
    Ok(Some(out))
}

/// Byte range of a member's stored data within the archive.
pub fn member_data_range(archive: &Path, name: &str) -> io::Result<std::ops::Range<u64>> {
    let mut zip = ZipArchive::new(File::open(archive)?).map_err(zip_err)?;
    let mut member = zip.by_name(name).map_err(zip_err)?;
    io::copy(&mut member, &mut io::sink())?;
    let start = member
        .data_start()
        .ok_or_else(|| io::Error::other("member data offset unknown"))?;
    Ok(start..start + member.compressed_size())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(root: &Path) {
        std::fs::create_dir_all(root.join("backend")).unwrap();
        std::fs::create_dir_all(root.join("config")).unwrap();
        std::fs::write(root.join("backend/app.jar"), b"jar bytes").unwrap();
        std::fs::write(root.join("b.txt"), b"b").unwrap();
    }

    #[test]
    fn same_tree_gives_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        tree(a.path());
        tree(b.path());
        let out = tempfile::tempdir().unwrap();
        let za = out.path().join("a.zip");
        let zb = out.path().join("b.zip");
        let ea = write_zip(a.path(), &za).unwrap();
        write_zip(b.path(), &zb).unwrap();
        assert_eq!(std::fs::read(&za).unwrap(), std::fs::read(&zb).unwrap());
        let paths: Vec<_> = ea.iter().map(|e| e.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "backend/app.jar"]);
        assert_eq!(
            list_members(&za).unwrap(),
            ["b.txt", "backend/", "backend/app.jar", "config/"]
        );
    }

    #[test]
    fn refuses_to_overwrite() {
        let a = tempfile::tempdir().unwrap();
        tree(a.path());
        let out = tempfile::tempdir().unwrap();
        let z = out.path().join("a.zip");
        write_zip(a.path(), &z).unwrap();
        assert_eq!(
            write_zip(a.path(), &z).unwrap_err().kind(),
            io::ErrorKind::AlreadyExists
        );
    }

    #[test]
    fn extraction_restores_empty_dirs_and_modes() {
        use std::os::unix::fs::PermissionsExt;
        let a = tempfile::tempdir().unwrap();
        tree(a.path());
        std::fs::set_permissions(a.path().join("b.txt"), std::fs::Permissions::from_mode(0o750)).unwrap();
        let out = tempfile::tempdir().unwrap();
        let z = out.path().join("a.zip");
        write_zip(a.path(), &z).unwrap();
        let dest = out.path().join("x");
        let got = extract_zip(&z, &dest, |n| Some(n.to_string())).unwrap();
        assert_eq!(got.len(), 2);
        assert!(dest.join("config").is_dir());
        let mode = std::fs::metadata(dest.join("b.txt")).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o750);
    }
}
