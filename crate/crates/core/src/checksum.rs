//! SHA-256 helpers and local tree scanning.

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::model::FileEntry;

pub fn sha256_bytes(data: &[u8]) -> String {
    hex::encode(Sha256::digest(data))
}

pub fn sha256_reader(mut reader: impl Read) -> io::Result<(String, u64)> {
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}

pub fn sha256_file(path: &Path) -> io::Result<String> {
    sha256_reader(File::open(path)?).map(|(h, _)| h)
}

/// Every regular file under `root`, with `/`-separated relative paths, sorted.
/// Symlinks are not followed.
pub fn scan_tree(root: &Path) -> io::Result<Vec<FileEntry>> {
    let mut entries = Vec::new();
    for item in WalkDir::new(root).follow_links(false).sort_by_file_name() {
        let item = item.map_err(io::Error::other)?;
        if !item.file_type().is_file() {
            continue;
        }
        let rel = item.path().strip_prefix(root).expect("walkdir yields paths under root");
        let (sha256, size) = sha256_reader(File::open(item.path())?)?;
        entries.push(FileEntry {
            path: rel_path_string(rel),
            size,
            sha256,
        });
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(entries)
}

pub(crate) fn rel_path_string(rel: &Path) -> String {
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Single digest over a tree listing; equal trees give equal digests.
pub fn tree_digest(entries: &[FileEntry]) -> String {
    let mut hasher = Sha256::new();
    for e in entries {
        hasher.update(e.path.as_bytes());
        hasher.update([0]);
        hasher.update(e.size.to_le_bytes());
        hasher.update(e.sha256.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}
