//! Task archives: a gzip-compressed tarball with a `manifest` file at its
//! root and the application files beside it.

use std::io::{Read, Write};
use std::path::{Component as PathComponent, Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::RuntimeKind;

pub const MANIFEST_NAME: &str = "manifest";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dependency {
    pub name: String,
    #[serde(default)]
    pub version: String,
}

/// Manifest stored inside every archive and copied into the sandbox.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveManifest {
    pub name: String,
    pub runtime: RuntimeKind,
    pub entry: String,
    #[serde(default)]
    pub args: Vec<String>,
    #[serde(default)]
    pub dependencies: Vec<Dependency>,
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive has no manifest at its root")]
    MissingManifest,
    #[error("invalid manifest: {0}")]
    BadManifest(#[from] serde_json::Error),
    #[error("unsafe path in archive: {0}")]
    UnsafePath(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Builds an archive from in-memory files.
pub fn build(manifest: &ArchiveManifest, files: &[(&str, &[u8])]) -> Result<Vec<u8>, ArchiveError> {
    let enc = GzEncoder::new(Vec::new(), Compression::default());
    let mut builder = tar::Builder::new(enc);
    let mut append = |name: &str, data: &[u8], mode: u32| -> std::io::Result<()> {
        let mut header = tar::Header::new_gnu();
        header.set_size(data.len() as u64);
        header.set_mode(mode);
        header.set_mtime(0);
        header.set_cksum();
        builder.append_data(&mut header, name, data)
    };
    let manifest_text = serde_json::to_string(manifest)?;
    append(MANIFEST_NAME, manifest_text.as_bytes(), 0o644)?;
    for (name, data) in files {
        check_path(Path::new(name))?;
        append(name, data, 0o755)?;
    }
    let enc = builder.into_inner()?;
    let mut bytes = enc.finish()?;
    bytes.flush()?;
    Ok(bytes)
}

fn check_path(path: &Path) -> Result<(), ArchiveError> {
    let ok = path
        .components()
        .all(|c| matches!(c, PathComponent::Normal(_) | PathComponent::CurDir));
    if ok {
        Ok(())
    } else {
        Err(ArchiveError::UnsafePath(path.display().to_string()))
    }
}

fn is_manifest(path: &Path) -> bool {
    let normal: Vec<_> = path
        .components()
        .filter(|c| !matches!(c, PathComponent::CurDir))
        .collect();
    normal.len() == 1 && normal[0].as_os_str() == MANIFEST_NAME
}

/// Manifest and total uncompressed size of the application files.
pub fn inspect(bytes: &[u8]) -> Result<(ArchiveManifest, u64), ArchiveError> {
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut manifest = None;
    let mut total = 0u64;
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        check_path(&path)?;
        if is_manifest(&path) {
            let mut text = String::new();
            entry.read_to_string(&mut text)?;
            manifest = Some(serde_json::from_str(&text)?);
        } else {
            total += entry.header().size()?;
        }
    }
    Ok((manifest.ok_or(ArchiveError::MissingManifest)?, total))
}

/// Unpacks application files into `app_dir`, skipping the manifest.
pub fn unpack(bytes: &[u8], app_dir: &Path) -> Result<Vec<PathBuf>, ArchiveError> {
    std::fs::create_dir_all(app_dir)?;
    let mut archive = tar::Archive::new(GzDecoder::new(bytes));
    let mut written = Vec::new();
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        check_path(&path)?;
        if is_manifest(&path) {
            continue;
        }
        if entry.unpack_in(app_dir)? {
            written.push(path);
        } else {
            return Err(ArchiveError::UnsafePath(path.display().to_string()));
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> ArchiveManifest {
        ArchiveManifest {
            name: "hello".into(),
            runtime: RuntimeKind::ShellScript,
            entry: "run.sh".into(),
            args: vec![],
            dependencies: vec![],
        }
    }

    #[test]
    fn build_then_inspect() {
        let bytes = build(&manifest(), &[("run.sh", b"echo hi\n"), ("lib/x.txt", b"12345")]).unwrap();
        let (m, size) = inspect(&bytes).unwrap();
        assert_eq!(m, manifest());
        assert_eq!(size, 8 + 5);
        let dir = tempfile::tempdir().unwrap();
        let files = unpack(&bytes, dir.path()).unwrap();
        assert_eq!(files.len(), 2);
        assert_eq!(std::fs::read(dir.path().join("lib/x.txt")).unwrap(), b"12345");
        assert!(!dir.path().join(MANIFEST_NAME).exists());
    }

    #[test]
    fn rejects_escaping_paths() {
        assert!(matches!(
            build(&manifest(), &[("../evil", b"")]),
            Err(ArchiveError::UnsafePath(_))
        ));
    }

    #[test]
    fn missing_manifest() {
        let enc = GzEncoder::new(Vec::new(), Compression::default());
        let builder = tar::Builder::new(enc);
        let bytes = builder.into_inner().unwrap().finish().unwrap();
        assert!(matches!(inspect(&bytes), Err(ArchiveError::MissingManifest)));
    }
}
