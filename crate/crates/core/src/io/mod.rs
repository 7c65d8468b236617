//! File formats: conditional tables, score files, evaluation manifests and
//! results documents.
//!
//! All record files are UTF-8 with one JSON object per line. Floats in tables
//! and score files are printed with 17 significant digits so that `f64` values
//! survive a write/read cycle unchanged. Every written file gets a `.digest`
//! sidecar holding its SHA-256.

mod manifest;
mod results;
mod scores;
mod table;

use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use manifest::{
    load_color_manifest, load_foil_manifest, load_retrieval_manifest, load_winoground_manifest,
    render_foil_manifest, ColorManifestEntry,
};
pub use results::{Provenance, ResultsDoc};
pub use scores::{load_pairs, load_scores, render_scores, save_scores, PairScores};
pub use table::{
    load_table, render_table, save_table, ConditionalTable, ItmEntry, Modality, TablePaths,
    TableViolation,
};

/// `f64` as a JSON number with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub(crate) fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization is infallible")
}

/// Non-blank lines with their 1-based line numbers.
pub(crate) fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(body
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.to_owned()))
        .collect())
}

/// Hex SHA-256 of a byte buffer.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hex SHA-256 of a file's contents.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn digest_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".digest");
    path.with_file_name(name)
}

pub(crate) fn write_digest(path: &Path, bytes: &[u8]) -> Result<()> {
    let body = format!("sha256:{}\n", sha256_hex(bytes));
    atomic_write(&digest_path(path), body.as_bytes())
}

/// Writes to a temporary file in the target directory, then renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Writes `bytes` atomically together with a `.digest` sidecar.
pub fn write_with_digest(path: &Path, bytes: &[u8]) -> Result<()> {
    atomic_write(path, bytes)?;
    write_digest(path, bytes)
}
