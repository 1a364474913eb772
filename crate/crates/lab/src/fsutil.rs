use std::fs;
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

/// Creates `dir`, refusing a non-empty existing directory unless `force`.
/// Existing files are overwritten in place, never deleted.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(LabError::io(dir))?.next().is_some();
        if occupied && !force {
            return Err(LabError::Exists(dir.to_path_buf()));
        }
    }
    fs::create_dir_all(dir).map_err(LabError::io(dir))
}

pub fn read_string(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(LabError::Missing(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(LabError::io(path))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(LabError::io(&tmp))?;
    f.write_all(bytes).map_err(LabError::io(&tmp))?;
    f.sync_all().map_err(LabError::io(&tmp))?;
    fs::rename(&tmp, path).map_err(LabError::io(path))
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = read_string(path)?;
    serde_json::from_str(&text).map_err(|e| LabError::format(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, &row).expect("serializable row");
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

/// Parses one JSON value per non-blank line; the first bad line is an error
/// naming its line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(LabError::io(path))?;
    Ok(sha256_hex(&bytes))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| LabError::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::format(path, e))?;
    write_atomic(path, &bytes)
}

/// Like [`write_csv`] but emits the header even with no rows.
pub fn write_csv_with_header<R: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = R>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header).map_err(|e| LabError::format(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| LabError::format(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| LabError::format(path, e))?;
    write_atomic(path, &bytes)
}
