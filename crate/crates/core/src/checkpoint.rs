//! Write-once checkpoint directories: tensor files plus a JSON manifest.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use clue_tensor::{decode_tensors, encode_tensors, Tensor};

use crate::error::{io_err, ClueError, Result};

pub const MANIFEST: &str = "manifest.json";

/// Creates `dir` for a new checkpoint. Fails if a manifest is already there.
pub fn prepare_dir(dir: &Path) -> Result<()> {
    if dir.join(MANIFEST).exists() {
        return Err(ClueError::Checkpoint(format!(
            "{} already holds a checkpoint",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_new(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

pub fn write_tensors(path: &Path, tensors: &[Tensor]) -> Result<()> {
    let refs: Vec<&Tensor> = tensors.iter().collect();
    write_new(path, &encode_tensors(&refs))
}

pub fn read_tensors(path: &Path) -> Result<Vec<Tensor>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(decode_tensors(&bytes)?)
}

/// Writes the manifest last, which marks the checkpoint complete.
pub fn write_manifest<T: Serialize>(dir: &Path, manifest: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    write_new(&dir.join(MANIFEST), text.as_bytes())
}

pub fn read_manifest<T: DeserializeOwned>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(ClueError::Checkpoint(format!("no checkpoint at {}", dir.display())));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    Ok(serde_json::from_str(&text)?)
}
