//! File helpers that attach the path to every failure.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use splineop_core::functional::Checkpoint;

use crate::error::{CliError, Result};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.display().to_string(), source }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn load_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| CliError::Config { path: path.display().to_string(), msg: e.to_string() })
}

/// Create `dir`, refusing one that already holds files.
pub fn fresh_dir(dir: &Path) -> Result<PathBuf> {
    if dir.exists() && fs::read_dir(dir).map_err(io_err(dir))?.next().is_some() {
        return Err(CliError::OutputExists(dir.display().to_string()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    Ok(dir.to_path_buf())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    Ok(Checkpoint::read_from(BufReader::new(f))?)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    write_bytes(path, &buf)
}
