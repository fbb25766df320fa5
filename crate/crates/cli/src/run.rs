//! Run directories: every command records its fully resolved configuration
//! and checksums of everything it read.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use voxelcast_core::data::{file_checksum, read_json, write_json};

use crate::CliError;

pub const RESOLVED_FILE: &str = "config.resolved.json";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Serialize)]
pub struct Resolved<'a, C> {
    pub command: &'a str,
    pub seed: u64,
    pub threads: usize,
    pub out_dir: String,
    pub config: C,
}

#[derive(Serialize)]
struct InputEntry {
    path: String,
    bytes: u64,
    fnv1a64: String,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    inputs: Vec<InputEntry>,
}

/// Creates `out` and writes the resolved config and the input manifest.
/// Directories among `inputs` contribute every regular file they hold.
pub fn start_run<C: Serialize>(
    out: &Path,
    resolved: &Resolved<'_, C>,
    inputs: &[&Path],
) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    let mut entries = Vec::new();
    for input in inputs {
        for file in expand(input)? {
            entries.push(InputEntry {
                path: file.display().to_string(),
                bytes: fs::metadata(&file)?.len(),
                fnv1a64: format!("{:016x}", file_checksum(&file)?),
            });
        }
    }
    write_json(&out.join(RESOLVED_FILE), resolved)?;
    write_json(
        &out.join(RUN_MANIFEST_FILE),
        &RunManifest {
            command: resolved.command,
            inputs: entries,
        },
    )?;
    Ok(())
}

fn expand(path: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files = Vec::new();
    for entry in fs::read_dir(path)? {
        let p = entry?.path();
        if p.is_file() {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

/// A user-supplied JSON config; unreadable or unknown keys are usage errors.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    read_json(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}
