//! Run manifests and output-directory handling.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use hrvconformer::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub deterministic: bool,
    /// SHA-256 of every input file, keyed by path as given.
    pub inputs: BTreeMap<String, String>,
    /// Output files relative to the output directory.
    pub outputs: Vec<String>,
    /// Command-specific values (normaliser, counts, metrics).
    pub details: serde_json::Value,
    pub elapsed_s: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Digest every file under `paths` (directories are walked one level,
/// in name order).
pub fn digest_inputs(paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for p in paths {
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file())
                .collect();
            files.sort();
            for f in files {
                out.insert(f.display().to_string(), sha256_file(&f)?);
            }
        } else {
            out.insert(p.display().to_string(), sha256_file(p)?);
        }
    }
    Ok(out)
}

/// Create `dir`, or reuse it when empty. A non-empty directory is only
/// replaced with `force` and only if it holds a previous run's manifest.
pub fn prepare_output(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(Error::Config(format!("output {} is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir)?.next().is_some();
        if non_empty {
            if !force {
                return Err(Error::Config(format!(
                    "output directory {} is not empty; pass --force to replace it",
                    dir.display()
                )));
            }
            if !dir.join(MANIFEST).is_file() {
                return Err(Error::Config(format!(
                    "refusing to clear {}: it holds no {MANIFEST} from a previous run",
                    dir.display()
                )));
            }
            fs::remove_dir_all(dir)?;
        }
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let f = fs::File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(f, m)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<RunManifest> {
    let f = fs::File::open(dir.join(MANIFEST))
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", dir.join(MANIFEST).display())))?;
    Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
}
