use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use diffitm::{Error, Result};

pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Running,
    Ok,
    Failed,
}

/// Everything needed to repeat a run: the exact argument vector, the
/// resolved configuration with every default filled in, and hashes of what
/// went in and came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub threads: usize,
    pub inputs: BTreeMap<String, String>,
    pub out: PathBuf,
    pub outputs: BTreeMap<String, String>,
    pub status: Status,
    pub error: Option<String>,
    pub started_unix: u64,
    pub wall_seconds: Option<f64>,
}

pub struct ManifestWriter {
    pub manifest: RunManifest,
    started: Instant,
}

impl ManifestWriter {
    /// Write the initial manifest to `out` before any work happens. Inputs
    /// that cannot be read are recorded as such; the work itself reports
    /// the failure.
    pub fn begin(
        command: &str,
        config: serde_json::Value,
        seeds: BTreeMap<String, u64>,
        threads: usize,
        inputs: &[(&str, &Path)],
        out: &Path,
    ) -> Result<ManifestWriter> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut hashed = BTreeMap::new();
        for (name, path) in inputs {
            let hash = hash_path(path).unwrap_or_else(|e| format!("unavailable: {e}"));
            hashed.insert(format!("{name}:{}", path.display()), hash);
        }
        let manifest = RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            seeds,
            threads,
            inputs: hashed,
            out: out.to_path_buf(),
            outputs: BTreeMap::new(),
            status: Status::Running,
            error: None,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_seconds: None,
        };
        write(out, &manifest)?;
        Ok(ManifestWriter {
            manifest,
            started: Instant::now(),
        })
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.manifest.wall_seconds = Some(self.started.elapsed().as_secs_f64());
        match outcome {
            Ok(()) => self.manifest.status = Status::Ok,
            Err(e) => {
                self.manifest.status = Status::Failed;
                self.manifest.error = Some(e.to_string());
            }
        }
        self.manifest.outputs = hash_outputs(&self.manifest.out)?;
        write(&self.manifest.out, &self.manifest)
    }
}

fn write(out: &Path, m: &RunManifest) -> Result<()> {
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m)? + "\n";
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn hash_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| Error::invalid(format!("walking {}: {e}", root.display())))?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

/// SHA-256 of a file, or of the sorted `(relative path, file hash)` list
/// of a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_file() {
        return hash_file(path);
    }
    let mut h = Sha256::new();
    for f in files_under(path)? {
        if f.file_name().is_some_and(|n| n == MANIFEST_FILE) {
            continue;
        }
        let rel = f.strip_prefix(path).unwrap_or(&f);
        h.update(rel.to_string_lossy().as_bytes());
        h.update(hash_file(&f)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

/// Hash of every file under `out` except the manifest itself.
pub fn hash_outputs(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for f in files_under(out)? {
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().into_owned();
        if rel == MANIFEST_FILE {
            continue;
        }
        map.insert(rel, hash_file(&f)?);
    }
    Ok(map)
}
