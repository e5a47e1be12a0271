use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use hda_core::{write_atomic, Error, Result};
use serde::Serialize;

use crate::config::RunConfig;

pub const OUTPUT_ROOT_ENV: &str = "HDA_OUTPUT_ROOT";
pub const LOCK_FILE: &str = "run.lock";
pub const CONFIG_FILE: &str = "config.toml";
pub const INDEX_FILE: &str = "index.tsv";

pub fn default_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

/// A run directory held exclusively through its lock file for the
/// lifetime of the value.
#[derive(Debug)]
pub struct RunDir {
    pub path: PathBuf,
    root: PathBuf,
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    seed: u64,
    corpus_checksum: Option<String>,
    config_hash: String,
    code_version: &'a str,
    started_unix: u64,
}

impl RunDir {
    /// Creates `explicit`, or a fresh timestamped directory under `root`,
    /// and takes its lock.
    pub fn create(root: &Path, explicit: Option<&Path>, command: &str) -> Result<Self> {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let path = match explicit {
            Some(p) => p.to_path_buf(),
            None => root.join(format!("{command}-{}-{:09}", now.as_secs(), now.subsec_nanos())),
        };
        fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        let lock = path.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!("run directory {} is locked by another invocation", path.display()))
            } else {
                Error::io(&lock, e)
            }
        })?;
        writeln!(f, "{}", std::process::id()).map_err(|e| Error::io(&lock, e))?;
        Ok(RunDir {
            path,
            root: root.to_path_buf(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the config snapshot and run metadata.
    pub fn snapshot(&self, command: &str, cfg: &RunConfig, corpus_checksum: Option<String>) -> Result<()> {
        let text = cfg.to_toml()?;
        write_atomic(&self.file(CONFIG_FILE), text.as_bytes())?;
        let info = RunInfo {
            command,
            seed: cfg.seed,
            corpus_checksum,
            config_hash: hda_core::sha256_hex(text.as_bytes()),
            code_version: hda_core::ablation::CODE_VERSION,
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default().as_secs(),
        };
        self.write_json("run.json", &info)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
        bytes.push(b'\n');
        write_atomic(&self.file(name), &bytes)
    }

    /// Appends a summary line to the index under the output root.
    pub fn index(&self, command: &str, seed: u64, summary: &str) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let path = self.root.join(INDEX_FILE);
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{}\t{command}\t{seed}\t{summary}", self.path.display()).map_err(|e| Error::io(&path, e))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.path.join(LOCK_FILE));
    }
}
