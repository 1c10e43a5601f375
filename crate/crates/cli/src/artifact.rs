//! Output directories: every file goes through an atomic write, and the run
//! log lists each output with its SHA-256.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use smorm_core::io::atomic_write;

use crate::config::RunConfig;
use crate::error::Result;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RUN_LOG: &str = "run.json";

pub fn git_describe() -> &'static str {
    env!("SMORM_LAB_GIT_DESCRIBE")
}

#[derive(Clone, Debug, Serialize)]
pub struct OutputEntry {
    pub bytes: usize,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
struct RunLog<'a> {
    command: &'a str,
    seed: u64,
    git_describe: &'a str,
    version: &'a str,
    outputs: &'a BTreeMap<String, OutputEntry>,
}

/// An output directory being filled by one command.
#[derive(Debug)]
pub struct Artifact {
    dir: PathBuf,
    command: String,
    seed: u64,
    outputs: BTreeMap<String, OutputEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

impl Artifact {
    /// Creates `dir` and writes the resolved config into it.
    pub fn create(dir: &Path, command: &str, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut a = Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            seed: cfg.seed,
            outputs: BTreeMap::new(),
        };
        a.write(RESOLVED_CONFIG, cfg.to_toml().as_bytes())?;
        Ok(a)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `dir/name` (creating parent directories) and records its hash.
    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        atomic_write(&path, bytes)?;
        self.outputs.insert(
            name.to_string(),
            OutputEntry {
                bytes: bytes.len(),
                sha256: sha256_hex(bytes),
            },
        );
        Ok(path)
    }

    pub fn write_json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, to_json(value).as_bytes())
    }

    /// Records a file written by another routine (already atomic).
    pub fn record(&mut self, name: &str) -> Result<()> {
        let bytes = std::fs::read(self.dir.join(name))?;
        self.outputs.insert(
            name.to_string(),
            OutputEntry {
                bytes: bytes.len(),
                sha256: sha256_hex(&bytes),
            },
        );
        Ok(())
    }

    /// Writes the run log and returns the output directory.
    pub fn finish(self) -> Result<PathBuf> {
        let log = RunLog {
            command: &self.command,
            seed: self.seed,
            git_describe: git_describe(),
            version: env!("CARGO_PKG_VERSION"),
            outputs: &self.outputs,
        };
        atomic_write(&self.dir.join(RUN_LOG), to_json(&log).as_bytes())?;
        Ok(self.dir)
    }
}
