//! Run directories and their manifests.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Path relative to the run directory, with `/` separators.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub code_version: String,
    pub seed: u64,
    /// Seconds since the Unix epoch.
    pub started: u64,
    pub finished: u64,
    pub files: Vec<FileEntry>,
}

impl RunManifest {
    /// The manifest without timestamps or the written configuration, for
    /// comparing runs. The configuration is covered by `config_hash`, which
    /// ignores the output path.
    pub fn fingerprint(&self) -> RunManifest {
        let files = self.files.iter().filter(|f| f.path != CONFIG_FILE).cloned().collect();
        RunManifest {
            started: 0,
            finished: 0,
            files,
            ..self.clone()
        }
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| CliError::Validation(format!("cannot read manifest in {}: {e}", dir.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("bad manifest: {e}")))
    }
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Fails unless `out` is absent or an empty directory.
pub fn check_fresh(out: &Path) -> CliResult<()> {
    if out.exists() {
        let empty = out.is_dir() && fs::read_dir(out)?.next().is_none();
        if !empty {
            return Err(CliError::Validation(format!(
                "output directory {} already exists; runs are never overwritten",
                out.display()
            )));
        }
    }
    Ok(())
}

/// An output directory being filled by one command.
pub struct RunDir {
    root: PathBuf,
    command: String,
    config_hash: String,
    seed: u64,
    started: u64,
    files: Vec<PathBuf>,
}

impl RunDir {
    /// Creates the directory and writes the resolved configuration.
    pub fn create(command: &str, cfg: &ExperimentConfig) -> CliResult<Self> {
        check_fresh(&cfg.out)?;
        fs::create_dir_all(&cfg.out)?;
        let mut run = Self {
            root: cfg.out.clone(),
            command: command.to_string(),
            config_hash: cfg.hash()?,
            seed: cfg.seed,
            started: now(),
            files: Vec::new(),
        };
        let path = run.path(CONFIG_FILE)?;
        fs::write(&path, cfg.to_toml_string()?)?;
        run.record(&path);
        Ok(run)
    }

    /// A run directory without a configuration, for derived outputs.
    pub fn create_plain(command: &str, out: &Path) -> CliResult<Self> {
        check_fresh(out)?;
        fs::create_dir_all(out)?;
        Ok(Self {
            root: out.to_path_buf(),
            command: command.to_string(),
            config_hash: String::new(),
            seed: 0,
            started: now(),
            files: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of a file inside the run, creating parent directories.
    pub fn path(&self, rel: &str) -> CliResult<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    pub fn record(&mut self, path: &Path) {
        self.files.push(path.to_path_buf());
    }

    /// Writes the manifest after checking that every recorded file exists.
    pub fn finish(self) -> CliResult<RunManifest> {
        let mut files = Vec::with_capacity(self.files.len());
        for p in &self.files {
            if !p.is_file() {
                return Err(CliError::Runtime(format!("artifact {} is missing", p.display())));
            }
            let rel = p.strip_prefix(&self.root).unwrap_or(p);
            let rel = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            files.push(FileEntry {
                path: rel,
                bytes: fs::metadata(p)?.len(),
                sha256: sha256_file(p)?,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = RunManifest {
            command: self.command,
            config_hash: self.config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            started: self.started,
            finished: now(),
            files,
        };
        fs::write(self.root.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
        Ok(manifest)
    }
}
