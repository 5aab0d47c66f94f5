//! Stage output directories: locking, atomic publication and sidecars.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use canopy_fewshot::seed;
use serde::{Deserialize, Serialize};

use crate::error::{io, CliError};

pub const SIDECAR: &str = "stage.json";
const LOCK: &str = ".lock";

/// Written next to every stage's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSidecar {
    pub stage: String,
    /// Hash of the stage's configuration and its input fingerprints.
    pub fingerprint: String,
    pub inputs: BTreeMap<String, String>,
    /// Fingerprints of the produced artifacts.
    pub outputs: BTreeMap<String, String>,
    pub version: String,
}

impl StageSidecar {
    pub fn new(stage: &str, config: &impl Serialize, inputs: BTreeMap<String, String>) -> Self {
        let config = serde_json::to_string(config).expect("config serializes");
        let mut chunks: Vec<&[u8]> = vec![stage.as_bytes(), config.as_bytes()];
        for (k, v) in &inputs {
            chunks.push(k.as_bytes());
            chunks.push(v.as_bytes());
        }
        StageSidecar {
            stage: stage.to_string(),
            fingerprint: seed::fingerprint(chunks),
            inputs,
            outputs: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn output(mut self, name: &str, fingerprint: String) -> Self {
        self.outputs.insert(name.to_string(), fingerprint);
        self
    }
}

/// An output root held exclusively for the lifetime of the value.
#[derive(Debug)]
pub struct Workspace {
    root: PathBuf,
    lock: PathBuf,
}

impl Workspace {
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| io(root, e))?;
        let lock = root.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => return Err(CliError::Locked(lock)),
            Err(e) => return Err(io(&lock, e)),
        }
        Ok(Workspace { root: root.to_path_buf(), lock })
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    /// Path of `file` inside the output directory `dir`, which `command`
    /// produces; it must exist.
    pub fn upstream(&self, dir: &str, file: &str, command: &'static str) -> Result<PathBuf, CliError> {
        let path = self.stage_dir(dir).join(file);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::MissingUpstream { path, stage: command })
        }
    }

    pub fn sidecar(&self, dir: &str, command: &'static str) -> Result<StageSidecar, CliError> {
        let path = self.upstream(dir, SIDECAR, command)?;
        let text = fs::read_to_string(&path).map_err(|e| io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    /// Starts writing `stage` into a scratch directory. Refuses when the
    /// stage already has outputs, unless `force`.
    pub fn begin(&self, stage: &str, force: bool) -> Result<StageWriter, CliError> {
        let dest = self.stage_dir(stage);
        if dest.exists() && !force {
            return Err(CliError::Refused(dest));
        }
        let tmp = self.root.join(format!(".{stage}.tmp"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        }
        fs::create_dir_all(&tmp).map_err(|e| io(&tmp, e))?;
        Ok(StageWriter { tmp, dest, committed: false })
    }
}

impl Drop for Workspace {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Scratch directory that replaces the stage directory on commit, and is
/// discarded otherwise.
#[derive(Debug)]
pub struct StageWriter {
    tmp: PathBuf,
    dest: PathBuf,
    committed: bool,
}

impl StageWriter {
    pub fn path(&self) -> &Path {
        &self.tmp
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.tmp.join(name)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf, CliError> {
        let path = self.file(name);
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Internal(e.to_string()))?;
        fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
        Ok(path)
    }

    pub fn commit(mut self, sidecar: &StageSidecar) -> Result<PathBuf, CliError> {
        self.write_json(SIDECAR, sidecar)?;
        if self.dest.exists() {
            fs::remove_dir_all(&self.dest).map_err(|e| io(&self.dest, e))?;
        }
        fs::rename(&self.tmp, &self.dest).map_err(|e| io(&self.dest, e))?;
        self.committed = true;
        Ok(self.dest.clone())
    }
}

impl Drop for StageWriter {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.tmp);
        }
    }
}
