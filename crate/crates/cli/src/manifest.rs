//! The record every run leaves beside its outputs: the frozen settings,
//! tool versions and digests of everything read and written.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub command: String,
    pub seed: u64,
    pub versions: BTreeMap<String, String>,
    pub settings: Value,
    /// Absolute paths.
    pub inputs: Vec<FileDigest>,
    /// Paths relative to the output directory.
    pub outputs: Vec<FileDigest>,
}

pub fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("t5lab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("checkpoint".to_string(), t5lab::checkpoint::CHECKPOINT_VERSION.to_string()),
        ("vocabulary".to_string(), t5lab::tokenizer::FORMAT_VERSION.to_string()),
        ("manifest".to_string(), MANIFEST_FORMAT.to_string()),
    ])
}

pub fn digest_file(path: &Path) -> Result<FileDigest> {
    let mut f = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    let mut bytes = 0u64;
    loop {
        let n = f.read(&mut buf).map_err(|e| CliError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
        bytes += n as u64;
    }
    Ok(FileDigest {
        path: path.display().to_string(),
        sha256: hex::encode(h.finalize()),
        bytes,
    })
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let m: Manifest =
            serde_json::from_str(&src).map_err(|e| CliError::Manifest(format!("{}: {e}", path.display())))?;
        if m.format != MANIFEST_FORMAT {
            return Err(CliError::Manifest(format!(
                "format {} is not supported (expected {MANIFEST_FORMAT})",
                m.format
            )));
        }
        Ok(m)
    }

    /// Fails unless this build and every input match the recorded ones.
    pub fn check_replayable(&self) -> Result<()> {
        let now = versions();
        if self.versions != now {
            return Err(CliError::Manifest(format!(
                "recorded versions {:?} differ from this build {:?}",
                self.versions, now
            )));
        }
        for input in &self.inputs {
            let d = digest_file(Path::new(&input.path))?;
            if d.sha256 != input.sha256 {
                return Err(CliError::Manifest(format!(
                    "input {} changed (recorded sha256 {}, found {})",
                    input.path, input.sha256, d.sha256
                )));
            }
        }
        Ok(())
    }
}

/// Tracks what a run reads and writes. Every output lives under `out`.
pub struct Recorder {
    out: PathBuf,
    inputs: BTreeMap<String, FileDigest>,
    outputs: BTreeSet<String>,
}

impl Recorder {
    pub fn new(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        Ok(Self {
            out: out.to_path_buf(),
            inputs: BTreeMap::new(),
            outputs: BTreeSet::new(),
        })
    }

    /// Digests an input and returns its path.
    pub fn input(&mut self, path: &str) -> Result<PathBuf> {
        let p = PathBuf::from(path);
        if !self.inputs.contains_key(path) {
            self.inputs.insert(path.to_string(), digest_file(&p)?);
        }
        Ok(p)
    }

    /// Path for an output file, registered for the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.outputs.insert(name.to_string());
        self.out.join(name)
    }

    /// A directory under the output root; files in it are registered with
    /// [`Recorder::register`].
    pub fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.out.join(name);
        std::fs::create_dir_all(&d).map_err(|e| CliError::io(&d, e))?;
        Ok(d)
    }

    pub fn register(&mut self, path: &Path) -> Result<()> {
        let rel = path
            .strip_prefix(&self.out)
            .map_err(|_| CliError::Manifest(format!("{} is outside the output directory", path.display())))?;
        self.outputs.insert(rel.display().to_string());
        Ok(())
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let p = self.output(name);
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let mut s = serde_json::to_string_pretty(value).expect("reports serialize");
        s.push('\n');
        self.write(name, s.as_bytes())
    }

    pub fn write_jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        let mut s = String::new();
        for r in rows {
            s.push_str(&serde_json::to_string(r).expect("rows serialize"));
            s.push('\n');
        }
        self.write(name, s.as_bytes())
    }

    pub fn finish(self, command: &str, settings: Value) -> Result<Manifest> {
        let mut outputs = Vec::new();
        for name in &self.outputs {
            let mut d = digest_file(&self.out.join(name))?;
            d.path = name.clone();
            outputs.push(d);
        }
        let m = Manifest {
            format: MANIFEST_FORMAT,
            command: command.to_string(),
            seed: settings.get("seed").and_then(Value::as_u64).unwrap_or(0),
            versions: versions(),
            settings,
            inputs: self.inputs.into_values().collect(),
            outputs,
        };
        let path = self.out.join(MANIFEST_FILE);
        let mut s = serde_json::to_string_pretty(&m).expect("manifest serializes");
        s.push('\n');
        std::fs::write(&path, s).map_err(|e| CliError::io(&path, e))?;
        Ok(m)
    }
}
