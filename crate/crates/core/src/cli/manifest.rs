use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::{Error, Result};

/// Describes one CLI invocation. Written to `manifest.json` before any
/// output, and lists every file the run produces.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config_paths: Vec<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub tool_version: String,
    /// Seconds since the Unix epoch.
    pub created: u64,
    pub outputs: Vec<String>,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `dir`, or `run-<unix seconds>` in the working directory.
pub fn output_dir(dir: Option<&Path>) -> PathBuf {
    dir.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(format!("run-{}", now())))
}

impl RunManifest {
    pub fn new(subcommand: &str, config_paths: Vec<String>, seed: u64, output_dir: PathBuf) -> Self {
        Self {
            subcommand: subcommand.into(),
            config_paths,
            seed,
            output_dir,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            created: now(),
            outputs: Vec::new(),
        }
    }

    /// Create the output directory and write the manifest naming `outputs`.
    pub fn commit(&mut self, outputs: &[&str]) -> Result<Outputs> {
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        let dir = &self.output_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(Outputs { dir: dir.clone(), allowed: self.outputs.clone() })
    }
}

/// Writer restricted to the files a manifest declares.
pub struct Outputs {
    dir: PathBuf,
    allowed: Vec<String>,
}

impl Outputs {
    pub fn path(&self, name: &str) -> PathBuf {
        debug_assert!(self.allowed.iter().any(|a| a == name), "{name} missing from manifest");
        self.dir.join(name)
    }

    /// Stem for a `<stem>.json` + `<stem>.bin` pair.
    pub fn stem(&self, stem: &str) -> PathBuf {
        let _ = self.path(&format!("{stem}.json"));
        let _ = self.path(&format!("{stem}.bin"));
        self.dir.join(stem)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    pub fn write_json(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let text = serde_json::to_string_pretty(value).expect("output serializes");
        self.write(name, text + "\n")
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}
