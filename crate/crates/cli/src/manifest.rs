use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

/// Everything needed to repeat a run: the fully resolved configuration and
/// digests of every file read and written. No timestamps, so identical runs
/// give identical manifests.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub subcommand: &'static str,
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, Failure> {
    let bytes = fs::read(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl RunManifest {
    pub fn new(subcommand: &'static str, config: &impl Serialize, seed: Option<u64>) -> Self {
        Self {
            tool: "hoprank",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            config: serde_json::to_value(config).expect("arguments serialize"),
            seed,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    /// Records a value the arguments left to a mode-dependent default.
    pub fn resolve(&mut self, key: &str, value: impl Serialize) {
        if let Some(obj) = self.config.as_object_mut() {
            obj.insert(key.to_string(), serde_json::to_value(value).expect("value serializes"));
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<(), Failure> {
        self.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    pub fn output(&mut self, path: &Path) -> Result<(), Failure> {
        self.outputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Writes the manifest to `at` and returns that path.
    pub fn write(&self, at: PathBuf) -> Result<PathBuf, Failure> {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        fs::write(&at, s).map_err(|e| Failure::Data(format!("{}: {e}", at.display())))?;
        Ok(at)
    }
}

/// `<file>.manifest.json` next to a file output.
pub fn beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}
