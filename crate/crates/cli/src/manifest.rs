//! Run manifests: the resolved configuration, inputs and output hashes of a
//! run, enough to repeat it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub subcommand: String,
    pub config_file: Option<String>,
    pub seed: u64,
    /// Every configuration key after defaults, file, overrides and flags.
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, FileRecord>,
    pub out_dir: String,
    /// Output file name to SHA-256 of its bytes.
    pub outputs: BTreeMap<String, String>,
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn config(&self) -> Result<RunConfig, CliError> {
        serde_json::from_value(self.config.clone()).map_err(|e| CliError::Usage(format!("manifest config: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read manifest {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("manifest serialises");
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn input_paths(&self) -> BTreeMap<String, PathBuf> {
        self.inputs.iter().map(|(k, r)| (k.clone(), PathBuf::from(&r.path))).collect()
    }
}
