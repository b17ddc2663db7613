//! `manifest.json` under the output directory: per command, the artifacts it
//! wrote and the hash of the settings that produced them.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub config_hash: String,
    pub artifacts: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub commands: BTreeMap<String, Entry>,
}

/// Records `entry` for `command`, keeping entries of other commands.
pub fn record(out: &Path, command: &str, entry: Entry) -> Result<()> {
    let path = out.join(FILE_NAME);
    let mut manifest: Manifest = if path.exists() {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        Manifest::default()
    };
    manifest.commands.insert(command.to_owned(), entry);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}
