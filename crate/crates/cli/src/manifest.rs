//! Sidecar run manifests (`<output>.manifest.json`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iterag_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRef {
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// False when a live endpoint took part; reruns may then differ.
    pub deterministic: bool,
    pub seed: u64,
    pub counts: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub discard_reasons: BTreeMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputRef>,
}

pub fn manifest_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    output.with_file_name(name)
}

pub fn read_manifest(artifact: &Path) -> Result<Option<Manifest>> {
    let path = manifest_path(artifact);
    if !path.exists() {
        return Ok(None);
    }
    let bytes = std::fs::read(&path)?;
    iterag_core::model::decode_json(&bytes)
        .map(Some)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

pub fn write_manifest(output: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::from)?;
    text.push('\n');
    std::fs::write(manifest_path(output), text)?;
    Ok(())
}

/// Describe the inputs and reject a mix of artifacts produced under
/// different configurations. Inputs without a manifest are accepted.
pub fn check_inputs(paths: &[&Path]) -> Result<Vec<InputRef>> {
    let mut refs = Vec::with_capacity(paths.len());
    let mut first: Option<(String, &Path)> = None;
    for path in paths {
        let hash = read_manifest(path)?.map(|m| m.config_hash);
        if let Some(h) = &hash {
            match &first {
                None => first = Some((h.clone(), path)),
                Some((seen, other)) if seen != h => {
                    return Err(Error::validation(format!(
                        "inputs come from different configurations: {} ({}) vs {} ({})",
                        other.display(),
                        short(seen),
                        path.display(),
                        short(h)
                    )));
                }
                Some(_) => {}
            }
        }
        refs.push(InputRef {
            path: path.display().to_string(),
            config_hash: hash,
        });
    }
    Ok(refs)
}

fn short(hash: &str) -> &str {
    hash.get(..12).unwrap_or(hash)
}
