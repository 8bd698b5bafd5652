//! Run manifests: command, resolved settings and content digests of inputs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

fn files_under(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).with_context(|| format!("listing {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 over a file, or over every file below a directory together with
/// its relative path. Manifest files are skipped so outputs can be hashed.
pub fn digest(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    if path.is_dir() {
        for f in files_under(path)? {
            if f.file_name().is_some_and(|n| n.to_string_lossy().ends_with(MANIFEST_SUFFIX)) {
                continue;
            }
            let rel = f.strip_prefix(path).unwrap_or(&f);
            h.update(rel.to_string_lossy().as_bytes());
            h.update([0u8]);
            h.update(std::fs::read(&f).with_context(|| format!("reading {}", f.display()))?);
            h.update([0u8]);
        }
    } else {
        h.update(std::fs::read(path).with_context(|| format!("reading {}", path.display()))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub const MANIFEST_SUFFIX: &str = "manifest.txt";

#[derive(Debug, Default)]
pub struct Manifest {
    command: String,
    settings: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &str, settings: &BTreeMap<String, String>) -> Self {
        Manifest {
            command: command.to_string(),
            settings: settings.clone(),
            inputs: BTreeMap::new(),
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> Result<()> {
        self.inputs.insert(label.to_string(), digest(path)?);
        Ok(())
    }

    pub fn render(&self) -> String {
        let mut out = format!("command\t{}\n", self.command);
        for (k, v) in &self.settings {
            out.push_str(&format!("setting.{k}\t{v}\n"));
        }
        for (k, v) in &self.inputs {
            out.push_str(&format!("input.{k}\tsha256:{v}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}
