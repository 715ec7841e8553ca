//! Output files and the manifest that lists them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

#[derive(Serialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: usize,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub subcommand: String,
    pub config: Option<String>,
    pub seed: u64,
    pub output_dir: String,
    pub files: Vec<FileEntry>,
}

/// Writes files into the output directory and records their hashes.
pub struct Outputs {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Outputs {
    pub fn new(subcommand: &str, dir: &Path, config: Option<&Path>, seed: u64) -> Result<Self, Failure> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest: RunManifest {
                schema_version: 1,
                subcommand: subcommand.into(),
                config: config.map(|p| p.display().to_string()),
                seed,
                output_dir: dir.display().to_string(),
                files: Vec::new(),
            },
        })
    }

    pub fn bytes(&mut self, name: &str, data: &[u8]) -> Result<(), Failure> {
        fs::write(self.dir.join(name), data)?;
        self.manifest.files.push(FileEntry {
            path: name.into(),
            sha256: hex::encode(Sha256::digest(data)),
            bytes: data.len(),
        });
        Ok(())
    }

    pub fn text(&mut self, name: &str, s: &str) -> Result<(), Failure> {
        self.bytes(name, s.as_bytes())
    }

    /// Pretty JSON; `serde_json` maps are ordered, so keys come out sorted.
    pub fn json(&mut self, name: &str, v: &serde_json::Value) -> Result<(), Failure> {
        let mut s = serde_json::to_string_pretty(v).expect("value serialises");
        s.push('\n');
        self.text(name, &s)
    }

    pub fn finish(self) -> Result<(), Failure> {
        let v = serde_json::to_value(&self.manifest).expect("manifest serialises");
        let mut s = serde_json::to_string_pretty(&v).expect("value serialises");
        s.push('\n');
        fs::write(self.dir.join("manifest.json"), s)?;
        Ok(())
    }
}
