//! Run directories, manifests and CSV output.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Hex prefix of sha256 over the command and the resolved config (which
/// carries the seed).
pub fn run_id(command: &str, resolved_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0]);
    h.update(resolved_toml.as_bytes());
    h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub run_id: String,
    pub seed: u64,
    pub config_path: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub config: RunConfig,
}

pub struct RunDir {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl RunDir {
    pub fn create(out: &Path, command: &str, config_path: Option<PathBuf>, cfg: &RunConfig) -> Result<Self> {
        let id = run_id(command, &cfg.to_toml()?);
        let dir = out.join(format!("{command}-{id}"));
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = Manifest {
            command: command.into(),
            run_id: id,
            seed: cfg.seed,
            config_path,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: cfg.clone(),
        };
        Ok(RunDir { dir, manifest })
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    /// Path of output `name`, recorded in the manifest.
    pub fn output(&mut self, name: &str) -> PathBuf {
        self.manifest.outputs.push(PathBuf::from(name));
        self.dir.join(name)
    }

    pub fn write_csv(&mut self, name: &str, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
        let path = self.output(name);
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        let path = self.output("manifest.toml");
        let text = toml::to_string(&self.manifest).context("serializing manifest")?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(self.dir)
    }
}

pub fn strings<const N: usize>(xs: [&str; N]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}
