//! Run directories and manifests.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adaface_core::checkpoint::CHECKPOINT_VERSION;
use adaface_core::synth::SNAPSHOT_VERSION;

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.txt";

/// An output directory that refuses to clobber earlier results unless asked.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path, overwrite: bool) -> CliResult<Self> {
        if root.exists() {
            let occupied = fs::read_dir(root)?.next().is_some();
            if occupied && !overwrite {
                return Err(CliError::OutputExists(root.to_path_buf()));
            }
        }
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Writes `name` through a buffered writer handed to `f`.
    pub fn write_with(
        &self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<fs::File>) -> adaface_core::Result<()>,
    ) -> CliResult<PathBuf> {
        let path = self.path(name);
        let mut w = BufWriter::new(fs::File::create(&path)?);
        f(&mut w)?;
        w.flush()?;
        Ok(path)
    }

    pub fn write_text(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, text)?;
        Ok(path)
    }

    pub fn write_manifest(&self, command: &str, config: &RunConfig) -> CliResult<PathBuf> {
        self.write_text(MANIFEST_FILE, &manifest_text(command, config))
    }
}

/// Manifest: `run.*` provenance keys followed by the resolved configuration.
pub fn manifest_text(command: &str, config: &RunConfig) -> String {
    let mut out = String::from("# adaface run manifest\n");
    out.push_str(&format!("run.command = {command}\n"));
    out.push_str(&format!("run.version = {}\n", env!("CARGO_PKG_VERSION")));
    out.push_str(&format!("run.checkpoint_format = {CHECKPOINT_VERSION}\n"));
    out.push_str(&format!("run.snapshot_format = {SNAPSHOT_VERSION}\n"));
    out.push_str(&config.to_text());
    out
}

/// Splits a manifest back into its command and configuration.
pub fn parse_manifest(text: &str) -> CliResult<(String, RunConfig)> {
    let mut command = None;
    let mut rest = String::new();
    for line in text.lines() {
        match line.trim().strip_prefix("run.") {
            Some(kv) => {
                if let Some((k, v)) = kv.split_once('=') {
                    if k.trim() == "command" {
                        command = Some(v.trim().to_string());
                    }
                }
            }
            None => {
                rest.push_str(line);
                rest.push('\n');
            }
        }
    }
    let command =
        command.ok_or_else(|| adaface_core::Error::Config("manifest has no run.command".into()))?;
    Ok((command, RunConfig::parse(&rest)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_override("margin.variant=arcface").unwrap();
        let (cmd, back) = parse_manifest(&manifest_text("train", &cfg)).unwrap();
        assert_eq!(cmd, "train");
        assert_eq!(back, cfg);
    }

    #[test]
    fn refuses_occupied_directory() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("x"), "1").unwrap();
        assert!(matches!(RunDir::create(dir.path(), false), Err(CliError::OutputExists(_))));
        assert!(RunDir::create(dir.path(), true).is_ok());
        assert!(RunDir::create(&dir.path().join("fresh"), false).is_ok());
    }
}
