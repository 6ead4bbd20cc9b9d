//! Run directory layout:
//!
//! ```text
//! <root>/config.toml        resolved config
//! <root>/config.hash        hex SHA-256 of the config
//! <root>/metrics.jsonl      one JSON record per line, append-only
//! <root>/step_<N>.ckpt      checkpoints
//! <root>/diagnostic.json    written when a run aborts
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const CONFIG_HASH_FILE: &str = "config.hash";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";

pub struct RunDir {
    root: PathBuf,
    metrics: BufWriter<File>,
}

impl RunDir {
    /// Creates a fresh run directory. An existing non-empty directory is
    /// refused unless `force`, in which case it is cleared first.
    pub fn create(root: &Path, config: &RunConfig, force: bool) -> Result<Self> {
        if root.exists() && fs::read_dir(root)?.next().is_some() {
            if !force {
                return Err(Error::Input(format!(
                    "{} already exists; pass --force to overwrite",
                    root.display()
                )));
            }
            fs::remove_dir_all(root)?;
        }
        fs::create_dir_all(root)?;
        fs::write(root.join(CONFIG_FILE), config.to_toml_string())?;
        fs::write(root.join(CONFIG_HASH_FILE), config.hash())?;
        let metrics = OpenOptions::new().create(true).append(true).open(root.join(METRICS_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            metrics: BufWriter::new(metrics),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn log<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, record)?;
        self.metrics.write_all(b"\n")?;
        Ok(())
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        checkpoint_path(&self.root, step)
    }

    pub fn save_checkpoint(&mut self, step: usize, ckpt: &Checkpoint) -> Result<PathBuf> {
        self.metrics.flush()?;
        let path = self.checkpoint_path(step);
        ckpt.save(&path)?;
        Ok(path)
    }

    /// Records why a run stopped.
    pub fn write_diagnostic(&mut self, err: &Error) -> Result<()> {
        self.metrics.flush()?;
        let step = match err {
            Error::NonFinite { step, .. } => Some(*step),
            _ => None,
        };
        let doc = serde_json::json!({
            "error": err.to_string(),
            "step": step,
            "last_checkpoint": latest_checkpoint(&self.root)?.map(|(s, _)| s),
        });
        fs::write(self.root.join(DIAGNOSTIC_FILE), serde_json::to_string_pretty(&doc)?)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.metrics.flush()?;
        Ok(())
    }
}

pub fn checkpoint_path(root: &Path, step: usize) -> PathBuf {
    root.join(format!("step_{step}.ckpt"))
}

/// The highest-numbered `step_<N>.ckpt` under `root`.
pub fn latest_checkpoint(root: &Path) -> Result<Option<(usize, PathBuf)>> {
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let step = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("step_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(step) = step {
            if best.as_ref().is_none_or(|(b, _)| step > *b) {
                best = Some((step, path));
            }
        }
    }
    Ok(best)
}

/// Reads a metrics file back as JSON values, one per line.
pub fn read_metrics(root: &Path) -> Result<Vec<serde_json::Value>> {
    let path = root.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::load(&path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
