//! Batch pipeline behind the `pfa` command: curation, local annotators,
//! PFA promotion, evaluation and gap arithmetic over a manifest of images.

pub mod config;
pub mod corpus;
pub mod curate;
pub mod evaluate;
pub mod manifest;
pub mod pipeline;

use std::fmt;
use std::path::Path;

use anyhow::Context;

pub use config::PipelineConfig;
pub use manifest::{Manifest, Record};

/// Invalid configuration or inputs detected before any image is processed (exit code 2).
#[derive(Debug)]
pub struct ConfigError(pub anyhow::Error);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

pub(crate) fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    ConfigError(anyhow::anyhow!("{msg}")).into()
}

/// Writes through a temporary sibling and renames, so readers never see partial files.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))
}

pub(crate) fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn thread_pool(workers: usize) -> anyhow::Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new().num_threads(workers).build().context("starting worker pool")
}
