//! Pipeline configuration file (TOML) and its content hash.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use pfa_core::fusion::{PamSource, Regularizer, DEFAULT_LOCAL_WEIGHT};
use pfa_core::regularizers::{DenseCrfParams, PottsParams};
use pfa_core::ForestConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ConfigError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub corpus: CorpusSection,
    #[serde(default)]
    pub features: FeatureSection,
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default)]
    pub fusion: FusionSection,
    #[serde(default)]
    pub regularizer: RegularizerSection,
    #[serde(default)]
    pub potts: PottsParams,
    #[serde(default)]
    pub crf: DenseCrfParams,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    pub manifest: PathBuf,
    pub num_classes: usize,
}

/// Filter bank source: a bank file, or the built-in synthetic bank with a seed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSection {
    pub bank: Option<PathBuf>,
    /// Defaults to the run seed.
    pub synthetic_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub source: PamSource,
    pub w_local: f64,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection { source: PamSource::Combined, w_local: DEFAULT_LOCAL_WEIGHT }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RegularizerKind {
    None,
    #[default]
    Potts,
    Crf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerSection {
    pub kind: RegularizerKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// Images processed concurrently; 0 uses every core.
    pub workers: usize,
    pub seed: u64,
    /// Also write each image's local probability map (PAM1) under `local/`.
    pub persist_local_probs: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection { output_dir: PathBuf::from("pfa-out"), workers: 0, seed: 0, persist_local_probs: false }
    }
}

impl PipelineConfig {
    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(ConfigError)?;
        let mut cfg: PipelineConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display())).map_err(ConfigError)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.corpus.manifest = base.join(&cfg.corpus.manifest);
        cfg.run.output_dir = base.join(&cfg.run.output_dir);
        if let Some(bank) = &cfg.features.bank {
            cfg.features.bank = Some(base.join(bank));
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let check = || -> anyhow::Result<()> {
            pfa_core::ClassSet::new(self.corpus.num_classes)?;
            if !(0.0..=1.0).contains(&self.fusion.w_local) {
                bail!("fusion.w_local must be in [0, 1], got {}", self.fusion.w_local);
            }
            if self.features.bank.is_some() && self.features.synthetic_seed.is_some() {
                bail!("features.bank and features.synthetic_seed are mutually exclusive");
            }
            if self.forest.n_trees == 0 || self.forest.n_selected_features == 0 || self.forest.min_leaf == 0 {
                bail!("forest.n_trees, forest.n_selected_features and forest.min_leaf must be positive");
            }
            self.potts.validate()?;
            self.crf.validate()?;
            Ok(())
        };
        check().map_err(|e| ConfigError(e).into())
    }

    pub fn regularizer(&self) -> Regularizer {
        match self.regularizer.kind {
            RegularizerKind::None => Regularizer::None,
            RegularizerKind::Potts => Regularizer::Potts(self.potts.clone()),
            RegularizerKind::Crf => Regularizer::Crf(self.crf.clone()),
        }
    }

    pub fn bank_seed(&self) -> u64 {
        self.features.synthetic_seed.unwrap_or(self.run.seed)
    }

    /// SHA-256 over every setting that affects outputs, plus the bank file's
    /// bytes when one is configured. Worker count and output location are excluded.
    pub fn content_hash(&self) -> anyhow::Result<String> {
        let mut echo = self.clone();
        echo.run.workers = 0;
        echo.run.output_dir = PathBuf::new();
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&echo)?);
        if let Some(bank) = &self.features.bank {
            hasher.update(std::fs::read(bank).with_context(|| format!("reading bank {}", bank.display()))?);
        }
        Ok(hex(&hasher.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seed for one image's forest, derived from the run seed and the image id.
pub fn image_seed(run_seed: u64, id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(run_seed.to_le_bytes());
    hasher.update(id.as_bytes());
    u64::from_le_bytes(hasher.finalize()[..8].try_into().unwrap())
}
