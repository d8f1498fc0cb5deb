//! `promote` and `features`: per-image local annotators, fusion,
//! regularization, PFA export and the run report.

use std::path::{Path, PathBuf};

use anyhow::Context;
use log::{info, warn};
use pfa_core::fusion::{pfa_variant, PamSource};
use pfa_core::io::{load_label_map, load_rgb_png, load_scribbles, save_label_png};
use pfa_core::regularizers::EnergyReport;
use pfa_core::{
    accumulate_confusion, extract_features, load_filter_bank, load_global_probs, miou, predict_local,
    save_probability_map, select_and_retrain, synthetic_filter_bank, ClassSet, ConfusionMatrix, EvalReport, FilterBank,
    ForestConfig, ProbabilityMap, RgbImage,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{image_seed, PipelineConfig};
use crate::manifest::{Manifest, Record};
use crate::{config_error, thread_pool, write_json, ConfigError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: String,
    pub status: ImageStatus,
    /// Which PFA variant produced the labels, e.g. `comb+potts`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyReport>,
    /// PFA against ground truth, when the manifest lists one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageStatus {
    Ok,
    Failed,
}

#[derive(Debug, Serialize, Deserialize)]
struct ImageState {
    config_hash: String,
    entry: ImageEntry,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub config: PipelineConfig,
    pub config_hash: String,
    pub num_images: usize,
    pub num_ok: usize,
    pub num_failed: usize,
    /// Dataset-level PFA quality over every image with ground truth.
    pub pfa_eval: Option<EvalReport>,
    pub images: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RunSummary {
    pub num_ok: usize,
    pub num_failed: usize,
    /// Images whose outputs from an earlier run with the same config were reused.
    pub num_cached: usize,
    pub report: PathBuf,
}

impl RunSummary {
    pub fn all_ok(&self) -> bool {
        self.num_failed == 0
    }
}

/// Everything shared by the images of one run.
struct RunContext {
    cfg: PipelineConfig,
    classes: ClassSet,
    bank: FilterBank,
    hash: String,
}

impl RunContext {
    fn new(cfg: &PipelineConfig) -> anyhow::Result<(Self, Manifest)> {
        cfg.validate()?;
        let manifest = Manifest::load(&cfg.corpus.manifest).map_err(ConfigError)?;
        if manifest.records.is_empty() {
            return Err(config_error("manifest lists no images"));
        }
        let bank = match &cfg.features.bank {
            Some(path) => load_filter_bank(path)
                .with_context(|| format!("loading filter bank {}", path.display()))
                .map_err(ConfigError)?,
            None => synthetic_filter_bank(cfg.bank_seed()),
        };
        if cfg.forest.n_selected_features > bank.len() {
            return Err(config_error(format!(
                "forest.n_selected_features = {} exceeds the bank's {} filters",
                cfg.forest.n_selected_features,
                bank.len()
            )));
        }
        let classes = ClassSet::new(cfg.corpus.num_classes).map_err(|e| ConfigError(e.into()))?;
        let hash = cfg.content_hash().map_err(ConfigError)?;
        Ok((RunContext { cfg: cfg.clone(), classes, bank, hash }, manifest))
    }

    fn local_probs(&self, record: &Record, img: &RgbImage) -> anyhow::Result<ProbabilityMap> {
        let scribbles = load_scribbles(&record.scribble, img.grid(), &self.classes)
            .with_context(|| format!("loading scribbles {}", record.scribble.display()))?;
        let features = extract_features(img, &self.bank);
        let forest_cfg = ForestConfig { seed: image_seed(self.cfg.run.seed, &record.id), ..self.cfg.forest.clone() };
        let forest = select_and_retrain(&features, &scribbles, &forest_cfg)?;
        Ok(predict_local(&forest, &features)?)
    }
}

fn load_image(record: &Record) -> anyhow::Result<RgbImage> {
    load_rgb_png(&record.image).with_context(|| format!("loading image {}", record.image.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Runs the configured PFA variant over every manifest image.
///
/// Per-image outputs under `output_dir`: `pfa/<id>.png`, `state/<id>.json`
/// and, when enabled, `local/<id>.pam`; plus `report.json` for the run.
/// Images whose state file carries the current config hash are not recomputed.
pub fn promote(cfg: &PipelineConfig) -> anyhow::Result<RunSummary> {
    let (ctx, manifest) = RunContext::new(cfg)?;
    let source = cfg.fusion.source;
    let needs_global = matches!(source, PamSource::Global | PamSource::Combined);
    let missing: Vec<&str> =
        manifest.records.iter().filter(|r| needs_global && r.global.is_none()).map(|r| r.id.as_str()).collect();
    if !missing.is_empty() {
        return Err(config_error(format!(
            "the {source} variant needs global probabilities; missing for {}",
            missing.join(", ")
        )));
    }

    let out = &cfg.run.output_dir;
    for dir in ["pfa", "state"] {
        create_dir(&out.join(dir))?;
    }
    if cfg.run.persist_local_probs {
        create_dir(&out.join("local"))?;
    }
    let regularizer = cfg.regularizer();

    let process = |record: &Record| -> anyhow::Result<ImageEntry> {
        let img = load_image(record)?;
        let local = match source {
            PamSource::Global => None,
            _ => Some(ctx.local_probs(record, &img)?),
        };
        if let (Some(p), true) = (&local, cfg.run.persist_local_probs) {
            save_probability_map(&out.join("local").join(format!("{}.pam", record.id)), p)?;
        }
        let global = match &record.global {
            Some(path) if needs_global => Some(
                load_global_probs(path, img.grid(), &ctx.classes)
                    .with_context(|| format!("loading global probabilities {}", path.display()))?,
            ),
            _ => None,
        };
        let pfa = pfa_variant(local.as_ref(), global.as_ref(), &img, source, &regularizer, cfg.fusion.w_local)?;
        let eval = match &record.gt {
            Some(path) => {
                let gt = load_label_map(path, Some(img.grid()))
                    .with_context(|| format!("loading ground truth {}", path.display()))?;
                let mut conf = ConfusionMatrix::new(ctx.classes.len());
                accumulate_confusion(&pfa.labels, &gt, &mut conf)?;
                // A ground truth made only of void pixels has nothing to score.
                miou(&conf).ok()
            }
            None => None,
        };
        save_label_png(&out.join("pfa").join(format!("{}.png", record.id)), &pfa.labels)?;
        Ok(ImageEntry {
            id: record.id.clone(),
            status: ImageStatus::Ok,
            variant: Some(pfa.variant),
            energy: pfa.energy,
            eval,
            error: None,
        })
    };

    let pool = thread_pool(cfg.run.workers)?;
    let results: Vec<(ImageEntry, bool)> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let state_path = out.join("state").join(format!("{}.json", record.id));
                if let Some(entry) =
                    cached_entry(&state_path, &out.join("pfa").join(format!("{}.png", record.id)), &ctx.hash)
                {
                    info!("{}: reusing outputs of an earlier run", record.id);
                    return (entry, true);
                }
                let entry = match process(record) {
                    Ok(entry) => {
                        info!("{}: {}", record.id, entry.variant.as_deref().unwrap_or(""));
                        entry
                    }
                    Err(e) => {
                        warn!("{}: {e:#}", record.id);
                        ImageEntry {
                            id: record.id.clone(),
                            status: ImageStatus::Failed,
                            variant: None,
                            energy: None,
                            eval: None,
                            error: Some(format!("{e:#}")),
                        }
                    }
                };
                if entry.status == ImageStatus::Ok {
                    let state = ImageState { config_hash: ctx.hash.clone(), entry: entry.clone() };
                    if let Err(e) = write_json(&state_path, &state) {
                        warn!("{}: could not record completion: {e:#}", record.id);
                    }
                }
                (entry, false)
            })
            .collect()
    });

    let num_cached = results.iter().filter(|(_, cached)| *cached).count();
    let images: Vec<ImageEntry> = results.into_iter().map(|(e, _)| e).collect();
    let num_ok = images.iter().filter(|e| e.status == ImageStatus::Ok).count();
    let mut total = ConfusionMatrix::new(ctx.classes.len());
    for e in images.iter().filter_map(|e| e.eval.as_ref()) {
        total.merge(&e.confusion)?;
    }
    let report = RunReport {
        config: cfg.clone(),
        config_hash: ctx.hash.clone(),
        num_images: images.len(),
        num_ok,
        num_failed: images.len() - num_ok,
        pfa_eval: miou(&total).ok(),
        images,
    };
    let report_path = out.join("report.json");
    write_json(&report_path, &report)?;
    Ok(RunSummary { num_ok, num_failed: report.num_failed, num_cached, report: report_path })
}

fn cached_entry(state_path: &Path, pfa_path: &Path, hash: &str) -> Option<ImageEntry> {
    if !pfa_path.is_file() {
        return None;
    }
    let text = std::fs::read_to_string(state_path).ok()?;
    let state: ImageState = serde_json::from_str(&text).ok()?;
    (state.config_hash == hash && state.entry.status == ImageStatus::Ok).then_some(state.entry)
}

#[derive(Debug, Serialize)]
struct LocalSummary {
    id: String,
    classes_seen: Vec<u8>,
    selected_features: Vec<usize>,
}

/// Trains each image's local forest and writes `local/<id>.pam` plus
/// `local/<id>.json` (classes seen, selected feature indices).
/// With `export_bank`, also writes the filter bank in use.
pub fn features(cfg: &PipelineConfig, export_bank: Option<&Path>) -> anyhow::Result<RunSummary> {
    let (ctx, manifest) = RunContext::new(cfg)?;
    if let Some(path) = export_bank {
        ctx.bank.save(path).with_context(|| format!("writing filter bank {}", path.display()))?;
    }
    let dir = cfg.run.output_dir.join("local");
    create_dir(&dir)?;
    let pool = thread_pool(cfg.run.workers)?;
    let results: Vec<Result<(), String>> = pool.install(|| {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let run = || -> anyhow::Result<()> {
                    let img = load_image(record)?;
                    let scribbles = load_scribbles(&record.scribble, img.grid(), &ctx.classes)?;
                    let features = extract_features(&img, &ctx.bank);
                    let forest_cfg = ForestConfig { seed: image_seed(cfg.run.seed, &record.id), ..cfg.forest.clone() };
                    let forest = select_and_retrain(&features, &scribbles, &forest_cfg)?;
                    save_probability_map(&dir.join(format!("{}.pam", record.id)), &predict_local(&forest, &features)?)?;
                    let summary = LocalSummary {
                        id: record.id.clone(),
                        classes_seen: forest.classes_seen().iter().copied().collect(),
                        selected_features: forest.selected_features().to_vec(),
                    };
                    write_json(&dir.join(format!("{}.json", record.id)), &summary)
                };
                run().map_err(|e| {
                    warn!("{}: {e:#}", record.id);
                    format!("{}: {e:#}", record.id)
                })
            })
            .collect()
    });
    let failures: Vec<String> = results.into_iter().filter_map(Result::err).collect();
    let report = dir.join("failures.json");
    write_json(&report, &failures)?;
    Ok(RunSummary {
        num_ok: manifest.records.len() - failures.len(),
        num_failed: failures.len(),
        num_cached: 0,
        report,
    })
}
