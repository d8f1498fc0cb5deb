//! `curate`: drop scribble pixels that disagree with ground truth and
//! images whose scribbles miss a ground-truth class.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pfa_core::io::{load_label_map, load_rgb_png, load_scribbles, save_scribbles};
use pfa_core::{curate_scribbles, ClassSet, Curation};
use serde::Serialize;

use crate::manifest::{Manifest, Record};
use crate::{config_error, write_json};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct DroppedImage {
    pub id: String,
    /// Ground-truth classes left without any scribble after curation.
    pub missing_classes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CurationSummary {
    pub total: usize,
    pub kept: usize,
    pub dropped: Vec<DroppedImage>,
    /// Scribble pixels of kept images whose class was replaced by the ground truth.
    pub relabeled_pixels: usize,
}

fn absolute(p: &Path) -> anyhow::Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

/// Writes `scribbles/<id>.txt`, `manifest.tsv` (kept images only) and
/// `curation.json` under `out_dir`.
pub fn curate(manifest_path: &Path, num_classes: usize, out_dir: &Path) -> anyhow::Result<CurationSummary> {
    let classes = ClassSet::new(num_classes).map_err(|e| crate::ConfigError(e.into()))?;
    let manifest = Manifest::load(manifest_path).map_err(crate::ConfigError)?;
    let no_gt: Vec<&str> = manifest.records.iter().filter(|r| r.gt.is_none()).map(|r| r.id.as_str()).collect();
    if !no_gt.is_empty() {
        return Err(config_error(format!("missing ground truth for {}", no_gt.join(", "))));
    }
    let scribble_dir = out_dir.join("scribbles");
    std::fs::create_dir_all(&scribble_dir).with_context(|| format!("creating {}", scribble_dir.display()))?;
    let out_dir = absolute(out_dir)?;

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut relabeled_pixels = 0;
    for record in &manifest.records {
        let gt_path = record.gt.as_deref().expect("checked above");
        let grid =
            load_rgb_png(&record.image).with_context(|| format!("loading image {}", record.image.display()))?.grid();
        let gt = load_label_map(gt_path, Some(grid))
            .with_context(|| format!("loading ground truth {}", gt_path.display()))?;
        let scribbles = load_scribbles(&record.scribble, grid, &classes)
            .with_context(|| format!("loading scribbles {}", record.scribble.display()))?;
        match curate_scribbles(&scribbles, &gt).with_context(|| format!("curating {}", record.id))? {
            Curation::Accepted(curated) => {
                relabeled_pixels +=
                    scribbles.entries().iter().zip(curated.entries()).filter(|(a, b)| a.1 != b.1).count();
                let path = out_dir.join("scribbles").join(format!("{}.txt", record.id));
                save_scribbles(&path, &curated)?;
                kept.push(Record {
                    id: record.id.clone(),
                    image: absolute(&record.image)?,
                    scribble: path,
                    gt: Some(absolute(gt_path)?),
                    global: record.global.as_deref().map(absolute).transpose()?,
                });
            }
            Curation::Rejected { missing, .. } => {
                dropped.push(DroppedImage { id: record.id.clone(), missing_classes: missing.into_iter().collect() });
            }
        }
    }

    Manifest { records: kept.clone() }.save(&out_dir.join("manifest.tsv"))?;
    let summary = CurationSummary { total: manifest.records.len(), kept: kept.len(), dropped, relabeled_pixels };
    write_json(&out_dir.join("curation.json"), &summary)?;
    Ok(summary)
}
