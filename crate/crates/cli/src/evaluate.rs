//! `evaluate`: dataset-level scores of a directory of label maps against ground truth.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pfa_core::io::load_label_map;
use pfa_core::{accumulate_confusion, miou, ConfusionMatrix, EvalReport};

/// Ground-truth files without a matching prediction.
#[derive(Debug)]
pub struct MissingPrediction(pub Vec<String>);

impl fmt::Display for MissingPrediction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "no prediction for {} ground-truth file(s): {}", self.0.len(), self.0.join(", "))
    }
}

impl std::error::Error for MissingPrediction {}

fn label_files(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("png" | "txt")) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn find_prediction(pred_dir: &Path, stem: &str) -> Option<PathBuf> {
    ["png", "txt"].iter().map(|ext| pred_dir.join(format!("{stem}.{ext}"))).find(|p| p.is_file())
}

fn is_png(p: &Path) -> bool {
    p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Pairs every ground-truth file in `gt_dir` with the prediction of the same
/// stem in `pred_dir` and scores the summed confusion matrix.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, num_classes: usize) -> anyhow::Result<EvalReport> {
    pfa_core::ClassSet::new(num_classes)?;
    let gts = label_files(gt_dir)?;
    if gts.is_empty() {
        anyhow::bail!("no label maps in {}", gt_dir.display());
    }
    let mut pairs = Vec::new();
    let mut missing = Vec::new();
    for gt in gts {
        let stem = gt.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        match find_prediction(pred_dir, &stem) {
            Some(pred) => pairs.push((pred, gt)),
            None => missing.push(stem),
        }
    }
    if !missing.is_empty() {
        return Err(MissingPrediction(missing).into());
    }
    let mut conf = ConfusionMatrix::new(num_classes);
    for (pred_path, gt_path) in &pairs {
        // Text maps take their grid from the PNG side of the pair.
        let (pred, gt) = if is_png(pred_path) {
            let pred = load_label_map(pred_path, None)?;
            let gt = load_label_map(gt_path, Some(pred.grid()))?;
            (pred, gt)
        } else {
            let gt = load_label_map(gt_path, None).with_context(|| format!("loading {}", gt_path.display()))?;
            (load_label_map(pred_path, Some(gt.grid()))?, gt)
        };
        accumulate_confusion(&pred, &gt, &mut conf)
            .with_context(|| format!("comparing {} with {}", pred_path.display(), gt_path.display()))?;
    }
    Ok(miou(&conf)?)
}
