//! Confusion matrices, IoU/mIoU, pixel accuracy and annotation-gap arithmetic.
//!
//! All reported quantities are percentages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{LabelMap, UNLABELED};

/// Rows are ground-truth classes; columns are predicted classes plus a
/// trailing column for pixels predicted as [`UNLABELED`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<Vec<u64>>,
    /// Pixels skipped because the ground truth is unlabeled.
    pub ignored: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![vec![0; num_classes + 1]; num_classes], ignored: 0 }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt][pred]
    }

    /// Pixels predicted unlabeled with ground truth `gt`.
    pub fn unlabeled_predictions(&self, gt: usize) -> u64 {
        self.counts[gt][self.num_classes]
    }

    /// Evaluated (non-ignored) pixel count.
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::ClassSetMismatch { expected: self.num_classes, found: other.num_classes });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.ignored += other.ignored;
        Ok(())
    }

    pub fn is_diagonal(&self) -> bool {
        self.counts.iter().enumerate().all(|(g, row)| row.iter().enumerate().all(|(p, &n)| n == 0 || p == g))
    }
}

/// Adds the pixels of one prediction/ground-truth pair to `acc`.
pub fn accumulate_confusion(pred: &LabelMap, gt: &LabelMap, acc: &mut ConfusionMatrix) -> Result<()> {
    pred.grid().ensure_same(&gt.grid())?;
    let c = acc.num_classes;
    let check = |l: u8| {
        if (l as usize) < c {
            Ok(())
        } else {
            Err(Error::InvalidClass { class: l as u32, num_classes: c })
        }
    };
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if g == UNLABELED {
            acc.ignored += 1;
            continue;
        }
        check(g)?;
        let col = if p == UNLABELED {
            c
        } else {
            check(p)?;
            p as usize
        };
        acc.counts[g as usize][col] += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// IoU per class; `None` where the class appears in neither ground truth nor prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub confusion: ConfusionMatrix,
}

pub fn miou(conf: &ConfusionMatrix) -> Result<EvalReport> {
    let total = conf.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let c = conf.num_classes;
    let per_class_iou: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = conf.counts[k][k];
            let fn_ = conf.counts[k].iter().sum::<u64>() - tp;
            let fp = (0..c).filter(|&g| g != k).map(|g| conf.counts[g][k]).sum::<u64>();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| 100.0 * tp as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = defined.iter().sum::<f64>() / defined.len() as f64;
    let correct: u64 = (0..c).map(|k| conf.counts[k][k]).sum();
    Ok(EvalReport {
        per_class_iou,
        miou,
        pixel_accuracy: 100.0 * correct as f64 / total as f64,
        confusion: conf.clone(),
    })
}

/// Per-class IoU as `class,iou` CSV; undefined classes have an empty cell.
pub fn per_class_csv(report: &EvalReport, names: Option<&[String]>) -> String {
    let mut out = String::from("class,iou\n");
    for (k, iou) in report.per_class_iou.iter().enumerate() {
        let name = names.and_then(|n| n.get(k)).cloned().unwrap_or_else(|| k.to_string());
        match iou {
            Some(v) => out.push_str(&format!("{name},{v:.4}\n")),
            None => out.push_str(&format!("{name},\n")),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub miou_full: f64,
    pub miou_weak_baseline: f64,
    pub miou_strategy: f64,
    pub full_gap: f64,
    pub remaining_gap: f64,
    /// `100 (full_gap - remaining_gap) / full_gap`; `None` when the full gap is zero.
    pub reduction_pct: Option<f64>,
}

pub fn gap_report(miou_full: f64, miou_weak: f64, miou_strategy: f64) -> Result<GapReport> {
    for (name, v) in [("full", miou_full), ("weak", miou_weak), ("strategy", miou_strategy)] {
        if !(0.0..=100.0).contains(&v) {
            return Err(Error::param(format!("{name} mIoU must be in [0, 100], got {v}")));
        }
    }
    let full_gap = miou_full - miou_weak;
    let remaining_gap = miou_full - miou_strategy;
    let reduction_pct = (full_gap != 0.0).then(|| 100.0 * (full_gap - remaining_gap) / full_gap);
    Ok(GapReport { miou_full, miou_weak_baseline: miou_weak, miou_strategy, full_gap, remaining_gap, reduction_pct })
}
