//! Averaging of local and global class probabilities and hard PFA extraction.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regularizers::{crf_mean_field, potts_map, DenseCrfParams, EnergyReport, PottsParams};
use crate::types::{ClassField, LabelMap, ProbabilityMap, Provenance, RgbImage};

pub const DEFAULT_LOCAL_WEIGHT: f64 = 0.5;

/// Index of the largest entry; ties go to the smallest index.
#[inline]
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = k;
        }
    }
    best
}

/// `w_local * P_local + (1 - w_local) * P_global`, pixelwise.
pub fn combine(p_local: &ProbabilityMap, p_global: &ProbabilityMap, w_local: f64) -> Result<ProbabilityMap> {
    p_local.grid().ensure_same(&p_global.grid())?;
    if p_local.num_classes() != p_global.num_classes() {
        return Err(Error::ClassSetMismatch { expected: p_local.num_classes(), found: p_global.num_classes() });
    }
    if !(0.0..=1.0).contains(&w_local) {
        return Err(Error::param(format!("w_local must be in [0, 1], got {w_local}")));
    }
    let values = if w_local == 0.0 {
        p_global.values().to_vec()
    } else if w_local == 1.0 {
        p_local.values().to_vec()
    } else {
        let w_global = 1.0 - w_local;
        p_local.values().iter().zip(p_global.values()).map(|(a, b)| w_local * a + w_global * b).collect()
    };
    Ok(ProbabilityMap::new(p_local.grid(), p_local.num_classes(), values)?.with_provenance(Provenance::Combined))
}

/// Per-pixel argmax labeling of a soft segmentation.
pub fn extract_pfa(s: &impl ClassField) -> LabelMap {
    let labels = s.values().chunks_exact(s.num_classes()).map(|px| argmax(px) as u8).collect();
    LabelMap::new(s.grid(), labels).expect("label vector matches grid")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PamSource {
    Local,
    Global,
    Combined,
}

impl fmt::Display for PamSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PamSource::Local => "local",
            PamSource::Global => "global",
            PamSource::Combined => "comb",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Regularizer {
    None,
    Potts(PottsParams),
    Crf(DenseCrfParams),
}

impl Regularizer {
    pub fn name(&self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::Potts(_) => "potts",
            Regularizer::Crf(_) => "crf",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PfaOutput {
    /// Variant tag such as `local`, `global+potts` or `comb+crf`.
    pub variant: String,
    pub labels: LabelMap,
    /// Solver report; absent when no regularizer ran.
    pub energy: Option<EnergyReport>,
}

/// Builds one PFA variant: pick the local, global or combined map, optionally
/// regularize it, and take the per-pixel argmax.
pub fn pfa_variant(
    p_local: Option<&ProbabilityMap>,
    p_global: Option<&ProbabilityMap>,
    img: &RgbImage,
    source: PamSource,
    regularizer: &Regularizer,
    w_local: f64,
) -> Result<PfaOutput> {
    let missing = |what: &str| Error::param(format!("the {source} variant needs a {what} probability map"));
    let combined;
    let p = match source {
        PamSource::Local => p_local.ok_or_else(|| missing("local"))?,
        PamSource::Global => p_global.ok_or_else(|| missing("global"))?,
        PamSource::Combined => {
            combined =
                combine(p_local.ok_or_else(|| missing("local"))?, p_global.ok_or_else(|| missing("global"))?, w_local)?;
            &combined
        }
    };
    let (labels, energy) = match regularizer {
        Regularizer::None => (extract_pfa(p), None),
        Regularizer::Potts(params) => {
            let (m, report) = potts_map(p, img, params)?;
            (extract_pfa(&m), Some(report))
        }
        Regularizer::Crf(params) => {
            let (q, report) = crf_mean_field(p, img, params)?;
            (extract_pfa(&q), Some(report))
        }
    };
    let variant = match regularizer {
        Regularizer::None => source.to_string(),
        r => format!("{source}+{}", r.name()),
    };
    Ok(PfaOutput { variant, labels, energy })
}
