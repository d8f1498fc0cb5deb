//! MAP inference over soft segmentations: a shared `-log P` data term with
//! either a weighted-TV Potts regularizer or a fully connected CRF.

mod crf;
mod potts;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::types::ClassField;

pub use crf::{crf_energy, crf_mean_field, DenseCrfParams, PairwiseKernel};
pub use potts::{edge_weights, potts_energy, potts_map, potts_map_with_weights, PottsParams};

/// Probability floor applied before taking logs.
pub const DEFAULT_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub data_term: f64,
    pub reg_term: f64,
    pub total: f64,
    pub iterations_run: usize,
}

impl EnergyReport {
    pub fn new(data_term: f64, reg_term: f64, iterations_run: usize) -> Self {
        EnergyReport { data_term, reg_term, total: data_term + reg_term, iterations_run }
    }
}

/// Per-pixel unary costs `-log max(P, eps)`, laid out like `p`.
pub(crate) fn unary_costs(p: &impl ClassField, eps: f64) -> Vec<f64> {
    p.values().iter().map(|&v| -v.max(eps).ln()).collect()
}

/// `sum_i <-log max(P_i, eps), M_i>`.
pub fn data_energy(p: &impl ClassField, m: &impl ClassField, eps: f64) -> Result<f64> {
    p.grid().ensure_same(&m.grid())?;
    if p.num_classes() != m.num_classes() {
        return Err(crate::Error::ClassSetMismatch { expected: p.num_classes(), found: m.num_classes() });
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(crate::Error::param("probability floor must be positive"));
    }
    Ok(p.values().iter().zip(m.values()).map(|(&pv, &mv)| -pv.max(eps).ln() * mv).sum())
}

/// Euclidean projection of `v` onto the unit simplex, in place.
///
/// Sort-based: find the largest `k` with `u_k > (sum_{j<=k} u_j - 1) / k`
/// over the descending sort `u`, then shift and clip.
pub fn project_simplex(v: &mut [f64]) {
    let mut small = [0.0; 16];
    let mut large = Vec::new();
    let u = if v.len() <= small.len() {
        &mut small[..v.len()]
    } else {
        large.resize(v.len(), 0.0);
        &mut large[..]
    };
    // Insertion sort, descending; class counts are small.
    for (k, &x) in v.iter().enumerate() {
        let mut j = k;
        while j > 0 && u[j - 1] < x {
            u[j] = u[j - 1];
            j -= 1;
        }
        u[j] = x;
    }
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &x) in u.iter().enumerate() {
        cumsum += x;
        let t = (cumsum - 1.0) / (k + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter_mut().for_each(|x| *x = (*x - theta).max(0.0));
}
