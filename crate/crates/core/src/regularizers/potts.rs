//! Weighted total-variation Potts relaxation solved by first-order primal-dual iterations.
//!
//! Minimizes `sum_i <U_i, M_i> + lambda * sum_c sum_i g_i |grad M_c|_i` over
//! per-pixel simplices, with `U = -log max(P, eps)` and forward differences
//! (zero at the far border). Each class has its own dual field constrained
//! to the ball of radius `lambda * g_i`.

use std::f64::consts::SQRT_2;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{project_simplex, unary_costs, EnergyReport, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::types::{ClassField, PixelGrid, ProbabilityMap, Provenance, RgbImage, SoftMask};

/// Upper bound of the forward-difference gradient norm squared.
const GRAD_NORM_SQ: f64 = 8.0;

/// Above this many pixels the per-iteration updates run on the rayon pool.
const PARALLEL_PIXELS: usize = 1 << 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PottsParams {
    /// Regularization weight; `None` picks 10 for local or combined maps and 50 for global-only maps.
    pub lambda: Option<f64>,
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the primal-dual gap relative to the primal energy drops below this.
    pub tol: f64,
    pub step_primal: f64,
    pub step_dual: f64,
    pub eps: f64,
}

impl Default for PottsParams {
    fn default() -> Self {
        let step = 1.0 / GRAD_NORM_SQ.sqrt();
        PottsParams {
            lambda: None,
            eta: 0.01,
            max_iters: 500,
            tol: 1e-4,
            step_primal: step,
            step_dual: step,
            eps: DEFAULT_EPS,
        }
    }
}

impl PottsParams {
    pub fn lambda_for(&self, provenance: Provenance) -> f64 {
        self.lambda.unwrap_or(match provenance {
            Provenance::Global => 50.0,
            Provenance::Local | Provenance::Combined | Provenance::Unknown => 10.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l >= 0.0) {
                return Err(Error::param(format!("lambda must be finite and >= 0, got {l}")));
            }
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::param(format!("eta must be finite and >= 0, got {}", self.eta)));
        }
        let (tau, sigma) = (self.step_primal, self.step_dual);
        if !(tau > 0.0 && sigma > 0.0 && tau.is_finite() && sigma.is_finite()) {
            return Err(Error::param("step sizes must be positive"));
        }
        if tau * sigma * GRAD_NORM_SQ > 1.0 + 1e-12 {
            return Err(Error::param(format!(
                "step sizes violate tau*sigma*8 <= 1 (got {})",
                tau * sigma * GRAD_NORM_SQ
            )));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::param("eps must be positive and tol non-negative"));
        }
        Ok(())
    }
}

/// Edge-stop weights `g_i = exp(-eta |grad I|_i)` on luminance in `[0, 255]`.
pub fn edge_weights(img: &RgbImage, eta: f64) -> Vec<f64> {
    let grid = img.grid();
    let (h, w) = (grid.height(), grid.width());
    let lum: Vec<f64> = (0..grid.len()).map(|i| img.luminance255(i)).collect();
    let mut g = Vec::with_capacity(grid.len());
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let dx = if c + 1 < w { lum[i + 1] - lum[i] } else { 0.0 };
            let dy = if r + 1 < h { lum[i + w] - lum[i] } else { 0.0 };
            g.push((-eta * (dx * dx + dy * dy).sqrt()).exp());
        }
    }
    g
}

/// Data and regularization terms of a soft mask under the Potts energy.
pub fn potts_energy(
    mask: &impl ClassField,
    p: &impl ClassField,
    weights: &[f64],
    lambda: f64,
    eps: f64,
) -> Result<(f64, f64)> {
    let data = super::data_energy(p, mask, eps)?;
    if weights.len() != mask.grid().len() {
        return Err(Error::ShapeMismatch("edge weights do not match the grid".into()));
    }
    Ok((data, lambda * weighted_tv(mask.values(), mask.grid(), mask.num_classes(), weights)))
}

fn weighted_tv(m: &[f64], grid: PixelGrid, c: usize, weights: &[f64]) -> f64 {
    let (h, w) = (grid.height(), grid.width());
    let mut tv = 0.0;
    for r in 0..h {
        for col in 0..w {
            let i = r * w + col;
            let mut s = 0.0;
            for k in 0..c {
                let v = m[i * c + k];
                let dx = if col + 1 < w { m[(i + 1) * c + k] - v } else { 0.0 };
                let dy = if r + 1 < h { m[(i + w) * c + k] - v } else { 0.0 };
                s += (dx * dx + dy * dy).sqrt();
            }
            tv += weights[i] * s;
        }
    }
    tv
}

/// Approximate Potts MAP with the edge weights derived from `img`.
///
/// The returned mask is the lowest-energy iterate seen, the argmax vertex
/// embedding of `p` included.
pub fn potts_map(p: &ProbabilityMap, img: &RgbImage, params: &PottsParams) -> Result<(SoftMask, EnergyReport)> {
    p.grid().ensure_same(&img.grid())?;
    params.validate()?;
    let weights = edge_weights(img, params.eta);
    potts_map_with_weights(p, &weights, params.lambda_for(p.provenance()), params)
}

/// Per-pixel `sum_c |grad M_c|` of a one-hot labeling from the pixel's label
/// and those of its right and lower neighbors.
fn onehot_tv(a: usize, right: usize, down: usize) -> f64 {
    match (right != a, down != a) {
        (false, false) => 0.0,
        (true, false) | (false, true) => 2.0,
        (true, true) if right == down => 2.0 * SQRT_2,
        (true, true) => SQRT_2 + 2.0,
    }
}

/// Same as [`potts_map`] with explicit per-pixel edge weights and regularization weight.
pub fn potts_map_with_weights(
    p: &impl ClassField,
    weights: &[f64],
    lambda: f64,
    params: &PottsParams,
) -> Result<(SoftMask, EnergyReport)> {
    params.validate()?;
    let grid = p.grid();
    let (h, w, c, n) = (grid.height(), grid.width(), p.num_classes(), grid.len());
    if weights.len() != n {
        return Err(Error::ShapeMismatch("edge weights do not match the grid".into()));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::param(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let unary = unary_costs(p, params.eps);
    let (tau, sigma) = (params.step_primal, params.step_dual);
    let radius: Vec<f64> = weights.iter().map(|g| lambda * g).collect();
    let parallel = n >= PARALLEL_PIXELS;

    let mut m = vec![0.0; n * c];
    for i in 0..n {
        m[i * c + argmax(p.pixel(i))] = 1.0;
    }
    let energy = |m: &[f64]| -> (f64, f64) {
        let data: f64 = unary.iter().zip(m).map(|(u, v)| u * v).sum();
        (data, lambda * weighted_tv(m, grid, c, weights))
    };
    let mut labels = vec![0usize; n];
    let mut rounded_energy = |m: &[f64]| -> f64 {
        for (l, px) in labels.iter_mut().zip(m.chunks_exact(c)) {
            *l = argmax(px);
        }
        let mut data = 0.0;
        let mut tv = 0.0;
        for (i, &a) in labels.iter().enumerate() {
            data += unary[i * c + a];
            let (r, col) = (i / w, i % w);
            let right = if col + 1 < w { labels[i + 1] } else { a };
            let down = if r + 1 < h { labels[i + w] } else { a };
            tv += weights[i] * onehot_tv(a, right, down);
        }
        data + lambda * tv
    };
    let (d0, r0) = energy(&m);
    let init_energy = d0 + r0;
    // Candidates must not exceed the initialization's energy; among them the
    // one whose argmax labeling is cheapest wins, then the lower relaxed energy.
    let mut best = (init_energy, init_energy, d0, r0, m.clone());
    let mut m_bar = m.clone();
    let mut m_next = vec![0.0; n * c];
    let mut xi = vec![0.0; n * c * 2];
    let mut iterations = 0;

    // One row of pixels at a time so the updates parallelize without races.
    let row_len = w * c;
    for _ in 0..params.max_iters {
        iterations += 1;

        // Dual ascent on the class edge fields, projected onto the weighted balls.
        let dual_row = |r: usize, row: &mut [f64]| {
            for col in 0..w {
                let i = r * w + col;
                let rad = radius[i];
                for k in 0..c {
                    let v = m_bar[i * c + k];
                    let gx = if col + 1 < w { m_bar[(i + 1) * c + k] - v } else { 0.0 };
                    let gy = if r + 1 < h { m_bar[(i + w) * c + k] - v } else { 0.0 };
                    let o = (col * c + k) * 2;
                    let (px, py) = (row[o] + sigma * gx, row[o + 1] + sigma * gy);
                    let norm = (px * px + py * py).sqrt();
                    let scale = if norm > rad {
                        if norm > 0.0 {
                            rad / norm
                        } else {
                            0.0
                        }
                    } else {
                        1.0
                    };
                    row[o] = px * scale;
                    row[o + 1] = py * scale;
                }
            }
        };
        if parallel {
            xi.par_chunks_mut(row_len * 2).enumerate().for_each(|(r, row)| dual_row(r, row));
        } else {
            xi.chunks_mut(row_len * 2).enumerate().for_each(|(r, row)| dual_row(r, row));
        }

        // Primal descent with per-pixel simplex projection; also records the
        // per-pixel dual objective min_c (U - div xi).
        let primal_row = |r: usize, row: &mut [f64]| -> f64 {
            let mut dual_obj = 0.0;
            let mut v = [0.0; 255];
            let v = &mut v[..c];
            for col in 0..w {
                let i = r * w + col;
                let mut lowest = f64::INFINITY;
                for k in 0..c {
                    let o = (i * c + k) * 2;
                    let mut div = 0.0;
                    if col + 1 < w {
                        div += xi[o];
                    }
                    if col > 0 {
                        div -= xi[o - 2 * c];
                    }
                    if r + 1 < h {
                        div += xi[o + 1];
                    }
                    if r > 0 {
                        div -= xi[o + 1 - 2 * c * w];
                    }
                    let u = unary[i * c + k] - div;
                    lowest = lowest.min(u);
                    v[k] = m[i * c + k] - tau * u;
                }
                project_simplex(v);
                row[col * c..(col + 1) * c].copy_from_slice(v);
                dual_obj += lowest;
            }
            dual_obj
        };
        let dual_value: f64 = if parallel {
            let per_row: Vec<f64> =
                m_next.par_chunks_mut(row_len).enumerate().map(|(r, row)| primal_row(r, row)).collect();
            per_row.iter().sum()
        } else {
            m_next.chunks_mut(row_len).enumerate().map(|(r, row)| primal_row(r, row)).sum()
        };

        for k in 0..n * c {
            m_bar[k] = 2.0 * m_next[k] - m[k];
        }
        std::mem::swap(&mut m, &mut m_next);

        let (data, reg) = energy(&m);
        let primal = data + reg;
        if primal <= init_energy {
            let rounded = rounded_energy(&m);
            if rounded < best.0 || (rounded == best.0 && primal < best.1) {
                best = (rounded, primal, data, reg, m.clone());
            }
        }
        let gap = (primal - dual_value) / primal.abs().max(1.0);
        if gap < params.tol {
            break;
        }
    }

    let (_, _, data, reg, mask) = best;
    Ok((SoftMask::from_simplex_unchecked(grid, c, mask), EnergyReport::new(data, reg, iterations)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::extract_pfa;
    use crate::types::{LabelMap, ProbabilityMap};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_probs(g: PixelGrid, c: usize, rng: &mut ChaCha8Rng) -> ProbabilityMap {
        let v: Vec<f64> = (0..g.len() * c).map(|_| rng.random_range(0.01..1.0)).collect();
        ProbabilityMap::new(g, c, v).unwrap()
    }

    #[test]
    fn constant_image_has_unit_weights() {
        let img = RgbImage::constant(PixelGrid::new(4, 5).unwrap(), [0.2, 0.4, 0.9]).unwrap();
        assert!(edge_weights(&img, 0.01).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn zero_eta_has_unit_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = RgbImage::from_fn(PixelGrid::new(4, 4).unwrap(), |_, _| [rng.random(), rng.random(), rng.random()])
            .unwrap();
        assert!(edge_weights(&img, 0.0).iter().all(|&g| g == 1.0));
    }

    #[test]
    fn step_edge_weight() {
        let g = PixelGrid::new(3, 6).unwrap();
        let img = RgbImage::from_fn(g, |_, c| if c < 3 { [0.0; 3] } else { [1.0; 3] }).unwrap();
        let w = edge_weights(&img, 0.01);
        for r in 0..3 {
            assert!((w[g.index(r, 2)] - (-2.55f64).exp()).abs() < 1e-9);
            assert!((w[g.index(r, 2)] - 0.0781).abs() < 1e-4);
            assert_eq!(w[g.index(r, 0)], 1.0);
            assert_eq!(w[g.index(r, 4)], 1.0);
        }
    }

    #[test]
    fn onehot_tv_matches_relaxed_tv() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = PixelGrid::new(5, 6).unwrap();
        let c = 4;
        for _ in 0..20 {
            let labels: Vec<usize> = (0..g.len()).map(|_| rng.random_range(0..c)).collect();
            let weights: Vec<f64> = (0..g.len()).map(|_| rng.random_range(0.1..1.0)).collect();
            let mut m = vec![0.0; g.len() * c];
            labels.iter().enumerate().for_each(|(i, &l)| m[i * c + l] = 1.0);
            let mut tv = 0.0;
            for (i, &a) in labels.iter().enumerate() {
                let (r, col) = g.coords(i);
                let right = if col + 1 < 6 { labels[i + 1] } else { a };
                let down = if r + 1 < 5 { labels[i + 6] } else { a };
                tv += weights[i] * onehot_tv(a, right, down);
            }
            assert!((tv - weighted_tv(&m, g, c, &weights)).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_lambda_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = PixelGrid::new(6, 7).unwrap();
        let p = random_probs(g, 4, &mut rng);
        let (mask, report) = potts_map_with_weights(&p, &vec![1.0; g.len()], 0.0, &PottsParams::default()).unwrap();
        assert_eq!(extract_pfa(&mask), extract_pfa(&p));
        assert_eq!(report.reg_term, 0.0);
    }

    #[test]
    fn uniform_probabilities_beat_constant_labelings() {
        let g = PixelGrid::new(5, 5).unwrap();
        let p = ProbabilityMap::uniform(g, 3).unwrap();
        let weights = vec![1.0; g.len()];
        let params = PottsParams::default();
        let (mask, report) = potts_map_with_weights(&p, &weights, 2.0, &params).unwrap();
        for k in 0..3 {
            let constant = SoftMask::from_labels(&LabelMap::filled(g, k), 3).unwrap();
            let (d, r) = potts_energy(&constant, &p, &weights, 2.0, params.eps).unwrap();
            assert!(report.total <= d + r + params.tol);
        }
        let (d, r) = potts_energy(&mask, &p, &weights, 2.0, params.eps).unwrap();
        assert!((report.total - (d + r)).abs() < 1e-9);
    }

    #[test]
    fn energy_never_exceeds_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = PixelGrid::new(8, 8).unwrap();
        let p = random_probs(g, 3, &mut rng);
        let weights = vec![1.0; g.len()];
        let init = SoftMask::from_labels(&extract_pfa(&p), 3).unwrap();
        for lambda in [0.1, 1.0, 10.0] {
            let params = PottsParams::default();
            let (_, report) = potts_map_with_weights(&p, &weights, lambda, &params).unwrap();
            let (d, r) = potts_energy(&init, &p, &weights, lambda, params.eps).unwrap();
            assert!(report.total <= d + r + params.tol);
        }
    }

    #[test]
    fn output_is_on_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = PixelGrid::new(10, 9).unwrap();
        let p = random_probs(g, 5, &mut rng);
        let img = RgbImage::from_fn(g, |_, _| [rng.random(), rng.random(), rng.random()]).unwrap();
        let (mask, _) = potts_map(&p, &img, &PottsParams { lambda: Some(3.0), ..Default::default() }).unwrap();
        assert!(crate::types::simplex_violation(&mask) < 1e-6);
    }

    #[test]
    fn lambda_default_follows_provenance() {
        let params = PottsParams::default();
        assert_eq!(params.lambda_for(Provenance::Local), 10.0);
        assert_eq!(params.lambda_for(Provenance::Combined), 10.0);
        assert_eq!(params.lambda_for(Provenance::Global), 50.0);
        let fixed = PottsParams { lambda: Some(3.0), ..Default::default() };
        assert_eq!(fixed.lambda_for(Provenance::Global), 3.0);
    }

    #[test]
    fn invalid_steps_are_rejected() {
        let params = PottsParams { step_primal: 0.5, step_dual: 0.5, ..Default::default() };
        assert!(params.validate().is_err());
        assert!(PottsParams { lambda: Some(-1.0), ..Default::default() }.validate().is_err());
    }

    #[test]
    fn parallel_and_serial_paths_agree() {
        // 256 x 128 crosses the parallel threshold; compare with a forced-serial run on row blocks.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = PixelGrid::new(256, 128).unwrap();
        let p = random_probs(g, 3, &mut rng);
        let weights = vec![1.0; g.len()];
        let params = PottsParams { max_iters: 5, tol: 0.0, ..Default::default() };
        let (a, ra) = potts_map_with_weights(&p, &weights, 1.0, &params).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let (b, rb) = pool.install(|| potts_map_with_weights(&p, &weights, 1.0, &params)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }
}
