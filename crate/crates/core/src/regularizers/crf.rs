//! Fully connected CRF with Gaussian appearance and smoothness kernels,
//! solved by synchronous mean-field iterations under Potts label compatibility.
//!
//! `k(i, j) = w1 exp(-d²/2σα² - δ²/2σβ²) + w2 exp(-d²/2σγ²)` with `d` the pixel
//! distance and `δ` the RGB distance on the 0-255 scale.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EnergyReport, DEFAULT_EPS};
use crate::error::{Error, Result};
use crate::fusion::argmax;
use crate::types::{ClassField, ProbabilityMap, RgbImage, SoftMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseCrfParams {
    pub w1: f64,
    pub sigma_alpha: f64,
    pub sigma_beta: f64,
    pub w2: f64,
    pub sigma_gamma: f64,
    pub n_iters: usize,
    /// Early stop once no entry of Q moves by more than this.
    pub tol: f64,
    pub eps: f64,
    /// Largest image handled by exact all-pairs messages; larger ones use the approximate kernel.
    pub exact_max_pixels: usize,
}

impl Default for DenseCrfParams {
    fn default() -> Self {
        DenseCrfParams {
            w1: 3.0,
            sigma_alpha: 30.0,
            sigma_beta: 5.0,
            w2: 5.0,
            sigma_gamma: 2.0,
            n_iters: 10,
            tol: 1e-8,
            eps: DEFAULT_EPS,
            exact_max_pixels: 4096,
        }
    }
}

impl DenseCrfParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("w1", self.w1), ("w2", self.w2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::param(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        for (name, v) in
            [("sigma_alpha", self.sigma_alpha), ("sigma_beta", self.sigma_beta), ("sigma_gamma", self.sigma_gamma)]
        {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.tol.is_nan() || self.tol < 0.0 {
            return Err(Error::param("eps must be positive and tol non-negative"));
        }
        Ok(())
    }
}

/// Message operator `m_i(c) = sum_{j != i} k(i, j) q_j(c)`.
pub struct PairwiseKernel {
    inner: KernelImpl,
    num_pixels: usize,
}

enum KernelImpl {
    Exact(ExactKernel),
    Approximate(ApproxKernel),
}

impl PairwiseKernel {
    /// Exact messages up to `params.exact_max_pixels`, the approximation above.
    pub fn new(img: &RgbImage, params: &DenseCrfParams) -> Self {
        if img.grid().len() <= params.exact_max_pixels {
            Self::exact(img, params)
        } else {
            Self::approximate(img, params)
        }
    }

    pub fn exact(img: &RgbImage, params: &DenseCrfParams) -> Self {
        PairwiseKernel { inner: KernelImpl::Exact(ExactKernel::new(img, params)), num_pixels: img.grid().len() }
    }

    /// Windowed separable Gaussian for smoothness plus a sparse bilateral grid for appearance.
    pub fn approximate(img: &RgbImage, params: &DenseCrfParams) -> Self {
        PairwiseKernel { inner: KernelImpl::Approximate(ApproxKernel::new(img, params)), num_pixels: img.grid().len() }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.inner, KernelImpl::Exact(_))
    }

    /// Messages for a field `q` with `c` classes per pixel.
    pub fn apply(&self, q: &[f64], c: usize) -> Vec<f64> {
        assert_eq!(q.len(), self.num_pixels * c, "field does not match the kernel");
        match &self.inner {
            KernelImpl::Exact(k) => k.apply(q, c),
            KernelImpl::Approximate(k) => k.apply(q, c),
        }
    }
}

struct ExactKernel {
    pos: Vec<(f64, f64)>,
    rgb: Vec<[f64; 3]>,
    w1: f64,
    w2: f64,
    inv_alpha: f64,
    inv_beta: f64,
    inv_gamma: f64,
}

impl ExactKernel {
    fn new(img: &RgbImage, params: &DenseCrfParams) -> Self {
        let grid = img.grid();
        ExactKernel {
            pos: (0..grid.len()).map(|i| grid.coords(i)).map(|(r, c)| (r as f64, c as f64)).collect(),
            rgb: (0..grid.len()).map(|i| img.rgb255(i)).collect(),
            w1: params.w1,
            w2: params.w2,
            inv_alpha: 0.5 / (params.sigma_alpha * params.sigma_alpha),
            inv_beta: 0.5 / (params.sigma_beta * params.sigma_beta),
            inv_gamma: 0.5 / (params.sigma_gamma * params.sigma_gamma),
        }
    }

    fn weight(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.pos[i], self.pos[j]);
        let d2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        let (x, y) = (self.rgb[i], self.rgb[j]);
        let c2 = (x[0] - y[0]).powi(2) + (x[1] - y[1]).powi(2) + (x[2] - y[2]).powi(2);
        let mut k = 0.0;
        if self.w1 != 0.0 {
            k += self.w1 * (-d2 * self.inv_alpha - c2 * self.inv_beta).exp();
        }
        if self.w2 != 0.0 {
            k += self.w2 * (-d2 * self.inv_gamma).exp();
        }
        k
    }

    fn apply(&self, q: &[f64], c: usize) -> Vec<f64> {
        let n = self.pos.len();
        let mut out = vec![0.0; n * c];
        out.par_chunks_mut(c).enumerate().for_each(|(i, m)| {
            for j in 0..n {
                if j == i {
                    continue;
                }
                let k = self.weight(i, j);
                for (mc, qc) in m.iter_mut().zip(&q[j * c..(j + 1) * c]) {
                    *mc += k * qc;
                }
            }
        });
        out
    }
}

/// Offsets -2..=2 of a Gaussian sampled at its standard deviation.
const GRID_TAPS: [f64; 5] =
    [0.135_335_283_236_612_7, 0.606_530_659_712_633_4, 1.0, 0.606_530_659_712_633_4, 0.135_335_283_236_612_7];
const NO_CELL: u32 = u32::MAX;

struct ApproxKernel {
    height: usize,
    width: usize,
    w1: f64,
    w2: f64,
    taps: Vec<f64>,
    /// Grid cell of each pixel.
    cell_of: Vec<u32>,
    num_cells: usize,
    /// Per lattice dimension, neighbors of each cell at offsets -2, -1, +1, +2.
    neighbors: Vec<Vec<[u32; 4]>>,
}

impl ApproxKernel {
    fn new(img: &RgbImage, params: &DenseCrfParams) -> Self {
        let grid = img.grid();
        let radius = (3.0 * params.sigma_gamma).ceil() as isize;
        let inv = 0.5 / (params.sigma_gamma * params.sigma_gamma);
        let taps = (-radius..=radius).map(|d| (-(d * d) as f64 * inv).exp()).collect();

        let mut index: HashMap<[i32; 5], u32> = HashMap::new();
        let mut keys: Vec<[i32; 5]> = Vec::new();
        let mut cell_of = Vec::with_capacity(grid.len());
        for i in 0..grid.len() {
            let (r, c) = grid.coords(i);
            let rgb = img.rgb255(i);
            let key = [
                (r as f64 / params.sigma_alpha).round() as i32,
                (c as f64 / params.sigma_alpha).round() as i32,
                (rgb[0] / params.sigma_beta).round() as i32,
                (rgb[1] / params.sigma_beta).round() as i32,
                (rgb[2] / params.sigma_beta).round() as i32,
            ];
            let id = *index.entry(key).or_insert_with(|| {
                keys.push(key);
                (keys.len() - 1) as u32
            });
            cell_of.push(id);
        }
        let neighbors = (0..5)
            .map(|dim| {
                keys.iter()
                    .map(|key| {
                        let mut out = [NO_CELL; 4];
                        for (slot, off) in [-2, -1, 1, 2].into_iter().enumerate() {
                            let mut k = *key;
                            k[dim] += off;
                            out[slot] = index.get(&k).copied().unwrap_or(NO_CELL);
                        }
                        out
                    })
                    .collect()
            })
            .collect();
        ApproxKernel {
            height: grid.height(),
            width: grid.width(),
            w1: params.w1,
            w2: params.w2,
            taps,
            cell_of,
            num_cells: keys.len(),
            neighbors,
        }
    }

    fn apply(&self, q: &[f64], c: usize) -> Vec<f64> {
        let n = self.cell_of.len();
        let mut out = vec![0.0; n * c];
        if self.w2 != 0.0 {
            let s = self.smooth(q, c);
            for (o, (sv, qv)) in out.iter_mut().zip(s.iter().zip(q)) {
                *o += self.w2 * (sv - qv);
            }
        }
        if self.w1 != 0.0 {
            let a = self.bilateral(q, c);
            for i in 0..n {
                let cell = self.cell_of[i] as usize;
                for k in 0..c {
                    out[i * c + k] += self.w1 * (a[cell * c + k] - q[i * c + k]);
                }
            }
        }
        out
    }

    /// Separable truncated Gaussian blur, self weight included.
    fn smooth(&self, q: &[f64], c: usize) -> Vec<f64> {
        let (h, w) = (self.height, self.width);
        let r = (self.taps.len() / 2) as isize;
        let mut tmp = vec![0.0; q.len()];
        tmp.par_chunks_mut(w * c).enumerate().for_each(|(row, out)| {
            for col in 0..w {
                for (t, &tap) in self.taps.iter().enumerate() {
                    let cc = col as isize + t as isize - r;
                    if cc < 0 || cc >= w as isize {
                        continue;
                    }
                    let src = (row * w + cc as usize) * c;
                    for k in 0..c {
                        out[col * c + k] += tap * q[src + k];
                    }
                }
            }
        });
        let mut res = vec![0.0; q.len()];
        res.par_chunks_mut(w * c).enumerate().for_each(|(row, out)| {
            for (t, &tap) in self.taps.iter().enumerate() {
                let rr = row as isize + t as isize - r;
                if rr < 0 || rr >= h as isize {
                    continue;
                }
                let src = &tmp[rr as usize * w * c..(rr as usize + 1) * w * c];
                for (o, s) in out.iter_mut().zip(src) {
                    *o += tap * s;
                }
            }
        });
        res
    }

    /// Splat to the nearest lattice cell, blur each of the five dimensions, read back per cell.
    fn bilateral(&self, q: &[f64], c: usize) -> Vec<f64> {
        let mut cells = vec![0.0; self.num_cells * c];
        for (i, &cell) in self.cell_of.iter().enumerate() {
            let dst = &mut cells[cell as usize * c..(cell as usize + 1) * c];
            for (d, s) in dst.iter_mut().zip(&q[i * c..(i + 1) * c]) {
                *d += s;
            }
        }
        let mut next = vec![0.0; cells.len()];
        for nb in &self.neighbors {
            next.par_chunks_mut(c).enumerate().for_each(|(cell, out)| {
                for k in 0..c {
                    out[k] = GRID_TAPS[2] * cells[cell * c + k];
                }
                for (slot, &tap) in [GRID_TAPS[0], GRID_TAPS[1], GRID_TAPS[3], GRID_TAPS[4]].iter().enumerate() {
                    let other = nb[cell][slot];
                    if other == NO_CELL {
                        continue;
                    }
                    for k in 0..c {
                        out[k] += tap * cells[other as usize * c + k];
                    }
                }
            });
            std::mem::swap(&mut cells, &mut next);
        }
        cells
    }
}

/// One synchronous update `Q_i(c) ∝ P_i(c) exp(m_i(c))`, with `P` floored at `eps`.
fn mean_field_step(log_p: &[f64], messages: &[f64], c: usize) -> Vec<f64> {
    let mut q = vec![0.0; log_p.len()];
    q.par_chunks_mut(c).enumerate().for_each(|(i, out)| {
        let base = i * c;
        let mut hi = f64::NEG_INFINITY;
        for k in 0..c {
            out[k] = log_p[base + k] + messages[base + k];
            hi = hi.max(out[k]);
        }
        let mut z = 0.0;
        for v in out.iter_mut() {
            *v = (*v - hi).exp();
            z += *v;
        }
        out.iter_mut().for_each(|v| *v /= z);
    });
    q
}

/// Mean-field inference from `Q = P`. Returns the final `Q`; the energy report
/// evaluates its per-pixel argmax labeling.
pub fn crf_mean_field(p: &ProbabilityMap, img: &RgbImage, params: &DenseCrfParams) -> Result<(SoftMask, EnergyReport)> {
    p.grid().ensure_same(&img.grid())?;
    params.validate()?;
    let c = p.num_classes();
    if params.w1 == 0.0 && params.w2 == 0.0 {
        let data = rounded_data_energy(p, p.values(), params.eps);
        return Ok((SoftMask::from(p.clone()), EnergyReport::new(data, 0.0, 0)));
    }
    let kernel = PairwiseKernel::new(img, params);
    let log_p: Vec<f64> = p.values().iter().map(|&v| v.max(params.eps).ln()).collect();
    let mut q = p.values().to_vec();
    let mut iterations = 0;
    for _ in 0..params.n_iters {
        iterations += 1;
        let next = mean_field_step(&log_p, &kernel.apply(&q, c), c);
        let change = next.iter().zip(&q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        q = next;
        if change < params.tol {
            break;
        }
    }
    let data = rounded_data_energy(p, &q, params.eps);
    let labels = onehot_argmax(&q, c);
    let messages = kernel.apply(&labels, c);
    let pairwise = 0.5
        * (0..p.grid().len())
            .map(|i| {
                let own = argmax(&q[i * c..(i + 1) * c]);
                (0..c).filter(|&k| k != own).map(|k| messages[i * c + k]).sum::<f64>()
            })
            .sum::<f64>();
    Ok((SoftMask::from_simplex_unchecked(p.grid(), c, q), EnergyReport::new(data, pairwise, iterations)))
}

fn onehot_argmax(q: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; q.len()];
    for (i, px) in q.chunks_exact(c).enumerate() {
        out[i * c + argmax(px)] = 1.0;
    }
    out
}

fn rounded_data_energy(p: &ProbabilityMap, q: &[f64], eps: f64) -> f64 {
    let c = p.num_classes();
    q.chunks_exact(c).enumerate().map(|(i, px)| -p.pixel(i)[argmax(px)].max(eps).ln()).sum()
}

/// Exact CRF energy of the rounded `q`: data term plus the kernel weight of
/// every unordered pixel pair with differing labels.
pub fn crf_energy(q: &SoftMask, p: &ProbabilityMap, img: &RgbImage, params: &DenseCrfParams) -> Result<f64> {
    p.grid().ensure_same(&q.grid())?;
    p.grid().ensure_same(&img.grid())?;
    if p.num_classes() != q.num_classes() {
        return Err(Error::ClassSetMismatch { expected: p.num_classes(), found: q.num_classes() });
    }
    params.validate()?;
    let n = p.grid().len();
    if n > params.exact_max_pixels {
        return Err(Error::InstanceTooLarge { pixels: n, cap: params.exact_max_pixels });
    }
    let c = q.num_classes();
    let labels: Vec<usize> = q.values().chunks_exact(c).map(argmax).collect();
    let kernel = ExactKernel::new(img, params);
    let pairwise: f64 = (0..n)
        .into_par_iter()
        .map(|i| ((i + 1)..n).filter(|&j| labels[i] != labels[j]).map(|j| kernel.weight(i, j)).sum::<f64>())
        .collect::<Vec<_>>()
        .iter()
        .sum();
    Ok(rounded_data_energy(p, q.values(), params.eps) + pairwise)
}
