//! First-layer filter-bank features for the per-image forest.
//!
//! A [`FilterBank`] holds `k x k x 3` correlation kernels. Responses are
//! computed at stride 1 with reflect padding, no nonlinearity, and each output
//! channel is standardized over the image.
//!
//! Filter-bank file layout (little-endian):
//!
//! ```text
//! "FBK1" | u32 D | D x ( u32 k | f32 bias | k*k*3 f32 weights, (row, col, channel) order )
//! ```

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::types::{PixelGrid, RgbImage};

const FBK_MAGIC: &[u8; 4] = b"FBK1";

/// Number of filters in the synthetic bank, matching the VGG-16 (64) plus AlexNet (96) first layers.
pub const SYNTHETIC_BANK_SIZE: usize = 160;

#[derive(Clone, Debug, PartialEq)]
pub struct Filter {
    size: usize,
    bias: f32,
    weights: Vec<f32>,
}

impl Filter {
    pub fn new(size: usize, bias: f32, weights: Vec<f32>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) {
            return Err(Error::ShapeMismatch(format!("kernel side must be odd, got {size}")));
        }
        if weights.len() != size * size * 3 {
            return Err(Error::ShapeMismatch(format!("{} weights for a {size}x{size}x3 kernel", weights.len())));
        }
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::format("filter contains non-finite weights"));
        }
        Ok(Filter { size, bias, weights })
    }

    /// Single-tap filter that copies `channel`.
    pub fn identity(channel: usize) -> Self {
        let mut weights = vec![0.0; 3];
        weights[channel] = 1.0;
        Filter { size: 1, bias: 0.0, weights }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn bias(&self) -> f32 {
        self.bias
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.weights[(row * self.size + col) * 3 + channel]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterBank {
    filters: Vec<Filter>,
}

impl FilterBank {
    pub fn new(filters: Vec<Filter>) -> Result<Self> {
        if filters.is_empty() {
            return Err(Error::format("filter bank is empty"));
        }
        Ok(FilterBank { filters })
    }

    pub fn filters(&self) -> &[Filter] {
        &self.filters
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }

    pub fn max_size(&self) -> usize {
        self.filters.iter().map(Filter::size).max().unwrap_or(1)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != FBK_MAGIC {
            return Err(Error::format("not a filter-bank file (bad magic)"));
        }
        let count = read_u32(&mut r)? as usize;
        if count == 0 {
            return Err(Error::format("filter bank declares zero filters"));
        }
        let mut filters = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let size = read_u32(&mut r)? as usize;
            if size == 0 || size.is_multiple_of(2) || size > 255 {
                return Err(Error::ShapeMismatch(format!("kernel side must be odd and <= 255, got {size}")));
            }
            let bias = read_f32(&mut r)?;
            let mut weights = vec![0f32; size * size * 3];
            for w in weights.iter_mut() {
                *w = read_f32(&mut r)?;
            }
            filters.push(Filter::new(size, bias, weights)?);
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after the last filter"));
        }
        FilterBank::new(filters)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FBK_MAGIC)?;
        w.write_all(&(self.filters.len() as u32).to_le_bytes())?;
        for f in &self.filters {
            w.write_all(&(f.size as u32).to_le_bytes())?;
            w.write_all(&f.bias.to_le_bytes())?;
            for v in &f.weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("truncated filter-bank payload"),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(r: &mut impl Read) -> Result<f32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

pub fn load_filter_bank(path: &Path) -> Result<FilterBank> {
    FilterBank::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
}

// Color projections applied to the spatial kernels.
const LUM: [f64; 3] = [0.299, 0.587, 0.114];
const RED_GREEN: [f64; 3] = [FRAC_1_SQRT_2, -FRAC_1_SQRT_2, 0.0];
const BLUE_YELLOW: [f64; 3] = [-0.408_248_29, -0.408_248_29, 0.816_496_58];
const RED: [f64; 3] = [1.0, 0.0, 0.0];
const GREEN: [f64; 3] = [0.0, 1.0, 0.0];
const BLUE: [f64; 3] = [0.0, 0.0, 1.0];

fn spatial(size: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let h = (size / 2) as f64;
    let mut k = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            k.push(f(c as f64 - h, r as f64 - h));
        }
    }
    let norm = k.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        k.iter_mut().for_each(|v| *v /= norm);
    }
    k
}

fn gaussian(x: f64, y: f64, sigma: f64) -> f64 {
    (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
}

fn deriv1(size: usize, sigma: f64, theta: f64) -> Vec<f64> {
    spatial(size, |x, y| {
        let u = x * theta.cos() + y * theta.sin();
        -u / (sigma * sigma) * gaussian(x, y, sigma)
    })
}

fn deriv2(size: usize, sigma: f64, theta: f64) -> Vec<f64> {
    spatial(size, |x, y| {
        let u = x * theta.cos() + y * theta.sin();
        let s2 = sigma * sigma;
        (u * u / (s2 * s2) - 1.0 / s2) * gaussian(x, y, sigma)
    })
}

fn center_surround(size: usize, inner: f64, outer: f64) -> Vec<f64> {
    spatial(size, |x, y| gaussian(x, y, inner) / (inner * inner) - gaussian(x, y, outer) / (outer * outer))
}

fn blob(size: usize, sigma: f64) -> Vec<f64> {
    spatial(size, |x, y| gaussian(x, y, sigma))
}

fn gabor(size: usize, sigma: f64, freq: f64, theta: f64, phase: f64) -> Vec<f64> {
    spatial(size, |x, y| {
        let u = x * theta.cos() + y * theta.sin();
        gaussian(x, y, sigma) * (2.0 * PI * freq * u + phase).cos()
    })
}

fn colored(size: usize, kernel: &[f64], color: [f64; 3]) -> Filter {
    let weights = kernel.iter().flat_map(|&k| color.map(|c| (k * c) as f32)).collect();
    Filter { size, bias: 0.0, weights }
}

fn random_filter(size: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Filter {
    let envelope = spatial(size, |x, y| gaussian(x, y, sigma));
    let mut weights: Vec<f32> =
        envelope.iter().flat_map(|&e| [0; 3].map(|_| (e * rng.random_range(-1.0..1.0)) as f32)).collect();
    let norm = weights.iter().map(|w| w * w).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
    weights.iter_mut().for_each(|w| *w /= norm);
    Filter { size, bias: 0.0, weights }
}

/// Deterministic stand-in for pretrained first-layer filters: 64 kernels of
/// side 3 followed by 96 of side 11, built from oriented Gaussian
/// derivatives, Gabors, center-surround and blob kernels over luminance and
/// color-opponent channels, plus a few seeded random kernels. The seed also
/// rotates the orientation grid by a sub-step offset.
pub fn synthetic_filter_bank(seed: u64) -> FilterBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0.0..PI / 16.0);
    let orientations: Vec<f64> = (0..8).map(|k| offset + k as f64 * PI / 8.0).collect();
    let mut filters = Vec::with_capacity(SYNTHETIC_BANK_SIZE);

    // Small kernels.
    let k = 3;
    for &t in &orientations {
        filters.push(colored(k, &deriv1(k, 0.8, t), LUM));
    }
    for &t in &orientations {
        filters.push(colored(k, &deriv2(k, 0.8, t), LUM));
    }
    for color in [RED_GREEN, BLUE_YELLOW] {
        for &t in &orientations {
            filters.push(colored(k, &deriv1(k, 0.8, t), color));
        }
        for &t in orientations.iter().step_by(2) {
            filters.push(colored(k, &deriv2(k, 0.8, t), color));
        }
    }
    for color in [LUM, RED_GREEN, BLUE_YELLOW] {
        filters.push(colored(k, &center_surround(k, 0.5, 1.5), color));
    }
    for color in [RED, GREEN, BLUE, LUM, RED_GREEN, BLUE_YELLOW] {
        filters.push(colored(k, &blob(k, 0.8), color));
    }
    while filters.len() < 64 {
        filters.push(random_filter(k, 1.0, &mut rng));
    }

    // Large kernels.
    let k = 11;
    for sigma in [1.5, 3.0] {
        for &t in &orientations {
            filters.push(colored(k, &deriv1(k, sigma, t), LUM));
        }
    }
    for sigma in [1.5, 3.0] {
        for &t in &orientations {
            filters.push(colored(k, &deriv2(k, sigma, t), LUM));
        }
    }
    for color in [RED_GREEN, BLUE_YELLOW] {
        for &t in &orientations {
            filters.push(colored(k, &deriv1(k, 2.0, t), color));
        }
    }
    for (freq, phase) in [(0.15, 0.0), (0.3, 0.0), (0.3, PI / 2.0)] {
        for &t in &orientations {
            filters.push(colored(k, &gabor(k, 2.5, freq, t, phase), LUM));
        }
    }
    for (inner, outer) in [(1.0, 2.0), (2.0, 4.0)] {
        for color in [LUM, RED_GREEN, BLUE_YELLOW] {
            filters.push(colored(k, &center_surround(k, inner, outer), color));
        }
    }
    for sigma in [1.5, 3.0] {
        for color in [RED, GREEN, BLUE] {
            filters.push(colored(k, &blob(k, sigma), color));
        }
    }
    for color in [LUM, RED_GREEN, BLUE_YELLOW] {
        filters.push(colored(k, &blob(k, 3.0), color));
    }
    while filters.len() < SYNTHETIC_BANK_SIZE {
        filters.push(random_filter(k, 2.5, &mut rng));
    }
    debug_assert_eq!(filters.len(), SYNTHETIC_BANK_SIZE);
    FilterBank { filters }
}

/// Per-pixel feature vectors, pixel-major: pixel `i` is `data[i * D..(i + 1) * D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    grid: PixelGrid,
    depth: usize,
    data: Vec<f32>,
}

impl FeatureStack {
    pub fn new(grid: PixelGrid, depth: usize, data: Vec<f32>) -> Result<Self> {
        if depth == 0 || data.len() != grid.len() * depth {
            return Err(Error::ShapeMismatch(format!("{} values for {grid} pixels x {depth} channels", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::format("feature stack contains non-finite values"));
        }
        Ok(FeatureStack { grid, depth, data })
    }

    /// Builds a stack from per-channel planes, standardizing each one.
    pub fn from_channels(grid: PixelGrid, channels: Vec<Vec<f32>>) -> Result<Self> {
        let depth = channels.len();
        if channels.iter().any(|ch| ch.len() != grid.len()) {
            return Err(Error::ShapeMismatch("channel plane has wrong length".into()));
        }
        let standardized: Vec<Vec<f32>> = channels.into_iter().map(standardize).collect();
        let mut data = vec![0f32; grid.len() * depth];
        for (d, plane) in standardized.iter().enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                data[i * depth + d] = v;
            }
        }
        FeatureStack::new(grid, depth, data)
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> &[f32] {
        &self.data[i * self.depth..(i + 1) * self.depth]
    }

    pub fn channel(&self, d: usize) -> Vec<f32> {
        (0..self.grid.len()).map(|i| self.data[i * self.depth + d]).collect()
    }
}

/// Zero mean, unit variance; constant planes become all zeros.
fn standardize(plane: Vec<f32>) -> Vec<f32> {
    let (lo, hi) = plane.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo == hi {
        return vec![0.0; plane.len()];
    }
    let n = plane.len() as f64;
    let mean = plane.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = plane.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv_std = 1.0 / var.sqrt();
    plane.iter().map(|&v| ((v as f64 - mean) * inv_std) as f32).collect()
}

/// Reflects `idx` into `0..n` without repeating the edge sample.
#[inline]
fn reflect(idx: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = idx.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Raw (unstandardized) correlation responses, one plane per filter.
pub fn filter_responses(img: &RgbImage, bank: &FilterBank) -> Vec<Vec<f32>> {
    let grid = img.grid();
    let (h, w) = (grid.height(), grid.width());
    let pad = bank.max_size() / 2;
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut padded = vec![[0f32; 3]; ph * pw];
    for r in 0..ph {
        let sr = reflect(r as isize - pad as isize, h);
        for c in 0..pw {
            let sc = reflect(c as isize - pad as isize, w);
            padded[r * pw + c] = img.pixel(grid.index(sr, sc));
        }
    }

    bank.filters
        .par_iter()
        .map(|f| {
            let half = f.size / 2;
            let base = pad - half;
            let mut out = vec![0f32; grid.len()];
            for r in 0..h {
                for c in 0..w {
                    let mut acc = 0f32;
                    for kr in 0..f.size {
                        let row = &padded[(r + base + kr) * pw + c + base..];
                        let wrow = &f.weights[kr * f.size * 3..(kr + 1) * f.size * 3];
                        for (px, wk) in row.iter().zip(wrow.chunks_exact(3)) {
                            acc += px[0] * wk[0] + px[1] * wk[1] + px[2] * wk[2];
                        }
                    }
                    out[r * w + c] = acc + f.bias;
                }
            }
            out
        })
        .collect()
}

/// Filter-bank responses with per-channel standardization.
pub fn extract_features(img: &RgbImage, bank: &FilterBank) -> FeatureStack {
    FeatureStack::from_channels(img.grid(), filter_responses(img, bank))
        .expect("responses of a valid bank on a valid image are finite")
}
