//! Synthetic corpora: piecewise-constant color scenes with ground truth,
//! interior scribbles and a degraded stand-in for a global annotator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassSet, LabelMap, PixelGrid, ProbabilityMap, Provenance, RgbImage, ScribbleSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Voronoi cells per image; each gets a random class.
    pub regions: usize,
    /// Per-pixel Gaussian color noise (intensities in [0, 1]).
    pub noise: f64,
    /// Per-image shift of each class color.
    pub color_jitter: f64,
    /// Random-walk steps per scribble stroke.
    pub stroke_len: usize,
    /// Misalignment of the global map, in pixels (each axis drawn from `-shift..=shift`).
    pub global_shift: usize,
    /// Gaussian blur of the global one-hot map, in pixels.
    pub global_blur: f64,
    /// Weight of per-pixel random noise mixed into the global map.
    pub global_noise: f64,
    /// Discs where the global map favors a class absent from the image.
    pub foreign_blobs: usize,
    pub blob_radius: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 80,
            width: 104,
            num_classes: 5,
            regions: 5,
            noise: 0.9,
            color_jitter: 0.06,
            stroke_len: 40,
            global_shift: 3,
            global_blur: 2.5,
            global_noise: 0.5,
            foreign_blobs: 2,
            blob_radius: 7.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub image: RgbImage,
    pub gt: LabelMap,
    pub scribbles: ScribbleSet,
    pub global: ProbabilityMap,
}

/// Base color of class `k`: evenly spaced hues at moderate saturation.
pub fn class_color(k: usize, num_classes: usize) -> [f64; 3] {
    let h = 6.0 * k as f64 / num_classes as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.2 + 0.6 * r, 0.2 + 0.6 * g, 0.2 + 0.6 * b]
}

pub fn synth_image(cfg: &SynthConfig, seed: u64) -> Result<SynthImage> {
    let classes = ClassSet::new(cfg.num_classes)?;
    let grid = PixelGrid::new(cfg.height, cfg.width)?;
    if cfg.regions < 2 {
        return Err(Error::param("need at least two regions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.num_classes;

    // Region seeds and classes; the first two regions always differ.
    let sites: Vec<(f64, f64)> = (0..cfg.regions)
        .map(|_| (rng.random_range(0.0..cfg.height as f64), rng.random_range(0.0..cfg.width as f64)))
        .collect();
    let mut region_class: Vec<u8> = (0..cfg.regions).map(|_| rng.random_range(0..c) as u8).collect();
    if region_class[0] == region_class[1] {
        region_class[1] = ((region_class[0] as usize + 1) % c) as u8;
    }
    let region: Vec<usize> = (0..grid.len())
        .map(|i| {
            let (r, col) = grid.coords(i);
            let d = |s: &(f64, f64)| (s.0 - r as f64).powi(2) + (s.1 - col as f64).powi(2);
            (0..sites.len()).min_by(|&a, &b| d(&sites[a]).total_cmp(&d(&sites[b]))).unwrap()
        })
        .collect();
    let gt = LabelMap::new(grid, region.iter().map(|&k| region_class[k]).collect())?;

    let jitter = Normal::new(0.0, cfg.color_jitter.max(1e-12)).map_err(|e| Error::param(e.to_string()))?;
    let colors: Vec<[f64; 3]> = (0..c).map(|k| class_color(k, c).map(|v| v + jitter.sample(&mut rng))).collect();
    let noise = Normal::new(0.0, cfg.noise.max(1e-12)).map_err(|e| Error::param(e.to_string()))?;
    let pixels = (0..grid.len())
        .map(|i| colors[gt.get(i) as usize].map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32))
        .collect();
    let image = RgbImage::new(grid, pixels)?;

    let scribbles = strokes(grid, &region, &region_class, &sites, cfg.stroke_len, &classes, &mut rng)?;
    let global = degraded_global(cfg, &gt, &mut rng)?;
    Ok(SynthImage { image, gt, scribbles, global })
}

/// Pixels whose 3x3 neighborhood lies inside one region.
fn interior(grid: PixelGrid, region: &[usize], i: usize) -> bool {
    let (r, c) = grid.coords(i);
    if r == 0 || c == 0 || r + 1 >= grid.height() || c + 1 >= grid.width() {
        return false;
    }
    (r - 1..=r + 1).all(|rr| (c - 1..=c + 1).all(|cc| region[grid.index(rr, cc)] == region[i]))
}

fn strokes(
    grid: PixelGrid,
    region: &[usize],
    region_class: &[u8],
    sites: &[(f64, f64)],
    len: usize,
    classes: &ClassSet,
    rng: &mut ChaCha8Rng,
) -> Result<ScribbleSet> {
    let mut entries = Vec::new();
    for (k, site) in sites.iter().enumerate() {
        // Start at the interior pixel of this region closest to its site, or
        // at any pixel of the region when it is too thin to have an interior.
        let dist = |i: usize| {
            let (r, c) = grid.coords(i);
            (site.0 - r as f64).powi(2) + (site.1 - c as f64).powi(2)
        };
        let closest = |strict: bool| {
            (0..grid.len())
                .filter(|&i| region[i] == k && (!strict || interior(grid, region, i)))
                .min_by(|&a, &b| dist(a).total_cmp(&dist(b)))
        };
        let start = closest(true).or_else(|| closest(false));
        let Some(mut at) = start else { continue };
        let (mut dr, mut dc) = (rng.random_range(-1i64..=1), rng.random_range(-1i64..=1));
        entries.push((at, region_class[k]));
        for _ in 0..len {
            if rng.random_bool(0.3) || (dr == 0 && dc == 0) {
                dr = rng.random_range(-1i64..=1);
                dc = rng.random_range(-1i64..=1);
            }
            let (r, c) = grid.coords(at);
            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
            if nr < 0 || nc < 0 || nr >= grid.height() as i64 || nc >= grid.width() as i64 {
                continue;
            }
            let next = grid.index(nr as usize, nc as usize);
            if region[next] == k && interior(grid, region, next) {
                at = next;
                entries.push((at, region_class[k]));
            }
        }
    }
    entries.sort_unstable();
    entries.dedup();
    ScribbleSet::new(grid, classes, entries)
}

fn degraded_global(cfg: &SynthConfig, gt: &LabelMap, rng: &mut ChaCha8Rng) -> Result<ProbabilityMap> {
    let grid = gt.grid();
    let (h, w, c) = (grid.height(), grid.width(), cfg.num_classes);
    let s = cfg.global_shift as i64;
    let (sr, sc) = (rng.random_range(-s..=s), rng.random_range(-s..=s));
    let mut field = vec![0.0; grid.len() * c];
    for r in 0..h {
        for col in 0..w {
            let rr = (r as i64 - sr).clamp(0, h as i64 - 1) as usize;
            let cc = (col as i64 - sc).clamp(0, w as i64 - 1) as usize;
            field[grid.index(r, col) * c + gt.get(grid.index(rr, cc)) as usize] = 1.0;
        }
    }
    if cfg.global_blur > 0.0 {
        field = gaussian_blur(&field, grid, c, cfg.global_blur);
    }

    let present = gt.classes_present();
    let mut absent: Vec<usize> = (0..c).filter(|k| !present.contains(&(*k as u8))).collect();
    absent.shuffle(rng);
    for b in 0..cfg.foreign_blobs {
        let Some(&foreign) = absent.get(b % absent.len().max(1)) else { break };
        let (cr, cc) = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
        for i in 0..grid.len() {
            let (r, col) = grid.coords(i);
            if (r as f64 - cr).powi(2) + (col as f64 - cc).powi(2) <= cfg.blob_radius * cfg.blob_radius {
                let px = &mut field[i * c..(i + 1) * c];
                px.iter_mut().for_each(|v| *v *= 0.3);
                px[foreign] += 0.7;
            }
        }
    }

    let mix = cfg.global_noise.clamp(0.0, 1.0);
    let gamma = Gamma::new(0.3, 1.0).map_err(|e| Error::param(e.to_string()))?;
    for px in field.chunks_exact_mut(c) {
        // Gamma(0.3) weights give peaked per-pixel votes, often for a wrong class.
        let mut noise: Vec<f64> = (0..c).map(|_| gamma.sample(rng)).collect();
        let z: f64 = noise.iter().sum::<f64>().max(f64::MIN_POSITIVE);
        noise.iter_mut().for_each(|v| *v /= z);
        for (v, n) in px.iter_mut().zip(&noise) {
            *v = (1.0 - mix) * *v + mix * n + 1e-6;
        }
    }
    Ok(ProbabilityMap::new(grid, c, field)?.with_provenance(Provenance::Global))
}

fn gaussian_blur(field: &[f64], grid: PixelGrid, c: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    let (h, w) = (grid.height() as i64, grid.width() as i64);
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; src.len()];
        for r in 0..h {
            for col in 0..w {
                let dst = ((r * w + col) as usize) * c;
                for (t, &tap) in taps.iter().enumerate() {
                    let off = t as i64 - radius;
                    let (rr, cc) =
                        if horizontal { (r, (col + off).clamp(0, w - 1)) } else { ((r + off).clamp(0, h - 1), col) };
                    let s = ((rr * w + cc) as usize) * c;
                    for k in 0..c {
                        out[dst + k] += tap * src[s + k];
                    }
                }
            }
        }
        out
    };
    pass(&pass(field, true), false)
}

/// Relabels scribble pixels to a wrong class with probability `rate`,
/// always keeping the first pixel of each class intact.
pub fn inject_label_swaps(scribbles: &ScribbleSet, classes: &ClassSet, rate: f64, seed: u64) -> Result<ScribbleSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = classes.len();
    let mut kept = std::collections::BTreeSet::new();
    let entries = scribbles
        .entries()
        .iter()
        .map(|&(i, l)| {
            if kept.insert(l) || !rng.random_bool(rate) {
                (i, l)
            } else {
                (i, ((l as usize + rng.random_range(1..c)) % c) as u8)
            }
        })
        .collect();
    ScribbleSet::new(scribbles.grid(), classes, entries)
}

/// Removes every scribble of `class`.
pub fn drop_class(scribbles: &ScribbleSet, classes: &ClassSet, class: u8) -> Result<ScribbleSet> {
    let entries = scribbles.entries().iter().copied().filter(|&(_, l)| l != class).collect();
    ScribbleSet::new(scribbles.grid(), classes, entries)
}
