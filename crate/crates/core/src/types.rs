//! Domain types shared by every stage of the pipeline.
//!
//! All per-pixel containers are row-major over a [`PixelGrid`]. Class-valued
//! fields ([`ProbabilityMap`], [`SoftMask`]) store the class index innermost,
//! so pixel `i`'s vector is `values[i * C..(i + 1) * C]`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value for pixels that carry no annotation.
pub const UNLABELED: u8 = 255;

/// Per-pixel tolerance on `sum == 1` for simplex-valued fields.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelGrid {
    height: usize,
    width: usize,
}

impl PixelGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::param(format!("grid must be non-empty, got {height}x{width}")));
        }
        Ok(PixelGrid { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        debug_assert!(row < self.height && col < self.width);
        row * self.width + col
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index / self.width, index % self.width)
    }

    pub fn ensure_same(&self, other: &PixelGrid) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch { expected: *self, found: *other });
        }
        Ok(())
    }
}

impl fmt::Display for PixelGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.height, self.width)
    }
}

/// The label alphabet `0..C`. [`UNLABELED`] is never a member.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    num_classes: usize,
    names: Option<Vec<String>>,
}

impl ClassSet {
    pub fn new(num_classes: usize) -> Result<Self> {
        if !(2..=UNLABELED as usize).contains(&num_classes) {
            return Err(Error::param(format!("class count must be in 2..={}, got {num_classes}", UNLABELED)));
        }
        Ok(ClassSet { num_classes, names: None })
    }

    pub fn with_names(names: Vec<String>) -> Result<Self> {
        let mut set = ClassSet::new(names.len())?;
        set.names = Some(names);
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn names(&self) -> Option<&[String]> {
        self.names.as_deref()
    }

    pub fn contains(&self, class: u8) -> bool {
        (class as usize) < self.num_classes
    }

    pub fn check(&self, class: u8) -> Result<()> {
        if self.contains(class) {
            Ok(())
        } else {
            Err(Error::InvalidClass { class: class as u32, num_classes: self.num_classes })
        }
    }
}

/// RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    grid: PixelGrid,
    pixels: Vec<[f32; 3]>,
}

impl RgbImage {
    pub fn new(grid: PixelGrid, pixels: Vec<[f32; 3]>) -> Result<Self> {
        if pixels.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} pixels for a {grid} grid", pixels.len())));
        }
        for (i, px) in pixels.iter().enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { pixel: i, class: ch });
                }
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::param(format!("intensity {v} at pixel {i} channel {ch} outside [0, 1]")));
                }
            }
        }
        Ok(RgbImage { grid, pixels })
    }

    pub fn from_fn(grid: PixelGrid, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Result<Self> {
        let mut pixels = Vec::with_capacity(grid.len());
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                pixels.push(f(r, c));
            }
        }
        RgbImage::new(grid, pixels)
    }

    pub fn constant(grid: PixelGrid, rgb: [f32; 3]) -> Result<Self> {
        RgbImage::new(grid, vec![rgb; grid.len()])
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn pixels(&self) -> &[[f32; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn pixel(&self, i: usize) -> [f32; 3] {
        self.pixels[i]
    }

    /// Intensities rescaled to `[0, 255]`.
    #[inline]
    pub fn rgb255(&self, i: usize) -> [f64; 3] {
        let [r, g, b] = self.pixels[i];
        [r as f64 * 255.0, g as f64 * 255.0, b as f64 * 255.0]
    }

    /// Rec. 601 luma on the `[0, 255]` scale.
    #[inline]
    pub fn luminance255(&self, i: usize) -> f64 {
        let [r, g, b] = self.rgb255(i);
        0.299 * r + 0.587 * g + 0.114 * b
    }
}

/// Sparse pixel-to-class annotations.
///
/// Entries are kept sorted by pixel index; a pixel appears at most once.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScribbleSet {
    grid: PixelGrid,
    num_classes: usize,
    entries: Vec<(usize, u8)>,
    annotated: BTreeSet<u8>,
}

impl ScribbleSet {
    /// Builds a scribble set. Repeated identical entries collapse; a pixel
    /// given two different classes is rejected.
    pub fn new(grid: PixelGrid, classes: &ClassSet, mut entries: Vec<(usize, u8)>) -> Result<Self> {
        for &(pixel, class) in &entries {
            if pixel >= grid.len() {
                return Err(Error::ShapeMismatch(format!("scribble pixel {pixel} outside {grid} grid")));
            }
            classes.check(class)?;
        }
        entries.sort_unstable();
        let mut deduped: Vec<(usize, u8)> = Vec::with_capacity(entries.len());
        for (pixel, class) in entries {
            match deduped.last() {
                Some(&(p, c)) if p == pixel => {
                    if c != class {
                        return Err(Error::DuplicateScribble { pixel, first: c, second: class });
                    }
                }
                _ => deduped.push((pixel, class)),
            }
        }
        let annotated = deduped.iter().map(|&(_, c)| c).collect();
        Ok(ScribbleSet { grid, num_classes: classes.len(), entries: deduped, annotated })
    }

    pub fn empty(grid: PixelGrid, classes: &ClassSet) -> Self {
        ScribbleSet { grid, num_classes: classes.len(), entries: Vec::new(), annotated: BTreeSet::new() }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn entries(&self) -> &[(usize, u8)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn annotated_classes(&self) -> &BTreeSet<u8> {
        &self.annotated
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|&(p, _)| p)
    }
}

/// Dense hard labeling; [`UNLABELED`] marks pixels without a class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    grid: PixelGrid,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(grid: PixelGrid, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} labels for a {grid} grid", labels.len())));
        }
        Ok(LabelMap { grid, labels })
    }

    pub fn filled(grid: PixelGrid, label: u8) -> Self {
        LabelMap { grid, labels: vec![label; grid.len()] }
    }

    pub fn grid(&self) -> PixelGrid {
        self.grid
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    #[inline]
    pub fn get(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn is_full(&self) -> bool {
        !self.labels.contains(&UNLABELED)
    }

    /// Classes occurring in the map, excluding [`UNLABELED`].
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != UNLABELED).collect()
    }

    /// Checks every label is either a member of `classes` or [`UNLABELED`].
    pub fn check_classes(&self, classes: &ClassSet) -> Result<()> {
        match self.labels.iter().find(|&&l| l != UNLABELED && !classes.contains(l)) {
            Some(&l) => Err(Error::InvalidClass { class: l as u32, num_classes: classes.len() }),
            None => Ok(()),
        }
    }
}

/// Which annotator produced a probability map. Drives the default Potts weight.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Local,
    Global,
    Combined,
    #[default]
    Unknown,
}

/// Read access shared by [`ProbabilityMap`] and [`SoftMask`].
pub trait ClassField {
    fn grid(&self) -> PixelGrid;
    fn num_classes(&self) -> usize;
    fn values(&self) -> &[f64];

    #[inline]
    fn pixel(&self, i: usize) -> &[f64] {
        let c = self.num_classes();
        &self.values()[i * c..(i + 1) * c]
    }
}

fn check_class_count(num_classes: usize) -> Result<()> {
    if !(2..=UNLABELED as usize).contains(&num_classes) {
        return Err(Error::param(format!("class count must be in 2..=255, got {num_classes}")));
    }
    Ok(())
}

/// Per-pixel class probabilities, every pixel on the unit simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    grid: PixelGrid,
    num_classes: usize,
    probs: Vec<f64>,
    provenance: Provenance,
}

impl ProbabilityMap {
    /// Validates raw per-pixel scores and renormalizes them onto the simplex.
    ///
    /// Pixels whose sum is already within [`SIMPLEX_TOL`] of one are left
    /// untouched, so the operation is idempotent and f32 payloads round-trip.
    pub fn new(grid: PixelGrid, num_classes: usize, mut probs: Vec<f64>) -> Result<Self> {
        check_class_count(num_classes)?;
        if probs.len() != grid.len() * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {grid} pixels x {num_classes} classes",
                probs.len()
            )));
        }
        for (pixel, chunk) in probs.chunks_exact_mut(num_classes).enumerate() {
            let mut sum = 0.0;
            for (class, &v) in chunk.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { pixel, class });
                }
                if v < 0.0 {
                    return Err(Error::NegativeValue { pixel, class });
                }
                sum += v;
            }
            if sum <= 0.0 {
                return Err(Error::DegeneratePixel { pixel });
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                chunk.iter_mut().for_each(|v| *v /= sum);
            }
        }
        Ok(ProbabilityMap { grid, num_classes, probs, provenance: Provenance::Unknown })
    }

    pub fn uniform(grid: PixelGrid, num_classes: usize) -> Result<Self> {
        check_class_count(num_classes)?;
        let p = 1.0 / num_classes as f64;
        ProbabilityMap::new(grid, num_classes, vec![p; grid.len() * num_classes])
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn class_set(&self) -> ClassSet {
        ClassSet::new(self.num_classes).expect("class count validated at construction")
    }

    pub fn into_values(self) -> Vec<f64> {
        self.probs
    }
}

impl ClassField for ProbabilityMap {
    fn grid(&self) -> PixelGrid {
        self.grid
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn values(&self) -> &[f64] {
        &self.probs
    }
}

/// Re-validates a probability map, renormalizing any pixel that drifted off the simplex.
pub fn validate_probability_map(p: ProbabilityMap) -> Result<ProbabilityMap> {
    let provenance = p.provenance;
    Ok(ProbabilityMap::new(p.grid, p.num_classes, p.probs)?.with_provenance(provenance))
}

/// Soft segmentation: the optimization variable of the MAP problems.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask {
    grid: PixelGrid,
    num_classes: usize,
    mask: Vec<f64>,
}

impl SoftMask {
    /// Accepts `mask` only if every pixel is on the simplex within [`SIMPLEX_TOL`].
    pub fn new(grid: PixelGrid, num_classes: usize, mask: Vec<f64>) -> Result<Self> {
        check_class_count(num_classes)?;
        if mask.len() != grid.len() * num_classes {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {grid} pixels x {num_classes} classes",
                mask.len()
            )));
        }
        for (pixel, chunk) in mask.chunks_exact(num_classes).enumerate() {
            let mut sum = 0.0;
            for (class, &v) in chunk.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { pixel, class });
                }
                if v < 0.0 {
                    return Err(Error::NotOnSimplex { pixel });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(Error::NotOnSimplex { pixel });
            }
        }
        Ok(SoftMask { grid, num_classes, mask })
    }

    pub(crate) fn from_simplex_unchecked(grid: PixelGrid, num_classes: usize, mask: Vec<f64>) -> Self {
        debug_assert_eq!(mask.len(), grid.len() * num_classes);
        SoftMask { grid, num_classes, mask }
    }

    /// One-hot embedding of a full label map.
    pub fn from_labels(labels: &LabelMap, num_classes: usize) -> Result<Self> {
        check_class_count(num_classes)?;
        let mut mask = vec![0.0; labels.grid().len() * num_classes];
        for (i, &l) in labels.labels().iter().enumerate() {
            if l == UNLABELED {
                return Err(Error::UnlabeledPixel { pixel: i });
            }
            if l as usize >= num_classes {
                return Err(Error::InvalidClass { class: l as u32, num_classes });
            }
            mask[i * num_classes + l as usize] = 1.0;
        }
        Ok(SoftMask { grid: labels.grid(), num_classes, mask })
    }

    pub fn into_values(self) -> Vec<f64> {
        self.mask
    }
}

impl From<ProbabilityMap> for SoftMask {
    fn from(p: ProbabilityMap) -> Self {
        SoftMask { grid: p.grid, num_classes: p.num_classes, mask: p.probs }
    }
}

impl ClassField for SoftMask {
    fn grid(&self) -> PixelGrid {
        self.grid
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn values(&self) -> &[f64] {
        &self.mask
    }
}

/// Largest per-pixel deviation from the simplex (negative mass or sum error).
pub fn simplex_violation(field: &impl ClassField) -> f64 {
    let c = field.num_classes();
    field
        .values()
        .chunks_exact(c)
        .map(|px| {
            let sum: f64 = px.iter().sum();
            let neg = px.iter().fold(0.0f64, |m, &v| m.max(-v));
            (sum - 1.0).abs().max(neg)
        })
        .fold(0.0, f64::max)
}
