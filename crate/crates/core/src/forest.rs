//! Per-image random-forest annotator.
//!
//! CART trees with Gini splitting are grown on bootstrap resamples of the
//! scribbled pixels. Leaves keep class-count histograms; a pixel's predicted
//! distribution is the mean of its leaves' class frequencies, so classes never
//! scribbled in the image get exactly zero probability.
//!
//! Forest file layout (little-endian):
//!
//! ```text
//! "RFC1" | u32 version | u32 n_trees u32 n_selected u32 max_features(0 = auto) u32 min_leaf u64 seed
//! | u32 num_classes | u32 feature_depth | u32 S, S x u16 selected | u32 K, K x u8 classes_seen
//! | u32 T | T x ( u32 nodes | nodes x ( u8 0, u16 feature, f32 threshold, u32 left, u32 right
//!                                     | u8 1, num_classes x u32 counts ) )
//! ```

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureStack;
use crate::types::{ClassField, ProbabilityMap, Provenance, ScribbleSet};

const RFC_MAGIC: &[u8; 4] = b"RFC1";
const RFC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub n_selected_features: usize,
    /// Features tried per split; `None` means `ceil(sqrt(selected))`.
    pub max_features_per_split: Option<usize>,
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 50, n_selected_features: 100, max_features_per_split: None, min_leaf: 1, seed: 0 }
    }
}

impl ForestConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::param("n_trees must be at least 1"));
        }
        if self.n_selected_features == 0 || self.n_selected_features > depth {
            return Err(Error::param(format!(
                "n_selected_features must be in 1..={depth}, got {}",
                self.n_selected_features
            )));
        }
        if self.min_leaf == 0 {
            return Err(Error::param("min_leaf must be at least 1"));
        }
        if self.max_features_per_split == Some(0) {
            return Err(Error::param("max_features_per_split must be at least 1"));
        }
        if depth > u16::MAX as usize + 1 {
            return Err(Error::param("feature depth exceeds the u16 split index range"));
        }
        Ok(())
    }

    fn split_candidates(&self, n_features: usize) -> usize {
        self.max_features_per_split.unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize).clamp(1, n_features)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Node {
    /// Samples with `x[feature] <= threshold` go left.
    Split {
        feature: u16,
        threshold: f32,
        left: u32,
        right: u32,
    },
    Leaf {
        counts: Vec<u32>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionTree {
    nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn leaf(&self, x: &[f32]) -> &[u32] {
        let mut id = 0usize;
        loop {
            match &self.nodes[id] {
                Node::Split { feature, threshold, left, right } => {
                    id = if x[*feature as usize] <= *threshold { *left as usize } else { *right as usize };
                }
                Node::Leaf { counts } => return counts,
            }
        }
    }

    /// Class counts reaching every node, accumulated from the leaves.
    fn node_counts(&self, num_classes: usize) -> Vec<Vec<u64>> {
        let mut counts = vec![Vec::new(); self.nodes.len()];
        // Children are always allocated after their parent.
        for id in (0..self.nodes.len()).rev() {
            counts[id] = match &self.nodes[id] {
                Node::Leaf { counts: c } => c.iter().map(|&v| v as u64).collect(),
                Node::Split { left, right, .. } => {
                    let (l, r) = (&counts[*left as usize], &counts[*right as usize]);
                    (0..num_classes).map(|k| l[k] + r[k]).collect()
                }
            };
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedForest {
    trees: Vec<DecisionTree>,
    selected_features: Vec<usize>,
    classes_seen: BTreeSet<u8>,
    num_classes: usize,
    feature_depth: usize,
    config: ForestConfig,
}

impl TrainedForest {
    pub fn trees(&self) -> &[DecisionTree] {
        &self.trees
    }

    pub fn selected_features(&self) -> &[usize] {
        &self.selected_features
    }

    pub fn classes_seen(&self) -> &BTreeSet<u8> {
        &self.classes_seen
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_depth(&self) -> usize {
        self.feature_depth
    }

    pub fn config(&self) -> &ForestConfig {
        &self.config
    }

    /// Mean leaf class frequency over trees for one feature vector.
    pub fn predict_one(&self, x: &[f32], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for tree in &self.trees {
            let counts = tree.leaf(x);
            let total: u64 = counts.iter().map(|&c| c as u64).sum();
            let inv = 1.0 / total as f64;
            for (o, &c) in out.iter_mut().zip(counts) {
                *o += c as f64 * inv;
            }
        }
        let inv_trees = 1.0 / self.trees.len() as f64;
        out.iter_mut().for_each(|v| *v *= inv_trees);
    }
}

/// Per-feature mean decrease in Gini impurity.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceScores {
    pub scores: Vec<f64>,
    /// Set when no tree has a split; `scores` is then all zeros.
    pub degenerate: bool,
}

impl ImportanceScores {
    /// Feature indices by decreasing score, ties toward the lower index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order
    }
}

fn tree_seed(seed: u64, tree: usize) -> u64 {
    // splitmix64 finalizer over (seed, tree index)
    let mut z = seed ^ (tree as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct TrainingSet<'a> {
    features: &'a FeatureStack,
    pixels: Vec<usize>,
    labels: Vec<u8>,
    num_classes: usize,
}

impl TrainingSet<'_> {
    #[inline]
    fn value(&self, sample: u32, feature: usize) -> f32 {
        self.features.pixel(self.pixels[sample as usize])[feature]
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f32,
    child_impurity: f64,
}

fn gini_mass(counts: &[u64], n: u64) -> f64 {
    // n * gini = n - sum(c^2) / n
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = counts.iter().map(|&c| (c * c) as f64).sum();
    n as f64 - sq / n as f64
}

fn best_split(
    data: &TrainingSet<'_>,
    samples: &[u32],
    candidates: &[usize],
    mtry: usize,
    min_leaf: usize,
    rng: &mut ChaCha8Rng,
) -> Option<SplitChoice> {
    let c = data.num_classes;
    let n = samples.len();
    let mut order: Vec<usize> = candidates.to_vec();
    order.shuffle(rng);

    let mut best: Option<SplitChoice> = None;
    let mut column: Vec<(f32, u8)> = Vec::with_capacity(n);
    let mut total = vec![0u64; c];
    for &s in samples {
        total[data.labels[s as usize] as usize] += 1;
    }
    let mut left = vec![0u64; c];

    for (visited, &f) in order.iter().enumerate() {
        // Keep drawing past `mtry` only while no valid split has been found.
        if visited >= mtry && best.is_some() {
            break;
        }
        column.clear();
        column.extend(samples.iter().map(|&s| (data.value(s, f), data.labels[s as usize])));
        column.sort_by(|a, b| a.0.total_cmp(&b.0));
        if column[0].0 == column[n - 1].0 {
            continue;
        }
        left.iter_mut().for_each(|v| *v = 0);
        for k in 0..n - 1 {
            left[column[k].1 as usize] += 1;
            let (nl, nr) = (k + 1, n - k - 1);
            if column[k].0 == column[k + 1].0 || nl < min_leaf || nr < min_leaf {
                continue;
            }
            let (mut sq_l, mut sq_r) = (0u64, 0u64);
            for j in 0..c {
                let r = total[j] - left[j];
                sq_l += left[j] * left[j];
                sq_r += r * r;
            }
            let impurity = nl as f64 - sq_l as f64 / nl as f64 + nr as f64 - sq_r as f64 / nr as f64;
            if best.as_ref().is_none_or(|b| impurity < b.child_impurity) {
                let (lo, hi) = (column[k].0, column[k + 1].0);
                let mid = lo + (hi - lo) * 0.5;
                let threshold = if mid < hi { mid } else { lo };
                best = Some(SplitChoice { feature: f, threshold, child_impurity: impurity });
            }
        }
    }
    best
}

fn grow_tree(data: &TrainingSet<'_>, candidates: &[usize], cfg: &ForestConfig, seed: u64) -> DecisionTree {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.pixels.len();
    let mut samples: Vec<u32> = (0..n).map(|_| rng.random_range(0..n) as u32).collect();
    let mtry = cfg.split_candidates(candidates.len());
    let c = data.num_classes;

    let mut nodes = vec![Node::Leaf { counts: Vec::new() }];
    let mut stack = vec![(0usize, 0usize, n)];
    while let Some((id, start, end)) = stack.pop() {
        let range = &mut samples[start..end];
        let mut counts = vec![0u32; c];
        for &s in range.iter() {
            counts[data.labels[s as usize] as usize] += 1;
        }
        let pure = counts.iter().filter(|&&v| v > 0).count() <= 1;
        let size = end - start;
        let split = if pure || size < 2 * cfg.min_leaf {
            None
        } else {
            best_split(data, range, candidates, mtry, cfg.min_leaf, &mut rng)
        };
        let Some(split) = split else {
            nodes[id] = Node::Leaf { counts };
            continue;
        };

        // In-place partition: left block first.
        let mut mid = 0;
        for k in 0..range.len() {
            if data.value(range[k], split.feature) <= split.threshold {
                range.swap(k, mid);
                mid += 1;
            }
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { counts: Vec::new() });
        nodes.push(Node::Leaf { counts: Vec::new() });
        nodes[id] = Node::Split {
            feature: split.feature as u16,
            threshold: split.threshold,
            left: left as u32,
            right: left as u32 + 1,
        };
        stack.push((left + 1, start + mid, end));
        stack.push((left, start, start + mid));
    }
    DecisionTree { nodes }
}

fn train_on(
    features: &FeatureStack,
    wa: &ScribbleSet,
    cfg: &ForestConfig,
    selected: Vec<usize>,
) -> Result<TrainedForest> {
    if wa.is_empty() {
        return Err(Error::EmptyAnnotation);
    }
    features.grid().ensure_same(&wa.grid())?;
    let data = TrainingSet {
        features,
        pixels: wa.positions().collect(),
        labels: wa.entries().iter().map(|&(_, c)| c).collect(),
        num_classes: wa.num_classes(),
    };
    let trees =
        (0..cfg.n_trees).into_par_iter().map(|t| grow_tree(&data, &selected, cfg, tree_seed(cfg.seed, t))).collect();
    Ok(TrainedForest {
        trees,
        selected_features: selected,
        classes_seen: wa.annotated_classes().clone(),
        num_classes: wa.num_classes(),
        feature_depth: features.depth(),
        config: cfg.clone(),
    })
}

/// Grows `cfg.n_trees` trees on all feature channels.
pub fn train_forest(features: &FeatureStack, wa: &ScribbleSet, cfg: &ForestConfig) -> Result<TrainedForest> {
    cfg.validate(features.depth())?;
    train_on(features, wa, cfg, (0..features.depth()).collect())
}

/// Mean decrease in Gini impurity per feature channel, normalized per tree
/// and then over the forest.
pub fn gini_importance(forest: &TrainedForest) -> ImportanceScores {
    let d = forest.feature_depth;
    let mut acc = vec![0.0f64; d];
    for tree in &forest.trees {
        let counts = tree.node_counts(forest.num_classes);
        let mut per_tree = vec![0.0f64; d];
        for (id, node) in tree.nodes.iter().enumerate() {
            if let Node::Split { feature, left, right, .. } = node {
                let mass = |k: usize| gini_mass(&counts[k], counts[k].iter().sum());
                let decrease = mass(id) - mass(*left as usize) - mass(*right as usize);
                per_tree[*feature as usize] += decrease.max(0.0);
            }
        }
        let total: f64 = per_tree.iter().sum();
        if total > 0.0 {
            acc.iter_mut().zip(&per_tree).for_each(|(a, v)| *a += v / total);
        }
    }
    let total: f64 = acc.iter().sum();
    if total > 0.0 {
        acc.iter_mut().for_each(|v| *v /= total);
        ImportanceScores { scores: acc, degenerate: false }
    } else {
        ImportanceScores { scores: vec![0.0; d], degenerate: true }
    }
}

/// Trains a pilot forest on every channel, keeps the `n_selected_features`
/// most important ones and retrains on those alone.
pub fn select_and_retrain(features: &FeatureStack, wa: &ScribbleSet, cfg: &ForestConfig) -> Result<TrainedForest> {
    cfg.validate(features.depth())?;
    if cfg.n_selected_features == features.depth() {
        return train_forest(features, wa, cfg);
    }
    let pilot_cfg = ForestConfig { seed: tree_seed(cfg.seed, usize::MAX), ..cfg.clone() };
    let pilot = train_on(features, wa, &pilot_cfg, (0..features.depth()).collect())?;
    let mut selected: Vec<usize> =
        gini_importance(&pilot).ranking().into_iter().take(cfg.n_selected_features).collect();
    selected.sort_unstable();
    train_on(features, wa, cfg, selected)
}

/// Class distribution at every pixel, zero outside the scribbled classes.
pub fn predict_local(forest: &TrainedForest, features: &FeatureStack) -> Result<ProbabilityMap> {
    if features.depth() != forest.feature_depth {
        return Err(Error::ShapeMismatch(format!(
            "forest expects {} feature channels, got {}",
            forest.feature_depth,
            features.depth()
        )));
    }
    let c = forest.num_classes;
    let grid = features.grid();
    let mut probs = vec![0.0f64; grid.len() * c];
    probs.par_chunks_mut(c).enumerate().for_each(|(i, out)| forest.predict_one(features.pixel(i), out));
    let p = ProbabilityMap::new(grid, c, probs)?.with_provenance(Provenance::Local);
    debug_assert!(p
        .values()
        .chunks_exact(c)
        .all(|px| (0..c).all(|k| forest.classes_seen.contains(&(k as u8)) || px[k] == 0.0)));
    Ok(p)
}

impl TrainedForest {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let cfg = &self.config;
        w.write_all(RFC_MAGIC)?;
        for v in [
            RFC_VERSION,
            cfg.n_trees as u32,
            cfg.n_selected_features as u32,
            cfg.max_features_per_split.unwrap_or(0) as u32,
            cfg.min_leaf as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&cfg.seed.to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&(self.feature_depth as u32).to_le_bytes())?;
        w.write_all(&(self.selected_features.len() as u32).to_le_bytes())?;
        for &f in &self.selected_features {
            w.write_all(&(f as u16).to_le_bytes())?;
        }
        w.write_all(&(self.classes_seen.len() as u32).to_le_bytes())?;
        for &c in &self.classes_seen {
            w.write_all(&[c])?;
        }
        w.write_all(&(self.trees.len() as u32).to_le_bytes())?;
        for tree in &self.trees {
            w.write_all(&(tree.nodes.len() as u32).to_le_bytes())?;
            for node in &tree.nodes {
                match node {
                    Node::Split { feature, threshold, left, right } => {
                        w.write_all(&[0])?;
                        w.write_all(&feature.to_le_bytes())?;
                        w.write_all(&threshold.to_le_bytes())?;
                        w.write_all(&left.to_le_bytes())?;
                        w.write_all(&right.to_le_bytes())?;
                    }
                    Node::Leaf { counts } => {
                        w.write_all(&[1])?;
                        for c in counts {
                            w.write_all(&c.to_le_bytes())?;
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut rd = Reader(&mut r);
        if &rd.bytes::<4>()? != RFC_MAGIC {
            return Err(Error::format("not a forest file (bad magic)"));
        }
        let version = rd.u32()?;
        if version != RFC_VERSION {
            return Err(Error::format(format!("unsupported forest version {version}")));
        }
        let n_trees_cfg = rd.u32()? as usize;
        let n_selected_cfg = rd.u32()? as usize;
        let max_features = rd.u32()? as usize;
        let min_leaf = rd.u32()? as usize;
        let seed = u64::from_le_bytes(rd.bytes::<8>()?);
        let config = ForestConfig {
            n_trees: n_trees_cfg,
            n_selected_features: n_selected_cfg,
            max_features_per_split: (max_features > 0).then_some(max_features),
            min_leaf,
            seed,
        };
        let num_classes = rd.u32()? as usize;
        let feature_depth = rd.u32()? as usize;
        if !(2..=255).contains(&num_classes) || feature_depth == 0 {
            return Err(Error::format("bad class count or feature depth"));
        }
        let n_sel = rd.u32()? as usize;
        let mut selected_features = Vec::with_capacity(n_sel.min(1 << 16));
        for _ in 0..n_sel {
            let f = u16::from_le_bytes(rd.bytes::<2>()?) as usize;
            if f >= feature_depth {
                return Err(Error::format(format!("selected feature {f} beyond depth {feature_depth}")));
            }
            selected_features.push(f);
        }
        let n_seen = rd.u32()? as usize;
        let mut classes_seen = BTreeSet::new();
        for _ in 0..n_seen {
            let [c] = rd.bytes::<1>()?;
            if c as usize >= num_classes {
                return Err(Error::format(format!("seen class {c} beyond class count")));
            }
            classes_seen.insert(c);
        }
        let n_trees = rd.u32()? as usize;
        if n_trees == 0 {
            return Err(Error::format("forest has no trees"));
        }
        let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
        for _ in 0..n_trees {
            let n_nodes = rd.u32()? as usize;
            if n_nodes == 0 {
                return Err(Error::format("tree has no nodes"));
            }
            let mut nodes = Vec::with_capacity(n_nodes.min(1 << 20));
            for id in 0..n_nodes {
                let [tag] = rd.bytes::<1>()?;
                nodes.push(match tag {
                    0 => {
                        let feature = u16::from_le_bytes(rd.bytes::<2>()?);
                        let threshold = f32::from_le_bytes(rd.bytes::<4>()?);
                        let left = rd.u32()?;
                        let right = rd.u32()?;
                        let valid = |c: u32| (c as usize) > id && (c as usize) < n_nodes;
                        if !valid(left) || !valid(right) || !selected_features.contains(&(feature as usize)) {
                            return Err(Error::format("malformed split node"));
                        }
                        Node::Split { feature, threshold, left, right }
                    }
                    1 => {
                        let counts = (0..num_classes).map(|_| rd.u32()).collect::<Result<Vec<_>>>()?;
                        if counts.iter().all(|&c| c == 0) {
                            return Err(Error::format("empty leaf histogram"));
                        }
                        Node::Leaf { counts }
                    }
                    t => return Err(Error::format(format!("unknown node tag {t}"))),
                });
            }
            trees.push(DecisionTree { nodes });
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::format("trailing bytes after the last tree"));
        }
        Ok(TrainedForest { trees, selected_features, classes_seen, num_classes, feature_depth, config })
    }
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::format("truncated forest payload"),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>()?))
    }
}
