//! `synth`: writes a synthetic corpus (images, ground truth, scribbles,
//! global probability maps, manifest and a starter config) to disk.

use std::path::{Path, PathBuf};

use anyhow::Context;
use pfa_core::io::{save_label_png, save_rgb_png, save_scribbles};
use pfa_core::synth::{drop_class, inject_label_swaps, synth_image, SynthConfig};
use pfa_core::{save_probability_map, ClassSet};

use crate::config::image_seed;
use crate::manifest::{Manifest, Record};

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub images: usize,
    pub seed: u64,
    pub synth: SynthConfig,
    /// The first this-many images lose every scribble of one ground-truth class.
    pub deficient: usize,
    /// Fraction of scribble pixels relabeled to a wrong class.
    pub swap_rate: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec { images: 20, seed: 0, synth: SynthConfig::default(), deficient: 0, swap_rate: 0.0 }
    }
}

pub fn image_id(k: usize) -> String {
    format!("img{k:04}")
}

/// Returns the manifest path. Layout: `images/`, `gt/`, `scribbles/`,
/// `global/`, `manifest.tsv`, `config.toml`.
pub fn write_corpus(out_dir: &Path, spec: &CorpusSpec) -> anyhow::Result<PathBuf> {
    let classes = ClassSet::new(spec.synth.num_classes)?;
    for sub in ["images", "gt", "scribbles", "global"] {
        let dir = out_dir.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut records = Vec::with_capacity(spec.images);
    for k in 0..spec.images {
        let id = image_id(k);
        let seed = image_seed(spec.seed, &id);
        let s = synth_image(&spec.synth, seed)?;
        let mut scribbles = s.scribbles.clone();
        if k < spec.deficient {
            // Drop a class the ground truth contains so curation must reject the image.
            // This precedes the swaps, which would otherwise hide some of its pixels under other labels.
            let class = *s.scribbles.annotated_classes().iter().next().context("image without scribbles")?;
            scribbles = drop_class(&scribbles, &classes, class)?;
        }
        if spec.swap_rate > 0.0 {
            scribbles = inject_label_swaps(&scribbles, &classes, spec.swap_rate, seed ^ 0x5eed)?;
        }
        let rec = Record {
            id: id.clone(),
            image: out_dir.join("images").join(format!("{id}.png")),
            scribble: out_dir.join("scribbles").join(format!("{id}.txt")),
            gt: Some(out_dir.join("gt").join(format!("{id}.png"))),
            global: Some(out_dir.join("global").join(format!("{id}.pam"))),
        };
        save_rgb_png(&rec.image, &s.image)?;
        save_scribbles(&rec.scribble, &scribbles)?;
        save_label_png(rec.gt.as_deref().unwrap(), &s.gt)?;
        save_probability_map(rec.global.as_deref().unwrap(), &s.global)?;
        records.push(rec);
    }
    let manifest_path = out_dir.join("manifest.tsv");
    Manifest { records }.save(&manifest_path)?;
    let config = format!(
        "[corpus]\nmanifest = \"manifest.tsv\"\nnum_classes = {}\n\n[fusion]\nsource = \"combined\"\n\n[regularizer]\nkind = \"potts\"\n\n[run]\noutput_dir = \"out\"\nseed = {}\n",
        spec.synth.num_classes, spec.seed
    );
    std::fs::write(out_dir.join("config.toml"), config)?;
    Ok(manifest_path)
}
