//! Scribble handling: conversion to label maps and the curated-annotation procedure.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::types::{ClassSet, LabelMap, ScribbleSet, UNLABELED};

/// Outcome of curating one image's scribbles against its ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Curation {
    Accepted(ScribbleSet),
    /// The relabeled scribbles miss some ground-truth classes.
    Rejected {
        curated: ScribbleSet,
        missing: BTreeSet<u8>,
    },
}

impl Curation {
    pub fn is_accepted(&self) -> bool {
        matches!(self, Curation::Accepted(_))
    }

    pub fn accepted(self) -> Option<ScribbleSet> {
        match self {
            Curation::Accepted(s) => Some(s),
            Curation::Rejected { .. } => None,
        }
    }
}

/// Keeps the scribble positions, replaces each class by the ground truth at
/// that pixel, and rejects the image unless the relabeled scribbles cover
/// every class present in the ground truth.
///
/// Ground-truth pixels marked [`UNLABELED`] (void borders) do not count
/// toward the required classes, but a scribble lying on one is an error since
/// it cannot be relabeled.
pub fn curate_scribbles(wa: &ScribbleSet, ground_truth: &LabelMap) -> Result<Curation> {
    wa.grid().ensure_same(&ground_truth.grid())?;
    let classes = ClassSet::new(wa.num_classes())?;
    ground_truth.check_classes(&classes)?;

    let mut entries = Vec::with_capacity(wa.len());
    for &(pixel, _) in wa.entries() {
        let truth = ground_truth.get(pixel);
        if truth == UNLABELED {
            return Err(Error::UnlabeledPixel { pixel });
        }
        entries.push((pixel, truth));
    }
    let curated = ScribbleSet::new(wa.grid(), &classes, entries)?;

    let missing: BTreeSet<u8> =
        ground_truth.classes_present().difference(curated.annotated_classes()).copied().collect();
    if missing.is_empty() {
        Ok(Curation::Accepted(curated))
    } else {
        Ok(Curation::Rejected { curated, missing })
    }
}

/// Dense label map holding the scribble classes and [`UNLABELED`] elsewhere.
pub fn scribbles_to_labelmap(wa: &ScribbleSet) -> LabelMap {
    let mut lm = LabelMap::filled(wa.grid(), UNLABELED);
    let labels = lm.labels_mut();
    for &(pixel, class) in wa.entries() {
        labels[pixel] = class;
    }
    lm
}

/// Collects every labeled pixel of `lm` as a scribble.
pub fn labelmap_to_scribbles(lm: &LabelMap, classes: &ClassSet) -> Result<ScribbleSet> {
    let entries = lm.labels().iter().enumerate().filter(|(_, &l)| l != UNLABELED).map(|(i, &l)| (i, l)).collect();
    ScribbleSet::new(lm.grid(), classes, entries)
}
