//! Externally produced class-probability maps.
//!
//! File layout (little-endian): `"PAM1" | u32 H | u32 W | u32 C | H*W*C f32`,
//! pixels row-major with the class index innermost.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::types::{ClassField, ClassSet, LabelMap, PixelGrid, ProbabilityMap, Provenance, UNLABELED};

const PAM_MAGIC: &[u8; 4] = b"PAM1";

fn truncated(e: std::io::Error) -> Error {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format("truncated probability-map payload"),
        _ => Error::Io(e),
    }
}

/// Reads a probability-map file without grid expectations.
pub fn read_probability_map(mut r: impl Read) -> Result<ProbabilityMap> {
    let mut header = [0u8; 16];
    r.read_exact(&mut header).map_err(truncated)?;
    if &header[..4] != PAM_MAGIC {
        return Err(Error::format("not a probability-map file (bad magic)"));
    }
    let field = |k: usize| u32::from_le_bytes(header[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (h, w, c) = (field(0), field(1), field(2));
    let grid = PixelGrid::new(h, w).map_err(|_| Error::format(format!("bad grid {h}x{w}")))?;
    if !(2..=UNLABELED as usize).contains(&c) {
        return Err(Error::format(format!("bad class count {c}")));
    }
    let n = grid.len().checked_mul(c).ok_or_else(|| Error::format("payload size overflows"))?;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes).map_err(truncated)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::format("trailing bytes after probability payload"));
    }
    let probs = bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    ProbabilityMap::new(grid, c, probs)
}

pub fn write_probability_map(mut w: impl Write, p: &ProbabilityMap) -> Result<()> {
    let grid = p.grid();
    w.write_all(PAM_MAGIC)?;
    for v in [grid.height(), grid.width(), p.num_classes()] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(p.values().len() * 4);
    for &v in p.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_probability_map(path: &Path, p: &ProbabilityMap) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_probability_map(&mut w, p)?;
    w.flush()?;
    Ok(())
}

pub fn load_probability_map(path: &Path) -> Result<ProbabilityMap> {
    read_probability_map(std::io::BufReader::new(std::fs::File::open(path)?))
}

/// Loads a global-annotator probability map and checks it against the image grid and class set.
pub fn load_global_probs(path: &Path, grid: PixelGrid, classes: &ClassSet) -> Result<ProbabilityMap> {
    let p = load_probability_map(path)?;
    grid.ensure_same(&p.grid())?;
    if p.num_classes() != classes.len() {
        return Err(Error::ClassSetMismatch { expected: classes.len(), found: p.num_classes() });
    }
    Ok(p.with_provenance(Provenance::Global))
}

/// Label `c` becomes `1 - eps` on `c` and `eps / (C - 1)` elsewhere; with
/// `eps > 0`, unlabeled pixels become uniform.
pub fn labelmap_to_onehot(lm: &LabelMap, classes: &ClassSet, eps: f64) -> Result<ProbabilityMap> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::param(format!("smoothing must be in [0, 1], got {eps}")));
    }
    let c = classes.len();
    let off = eps / (c - 1) as f64;
    let uniform = 1.0 / c as f64;
    let mut probs = Vec::with_capacity(lm.grid().len() * c);
    for (i, &l) in lm.labels().iter().enumerate() {
        if l == UNLABELED {
            if eps == 0.0 {
                return Err(Error::UnlabeledPixel { pixel: i });
            }
            probs.extend(std::iter::repeat_n(uniform, c));
            continue;
        }
        classes.check(l)?;
        probs.extend((0..c).map(|k| if k == l as usize { 1.0 - eps } else { off }));
    }
    ProbabilityMap::new(lm.grid(), c, probs)
}
