//! Image and annotation files.
//!
//! * RGB images: 8-bit PNG (RGB, RGBA, gray or palette), scaled to `[0, 1]`.
//! * Label maps and scribbles: single-channel 8-bit PNG (indexed or gray)
//!   holding raw class ids, `255` = unlabeled; or a text file with one
//!   `row col class` triple per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::annotation::{labelmap_to_scribbles, scribbles_to_labelmap};
use crate::error::{Error, Result};
use crate::types::{ClassSet, LabelMap, PixelGrid, RgbImage, ScribbleSet, UNLABELED};

fn decode_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::format(format!("{}: {e}", path.display()))
}

fn is_png(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

pub fn load_rgb_png(path: &Path) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(decode_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let grid = PixelGrid::new(info.height as usize, info.width as usize)?;
    let stride = info.line_size;
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(decode_err(path, "palette was not expanded")),
    };
    let mut pixels = Vec::with_capacity(grid.len());
    for r in 0..grid.height() {
        let row = &buf[r * stride..r * stride + grid.width() * channels];
        for px in row.chunks_exact(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            pixels.push(rgb.map(|v| v as f32 / 255.0));
        }
    }
    RgbImage::new(grid, pixels)
}

pub fn save_rgb_png(path: &Path, img: &RgbImage) -> Result<()> {
    let grid = img.grid();
    let data: Vec<u8> =
        img.pixels().iter().flat_map(|px| px.map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)).collect();
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, grid.width() as u32, grid.height() as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer.write_image_data(&data).map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))?;
    Ok(())
}

/// Reads raw 8-bit indices from a palette or grayscale PNG.
pub fn load_label_png(path: &Path) -> Result<LabelMap> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    match (info.color_type, info.bit_depth) {
        (png::ColorType::Indexed | png::ColorType::Grayscale, png::BitDepth::Eight) => {}
        (ct, bd) => {
            return Err(decode_err(path, format!("label maps must be 8-bit single channel, got {ct:?}/{bd:?}")))
        }
    }
    let grid = PixelGrid::new(info.height as usize, info.width as usize)?;
    let mut labels = Vec::with_capacity(grid.len());
    for r in 0..grid.height() {
        labels.extend_from_slice(&buf[r * info.line_size..r * info.line_size + grid.width()]);
    }
    LabelMap::new(grid, labels)
}

/// Writes an 8-bit indexed PNG using the customary segmentation colormap,
/// with index 255 drawn in light gray.
pub fn save_label_png(path: &Path, lm: &LabelMap) -> Result<()> {
    let grid = lm.grid();
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, grid.width() as u32, grid.height() as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(label_palette());
    let mut writer = enc.write_header().map_err(|e| decode_err(path, e))?;
    writer.write_image_data(lm.labels()).map_err(|e| decode_err(path, e))?;
    writer.finish().map_err(|e| decode_err(path, e))?;
    Ok(())
}

/// Bit-interleaved colormap used by indexed segmentation datasets.
fn label_palette() -> Vec<u8> {
    let mut pal = Vec::with_capacity(256 * 3);
    for i in 0u32..256 {
        let (mut r, mut g, mut b) = (0u8, 0u8, 0u8);
        let mut c = i;
        for j in 0..8 {
            r |= ((c & 1) as u8) << (7 - j);
            g |= (((c >> 1) & 1) as u8) << (7 - j);
            b |= (((c >> 2) & 1) as u8) << (7 - j);
            c >>= 3;
        }
        if i == UNLABELED as u32 {
            (r, g, b) = (224, 224, 192);
        }
        pal.extend_from_slice(&[r, g, b]);
    }
    pal
}

/// Parses `row col class` lines; blank lines and `#` comments are skipped.
pub fn read_label_text(path: &Path, grid: PixelGrid) -> Result<LabelMap> {
    let mut lm = LabelMap::filled(grid, UNLABELED);
    let reader = BufReader::new(File::open(path)?);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || decode_err(path, format!("line {}: expected `row col class`", lineno + 1));
        let mut fields = line.split_whitespace();
        let mut next = || fields.next().ok_or_else(bad)?.parse::<usize>().map_err(|_| bad());
        let (row, col, class) = (next()?, next()?, next()?);
        if fields.next().is_some() {
            return Err(bad());
        }
        if row >= grid.height() || col >= grid.width() {
            return Err(Error::ShapeMismatch(format!(
                "{}: line {}: pixel ({row}, {col}) outside {grid}",
                path.display(),
                lineno + 1
            )));
        }
        if class >= UNLABELED as usize {
            return Err(Error::InvalidClass { class: class as u32, num_classes: UNLABELED as usize });
        }
        let slot = &mut lm.labels_mut()[grid.index(row, col)];
        if *slot != UNLABELED && *slot != class as u8 {
            return Err(Error::DuplicateScribble { pixel: grid.index(row, col), first: *slot, second: class as u8 });
        }
        *slot = class as u8;
    }
    Ok(lm)
}

pub fn write_label_text(path: &Path, lm: &LabelMap) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let grid = lm.grid();
    for (i, &l) in lm.labels().iter().enumerate() {
        if l != UNLABELED {
            let (r, c) = grid.coords(i);
            writeln!(w, "{r} {c} {l}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a label map, choosing the format by extension (`.png` or text).
/// The result must lie on `grid` when one is given; text files require it.
pub fn load_label_map(path: &Path, grid: Option<PixelGrid>) -> Result<LabelMap> {
    if is_png(path) {
        let lm = load_label_png(path)?;
        if let Some(g) = grid {
            g.ensure_same(&lm.grid())?;
        }
        Ok(lm)
    } else {
        let grid = grid.ok_or_else(|| Error::param("text label files need a known grid"))?;
        read_label_text(path, grid)
    }
}

pub fn save_label_map(path: &Path, lm: &LabelMap) -> Result<()> {
    if is_png(path) {
        save_label_png(path, lm)
    } else {
        write_label_text(path, lm)
    }
}

pub fn load_scribbles(path: &Path, grid: PixelGrid, classes: &ClassSet) -> Result<ScribbleSet> {
    let lm = load_label_map(path, Some(grid))?;
    labelmap_to_scribbles(&lm, classes)
}

pub fn save_scribbles(path: &Path, wa: &ScribbleSet) -> Result<()> {
    save_label_map(path, &scribbles_to_labelmap(wa))
}
