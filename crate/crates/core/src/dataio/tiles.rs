//! Paired tiling, dihedral augmentation and mean-pool resampling.

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

/// Ratio between stain and ion pixel pitch.
pub const SCALE: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct TilePair {
    pub ions: ImageTensor,
    pub stain: ImageTensor,
    /// (row, column) of the ion window.
    pub ion_offset: (usize, usize),
    /// (row, column) of the stain window; always `SCALE ×` the ion offset.
    pub stain_offset: (usize, usize),
}

/// Window starts along one axis: a regular grid with the last window
/// snapped to the far edge.
pub fn tile_starts(len: usize, tile: usize, stride: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + tile <= len).collect();
    let last = len - tile;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Tiles a paired ion/stain image with fractional overlap.
pub fn tile_pairs(
    ions: &ImageTensor,
    stain: &ImageTensor,
    ion_tile: usize,
    overlap_fraction: f64,
) -> Result<Vec<TilePair>> {
    if stain.height() != SCALE * ions.height() || stain.width() != SCALE * ions.width() {
        return Err(Error::invalid(format!(
            "stain {}x{} is not {SCALE}x the ion grid {}x{}",
            stain.height(),
            stain.width(),
            ions.height(),
            ions.width()
        )));
    }
    if !(0.0..1.0).contains(&overlap_fraction) {
        return Err(Error::invalid(format!("overlap {overlap_fraction} outside [0, 1)")));
    }
    if ion_tile == 0 || ion_tile > ions.height() || ion_tile > ions.width() {
        return Err(Error::invalid(format!(
            "tile {ion_tile} does not fit a {}x{} image",
            ions.height(),
            ions.width()
        )));
    }
    let stride = tile_stride(ion_tile, overlap_fraction);
    let mut out = Vec::new();
    for &y in &tile_starts(ions.height(), ion_tile, stride) {
        for &x in &tile_starts(ions.width(), ion_tile, stride) {
            let st = SCALE * ion_tile;
            out.push(TilePair {
                ions: ions.crop(y, x, ion_tile, ion_tile)?,
                stain: stain.crop(SCALE * y, SCALE * x, st, st)?,
                ion_offset: (y, x),
                stain_offset: (SCALE * y, SCALE * x),
            });
        }
    }
    Ok(out)
}

/// `floor(tile · (1 − overlap))`, at least 1.
pub fn tile_stride(tile: usize, overlap_fraction: f64) -> usize {
    ((tile as f64 * (1.0 - overlap_fraction)).floor() as usize).max(1)
}

/// Element of the dihedral group of the square: `index % 4` quarter turns
/// counter-clockwise, preceded by a horizontal flip when `index >= 4`.
pub fn dihedral(img: &ImageTensor, index: usize) -> Result<ImageTensor> {
    if index > 7 {
        return Err(Error::invalid(format!("transform index {index} outside 0..=7")));
    }
    let turns = index % 4;
    if turns % 2 == 1 && img.height() != img.width() {
        return Err(Error::invalid("odd rotations need a square tile"));
    }
    let mut out = if index >= 4 { flip_horizontal(img) } else { img.clone() };
    for _ in 0..turns {
        out = quarter_turn(&out);
    }
    Ok(out)
}

fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    ImageTensor::from_fn(img.channels(), img.height(), w, |c, y, x| img.get(c, y, w - 1 - x))
        .with_range(img.range)
}

/// Counter-clockwise by 90°: the top-right corner becomes the top-left.
fn quarter_turn(img: &ImageTensor) -> ImageTensor {
    let w = img.width();
    ImageTensor::from_fn(img.channels(), w, img.height(), |c, y, x| img.get(c, x, w - 1 - y))
        .with_range(img.range)
}

/// Applies the same dihedral transform to both members of a pair.
pub fn augment(pair: &TilePair, index: usize) -> Result<TilePair> {
    Ok(TilePair {
        ions: dihedral(&pair.ions, index)?,
        stain: dihedral(&pair.stain, index)?,
        ion_offset: pair.ion_offset,
        stain_offset: pair.stain_offset,
    })
}

/// Non-overlapping `factor × factor` block means.
pub fn meanpool_downsample(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 || img.height() % factor != 0 || img.width() % factor != 0 {
        return Err(Error::invalid(format!(
            "{}x{} not divisible by factor {factor}",
            img.height(),
            img.width()
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (oh, ow) = (img.height() / factor, img.width() / factor);
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = ImageTensor::from_fn(img.channels(), oh, ow, |c, y, x| {
        let mut s = 0f64;
        for dy in 0..factor {
            for dx in 0..factor {
                s += img.get(c, y * factor + dy, x * factor + dx) as f64;
            }
        }
        (s * inv) as f32
    });
    out.range = img.range;
    Ok(out)
}
