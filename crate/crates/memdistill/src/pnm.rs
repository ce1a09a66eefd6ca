//! Binary graymap (P5) and pixmap (P6) image grids.

use std::fs;
use std::path::Path;

use memdistill_core::Tensor;

use crate::error::{Error, Result};

/// An 8-bit image, row-major, `channels` interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn to_pnm(&self) -> Vec<u8> {
        let kind = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{}\n{} {}\n255\n", kind, self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_pnm()).map_err(Error::io(path))
    }
}

/// Rescales values linearly so the minimum maps to 0 and the maximum to
/// 255; a constant tile maps to mid-gray.
pub fn rescale(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    values
        .iter()
        .map(|v| ((v - lo) / (hi - lo) * 255.0).round() as u8)
        .collect()
}

/// Lays `[C, H, W]` tiles out in a near-square grid with a one-pixel black
/// gutter, each tile rescaled to the full 8-bit range on its own.
pub fn tile_grid(tiles: &[Tensor]) -> Result<Raster> {
    let first = tiles.first().ok_or_else(|| Error::format("pnm", "no tiles"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || !(shape[0] == 1 || shape[0] == 3) {
        return Err(Error::format("pnm", format!("tile shape {:?}; need [1|3, H, W]", shape)));
    }
    if tiles.iter().any(|t| t.shape() != shape.as_slice()) {
        return Err(Error::format("pnm", "tiles differ in shape"));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let cols = (tiles.len() as f64).sqrt().ceil() as usize;
    let rows = tiles.len().div_ceil(cols);
    let width = cols * (w + 1) + 1;
    let height = rows * (h + 1) + 1;
    let mut pixels = vec![0u8; width * height * c];
    for (i, t) in tiles.iter().enumerate() {
        let px = rescale(t.data());
        let (r0, c0) = ((i / cols) * (h + 1) + 1, (i % cols) * (w + 1) + 1);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    pixels[((r0 + y) * width + c0 + x) * c + ch] = px[ch * h * w + y * w + x];
                }
            }
        }
    }
    Ok(Raster {
        width,
        height,
        channels: c,
        pixels,
    })
}
