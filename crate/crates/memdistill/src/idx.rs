//! IDX containers (the MNIST file format), big-endian throughout.

use std::fs;
use std::path::Path;

use memdistill_core::data::LabeledDataset;
use memdistill_core::Tensor;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format(what, format!("header truncated at byte {}", at)))
}

fn check_magic(bytes: &[u8], expected: u32, what: &'static str) -> Result<()> {
    let found = be_u32(bytes, 0, what)?;
    if found != expected {
        return Err(Error::format(
            what,
            format!("wrong magic: expected 0x{:08x}, found 0x{:08x}", expected, found),
        ));
    }
    Ok(())
}

/// `(count, rows, cols, pixels)` of an image file.
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    let what = "idx images";
    check_magic(bytes, IMAGES_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    let rows = be_u32(bytes, 8, what)? as usize;
    let cols = be_u32(bytes, 12, what)? as usize;
    let need = n
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::format(what, "dimensions overflow"))?;
    let payload = &bytes[16..];
    if payload.len() != need {
        return Err(Error::format(
            what,
            format!("{}x{}x{} needs {} pixel bytes, file has {}", n, rows, cols, need, payload.len()),
        ));
    }
    Ok((n, rows, cols, payload))
}

pub fn parse_labels(bytes: &[u8]) -> Result<&[u8]> {
    let what = "idx labels";
    check_magic(bytes, LABELS_MAGIC, what)?;
    let n = be_u32(bytes, 4, what)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(Error::format(
            what,
            format!("{} labels declared, file has {}", n, payload.len()),
        ));
    }
    Ok(payload)
}

/// Images scaled by 1/255 as `[N, 1, rows, cols]`; the class count is one
/// more than the largest label.
pub fn decode(image_bytes: &[u8], label_bytes: &[u8], name: &str) -> Result<LabeledDataset> {
    let (n, rows, cols, pixels) = parse_images(image_bytes)?;
    let labels = parse_labels(label_bytes)?;
    if labels.len() != n {
        return Err(Error::format(
            "idx",
            format!("{} images but {} labels", n, labels.len()),
        ));
    }
    let images = Tensor::new([n, 1, rows, cols], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Ok(LabeledDataset::new(images, labels, classes, name)?)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let img = fs::read(images_path).map_err(Error::io(images_path))?;
    let lab = fs::read(labels_path).map_err(Error::io(labels_path))?;
    let name = images_path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&img, &lab, &name)
}

/// The IDX bytes of a single-channel dataset with pixels on the 1/255
/// grid. Inverse of [`decode`].
pub fn encode(ds: &LabeledDataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let [c, h, w] = ds.image_shape();
    if c != 1 {
        return Err(Error::format("idx", format!("{} channels; IDX images are single-channel", c)));
    }
    let mut img = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGES_MAGIC, ds.len() as u32, h as u32, w as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    for &v in ds.images.data() {
        let p = (v * 255.0).round();
        if !(0.0..=255.0).contains(&p) {
            return Err(Error::format("idx", format!("pixel {} outside [0, 1]", v)));
        }
        img.push(p as u8);
    }
    let mut lab = Vec::with_capacity(8 + ds.len());
    for v in [LABELS_MAGIC, ds.len() as u32] {
        lab.extend_from_slice(&v.to_be_bytes());
    }
    for &l in &ds.labels {
        let b = u8::try_from(l).map_err(|_| Error::format("idx", format!("label {} exceeds 255", l)))?;
        lab.push(b);
    }
    Ok((img, lab))
}
