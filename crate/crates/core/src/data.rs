//! Labeled image sets, the Gaussian toy testbed, and flip/rotation
//! augmentation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::map::{flip_rotate_map, MapSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{fnv1a64_extend, sample_without_replacement, stream, StreamRng};
use crate::tensor::Tensor;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    /// `[N, C, H, W]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub name: String,
    /// Steps applied after loading, in order.
    pub preprocessing: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, name: impl Into<String>) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be NCHW, got {:?}", images.shape())));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {} out of range for {} classes", bad, num_classes)));
        }
        Ok(LabeledDataset {
            images,
            labels,
            num_classes,
            name: name.into(),
            preprocessing: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn image_dim(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let d = self.image_dim();
        &self.images.data()[i * d..(i + 1) * d]
    }

    /// Images at `index` stacked into `[n, C, H, W]`.
    pub fn gather(&self, index: &[usize]) -> Tensor {
        let d = self.image_dim();
        let [c, h, w] = self.image_shape();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new([index.len(), c, h, w], data).expect("gather size")
    }

    pub fn gather_labels(&self, index: &[usize]) -> Vec<usize> {
        index.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn subset(&self, index: &[usize]) -> Self {
        LabeledDataset {
            images: self.gather(index),
            labels: self.gather_labels(index),
            num_classes: self.num_classes,
            name: self.name.clone(),
            preprocessing: self.preprocessing.clone(),
        }
    }

    /// Indices of every example, grouped by class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = alloc::vec![Vec::new(); self.num_classes];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// Random split into `(rest, held_out)` with `round(fraction·N)` examples
    /// held out.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::invalid(format!("split fraction {} not in [0, 1)", fraction)));
        }
        let n = self.len();
        let held = libm::round(fraction * n as f64) as usize;
        let mut rng = stream(seed, "split", 0);
        let perm = sample_without_replacement(n, n, &mut rng);
        let mut held_idx = perm[..held].to_vec();
        let mut rest_idx = perm[held..].to_vec();
        held_idx.sort_unstable();
        rest_idx.sort_unstable();
        Ok((self.subset(&rest_idx), self.subset(&held_idx)))
    }

    /// FNV-1a 64 over the pixel values as little-endian `f32` followed by the
    /// labels as little-endian `u32`.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for &v in self.images.data() {
            h = fnv1a64_extend(h, &(v as f32).to_le_bytes());
        }
        for &l in &self.labels {
            h = fnv1a64_extend(h, &(l as u32).to_le_bytes());
        }
        h
    }
}

/// Smallest near-square plane holding `d` values.
pub fn toy_plane(d: usize) -> [usize; 2] {
    let mut h = libm::sqrt(d as f64) as usize;
    while h * h < d {
        h += 1;
    }
    let w = d.div_ceil(h.max(1));
    [h, w]
}

/// `C` Gaussian classes in `d` dimensions with unit isotropic noise. Class
/// `c` is centred at `separation/√2 · e_c`, so every pair of means is
/// `separation` apart. Samples are interleaved by class and packed into a
/// `1 × h × w` image (zero padded when `h·w > d`).
pub fn toy_gaussian(num_classes: usize, d: usize, n_per_class: usize, separation: f64, seed: u64) -> Result<LabeledDataset> {
    if num_classes < 2 {
        return Err(Error::invalid("toy data needs at least 2 classes"));
    }
    if d < num_classes {
        return Err(Error::invalid(format!("dimension {} cannot hold {} simplex vertices", d, num_classes)));
    }
    let [h, w] = toy_plane(d);
    let n = num_classes * n_per_class;
    let mut rng = stream(seed, "toy", 0);
    let scale = separation / core::f64::consts::SQRT_2;
    let mut data = alloc::vec![0.0; n * h * w];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        labels.push(c);
        let row = &mut data[i * h * w..i * h * w + d];
        for (j, v) in row.iter_mut().enumerate() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = z + if j == c { scale } else { 0.0 };
        }
    }
    let mut ds = LabeledDataset::new(Tensor::new([n, 1, h, w], data)?, labels, num_classes, "toy")?;
    ds.preprocessing.push(format!("toy_gaussian(d={}, sep={}, seed={})", d, separation, seed));
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip_p: f64,
    pub max_rot_deg: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            flip_p: 0.5,
            max_rot_deg: 15.0,
        }
    }
}

/// A frozen per-sample transform: optional horizontal flip, then rotation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transform {
    pub flip: bool,
    pub angle_deg: f64,
}

pub fn sample_transforms(n: usize, policy: &AugmentPolicy, rng: &mut StreamRng) -> Vec<Transform> {
    (0..n)
        .map(|_| {
            let flip = rng.random::<f64>() < policy.flip_p;
            let angle_deg = if policy.max_rot_deg > 0.0 {
                rng.random_range(-policy.max_rot_deg..=policy.max_rot_deg)
            } else {
                0.0
            };
            Transform { flip, angle_deg }
        })
        .collect()
}

/// Per-sample maps for the first `n` transforms of a batch `[n, C, H, W]`.
pub fn transform_maps(transforms: &[Transform], shape: [usize; 3]) -> Arc<MapSet> {
    let [c, h, w] = shape;
    let maps = transforms
        .iter()
        .map(|t| flip_rotate_map(h, w, t.flip, t.angle_deg))
        .collect();
    Arc::new(MapSet::per_sample([h, w], maps, c))
}

/// Applies `transforms[i]` to sample `i`. Only the first `n` transforms are
/// used, so one sampled list can serve two batches of different sizes.
pub fn augment(tape: &mut Tape, batch: Var, transforms: &[Transform]) -> Result<Var> {
    let s = tape.try_value(batch)?.shape().to_vec();
    if s.len() != 4 {
        return Err(Error::shape("augment", format!("expects NCHW, got {:?}", s)));
    }
    if transforms.len() < s[0] {
        return Err(Error::invalid(format!("{} transforms for a batch of {}", transforms.len(), s[0])));
    }
    let maps = transform_maps(&transforms[..s[0]], [s[1], s[2], s[3]]);
    tape.apply_map(batch, maps)
}

pub fn augment_tensor(batch: &Tensor, transforms: &[Transform]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let x = tape.constant(batch.clone());
    let y = augment(&mut tape, x, transforms)?;
    Ok(tape.value(y).clone())
}

pub fn describe(ds: &LabeledDataset) -> String {
    let [c, h, w] = ds.image_shape();
    let mut s = format!("{}: {} images of {}x{}x{}, {} classes", ds.name, ds.len(), c, h, w, ds.num_classes);
    if !ds.preprocessing.is_empty() {
        s.push_str(" [");
        s.push_str(&ds.preprocessing.join(", "));
        s.push(']');
    }
    s.to_string()
}
