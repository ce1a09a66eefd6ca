//! Shared bases, addressing matrices and recall.
//!
//! A query `y` (length `d_y`) and addressing matrix `A_i` (`d_y × K`) give a
//! coefficient row `yᵀA_i`; multiplying it into the bases (`K × d_b`) and
//! upsampling gives one synthetic image. Every matrix of the set produces
//! one image per query.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::rng::{kaiming_uniform, StreamRng};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

/// How the addressing matrices are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parameterization {
    /// Learned, counted against the budget.
    Addressed,
    /// Fixed 0/1 pattern that hands out each basis to exactly one recalled
    /// image, so the bases are plain per-class images. The pattern is
    /// implied by the class count and is not stored in the budget.
    Classical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBank {
    /// `[K, d_b]`.
    pub bases: Tensor,
    pub base_shape: [usize; 3],
    pub downsample: usize,
    pub target_shape: [usize; 3],
}

fn base_shape_for(target: [usize; 3], s: usize) -> Result<[usize; 3]> {
    if s != 1 && s != 2 {
        return Err(Error::invalid(format!("downsample factor must be 1 or 2, got {}", s)));
    }
    let [c, h, w] = target;
    if c == 0 || h == 0 || w == 0 {
        return Err(Error::invalid(format!("image shape {:?} has a zero dimension", target)));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::invalid(format!("image {}x{} is not divisible by {}", h, w, s)));
    }
    Ok([c, h / s, w / s])
}

impl MemoryBank {
    pub fn new(bases: Tensor, target_shape: [usize; 3], downsample: usize) -> Result<Self> {
        let base_shape = base_shape_for(target_shape, downsample)?;
        let d_b: usize = base_shape.iter().product();
        if bases.rank() != 2 || bases.shape()[1] != d_b || bases.shape()[0] == 0 {
            return Err(Error::shape(
                "memory_bank",
                format!("bases {:?} do not match [K >= 1, {}]", bases.shape(), d_b),
            ));
        }
        if !bases.is_finite() {
            return Err(Error::NonFinite { op: "memory_bank" });
        }
        Ok(MemoryBank {
            bases,
            base_shape,
            downsample,
            target_shape,
        })
    }

    /// Kaiming-uniform bases with fan-in `d_b`.
    pub fn random(k: usize, target_shape: [usize; 3], downsample: usize, rng: &mut StreamRng) -> Result<Self> {
        let base_shape = base_shape_for(target_shape, downsample)?;
        let d_b: usize = base_shape.iter().product();
        Self::new(kaiming_uniform(&[k, d_b], d_b, rng), target_shape, downsample)
    }

    pub fn num_bases(&self) -> usize {
        self.bases.shape()[0]
    }

    pub fn base_dim(&self) -> usize {
        self.bases.shape()[1]
    }

    pub fn image_dim(&self) -> usize {
        self.target_shape.iter().product()
    }

    /// Bases upsampled to the target resolution, `[K, d]`.
    pub fn expanded(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.constant(self.bases.clone());
        let e = expand_bases(&mut tape, b, self.base_shape, self.downsample)?;
        Ok(tape.value(e).clone())
    }
}

/// `[K, d_b]` bases to `[K, d]` target-resolution rows.
pub fn expand_bases(tape: &mut Tape, bases: Var, base_shape: [usize; 3], downsample: usize) -> Result<Var> {
    let k = tape.try_value(bases)?.shape()[0];
    if downsample == 1 {
        return Ok(bases);
    }
    let [c, h, w] = base_shape;
    let mut x = tape.reshape(bases, &[k, c, h, w])?;
    let mut s = downsample;
    while s > 1 {
        x = tape.bilinear_upsample2x(x)?;
        s /= 2;
    }
    tape.flatten(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddressingSet {
    /// `[r, d_y, K]`.
    pub matrices: Tensor,
}

impl AddressingSet {
    pub fn new(matrices: Tensor) -> Result<Self> {
        let s = matrices.shape();
        if s.len() != 3 || s.iter().any(|&v| v == 0) {
            return Err(Error::shape(
                "addressing_set",
                format!("expected [r >= 1, d_y >= 1, K >= 1], got {:?}", s),
            ));
        }
        if !matrices.is_finite() {
            return Err(Error::NonFinite { op: "addressing_set" });
        }
        Ok(AddressingSet { matrices })
    }

    /// Kaiming-uniform entries with fan-in `K`.
    pub fn random(r: usize, d_y: usize, k: usize, rng: &mut StreamRng) -> Result<Self> {
        Self::new(kaiming_uniform(&[r, d_y, k], k, rng))
    }

    pub fn count(&self) -> usize {
        self.matrices.shape()[0]
    }

    pub fn query_dim(&self) -> usize {
        self.matrices.shape()[1]
    }

    pub fn num_bases(&self) -> usize {
        self.matrices.shape()[2]
    }

    /// `A_i` as a `[d_y, K]` tensor, zero-based.
    pub fn matrix(&self, i: usize) -> Tensor {
        let (d_y, k) = (self.query_dim(), self.num_bases());
        let block = &self.matrices.data()[i * d_y * k..(i + 1) * d_y * k];
        Tensor::new([d_y, k], block.to_vec()).expect("block size")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub vector: Vec<f64>,
    pub label: Option<usize>,
}

impl Query {
    pub fn one_hot(class: usize, d_y: usize) -> Self {
        let mut vector = vec![0.0; d_y];
        vector[class] = 1.0;
        Query {
            vector,
            label: Some(class),
        }
    }

    pub fn new(vector: Vec<f64>, label: Option<usize>) -> Self {
        Query { vector, label }
    }
}

pub fn one_hot_queries(classes: &[usize], d_y: usize) -> Vec<Query> {
    classes.iter().map(|&c| Query::one_hot(c, d_y)).collect()
}

/// Stacks queries into `[n, d_y]`.
pub fn query_matrix(queries: &[Query]) -> Result<Tensor> {
    let first = queries.first().ok_or(Error::Empty("query list"))?;
    let d_y = first.vector.len();
    let mut data = Vec::with_capacity(queries.len() * d_y);
    for q in queries {
        if q.vector.len() != d_y {
            return Err(Error::shape(
                "query_matrix",
                format!("queries of length {} and {}", d_y, q.vector.len()),
            ));
        }
        data.extend_from_slice(&q.vector);
    }
    let t = Tensor::new([queries.len(), d_y], data)?;
    if !t.is_finite() {
        return Err(Error::NonFinite { op: "query_matrix" });
    }
    Ok(t)
}

/// Coefficient rows `yᵀA_i` for queries `[n, d_y]` and addressing
/// `[r, d_y, K]`, as `[n·r, K]` in query-major order.
pub fn recall_coefficients(tape: &mut Tape, addressing: Var, queries: Var) -> Result<Var> {
    let s = tape.try_value(addressing)?.shape().to_vec();
    let q = tape.try_value(queries)?.shape().to_vec();
    if s.len() != 3 || q.len() != 2 || q[1] != s[1] {
        return Err(Error::shape(
            "recall",
            format!("queries {:?} against addressing {:?}", q, s),
        ));
    }
    let (r, d_y, k) = (s[0], s[1], s[2]);
    let a = tape.swap_leading(addressing)?;
    let a = tape.reshape(a, &[d_y, r * k])?;
    let c = tape.matmul(queries, a)?;
    tape.reshape(c, &[q[0] * r, k])
}

/// Recalled images `[n·r, C, H, W]` for `[n, d_y]` queries. `bases` is
/// `[K, d_b]` at the stored resolution.
pub fn recall_on_tape(
    tape: &mut Tape,
    bases: Var,
    addressing: Var,
    queries: Var,
    bank: &MemoryBank,
) -> Result<Var> {
    let kb = tape.try_value(bases)?.shape()[0];
    let ka = tape.try_value(addressing)?.shape().get(2).copied().unwrap_or(0);
    if kb != ka {
        return Err(Error::shape("recall", format!("{} bases but addressing over {}", kb, ka)));
    }
    let coeffs = recall_coefficients(tape, addressing, queries)?;
    // upsampling is linear, so combining before or after it is the same map
    let expanded = expand_bases(tape, bases, bank.base_shape, bank.downsample)?;
    let flat = tape.matmul(coeffs, expanded)?;
    let n = tape.shape(flat)[0];
    let [c, h, w] = bank.target_shape;
    tape.reshape(flat, &[n, c, h, w])
}

/// The `r` images recalled by one query, each `[C, H, W]`.
pub fn recall(bank: &MemoryBank, addressing: &AddressingSet, query: &Query) -> Result<Vec<Tensor>> {
    if query.vector.len() != addressing.query_dim() {
        return Err(Error::shape(
            "recall",
            format!("query of length {} for d_y = {}", query.vector.len(), addressing.query_dim()),
        ));
    }
    let ds = build_dataset(bank, addressing, core::slice::from_ref(query))?;
    Ok((0..ds.len()).map(|i| ds.image(i)).collect())
}

/// Recalled examples in query-major order, each labelled by its query.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    /// `[n, C, H, W]`.
    pub images: Tensor,
    /// `[n, d_y]`.
    pub queries: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl SyntheticDataset {
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

    pub fn image(&self, i: usize) -> Tensor {
        let [c, h, w] = self.image_shape();
        let d = c * h * w;
        Tensor::new([c, h, w], self.images.data()[i * d..(i + 1) * d].to_vec()).expect("image size")
    }

    pub fn hard_labels(&self) -> Result<Vec<usize>> {
        self.labels
            .iter()
            .map(|l| l.ok_or_else(|| Error::invalid("recalled example has no hard label")))
            .collect()
    }
}

pub fn build_dataset(bank: &MemoryBank, addressing: &AddressingSet, queries: &[Query]) -> Result<SyntheticDataset> {
    let qm = query_matrix(queries)?;
    if qm.shape()[1] != addressing.query_dim() {
        return Err(Error::shape(
            "build_dataset",
            format!("queries of length {} for d_y = {}", qm.shape()[1], addressing.query_dim()),
        ));
    }
    let mut tape = Tape::new();
    let b = tape.constant(bank.bases.clone());
    let a = tape.constant(addressing.matrices.clone());
    let q = tape.constant(qm.clone());
    let images = recall_on_tape(&mut tape, b, a, q, bank)?;
    let r = addressing.count();
    let mut qrows = Vec::with_capacity(queries.len() * r * qm.shape()[1]);
    let mut labels = Vec::with_capacity(queries.len() * r);
    for query in queries {
        for _ in 0..r {
            qrows.extend_from_slice(&query.vector);
            labels.push(query.label);
        }
    }
    Ok(SyntheticDataset {
        images: tape.value(images).clone(),
        queries: Tensor::new([labels.len(), qm.shape()[1]], qrows)?,
        labels,
    })
}

/// Float accounting for one memory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetPlan {
    pub r: usize,
    pub num_bases: usize,
    pub query_dim: usize,
    pub downsample: usize,
    pub base_floats: u64,
    pub addressing_floats: u64,
    pub total_floats: u64,
    pub budget_floats: u64,
}

/// Largest `r` with `K·d_b + r·d_y·K ≤ budget`.
pub fn plan_budget_floats(budget: u64, image_shape: [usize; 3], d_y: usize, k: usize, s: usize) -> Result<BudgetPlan> {
    let base_shape = base_shape_for(image_shape, s)?;
    if k == 0 || d_y == 0 {
        return Err(Error::invalid("K and d_y must be positive"));
    }
    let d_b = base_shape.iter().product::<usize>() as u64;
    let bases = k as u64 * d_b;
    let per_matrix = (d_y * k) as u64;
    let r = if bases > budget { 0 } else { (budget - bases) / per_matrix };
    if r < 1 {
        return Err(Error::Budget {
            budget,
            bases,
            per_matrix,
        });
    }
    let addressing = r * per_matrix;
    Ok(BudgetPlan {
        r: r as usize,
        num_bases: k,
        query_dim: d_y,
        downsample: s,
        base_floats: bases,
        addressing_floats: addressing,
        total_floats: bases + addressing,
        budget_floats: budget,
    })
}

/// Budget of `n_ipc` images per class: `N·C·d` floats.
pub fn plan_budget(
    n_ipc: usize,
    num_classes: usize,
    image_shape: [usize; 3],
    d_y: usize,
    k: usize,
    s: usize,
) -> Result<BudgetPlan> {
    let d: usize = image_shape.iter().product();
    plan_budget_floats((n_ipc * num_classes * d) as u64, image_shape, d_y, k, s)
}

/// Budget plan for the classical parameterization: as many images per class
/// (at the stored resolution) as fit, with the fixed addressing uncounted.
pub fn plan_classical(budget: u64, num_classes: usize, image_shape: [usize; 3], s: usize) -> Result<BudgetPlan> {
    let base_shape = base_shape_for(image_shape, s)?;
    if num_classes == 0 {
        return Err(Error::invalid("classical plan needs at least one class"));
    }
    let d_b = base_shape.iter().product::<usize>() as u64;
    let per_class = budget / (num_classes as u64 * d_b);
    if per_class < 1 {
        return Err(Error::Budget {
            budget,
            bases: num_classes as u64 * d_b,
            per_matrix: 0,
        });
    }
    let k = num_classes * per_class as usize;
    Ok(BudgetPlan {
        r: per_class as usize,
        num_bases: k,
        query_dim: num_classes,
        downsample: s,
        base_floats: k as u64 * d_b,
        addressing_floats: 0,
        total_floats: k as u64 * d_b,
        budget_floats: budget,
    })
}

/// The fixed pattern `A_i[m, m·per + i] = 1` (zero-based `i`).
pub fn classical_addressing(num_classes: usize, per_class: usize) -> Result<AddressingSet> {
    if num_classes == 0 || per_class == 0 {
        return Err(Error::Empty("classical addressing"));
    }
    let k = num_classes * per_class;
    let mut m = Tensor::zeros([per_class, num_classes, k]);
    let data = m.data_mut();
    for i in 0..per_class {
        for c in 0..num_classes {
            data[(i * num_classes + c) * k + c * per_class + i] = 1.0;
        }
    }
    AddressingSet::new(m)
}

/// Stores per-class images as bases (class-major) with the classical
/// pattern, so one-hot recall returns the images unchanged.
pub fn classical_embed(per_class_images: &[Vec<Tensor>]) -> Result<(MemoryBank, AddressingSet)> {
    let first = per_class_images
        .first()
        .and_then(|v| v.first())
        .ok_or(Error::Empty("classical_embed images"))?;
    let per_class = per_class_images[0].len();
    let shape = first.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::shape("classical_embed", format!("images must be CxHxW, got {:?}", shape)));
    }
    let mut data = Vec::new();
    for (c, imgs) in per_class_images.iter().enumerate() {
        if imgs.len() != per_class {
            return Err(Error::invalid(format!(
                "class {} has {} images, class 0 has {}",
                c,
                imgs.len(),
                per_class
            )));
        }
        for img in imgs {
            if img.shape() != shape.as_slice() {
                return Err(Error::shape("classical_embed", format!("{:?} vs {:?}", img.shape(), shape)));
            }
            data.extend_from_slice(img.data());
        }
    }
    let k = per_class * per_class_images.len();
    let d = data.len() / k;
    let bank = MemoryBank::new(Tensor::new([k, d], data)?, [shape[0], shape[1], shape[2]], 1)?;
    Ok((bank, classical_addressing(per_class_images.len(), per_class)?))
}

/// Cosine similarities of the average coefficient vectors
/// `v̄ = (1/r)·Σ_i yᵀA_i`, one row and column per query.
pub fn coefficient_similarity(addressing: &AddressingSet, queries: &[Query]) -> Result<Tensor> {
    let q = query_matrix(queries)?;
    let (r, d_y, k) = (addressing.count(), addressing.query_dim(), addressing.num_bases());
    if q.shape()[1] != d_y {
        return Err(Error::shape(
            "coefficient_similarity",
            format!("queries of length {} for d_y = {}", q.shape()[1], d_y),
        ));
    }
    let a = addressing.matrices.data();
    let n = queries.len();
    let mut mean = vec![vec![0.0; k]; n];
    for (qi, v) in mean.iter_mut().enumerate() {
        let y = &q.data()[qi * d_y..(qi + 1) * d_y];
        for i in 0..r {
            for (j, &yj) in y.iter().enumerate() {
                if yj == 0.0 {
                    continue;
                }
                let row = &a[(i * d_y + j) * k..(i * d_y + j + 1) * k];
                for (acc, &x) in v.iter_mut().zip(row) {
                    *acc += yj * x;
                }
            }
        }
        for x in v.iter_mut() {
            *x /= r as f64;
        }
    }
    let norms: Vec<f64> = mean.iter().map(|v| libm::sqrt(v.iter().map(|x| x * x).sum())).collect();
    for (c, &nrm) in norms.iter().enumerate() {
        if !(nrm > 0.0) {
            return Err(Error::ZeroCoefficients {
                class: queries[c].label.unwrap_or(c),
            });
        }
    }
    let mut out = Tensor::zeros([n, n]);
    let s = out.data_mut();
    for a_ in 0..n {
        s[a_ * n + a_] = 1.0;
        for b in a_ + 1..n {
            let dot: f64 = mean[a_].iter().zip(&mean[b]).map(|(x, y)| x * y).sum();
            let v = dot / (norms[a_] * norms[b]);
            s[a_ * n + b] = v;
            s[b * n + a_] = v;
        }
    }
    Ok(out)
}

/// A memory together with enough context to use and audit it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistilledArtifact {
    pub version: u32,
    pub bank: MemoryBank,
    pub addressing: AddressingSet,
    pub parameterization: Parameterization,
    pub num_classes: usize,
    pub dataset: String,
    pub fingerprint: u64,
    pub budget: BudgetPlan,
    pub config: Option<DistillConfig>,
}

impl DistilledArtifact {
    pub fn queries(&self) -> Vec<Query> {
        (0..self.num_classes)
            .map(|c| Query::one_hot(c, self.addressing.query_dim()))
            .collect()
    }

    /// Recalled data for every class, with one-hot queries.
    pub fn synthetic(&self) -> Result<SyntheticDataset> {
        build_dataset(&self.bank, &self.addressing, &self.queries())
    }

    pub fn recall_class(&self, class: usize) -> Result<Vec<Tensor>> {
        if class >= self.num_classes {
            return Err(Error::invalid(format!("class {} of {}", class, self.num_classes)));
        }
        recall(&self.bank, &self.addressing, &Query::one_hot(class, self.addressing.query_dim()))
    }

    /// Floats that count against the budget.
    pub fn stored_floats(&self) -> u64 {
        let bases = self.bank.bases.len() as u64;
        match self.parameterization {
            Parameterization::Addressed => bases + self.addressing.matrices.len() as u64,
            Parameterization::Classical => bases,
        }
    }

    /// Rounds every stored value to `f32`, the on-disk precision.
    pub fn quantize_f32(&mut self) {
        for v in self.bank.bases.data_mut() {
            *v = *v as f32 as f64;
        }
        for v in self.addressing.matrices.data_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.addressing.num_bases() != self.bank.num_bases() {
            return Err(Error::shape(
                "artifact",
                format!(
                    "{} bases but addressing over {}",
                    self.bank.num_bases(),
                    self.addressing.num_bases()
                ),
            ));
        }
        if self.num_classes < 1 || self.num_classes > self.addressing.query_dim() {
            return Err(Error::invalid(format!(
                "{} classes for query dim {}",
                self.num_classes,
                self.addressing.query_dim()
            )));
        }
        if self.stored_floats() > self.budget.budget_floats {
            return Err(Error::Budget {
                budget: self.budget.budget_floats,
                bases: self.bank.bases.len() as u64,
                per_matrix: (self.addressing.query_dim() * self.addressing.num_bases()) as u64,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_oracle, max_relative_error};
    use crate::rng::stream;
    use proptest::prelude::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, "memory-test", 0);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn budget_examples() {
        let p = plan_budget(1, 10, [1, 28, 28], 10, 16, 2).unwrap();
        assert_eq!((p.budget_floats, p.base_floats, p.r), (7840, 3136, 29));
        assert!(matches!(plan_budget(1, 10, [1, 28, 28], 10, 10, 1), Err(Error::Budget { .. })));
        let p = plan_budget(10, 10, [3, 32, 32], 10, 43, 1).unwrap();
        assert_eq!(p.r, 407);
        assert!(plan_budget(1, 10, [1, 28, 28], 10, 16, 3).is_err());
    }

    proptest! {
        #[test]
        fn budget_is_tight(n in 1usize..12, c in 2usize..12, ch in 1usize..4, h in 1usize..9,
                           w in 1usize..9, d_y in 1usize..12, k in 1usize..40, s in 1usize..3) {
            let shape = [ch, h * s, w * s];
            let d = (ch * h * w * s * s) as u64;
            let budget = n as u64 * c as u64 * d;
            match plan_budget(n, c, shape, d_y, k, s) {
                Ok(p) => {
                    let db = d / (s * s) as u64;
                    let used = k as u64 * db + (p.r * d_y * k) as u64;
                    prop_assert!(used <= budget);
                    prop_assert!(used + (d_y * k) as u64 > budget);
                    prop_assert_eq!(used, p.total_floats);
                }
                Err(Error::Budget { .. }) => {
                    let db = d / (s * s) as u64;
                    prop_assert!(k as u64 * db + (d_y * k) as u64 > budget);
                }
                Err(e) => prop_assert!(false, "{}", e),
            }
        }

        #[test]
        fn recall_is_linear(seed in 0u64..1000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let mut rng = stream(seed, "lin", 0);
            let bank = MemoryBank::random(3, [1, 4, 4], 2, &mut rng).unwrap();
            let addr = AddressingSet::random(2, 3, 3, &mut rng).unwrap();
            let y1: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y2: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = y1.iter().zip(&y2).map(|(a, b)| alpha * a + beta * b).collect();
            let r1 = recall(&bank, &addr, &Query::new(y1, None)).unwrap();
            let r2 = recall(&bank, &addr, &Query::new(y2, None)).unwrap();
            let rm = recall(&bank, &addr, &Query::new(mix, None)).unwrap();
            for i in 0..2 {
                for ((m, a), b) in rm[i].data().iter().zip(r1[i].data()).zip(r2[i].data()) {
                    prop_assert!((m - (alpha * a + beta * b)).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn recall_matches_double_product_oracle() {
        let bases = rand_tensor(&[2, 3], 1);
        let addr = rand_tensor(&[2, 2, 2], 2);
        let bank = MemoryBank::new(bases.clone(), [1, 1, 3], 1).unwrap();
        let set = AddressingSet::new(addr.clone()).unwrap();
        let y = [0.3, -1.2];
        let out = recall(&bank, &set, &Query::new(y.to_vec(), None)).unwrap();
        for i in 0..2 {
            for p in 0..3 {
                let mut v = 0.0;
                for k in 0..2 {
                    let mut coeff = 0.0;
                    for j in 0..2 {
                        coeff += y[j] * addr.data()[(i * 2 + j) * 2 + k];
                    }
                    v += coeff * bases.data()[k * 3 + p];
                }
                assert!((out[i].data()[p] - v).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_query_gives_zero_images() {
        let mut rng = stream(3, "z", 0);
        let bank = MemoryBank::random(4, [1, 4, 4], 2, &mut rng).unwrap();
        let addr = AddressingSet::random(3, 5, 4, &mut rng).unwrap();
        let out = recall(&bank, &addr, &Query::new(vec![0.0; 5], None)).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|t| t.shape() == [1, 4, 4] && t.data().iter().all(|&v| v == 0.0)));
        assert!(recall(&bank, &addr, &Query::new(vec![0.0; 4], None)).is_err());
    }

    #[test]
    fn identity_addressing_returns_basis() {
        let bases = rand_tensor(&[10, 9], 4);
        let bank = MemoryBank::new(bases.clone(), [1, 3, 3], 1).unwrap();
        let addr = classical_addressing(10, 1).unwrap();
        for m in 0..10 {
            let out = recall(&bank, &addr, &Query::one_hot(m, 10)).unwrap();
            assert_eq!(out[0].data(), bases.row(m).data());
        }
    }

    #[test]
    fn classical_pattern_example() {
        let a = classical_addressing(2, 2).unwrap();
        let a1 = a.matrix(0);
        let ones: Vec<usize> = (0..a1.len()).filter(|&i| a1.data()[i] == 1.0).collect();
        // (0,0) and (1,2) in a 2x4 matrix
        assert_eq!(ones, vec![0, 6]);
        for v in a.matrices.data() {
            assert!(*v == 0.0 || *v == 1.0);
        }
        for row in a.matrices.data().chunks(4) {
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
    }

    #[test]
    fn classical_round_trip_is_bit_exact() {
        let classes: Vec<Vec<Tensor>> = (0..2)
            .map(|c| (0..2).map(|i| rand_tensor(&[1, 2, 3], 10 * c + i)).collect())
            .collect();
        let (bank, addr) = classical_embed(&classes).unwrap();
        assert_eq!(bank.num_bases(), 4);
        let out = recall(&bank, &addr, &Query::one_hot(1, 2)).unwrap();
        assert_eq!(out, classes[1]);
        let ds = build_dataset(&bank, &addr, &one_hot_queries(&[0, 1], 2)).unwrap();
        for c in 0..2 {
            for i in 0..2 {
                assert_eq!(ds.image(c * 2 + i), classes[c][i]);
            }
        }
        let ragged = vec![classes[0].clone(), vec![classes[1][0].clone()]];
        assert!(classical_embed(&ragged).is_err());
    }

    #[test]
    fn build_dataset_order_and_duplicates() {
        let mut rng = stream(5, "b", 0);
        let bank = MemoryBank::random(3, [1, 2, 2], 1, &mut rng).unwrap();
        let addr = AddressingSet::random(4, 3, 3, &mut rng).unwrap();
        let queries = one_hot_queries(&[2, 0, 2], 3);
        let ds = build_dataset(&bank, &addr, &queries).unwrap();
        assert_eq!(ds.len(), 12);
        assert_eq!(ds.labels[..4], [Some(2); 4]);
        assert_eq!(ds.labels[4..8], [Some(0); 4]);
        for i in 0..4 {
            assert_eq!(ds.image(i), ds.image(8 + i));
            assert_eq!(ds.image(i), recall(&bank, &addr, &queries[0]).unwrap()[i]);
        }
        assert!(matches!(build_dataset(&bank, &addr, &[]), Err(Error::Empty(_))));
    }

    #[test]
    fn recall_gradients_match_finite_differences() {
        let bank = MemoryBank::new(rand_tensor(&[2, 4], 6), [1, 4, 4], 2).unwrap();
        let addr = rand_tensor(&[2, 3, 2], 7);
        let q = rand_tensor(&[2, 3], 8);
        let weights = rand_tensor(&[4, 1, 4, 4], 9);
        let f = |b: &Tensor, a: &Tensor, grad: bool| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let bv = tape.variable(b.clone());
            let av = tape.variable(a.clone());
            let qv = tape.constant(q.clone());
            let img = recall_on_tape(&mut tape, bv, av, qv, &bank).unwrap();
            let w = tape.constant(weights.clone());
            let p = tape.mul(img, w).unwrap();
            let l = tape.sum_all(p).unwrap();
            let g = if grad { tape.grad_values(l, &[bv, av]).unwrap() } else { vec![] };
            (tape.value(l).item(), g)
        };
        let (_, g) = f(&bank.bases, &addr, true);
        assert!(g.iter().all(|t| t.data().iter().any(|&v| v != 0.0)));
        let nb = finite_diff_oracle(
            |x| Ok(f(&Tensor::new([2, 4], x.to_vec()).unwrap(), &addr, false).0),
            bank.bases.data(),
            1e-4,
        )
        .unwrap();
        let na = finite_diff_oracle(
            |x| Ok(f(&bank.bases, &Tensor::new([2, 3, 2], x.to_vec()).unwrap(), false).0),
            addr.data(),
            1e-4,
        )
        .unwrap();
        assert!(max_relative_error(g[0].data(), &nb, 1e-6) < 1e-6);
        assert!(max_relative_error(g[1].data(), &na, 1e-6) < 1e-6);
    }

    #[test]
    fn similarity_examples() {
        // A_1 rows: class 0 -> e0, class 1 -> e0, class 2 -> e1
        let a = Tensor::new([1, 3, 2], vec![1.0, 0.0, 2.0, 0.0, 0.0, 3.0]).unwrap();
        let set = AddressingSet::new(a).unwrap();
        let s = coefficient_similarity(&set, &one_hot_queries(&[0, 1, 2], 3)).unwrap();
        assert_eq!(s.data()[1], 1.0);
        assert_eq!(s.data()[2], 0.0);
        let zero = AddressingSet::new(Tensor::new([1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(
            coefficient_similarity(&zero, &one_hot_queries(&[0, 1], 2)),
            Err(Error::ZeroCoefficients { class: 1 })
        ));
    }

    #[test]
    fn similarity_matches_direct_recomputation() {
        for seed in 0..3 {
            let mut rng = stream(seed, "sim", 0);
            let set = AddressingSet::random(4, 3, 5, &mut rng).unwrap();
            let s = coefficient_similarity(&set, &one_hot_queries(&[0, 1, 2], 3)).unwrap();
            let mean = |c: usize| -> Vec<f64> {
                (0..5)
                    .map(|k| (0..4).map(|i| set.matrix(i).data()[c * 5 + k]).sum::<f64>() / 4.0)
                    .collect()
            };
            for a in 0..3 {
                assert_eq!(s.data()[a * 3 + a], 1.0);
                for b in 0..3 {
                    let (va, vb) = (mean(a), mean(b));
                    let dot: f64 = va.iter().zip(&vb).map(|(x, y)| x * y).sum();
                    let na: f64 = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb: f64 = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                    assert!((s.data()[a * 3 + b] - dot / (na * nb)).abs() < 1e-12);
                    assert_eq!(s.data()[a * 3 + b], s.data()[b * 3 + a]);
                }
            }
        }
    }

    #[test]
    fn expanded_bases_are_upsampled() {
        let bank = MemoryBank::new(Tensor::full([2, 4], 3.0), [1, 4, 4], 2).unwrap();
        let e = bank.expanded().unwrap();
        assert_eq!(e.shape(), &[2, 16]);
        assert!(e.data().iter().all(|&v| v == 3.0));
        assert!(MemoryBank::new(Tensor::zeros([2, 16]), [1, 4, 4], 2).is_err());
    }
}
