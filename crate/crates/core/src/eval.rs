//! Retraining fresh models on recalled data and scoring them on held-out
//! examples, plus the experiment drivers built on that.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::bptt::{MomentumMode, DEFAULT_MINIBATCH, FULL_BATCH_LIMIT};
use crate::data::{augment_tensor, sample_transforms, AugmentPolicy, LabeledDataset};
use crate::distill::{distill, DistillConfig};
use crate::error::{Error, Result};
use crate::memory::{
    plan_budget_floats, plan_classical, query_matrix, recall_coefficients, DistilledArtifact, Parameterization,
    Query,
};
use crate::models::{init_params, model_forward, ModelInput, ModelKind, ModelSpec, ParamSet};
use crate::rng::{derive_seed, sample_without_replacement, stream, StreamRng};
use crate::tensor::Tensor;

/// Test examples scored per forward pass.
const EVAL_CHUNK: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub n_models: usize,
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `None`: full batch up to 512 examples, else minibatches of 256.
    pub batch_size: Option<usize>,
    pub augment: Option<AugmentPolicy>,
    pub seed: u64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        EvalProtocol {
            n_models: 5,
            steps: 500,
            lr: 0.01,
            momentum: 0.9,
            batch_size: None,
            augment: None,
            seed: 0,
        }
    }
}

impl EvalProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_models == 0 {
            return Err(Error::invalid("n_models must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::invalid(format!("retrain lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("retrain momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("retrain batch size must be positive"));
        }
        Ok(())
    }

    fn minibatch(&self, n: usize) -> Option<usize> {
        match self.batch_size {
            Some(b) if b < n => Some(b),
            Some(_) => None,
            None if n <= FULL_BATCH_LIMIT => None,
            None => Some(DEFAULT_MINIBATCH),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

impl EvalResult {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Empty("accuracies"));
        }
        let (mean, std) = mean_std(&accuracies);
        Ok(EvalResult { accuracies, mean, std })
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// A retraining set.
#[derive(Clone, Debug)]
pub enum TrainSet {
    /// `[n, C, H, W]`.
    Dense { images: Tensor, labels: Vec<usize> },
    /// Images `coeffs · bases`, `coeffs: [n, K]`, `bases: [K, d]`.
    Factored {
        coeffs: Tensor,
        bases: Tensor,
        labels: Vec<usize>,
    },
}

impl TrainSet {
    pub fn len(&self) -> usize {
        self.labels().len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels().is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        match self {
            TrainSet::Dense { labels, .. } | TrainSet::Factored { labels, .. } => labels,
        }
    }

    /// The dense form, `[n, C, H, W]`.
    pub fn images(&self, shape: [usize; 3]) -> Result<Tensor> {
        match self {
            TrainSet::Dense { images, .. } => Ok(images.clone()),
            TrainSet::Factored { coeffs, bases, .. } => {
                let mut tape = Tape::new();
                let c = tape.constant(coeffs.clone());
                let b = tape.constant(bases.clone());
                let x = tape.matmul(c, b)?;
                let [ch, h, w] = shape;
                tape.value(x).clone().reshape([coeffs.shape()[0], ch, h, w])
            }
        }
    }

    /// The retraining set recalled from `artifact` by `queries`. Classical
    /// memories are recalled densely so their images are exact copies.
    pub fn from_artifact(artifact: &DistilledArtifact, queries: &[Query]) -> Result<Self> {
        let r = artifact.addressing.count();
        let mut labels = Vec::with_capacity(queries.len() * r);
        for q in queries {
            let l = q.label.ok_or_else(|| Error::invalid("retraining needs labelled queries"))?;
            labels.extend(core::iter::repeat_n(l, r));
        }
        if artifact.parameterization == Parameterization::Classical {
            let ds = crate::memory::build_dataset(&artifact.bank, &artifact.addressing, queries)?;
            return Ok(TrainSet::Dense {
                images: ds.images,
                labels,
            });
        }
        let mut tape = Tape::new();
        let a = tape.constant(artifact.addressing.matrices.clone());
        let q = tape.constant(query_matrix(queries)?);
        let c = recall_coefficients(&mut tape, a, q)?;
        Ok(TrainSet::Factored {
            coeffs: tape.value(c).clone(),
            bases: artifact.bank.expanded()?,
            labels,
        })
    }
}

/// Trains `params` on `data` with plain SGD with momentum. Nothing is kept
/// on the tape between steps.
pub fn train_plain(
    spec: &ModelSpec,
    params: &ParamSet,
    data: &TrainSet,
    protocol: &EvalProtocol,
    rng: &mut StreamRng,
) -> Result<ParamSet> {
    let n = data.len();
    if n == 0 {
        return Err(Error::Empty("retraining set"));
    }
    let dense_needed = protocol.augment.is_some() || spec.kind == ModelKind::Convnet;
    let owned;
    let data = match data {
        TrainSet::Factored { labels, .. } if dense_needed => {
            owned = TrainSet::Dense {
                images: data.images(spec.input_shape)?,
                labels: labels.clone(),
            };
            &owned
        }
        _ => data,
    };
    let mut theta = params.tensors.clone();
    let mut velocity: Vec<Tensor> = theta.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let minibatch = protocol.minibatch(n);
    for step in 0..protocol.steps {
        let mut tape = Tape::new();
        let vars: Vec<_> = theta.iter().map(|t| tape.variable(t.clone())).collect();
        let index = minibatch.map(|b| sample_without_replacement(n, b, rng));
        let labels: Vec<usize> = match &index {
            Some(idx) => idx.iter().map(|&i| data.labels()[i]).collect(),
            None => data.labels().to_vec(),
        };
        let input = match data {
            TrainSet::Dense { images, .. } => {
                let x = match &index {
                    Some(idx) => gather_rows(images, idx),
                    None => images.clone(),
                };
                let x = match &protocol.augment {
                    Some(p) => augment_tensor(&x, &sample_transforms(labels.len(), p, rng))?,
                    None => x,
                };
                ModelInput::Images(tape.constant(x))
            }
            TrainSet::Factored { coeffs, bases, .. } => {
                let c = match &index {
                    Some(idx) => gather_rows(coeffs, idx),
                    None => coeffs.clone(),
                };
                ModelInput::Factored {
                    coeffs: tape.constant(c),
                    bases: tape.constant(bases.clone()),
                }
            }
        };
        let logits = model_forward(&mut tape, spec, &vars, input)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        if !tape.value(loss).item().is_finite() {
            return Err(Error::InnerDiverged { step: step + 1 });
        }
        let grads = tape.grad_values(loss, &vars)?;
        for ((t, v), g) in theta.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
            for ((ti, vi), gi) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = protocol.momentum * *vi + gi;
                *ti -= protocol.lr * *vi;
            }
        }
    }
    Ok(ParamSet {
        seed: params.seed,
        names: params.names.clone(),
        tensors: theta,
    })
}

fn gather_rows(t: &Tensor, index: &[usize]) -> Tensor {
    let row: usize = t.shape()[1..].iter().product();
    let mut out = Vec::with_capacity(index.len() * row);
    for &i in index {
        out.extend_from_slice(&t.data()[i * row..(i + 1) * row]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = index.len();
    Tensor::new(shape, out).expect("gathered rows")
}

/// Class predictions, ties to the lowest index.
pub fn predict(spec: &ModelSpec, params: &ParamSet, images: &Tensor) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let row = images.len() / n.max(1);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let x = Tensor::new(shape, images.data()[start * row..end * row].to_vec())?;
        let mut tape = Tape::new();
        let vars = params.to_tape_const(&mut tape);
        let xv = tape.constant(x);
        let logits = model_forward(&mut tape, spec, &vars, ModelInput::Images(xv))?;
        for z in tape.value(logits).rows() {
            let mut best = 0;
            for (c, &v) in z.iter().enumerate() {
                if v > z[best] {
                    best = c;
                }
            }
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

pub fn accuracy(spec: &ModelSpec, params: &ParamSet, test: &LabeledDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let pred = predict(spec, params, &test.images)?;
    let hits = pred.iter().zip(&test.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Trains model number `index` of the protocol from scratch on `data` and
/// returns its test accuracy.
pub fn retrain_one(
    spec: &ModelSpec,
    data: &TrainSet,
    protocol: &EvalProtocol,
    test: &LabeledDataset,
    index: usize,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let init = init_params(spec, derive_seed(protocol.seed, "retrain", index as u64))?;
    let mut rng = stream(protocol.seed, "retrain-batch", index as u64);
    let trained = train_plain(spec, &init, data, protocol, &mut rng)?;
    accuracy(spec, &trained, test)
}

/// Retrains `protocol.n_models` fresh models on `data`.
pub fn retrain_on(spec: &ModelSpec, data: &TrainSet, protocol: &EvalProtocol, test: &LabeledDataset) -> Result<EvalResult> {
    protocol.validate()?;
    spec.validate()?;
    let acc = (0..protocol.n_models)
        .map(|i| retrain_one(spec, data, protocol, test, i))
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_accuracies(acc)
}

/// Checks that `artifact` can train `spec` and returns its retraining set.
pub fn artifact_train_set(artifact: &DistilledArtifact, spec: &ModelSpec, queries: &[Query]) -> Result<TrainSet> {
    artifact.validate()?;
    if let Some(q) = queries.iter().find(|q| q.vector.len() != artifact.addressing.query_dim()) {
        return Err(Error::shape(
            "retrain_eval",
            format!("query of length {} for d_y = {}", q.vector.len(), artifact.addressing.query_dim()),
        ));
    }
    if artifact.num_classes != spec.num_classes {
        return Err(Error::invalid(format!(
            "artifact has {} classes, model has {}",
            artifact.num_classes, spec.num_classes
        )));
    }
    if artifact.bank.target_shape != spec.input_shape {
        return Err(Error::shape(
            "retrain_eval",
            format!("artifact images {:?} for model input {:?}", artifact.bank.target_shape, spec.input_shape),
        ));
    }
    if queries.iter().any(|q| q.label.is_some_and(|l| l >= spec.num_classes)) {
        return Err(Error::invalid("query label out of range"));
    }
    TrainSet::from_artifact(artifact, queries)
}

/// Trains fresh models on the artifact's recall for one-hot queries of
/// every class and scores them on `test`. Only the artifact is read.
pub fn retrain_eval(
    artifact: &DistilledArtifact,
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    test: &LabeledDataset,
) -> Result<EvalResult> {
    retrain_eval_queries(artifact, spec, protocol, &artifact.queries(), test)
}

pub fn retrain_eval_queries(
    artifact: &DistilledArtifact,
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    queries: &[Query],
    test: &LabeledDataset,
) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let data = artifact_train_set(artifact, spec, queries)?;
    retrain_on(spec, &data, protocol, test)
}

/// `per_class` real examples of every class, chosen uniformly.
pub fn random_coreset(train: &LabeledDataset, per_class: usize, seed: u64) -> Result<LabeledDataset> {
    let mut rng = stream(seed, "coreset", 0);
    let mut index = Vec::new();
    for (c, members) in train.class_indices().iter().enumerate() {
        if members.len() < per_class {
            return Err(Error::invalid(format!(
                "class {} has {} examples, {} requested",
                c,
                members.len(),
                per_class
            )));
        }
        let picks = sample_without_replacement(members.len(), per_class, &mut rng);
        index.extend(picks.iter().map(|&p| members[p]));
    }
    let mut ds = train.subset(&index);
    ds.preprocessing.push(format!("coreset({} per class, seed {})", per_class, seed));
    Ok(ds)
}

pub fn dense_train_set(ds: &LabeledDataset) -> TrainSet {
    TrainSet::Dense {
        images: ds.images.clone(),
        labels: ds.labels.clone(),
    }
}

/// Budget plan for `cfg` with a different number of bases.
pub fn plan_for(cfg: &DistillConfig, budget: u64, k: usize, downsample: usize) -> Result<crate::memory::BudgetPlan> {
    match cfg.parameterization {
        Parameterization::Addressed => {
            plan_budget_floats(budget, cfg.model.input_shape, cfg.plan.query_dim, k, downsample)
        }
        Parameterization::Classical => {
            plan_classical(budget, cfg.model.num_classes, cfg.model.input_shape, downsample)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Selection {
    pub best_k: usize,
    /// `(K, validation accuracy)`; `None` when the budget cannot hold `K`.
    pub scores: Vec<(usize, Option<f64>)>,
    /// The artifact distilled with the chosen `K` on the 90% split.
    pub artifact: DistilledArtifact,
    pub losses: Vec<f64>,
}

/// Picks the number of bases by validation accuracy: distills on 90% of
/// `train` for each candidate and retrains on the recall, scoring on the
/// other 10%. Ties go to the smaller `K`.
pub fn select_num_bases(
    candidates: &[usize],
    train: &LabeledDataset,
    split_seed: u64,
    base: &DistillConfig,
    budget: u64,
    protocol: &EvalProtocol,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::Empty("candidate basis counts"));
    }
    let (fit, val) = train.split(0.1, split_seed)?;
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let mut scores = Vec::with_capacity(ks.len());
    let mut best: Option<(usize, f64, DistilledArtifact, Vec<f64>)> = None;
    for &k in &ks {
        let plan = match plan_for(base, budget, k, base.plan.downsample) {
            Ok(p) => p,
            Err(Error::Budget { .. }) => {
                scores.push((k, None));
                continue;
            }
            Err(e) => return Err(e),
        };
        let cfg = DistillConfig { plan, ..base.clone() };
        let (artifact, losses) = distill(&fit, &cfg)?;
        let acc = retrain_eval(&artifact, &cfg.model, protocol, &val)?.mean;
        scores.push((k, Some(acc)));
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((k, acc, artifact, losses));
        }
    }
    match best {
        Some((best_k, _, artifact, losses)) => Ok(Selection {
            best_k,
            scores,
            artifact,
            losses,
        }),
        None => Err(Error::invalid(format!("no candidate K in {:?} fits {} floats", ks, budget))),
    }
}

/// Axes of an ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationGrid {
    pub modes: Vec<MomentumMode>,
    pub steps: Vec<usize>,
    pub downsample: Vec<usize>,
    pub parameterizations: Vec<Parameterization>,
    pub budget_floats: u64,
    pub distill_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: MomentumMode,
    pub steps: usize,
    pub downsample: usize,
    pub parameterization: Parameterization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: AblationCell,
    pub num_bases: usize,
    pub r: usize,
    /// Mean retrain accuracy of each distillation seed.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl AblationGrid {
    /// Cells in row order: parameterization, downsampling, steps, mode.
    pub fn cells(&self) -> Vec<AblationCell> {
        let mut out = Vec::new();
        for &parameterization in &self.parameterizations {
            for &downsample in &self.downsample {
                for &steps in &self.steps {
                    for &mode in &self.modes {
                        out.push(AblationCell {
                            mode,
                            steps,
                            downsample,
                            parameterization,
                        });
                    }
                }
            }
        }
        out
    }
}

/// The distillation config of one grid cell.
pub fn cell_config(base: &DistillConfig, cell: &AblationCell, budget: u64, seed: u64) -> Result<DistillConfig> {
    let mut cfg = base.clone();
    cfg.parameterization = cell.parameterization;
    cfg.inner.mode = cell.mode;
    cfg.inner.steps = cell.steps;
    cfg.plan = plan_for(&cfg, budget, base.plan.num_bases, cell.downsample)?;
    cfg.seed = seed;
    Ok(cfg)
}

/// Retrain accuracy (mean over the protocol's models) of one distillation
/// run of `cell`.
pub fn run_cell(
    train: &LabeledDataset,
    test: &LabeledDataset,
    base: &DistillConfig,
    cell: &AblationCell,
    budget: u64,
    seed: u64,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let cfg = cell_config(base, cell, budget, seed)?;
    let (artifact, _) = distill(train, &cfg)?;
    Ok(retrain_eval(&artifact, &cfg.model, protocol, test)?.mean)
}

pub fn ablation_row(cell: AblationCell, plan: &crate::memory::BudgetPlan, per_seed: Vec<f64>) -> AblationRow {
    let (mean, std) = mean_std(&per_seed);
    AblationRow {
        cell,
        num_bases: plan.num_bases,
        r: plan.r,
        per_seed,
        mean,
        std,
    }
}

pub fn ablation_suite(
    train: &LabeledDataset,
    test: &LabeledDataset,
    base: &DistillConfig,
    grid: &AblationGrid,
    protocol: &EvalProtocol,
) -> Result<Vec<AblationRow>> {
    if grid.distill_seeds.is_empty() {
        return Err(Error::Empty("distillation seeds"));
    }
    grid.cells()
        .into_iter()
        .map(|cell| {
            let plan = cell_config(base, &cell, grid.budget_floats, 0)?.plan;
            let per_seed = grid
                .distill_seeds
                .iter()
                .map(|&s| run_cell(train, test, base, &cell, grid.budget_floats, s, protocol))
                .collect::<Result<Vec<_>>>()?;
            Ok(ablation_row(cell, &plan, per_seed))
        })
        .collect()
}

/// One memory per task together with that task's test split.
#[derive(Clone, Debug)]
pub struct TaskMemory {
    pub artifact: DistilledArtifact,
    pub test: LabeledDataset,
}

/// One trial's choice: `(task, class)` pairs whose position is the new
/// label.
pub fn extrapolation_picks(memories: &[TaskMemory], k: usize, rng: &mut StreamRng) -> Vec<(usize, usize)> {
    use rand::Rng;
    let tasks = sample_without_replacement(memories.len(), k, rng);
    tasks
        .into_iter()
        .map(|t| (t, rng.random_range(0..memories[t].artifact.num_classes)))
        .collect()
}

/// A `k`-way classifier assembled from one class of each of `k` tasks:
/// recall each class from its own memory, train a fresh model on the
/// union and test on those classes' held-out examples.
pub fn extrapolate_trial(
    memories: &[TaskMemory],
    picks: &[(usize, usize)],
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    trial: usize,
) -> Result<f64> {
    let k = picks.len();
    let spec = ModelSpec {
        num_classes: k,
        ..spec.clone()
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut test_images = Vec::new();
    let mut test_labels = Vec::new();
    for (new_label, &(task, class)) in picks.iter().enumerate() {
        let m = &memories[task];
        for img in m.artifact.recall_class(class)? {
            images.push(img);
            labels.push(new_label);
        }
        let members: Vec<usize> = (0..m.test.len()).filter(|&i| m.test.labels[i] == class).collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("task {} class {} has no test examples", task, class)));
        }
        for &i in &members {
            test_images.push(Tensor::new(m.test.image_shape(), m.test.image(i).to_vec())?);
            test_labels.push(new_label);
        }
    }
    let data = TrainSet::Dense {
        images: Tensor::stack(&images)?,
        labels,
    };
    let test = LabeledDataset::new(Tensor::stack(&test_images)?, test_labels, k, String::from("extrapolation"))?;
    retrain_one(&spec, &data, protocol, &test, trial)
}

/// Mean and spread of `n_trials` extrapolated `k`-way classifiers.
pub fn extrapolate_eval(
    memories: &[TaskMemory],
    k: usize,
    n_trials: usize,
    spec: &ModelSpec,
    protocol: &EvalProtocol,
    rng: &mut StreamRng,
) -> Result<EvalResult> {
    if k < 2 {
        return Err(Error::invalid("extrapolation needs k >= 2"));
    }
    if k > memories.len() {
        return Err(Error::invalid(format!("k = {} but only {} task memories", k, memories.len())));
    }
    if n_trials == 0 {
        return Err(Error::invalid("n_trials must be at least 1"));
    }
    let acc = (0..n_trials)
        .map(|t| {
            let picks = extrapolation_picks(memories, k, rng);
            extrapolate_trial(memories, &picks, spec, protocol, t)
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_accuracies(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bptt::InnerOptConfig;
    use alloc::vec;
    use crate::data::toy_gaussian;
    use crate::distill::OuterOptConfig;
    use crate::memory::{classical_embed, plan_budget, AddressingSet, MemoryBank, FORMAT_VERSION};

    fn toy(sep: f64, seed: u64) -> (LabeledDataset, LabeledDataset) {
        let ds = toy_gaussian(4, 16, 60, sep, seed).unwrap();
        let (train, test) = ds.split(0.5, seed).unwrap();
        (train, test)
    }

    fn proto(n: usize) -> EvalProtocol {
        EvalProtocol {
            n_models: n,
            steps: 200,
            lr: 0.05,
            ..EvalProtocol::default()
        }
    }

    fn classical_artifact(train: &LabeledDataset, per_class: usize) -> DistilledArtifact {
        let groups: Vec<Vec<Tensor>> = train
            .class_indices()
            .iter()
            .map(|m| {
                m.iter()
                    .take(per_class)
                    .map(|&i| Tensor::new(train.image_shape(), train.image(i).to_vec()).unwrap())
                    .collect()
            })
            .collect();
        let (bank, addressing) = classical_embed(&groups).unwrap();
        let budget = plan_classical(bank.bases.len() as u64, train.num_classes, train.image_shape(), 1).unwrap();
        DistilledArtifact {
            version: FORMAT_VERSION,
            bank,
            addressing,
            parameterization: Parameterization::Classical,
            num_classes: train.num_classes,
            dataset: train.name.clone(),
            fingerprint: 0,
            budget,
            config: None,
        }
    }

    #[test]
    fn single_model_has_zero_std() {
        let (train, test) = toy(6.0, 1);
        let art = classical_artifact(&train, 2);
        let spec = ModelSpec::linear(train.image_shape(), 4);
        let r = retrain_eval(&art, &spec, &proto(1), &test).unwrap();
        assert_eq!(r.accuracies.len(), 1);
        assert_eq!(r.std, 0.0);
        assert!((0.0..=1.0).contains(&r.mean));
    }

    #[test]
    fn population_std() {
        let r = EvalResult::from_accuracies(vec![0.5, 1.0]).unwrap();
        assert_eq!(r.mean, 0.75);
        assert_eq!(r.std, 0.25);
    }

    #[test]
    fn classical_embedding_equals_direct_training() {
        let (train, test) = toy(6.0, 2);
        let per = 20;
        let art = classical_artifact(&train, per);
        let spec = ModelSpec::mlp(train.image_shape(), 4).with_hidden(32);
        let p = proto(3);
        let via_memory = retrain_eval(&art, &spec, &p, &test).unwrap();
        // the same examples in recall order: class-major
        let index: Vec<usize> = train.class_indices().iter().flat_map(|m| m[..per].to_vec()).collect();
        let direct = retrain_on(&spec, &dense_train_set(&train.subset(&index)), &p, &test).unwrap();
        assert_eq!(via_memory, direct);
        assert!(via_memory.mean > 0.9, "{:?}", via_memory);
    }

    #[test]
    fn ample_classical_memory_matches_full_training() {
        let (train, test) = toy(6.0, 3);
        let spec = ModelSpec::linear(train.image_shape(), 4);
        let p = proto(2);
        let min_class = train.class_indices().iter().map(Vec::len).min().unwrap();
        let art = classical_artifact(&train, min_class);
        let mem = retrain_eval(&art, &spec, &p, &test).unwrap().mean;
        let direct = retrain_on(&spec, &dense_train_set(&train), &p, &test).unwrap().mean;
        assert!(mem >= direct - 0.01, "{mem} vs {direct}");
    }

    #[test]
    fn zero_memory_is_chance() {
        let (train, test) = toy(6.0, 4);
        let shape = train.image_shape();
        let plan = plan_budget(1, 4, shape, 4, 2, 1).unwrap();
        let art = DistilledArtifact {
            version: FORMAT_VERSION,
            bank: MemoryBank::new(Tensor::zeros([2, 16]), shape, 1).unwrap(),
            addressing: AddressingSet::new(Tensor::zeros([plan.r, 4, 2])).unwrap(),
            parameterization: Parameterization::Addressed,
            num_classes: 4,
            dataset: String::from("zeros"),
            fingerprint: 0,
            budget: plan,
            config: None,
        };
        let spec = ModelSpec::linear(shape, 4);
        let acc = retrain_eval(&art, &spec, &proto(1), &test).unwrap().mean;
        let n = test.len() as f64;
        let sigma = libm::sqrt(0.25 * 0.75 / n);
        assert!((acc - 0.25).abs() <= 3.0 * sigma + 1e-9, "{acc}");
    }

    #[test]
    fn empty_test_set_is_an_error() {
        let (train, test) = toy(6.0, 5);
        let art = classical_artifact(&train, 1);
        let spec = ModelSpec::linear(train.image_shape(), 4);
        let empty = test.subset(&[]);
        assert!(matches!(retrain_eval(&art, &spec, &proto(1), &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn confident_correct_prediction_has_tiny_loss() {
        let spec = ModelSpec::linear([1, 1, 2], 2);
        let mut params = ParamSet::zeros_like(&spec);
        params.tensors[0] = Tensor::new([2, 2], vec![20.0, -20.0, -20.0, 20.0]).unwrap();
        let mut tape = Tape::new();
        let vars = params.to_tape_const(&mut tape);
        let x = tape.constant(Tensor::new([2, 1, 1, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let logits = model_forward(&mut tape, &spec, &vars, ModelInput::Images(x)).unwrap();
        let loss = tape.softmax_cross_entropy(logits, &[0, 1]).unwrap();
        assert!(tape.value(loss).item() < 1e-6);
    }

    #[test]
    fn factored_and_dense_retraining_agree() {
        let (train, test) = toy(6.0, 6);
        let shape = train.image_shape();
        let plan = plan_budget(1, 4, shape, 4, 3, 2).unwrap();
        let mut rng = stream(6, "t", 0);
        let art = DistilledArtifact {
            version: FORMAT_VERSION,
            bank: MemoryBank::random(3, shape, 2, &mut rng).unwrap(),
            addressing: AddressingSet::random(plan.r, 4, 3, &mut rng).unwrap(),
            parameterization: Parameterization::Addressed,
            num_classes: 4,
            dataset: String::from("rand"),
            fingerprint: 0,
            budget: plan,
            config: None,
        };
        let spec = ModelSpec::mlp(shape, 4).with_hidden(16);
        let fact = TrainSet::from_artifact(&art, &art.queries()).unwrap();
        assert!(matches!(fact, TrainSet::Factored { .. }));
        let dense = TrainSet::Dense {
            images: art.synthetic().unwrap().images,
            labels: fact.labels().to_vec(),
        };
        let p = proto(1);
        let init = init_params(&spec, 1).unwrap();
        let a = train_plain(&spec, &init, &fact, &p, &mut stream(0, "b", 0)).unwrap();
        let b = train_plain(&spec, &init, &dense, &p, &mut stream(0, "b", 0)).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
        let _ = test;
    }

    fn toy_config(k: usize, seed: u64) -> DistillConfig {
        let shape = [1, 4, 4];
        DistillConfig {
            model: ModelSpec::linear(shape, 4),
            inner: InnerOptConfig {
                steps: 10,
                lr: 0.1,
                ..InnerOptConfig::default()
            },
            outer: OuterOptConfig {
                iterations: 30,
                batch_size: 64,
                ..OuterOptConfig::default()
            },
            plan: plan_budget(1, 4, shape, 4, k, 1).unwrap(),
            parameterization: Parameterization::Addressed,
            augment: None,
            seed,
        }
    }

    #[test]
    fn single_candidate_is_returned() {
        let (train, _) = toy(6.0, 7);
        let cfg = toy_config(2, 1);
        let s = select_num_bases(&[2], &train, 0, &cfg, 64, &proto(1)).unwrap();
        assert_eq!(s.best_k, 2);
        assert_eq!(s.scores.len(), 1);
        assert_eq!(s.artifact.bank.num_bases(), 2);
    }

    #[test]
    fn infeasible_candidates_are_skipped() {
        let (train, _) = toy(6.0, 8);
        let cfg = toy_config(2, 1);
        // 64 floats hold at most 3 bases of 16 plus one 4×K matrix
        let s = select_num_bases(&[2, 8], &train, 0, &cfg, 64, &proto(1)).unwrap();
        assert_eq!(s.best_k, 2);
        assert_eq!(s.scores[1], (8, None));
        assert!(select_num_bases(&[8, 16], &train, 0, &cfg, 64, &proto(1)).is_err());
        assert!(select_num_bases(&[], &train, 0, &cfg, 64, &proto(1)).is_err());
    }

    #[test]
    fn ties_go_to_fewer_bases() {
        // separation 0: every candidate scores the validation class prior
        let (train, _) = toy(0.0, 9);
        let mut cfg = toy_config(1, 1);
        cfg.outer.iterations = 1;
        let p = EvalProtocol {
            steps: 0,
            ..proto(1)
        };
        let s = select_num_bases(&[2, 1], &train, 0, &cfg, 64, &p).unwrap();
        assert_eq!(s.scores[0].1, s.scores[1].1);
        assert_eq!(s.best_k, 1);
    }

    #[test]
    fn grid_counts_rows() {
        let grid = AblationGrid {
            modes: vec![MomentumMode::None, MomentumMode::ForwardOnly, MomentumMode::Full],
            steps: vec![1, 10],
            downsample: vec![1],
            parameterizations: vec![Parameterization::Addressed],
            budget_floats: 64,
            distill_seeds: vec![0],
        };
        assert_eq!(grid.cells().len(), 6);
        let (train, test) = toy(6.0, 10);
        let mut base = toy_config(2, 0);
        base.outer.iterations = 2;
        let rows = ablation_suite(&train, &test, &base, &grid, &proto(1)).unwrap();
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[3].cell.steps, 10);
        assert!(rows.iter().all(|r| r.std == 0.0 && (0.0..=1.0).contains(&r.mean)));
    }

    #[test]
    fn extrapolation_contract() {
        let mut memories = Vec::new();
        for t in 0..4 {
            let (train, test) = toy(8.0, 20 + t);
            let two: Vec<usize> = (0..train.len()).filter(|&i| train.labels[i] < 2).collect();
            let mut tr = train.subset(&two);
            tr.num_classes = 2;
            let two_t: Vec<usize> = (0..test.len()).filter(|&i| test.labels[i] < 2).collect();
            let mut te = test.subset(&two_t);
            te.num_classes = 2;
            memories.push(TaskMemory {
                artifact: classical_artifact(&tr, 3),
                test: te,
            });
        }
        let spec = ModelSpec::linear([1, 4, 4], 2);
        let mut rng = stream(0, "x", 0);
        assert!(extrapolate_eval(&memories, 1, 5, &spec, &proto(1), &mut rng).is_err());
        assert!(extrapolate_eval(&memories, 5, 5, &spec, &proto(1), &mut rng).is_err());
        let r = extrapolate_eval(&memories, 2, 10, &spec, &proto(1), &mut rng).unwrap();
        assert_eq!(r.accuracies.len(), 10);
        assert!(r.mean > 0.5, "{:?}", r);
        let picks = extrapolation_picks(&memories, 3, &mut rng);
        let mut tasks: Vec<usize> = picks.iter().map(|p| p.0).collect();
        tasks.sort_unstable();
        tasks.dedup();
        assert_eq!(tasks.len(), 3);
    }

    #[test]
    fn coreset_takes_per_class() {
        let (train, _) = toy(6.0, 11);
        let c = random_coreset(&train, 3, 0).unwrap();
        assert_eq!(c.len(), 12);
        assert!(c.class_indices().iter().all(|m| m.len() == 3));
        assert_eq!(c.fingerprint(), random_coreset(&train, 3, 0).unwrap().fingerprint());
        assert!(random_coreset(&train, 1000, 0).is_err());
    }
}
