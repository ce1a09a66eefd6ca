//! Compress-then-recall continual learning: each task of a stream is
//! distilled into its own memory while it is seen once in minibatches, and
//! a fresh classifier per task is retrained from recall at test time.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{augment_tensor, LabeledDataset, Transform};
use crate::distill::{DistillConfig, Distiller};
use crate::error::{Error, Result};
use crate::eval::{accuracy, plan_for, retrain_eval, EvalProtocol};
use crate::memory::DistilledArtifact;
use crate::models::{init_params, model_forward, ModelInput, ModelSpec, ParamSet};
use crate::rng::{derive_seed, sample_without_replacement, stream, StreamRng};
use crate::tensor::Tensor;

pub const DEFAULT_STREAM_MINIBATCH: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    Rotations,
    Permutations,
}

impl core::str::FromStr for StreamKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotations" | "rotation" => Ok(StreamKind::Rotations),
            "permutations" | "permutation" => Ok(StreamKind::Permutations),
            other => Err(Error::invalid(format!("unknown stream kind '{}'", other))),
        }
    }
}

/// The input transform that defines a task.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskTransform {
    Rotation { degrees: f64 },
    /// `out[i] = in[perm[i]]` over the flattened image.
    Permutation(Vec<usize>),
}

impl TaskTransform {
    pub fn apply(&self, images: &Tensor) -> Result<Tensor> {
        match self {
            TaskTransform::Rotation { degrees } => {
                let n = images.shape()[0];
                let t = vec![
                    Transform {
                        flip: false,
                        angle_deg: *degrees,
                    };
                    n
                ];
                augment_tensor(images, &t)
            }
            TaskTransform::Permutation(perm) => {
                let d = perm.len();
                if images.len() % d.max(1) != 0 {
                    return Err(Error::shape("permute", format!("{:?} for {} pixels", images.shape(), d)));
                }
                let mut out = Vec::with_capacity(images.len());
                for row in images.data().chunks_exact(d) {
                    out.extend(perm.iter().map(|&p| row[p]));
                }
                Tensor::new(images.shape().to_vec(), out)
            }
        }
    }
}

/// Inverse of a permutation.
pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// One task. Its training examples can be streamed exactly once.
#[derive(Clone, Debug)]
pub struct Task {
    /// 1-based.
    pub index: usize,
    pub transform: TaskTransform,
    pub test: LabeledDataset,
    train: Option<LabeledDataset>,
}

impl Task {
    pub fn train_len(&self) -> usize {
        self.train.as_ref().map_or(0, LabeledDataset::len)
    }

    /// Hands out the training examples as minibatches in stream order.
    /// Later calls fail.
    pub fn take_stream(&mut self, minibatch: usize) -> Result<Minibatches> {
        if minibatch == 0 {
            return Err(Error::invalid("stream minibatch size must be positive"));
        }
        let data = self
            .train
            .take()
            .ok_or_else(|| Error::invalid(format!("task {} has already been streamed", self.index)))?;
        Ok(Minibatches {
            data,
            minibatch,
            next: 0,
        })
    }
}

/// Consumes a task's examples in order, `minibatch` at a time.
#[derive(Debug)]
pub struct Minibatches {
    data: LabeledDataset,
    minibatch: usize,
    next: usize,
}

impl Minibatches {
    pub fn image_shape(&self) -> [usize; 3] {
        self.data.image_shape()
    }

    pub fn num_classes(&self) -> usize {
        self.data.num_classes
    }
}

impl Iterator for Minibatches {
    type Item = (Tensor, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        let n = self.data.len();
        if self.next >= n {
            return None;
        }
        let end = (self.next + self.minibatch).min(n);
        let idx: Vec<usize> = (self.next..end).collect();
        self.next = end;
        Some((self.data.gather(&idx), self.data.gather_labels(&idx)))
    }
}

#[derive(Clone, Debug)]
pub struct TaskStream {
    pub kind: StreamKind,
    pub minibatch: usize,
    pub seed: u64,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }
}

/// Rotation of task `t` (1-based) among `num_tasks`, evenly spaced from 0
/// to 180 degrees.
pub fn rotation_angle(t: usize, num_tasks: usize) -> f64 {
    180.0 * (t - 1) as f64 / (num_tasks - 1) as f64
}

/// `num_tasks` tasks of `n_per_task` training examples each, drawn without
/// replacement from `train` in a per-task random order and transformed by
/// the task's rotation or permutation. Every task is tested on the whole of
/// `test` under its transform.
pub fn make_stream(
    kind: StreamKind,
    num_tasks: usize,
    n_per_task: usize,
    seed: u64,
    train: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<TaskStream> {
    if num_tasks == 0 {
        return Err(Error::invalid("a stream needs at least one task"));
    }
    if kind == StreamKind::Rotations && num_tasks < 2 {
        return Err(Error::invalid("a rotation stream needs at least 2 tasks"));
    }
    if n_per_task == 0 || n_per_task > train.len() {
        return Err(Error::invalid(format!(
            "{} examples per task from a source of {}",
            n_per_task,
            train.len()
        )));
    }
    if test.image_shape() != train.image_shape() || test.num_classes != train.num_classes {
        return Err(Error::invalid("train and test sources differ in shape or classes"));
    }
    let d = train.image_dim();
    let mut tasks = Vec::with_capacity(num_tasks);
    for t in 1..=num_tasks {
        let transform = match kind {
            StreamKind::Rotations => TaskTransform::Rotation {
                degrees: rotation_angle(t, num_tasks),
            },
            StreamKind::Permutations => {
                TaskTransform::Permutation(sample_without_replacement(d, d, &mut stream(seed, "permutation", t as u64)))
            }
        };
        let order = sample_without_replacement(train.len(), n_per_task, &mut stream(seed, "task-sample", t as u64));
        let mut tr = train.subset(&order);
        tr.images = transform.apply(&tr.images)?;
        tr.name = format!("{}/task{}", train.name, t);
        let mut te = test.clone();
        te.images = transform.apply(&te.images)?;
        te.name = format!("{}/task{}", test.name, t);
        tasks.push(Task {
            index: t,
            transform,
            test: te,
            train: Some(tr),
        });
    }
    Ok(TaskStream {
        kind,
        minibatch: DEFAULT_STREAM_MINIBATCH,
        seed,
        tasks,
    })
}

/// Reservoir rule for the `seen`-th item of a stream (1-based): fill the
/// slots first, afterwards overwrite a uniform slot with probability
/// `capacity / seen`. Returns the slot written, if any.
pub fn reservoir_insert<T>(
    slots: &mut Vec<T>,
    capacity: usize,
    item: T,
    seen: u64,
    rng: &mut StreamRng,
) -> Result<Option<usize>> {
    if capacity == 0 {
        return Err(Error::invalid("reservoir capacity is zero"));
    }
    if seen == 0 {
        return Err(Error::invalid("seen count must include the new item"));
    }
    if slots.len() < capacity {
        slots.push(item);
        return Ok(Some(slots.len() - 1));
    }
    slots.truncate(capacity);
    let j = rng.random_range(0..seen);
    if j < capacity as u64 {
        slots[j as usize] = item;
        Ok(Some(j as usize))
    } else {
        Ok(None)
    }
}

/// Storage shared by buffered real examples and the memories of finished
/// tasks. Every finished task reserves `floor(capacity / T)` floats.
#[derive(Clone, Debug)]
pub struct ReservoirBuffer {
    capacity: u64,
    num_tasks: usize,
    sample_floats: usize,
    slots: Vec<(Vec<f64>, usize)>,
    seen: u64,
    artifacts: Vec<DistilledArtifact>,
}

impl ReservoirBuffer {
    pub fn new(capacity: u64, num_tasks: usize, sample_floats: usize) -> Result<Self> {
        if num_tasks == 0 || sample_floats == 0 {
            return Err(Error::invalid("buffer needs tasks and a sample size"));
        }
        if capacity < sample_floats as u64 {
            return Err(Error::invalid(format!(
                "capacity {} floats cannot hold one sample of {}",
                capacity, sample_floats
            )));
        }
        Ok(ReservoirBuffer {
            capacity,
            num_tasks,
            sample_floats,
            slots: Vec::new(),
            seen: 0,
            artifacts: Vec::new(),
        })
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Floats set aside for each task's memory.
    pub fn task_share(&self) -> u64 {
        self.capacity / self.num_tasks as u64
    }

    pub fn finished_tasks(&self) -> usize {
        self.artifacts.len()
    }

    /// Floats reserved by finished tasks.
    pub fn compressed_reserved(&self) -> u64 {
        self.finished_tasks() as u64 * self.task_share()
    }

    /// Real examples that fit in what the memories leave free.
    pub fn real_capacity(&self) -> usize {
        ((self.capacity - self.compressed_reserved()) / self.sample_floats as u64) as usize
    }

    /// Floats actually held.
    pub fn stored_floats(&self) -> u64 {
        let mem: u64 = self.artifacts.iter().map(DistilledArtifact::stored_floats).sum();
        mem + (self.slots.len() * self.sample_floats) as u64
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn artifacts(&self) -> &[DistilledArtifact] {
        &self.artifacts
    }

    pub fn insert(&mut self, image: Vec<f64>, label: usize, rng: &mut StreamRng) -> Result<Option<usize>> {
        if image.len() != self.sample_floats {
            return Err(Error::shape(
                "reservoir",
                format!("sample of {} floats for slots of {}", image.len(), self.sample_floats),
            ));
        }
        self.seen += 1;
        let cap = self.real_capacity();
        reservoir_insert(&mut self.slots, cap, (image, label), self.seen, rng)
    }

    /// Up to `n` buffered examples, sampled without replacement.
    pub fn sample(&self, n: usize, rng: &mut StreamRng) -> (Vec<f64>, Vec<usize>) {
        let idx = sample_without_replacement(self.slots.len(), n, rng);
        let mut images = Vec::with_capacity(idx.len() * self.sample_floats);
        let mut labels = Vec::with_capacity(idx.len());
        for i in idx {
            images.extend_from_slice(&self.slots[i].0);
            labels.push(self.slots[i].1);
        }
        (images, labels)
    }

    /// Stores the finished task's memory and frees the real-example space.
    pub fn finish_task(&mut self, artifact: DistilledArtifact) -> Result<()> {
        if self.finished_tasks() >= self.num_tasks {
            return Err(Error::invalid("every task has already finished"));
        }
        if artifact.stored_floats() > self.task_share() {
            return Err(Error::Budget {
                budget: self.task_share(),
                bases: artifact.bank.bases.len() as u64,
                per_matrix: (artifact.addressing.query_dim() * artifact.addressing.num_bases()) as u64,
            });
        }
        self.artifacts.push(artifact);
        self.slots.clear();
        self.seen = 0;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClConfig {
    /// Model, optimizers, parameterization and seed for every task's
    /// distillation. The budget plan is replaced per task.
    pub distill: DistillConfig,
    pub num_bases: usize,
    /// Outer iterations after each streamed minibatch.
    pub steps_per_minibatch: usize,
    /// Outer iterations on the buffer once a task has been streamed.
    pub final_iterations: usize,
    pub eval: EvalProtocol,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClResult {
    pub accuracies: Vec<f64>,
    /// Retained accuracy: the mean of `accuracies`.
    pub ra: f64,
    /// Floats held at each task boundary.
    pub stored_floats: Vec<u64>,
    /// Floats reserved by memories at each task boundary.
    pub compressed_floats: Vec<u64>,
}

impl ClResult {
    pub fn new(accuracies: Vec<f64>, stored_floats: Vec<u64>, compressed_floats: Vec<u64>) -> Result<Self> {
        if accuracies.is_empty() {
            return Err(Error::Empty("task accuracies"));
        }
        let ra = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Ok(ClResult {
            accuracies,
            ra,
            stored_floats,
            compressed_floats,
        })
    }
}

/// Memories of a whole stream: per task, the examples seen so far (the
/// current minibatch plus the reservoir) drive outer iterations of that
/// task's distiller, and the memory replaces the buffered examples when the
/// task ends.
pub fn compress_stream(stream_: &mut TaskStream, capacity: u64, cfg: &ClConfig) -> Result<ReservoirBuffer> {
    let num_tasks = stream_.num_tasks();
    let first = stream_.tasks.first().ok_or(Error::Empty("task stream"))?;
    let shape = first.test.image_shape();
    let num_classes = first.test.num_classes;
    if cfg.distill.model.input_shape != shape || cfg.distill.model.num_classes != num_classes {
        return Err(Error::invalid("model does not match the stream"));
    }
    let d: usize = shape.iter().product();
    let mut buffer = ReservoirBuffer::new(capacity, num_tasks, d)?;
    let plan = plan_for(&cfg.distill, buffer.task_share(), cfg.num_bases, cfg.distill.plan.downsample)?;
    let batch = cfg.distill.outer.batch_size;
    let classes: Vec<usize> = (0..num_classes).collect();
    for task in stream_.tasks.iter_mut() {
        let t = task.index as u64;
        let mut dcfg = cfg.distill.clone();
        dcfg.plan = plan.clone();
        dcfg.seed = derive_seed(cfg.distill.seed, "cl-task", t);
        let mut distiller = Distiller::new(dcfg, num_classes)?;
        let mut rng = stream(cfg.distill.seed, "cl-buffer", t);
        let minibatches = task.take_stream(stream_.minibatch)?;
        for (images, labels) in minibatches {
            for (i, &l) in labels.iter().enumerate() {
                buffer.insert(images.data()[i * d..(i + 1) * d].to_vec(), l, &mut rng)?;
            }
            for _ in 0..cfg.steps_per_minibatch {
                let (mut x, mut y) = buffer.sample(batch.saturating_sub(labels.len()), &mut rng);
                x.extend_from_slice(images.data());
                y.extend_from_slice(&labels);
                let n = y.len();
                let real = Tensor::new([n, shape[0], shape[1], shape[2]], x)?;
                distiller.step_on(&real, &y, &classes)?;
            }
        }
        for _ in 0..cfg.final_iterations {
            let (x, y) = buffer.sample(batch, &mut rng);
            let n = y.len();
            if n == 0 {
                break;
            }
            let real = Tensor::new([n, shape[0], shape[1], shape[2]], x)?;
            distiller.step_on(&real, &y, &classes)?;
        }
        let artifact = distiller.artifact(task.test.name.clone(), task.index as u64)?;
        buffer.finish_task(artifact)?;
    }
    Ok(buffer)
}

/// Retrains a fresh model per task from its memory and tests it.
pub fn evaluate_memories(stream_: &TaskStream, buffer: &ReservoirBuffer, cfg: &ClConfig) -> Result<Vec<f64>> {
    stream_
        .tasks
        .iter()
        .zip(buffer.artifacts())
        .map(|(task, art)| retrain_eval(art, &cfg.distill.model, &cfg.eval, &task.test).map(|r| r.mean))
        .collect()
}

/// Float accounting at each boundary, recomputed from the memories' plans.
fn boundary_accounting(buffer: &ReservoirBuffer) -> (Vec<u64>, Vec<u64>) {
    let share = buffer.task_share();
    let mut stored = Vec::new();
    let mut reserved = Vec::new();
    let mut acc = 0;
    for (t, a) in buffer.artifacts().iter().enumerate() {
        acc += a.stored_floats();
        stored.push(acc);
        reserved.push((t as u64 + 1) * share);
    }
    (stored, reserved)
}

pub fn run_compress_then_recall(stream_: &mut TaskStream, capacity: u64, cfg: &ClConfig) -> Result<ClResult> {
    let buffer = compress_stream(stream_, capacity, cfg)?;
    let acc = evaluate_memories(stream_, &buffer, cfg)?;
    let (stored, reserved) = boundary_accounting(&buffer);
    ClResult::new(acc, stored, reserved)
}

/// Sequential fine-tuning of one model over the whole stream in a single
/// pass, one SGD-with-momentum step per minibatch.
pub fn run_online_baseline(
    stream_: &mut TaskStream,
    spec: &ModelSpec,
    lr: f64,
    momentum: f64,
    seed: u64,
) -> Result<ClResult> {
    let mut params = init_params(spec, derive_seed(seed, "online", 0))?;
    let mut velocity: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
    let minibatch = stream_.minibatch;
    for task in stream_.tasks.iter_mut() {
        for (images, labels) in task.take_stream(minibatch)? {
            sgd_step(spec, &mut params, &mut velocity, images, &labels, lr, momentum)?;
        }
    }
    let acc = stream_
        .tasks
        .iter()
        .map(|t| accuracy(spec, &params, &t.test))
        .collect::<Result<Vec<_>>>()?;
    ClResult::new(acc, Vec::new(), Vec::new())
}

fn sgd_step(
    spec: &ModelSpec,
    params: &mut ParamSet,
    velocity: &mut [Tensor],
    images: Tensor,
    labels: &[usize],
    lr: f64,
    momentum: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape);
    let x = tape.constant(images);
    let logits = model_forward(&mut tape, spec, &vars, ModelInput::Images(x))?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let grads = tape.grad_values(loss, &vars)?;
    for ((t, v), g) in params.tensors.iter_mut().zip(velocity.iter_mut()).zip(&grads) {
        for ((ti, vi), gi) in t.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi;
            *ti -= lr * *vi;
        }
    }
    Ok(tape.value(loss).item())
}

pub fn describe_result(r: &ClResult) -> String {
    let per: Vec<String> = r.accuracies.iter().map(|a| format!("{:.4}", a)).collect();
    format!("RA {:.4} over {} tasks [{}]", r.ra, r.accuracies.len(), per.join(", "))
}
