//! The outer loop: learn bases and addressing matrices by descending the
//! loss of a classifier trained on their recall.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::bptt::{meta_gradient, unroll_inner, InnerData, InnerOptConfig};
use crate::data::{augment, sample_transforms, AugmentPolicy, LabeledDataset};
use crate::error::{Error, Result};
use crate::memory::{
    classical_addressing, expand_bases, one_hot_queries, query_matrix, recall_coefficients, AddressingSet,
    BudgetPlan, DistilledArtifact, MemoryBank, Parameterization, Query, FORMAT_VERSION,
};
use crate::models::{init_params, model_forward, ModelInput, ModelKind, ModelSpec, ParamSet};
use crate::rng::{derive_seed, sample_without_replacement, stream, StreamRng};
use crate::tensor::Tensor;

use rand::SeedableRng;

/// Classes sampled per iteration when the dataset has more than this many.
pub const MAX_LABEL_SUBSET: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuterOptConfig {
    pub lr: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub batch_size: usize,
    /// `None`: every class when there are at most 10, else 10.
    pub label_subset: Option<usize>,
}

impl Default for OuterOptConfig {
    fn default() -> Self {
        OuterOptConfig {
            lr: 0.1,
            momentum: 0.5,
            iterations: 2000,
            batch_size: 256,
            label_subset: None,
        }
    }
}

impl OuterOptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("outer iterations must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("outer momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("outer learning rate {} must be >= 0", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("outer batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub model: ModelSpec,
    pub inner: InnerOptConfig,
    pub outer: OuterOptConfig,
    pub plan: BudgetPlan,
    pub parameterization: Parameterization,
    pub augment: Option<AugmentPolicy>,
    pub seed: u64,
}

impl DistillConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.model.validate()?;
        self.inner.validate()?;
        self.outer.validate()?;
        if self.model.num_classes != num_classes {
            return Err(Error::invalid(format!(
                "model has {} classes, data has {}",
                self.model.num_classes, num_classes
            )));
        }
        if self.plan.r < 1 {
            return Err(Error::Budget {
                budget: self.plan.budget_floats,
                bases: self.plan.base_floats,
                per_matrix: (self.plan.query_dim * self.plan.num_bases) as u64,
            });
        }
        if self.plan.total_floats > self.plan.budget_floats {
            return Err(Error::invalid("plan exceeds its own budget"));
        }
        if self.plan.query_dim < num_classes {
            return Err(Error::invalid(format!(
                "query dim {} cannot address {} classes",
                self.plan.query_dim, num_classes
            )));
        }
        if self.parameterization == Parameterization::Classical
            && (self.plan.num_bases != num_classes * self.plan.r || self.plan.query_dim != num_classes)
        {
            return Err(Error::invalid("classical plan must hold r images per class"));
        }
        Ok(())
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub iteration: usize,
    /// Bases, then the addressing matrices when they are learned, then any
    /// encoder parameters.
    pub phi: Vec<Tensor>,
    pub velocity: Vec<Tensor>,
    pub losses: Vec<f64>,
    pub rng: StreamRng,
}

/// `v ← β·v + g`, `φ ← φ − α·v`.
pub fn momentum_update(phi: &mut [Tensor], velocity: &mut [Tensor], grads: &[Tensor], lr: f64, beta: f64) {
    for ((p, v), g) in phi.iter_mut().zip(velocity.iter_mut()).zip(grads) {
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = beta * *vi + gi;
            *pi -= lr * *vi;
        }
    }
}

fn label_subset(num_classes: usize, requested: Option<usize>, rng: &mut StreamRng) -> Vec<usize> {
    let k = requested.unwrap_or(MAX_LABEL_SUBSET).min(num_classes);
    if k == num_classes {
        return (0..num_classes).collect();
    }
    let mut c = sample_without_replacement(num_classes, k, rng);
    c.sort_unstable();
    c
}

fn to_outer_error(iteration: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { .. } => Error::OuterDiverged { iteration },
        other => other,
    }
}

pub struct Distiller {
    cfg: DistillConfig,
    num_classes: usize,
    template: MemoryBank,
    state: RunState,
}

impl Distiller {
    pub fn new(cfg: DistillConfig, num_classes: usize) -> Result<Self> {
        cfg.validate(num_classes)?;
        let shape = cfg.model.input_shape;
        let plan = &cfg.plan;
        let bank = MemoryBank::random(
            plan.num_bases,
            shape,
            plan.downsample,
            &mut stream(cfg.seed, "bases", 0),
        )?;
        let mut phi = vec![bank.bases.clone()];
        if cfg.parameterization == Parameterization::Addressed {
            let a = AddressingSet::random(plan.r, plan.query_dim, plan.num_bases, &mut stream(cfg.seed, "addressing", 0))?;
            phi.push(a.matrices);
        }
        let velocity = phi.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        let state = RunState {
            iteration: 0,
            phi,
            velocity,
            losses: Vec::new(),
            rng: StreamRng::seed_from_u64(derive_seed(cfg.seed, "outer", 0)),
        };
        Ok(Distiller {
            cfg,
            num_classes,
            template: bank,
            state,
        })
    }

    /// Continues from a saved state.
    pub fn resume(cfg: DistillConfig, num_classes: usize, state: RunState) -> Result<Self> {
        let mut d = Distiller::new(cfg, num_classes)?;
        if state.phi.len() != d.state.phi.len()
            || state.velocity.len() != d.state.phi.len()
            || state.phi.iter().zip(&d.state.phi).any(|(a, b)| a.shape() != b.shape())
            || state.velocity.iter().zip(&d.state.phi).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::invalid("saved state does not match the configuration"));
        }
        d.state = state;
        Ok(d)
    }

    pub fn config(&self) -> &DistillConfig {
        &self.cfg
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn bank(&self) -> MemoryBank {
        let mut b = self.template.clone();
        b.bases = self.state.phi[0].clone();
        b
    }

    pub fn addressing(&self) -> Result<AddressingSet> {
        match self.cfg.parameterization {
            Parameterization::Addressed => AddressingSet::new(self.state.phi[1].clone()),
            Parameterization::Classical => classical_addressing(self.num_classes, self.cfg.plan.r),
        }
    }

    /// One outer iteration with a label subset and real batch drawn from
    /// `train`.
    pub fn step(&mut self, train: &LabeledDataset) -> Result<f64> {
        if train.num_classes != self.num_classes {
            return Err(Error::invalid("training data class count changed"));
        }
        let classes = label_subset(self.num_classes, self.cfg.outer.label_subset, &mut self.state.rng);
        let mut keep = vec![false; self.num_classes];
        for &c in &classes {
            keep[c] = true;
        }
        let pool: Vec<usize> = (0..train.len()).filter(|&i| keep[train.labels[i]]).collect();
        if pool.is_empty() {
            return Err(Error::Empty("real examples for the sampled classes"));
        }
        let picks = sample_without_replacement(pool.len(), self.cfg.outer.batch_size, &mut self.state.rng);
        let index: Vec<usize> = picks.iter().map(|&p| pool[p]).collect();
        let images = train.gather(&index);
        let labels = train.gather_labels(&index);
        self.step_on(&images, &labels, &classes)
    }

    /// One outer iteration against a given real batch; `classes` are the
    /// labels recalled for the inner loop.
    pub fn step_on(&mut self, real: &Tensor, real_labels: &[usize], classes: &[usize]) -> Result<f64> {
        let it = self.state.iteration;
        let cfg = &self.cfg;
        let r = cfg.plan.r;
        let mut tape = Tape::new();
        let bases = tape.variable(self.state.phi[0].clone());
        let addressing = match cfg.parameterization {
            Parameterization::Addressed => tape.variable(self.state.phi[1].clone()),
            Parameterization::Classical => {
                tape.constant(classical_addressing(self.num_classes, r)?.matrices)
            }
        };
        let mut phi_vars = vec![bases];
        if cfg.parameterization == Parameterization::Addressed {
            phi_vars.push(addressing);
        }
        let q = query_matrix(&one_hot_queries(classes, cfg.plan.query_dim))?;
        let q = tape.constant(q);
        let syn_labels: Vec<usize> = classes.iter().flat_map(|&c| core::iter::repeat_n(c, r)).collect();
        let j = self.outer_loss(&mut tape, bases, addressing, q, syn_labels, real, real_labels)?;
        let grads = meta_gradient(&mut tape, j, &phi_vars).map_err(to_outer_error(it))?;
        let loss = tape.value(j).item();
        momentum_update(
            &mut self.state.phi,
            &mut self.state.velocity,
            &grads,
            cfg.outer.lr,
            cfg.outer.momentum,
        );
        self.state.losses.push(loss);
        self.state.iteration += 1;
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    fn outer_loss(
        &self,
        tape: &mut Tape,
        bases: Var,
        addressing: Var,
        queries: Var,
        syn_labels: Vec<usize>,
        real: &Tensor,
        real_labels: &[usize],
    ) -> Result<Var> {
        let it = self.state.iteration;
        let cfg = &self.cfg;
        let n_real = real_labels.len();
        let n_syn = syn_labels.len();
        let transforms = cfg
            .augment
            .map(|p| sample_transforms(n_syn.max(n_real), &p, &mut stream(cfg.seed, "augment", it as u64)));
        let coeffs = recall_coefficients(tape, addressing, queries)?;
        let expanded = expand_bases(tape, bases, self.template.base_shape, self.template.downsample)?;
        let factored = ModelInput::Factored { coeffs, bases: expanded };
        let input = if transforms.is_some() || cfg.model.kind == ModelKind::Convnet {
            let mut x = factored.materialize(tape, &cfg.model)?;
            if let Some(t) = &transforms {
                x = augment(tape, x, t)?;
            }
            ModelInput::Images(x)
        } else {
            factored
        };
        let theta0 = init_params(&cfg.model, derive_seed(cfg.seed, "theta", it as u64))?;
        let theta0 = theta0.to_tape_const(tape);
        let data = InnerData { input, labels: syn_labels };
        let mut inner_rng = stream(cfg.seed, "inner", it as u64);
        let unroll = unroll_inner(tape, &cfg.model, &theta0, &data, &cfg.inner, &mut inner_rng)?;
        let [c, h, w] = cfg.model.input_shape;
        if real.len() != n_real * c * h * w {
            return Err(Error::shape(
                "distill",
                format!("real batch {:?} for {} labels of shape {:?}", real.shape(), n_real, cfg.model.input_shape),
            ));
        }
        let mut x = tape.constant(real.clone().reshape([n_real, c, h, w])?);
        if let Some(t) = &transforms {
            x = augment(tape, x, t)?;
        }
        let logits = model_forward(tape, &cfg.model, &unroll.theta, ModelInput::Images(x)).map_err(to_outer_error(it))?;
        let j = tape
            .softmax_cross_entropy(logits, real_labels)
            .map_err(to_outer_error(it))?;
        if !tape.value(j).item().is_finite() {
            return Err(Error::OuterDiverged { iteration: it });
        }
        Ok(j)
    }

    /// Runs `step` until `iterations` have been completed in total.
    pub fn run_until(&mut self, train: &LabeledDataset, iterations: usize) -> Result<()> {
        while self.state.iteration < iterations {
            self.step(train)?;
        }
        Ok(())
    }

    /// The current memory, rounded to storage precision.
    pub fn artifact(&self, dataset: impl Into<String>, fingerprint: u64) -> Result<DistilledArtifact> {
        let mut a = DistilledArtifact {
            version: FORMAT_VERSION,
            bank: self.bank(),
            addressing: self.addressing()?,
            parameterization: self.cfg.parameterization,
            num_classes: self.num_classes,
            dataset: dataset.into(),
            fingerprint,
            budget: self.cfg.plan.clone(),
            config: Some(self.cfg.clone()),
        };
        a.quantize_f32();
        a.validate()?;
        Ok(a)
    }
}

/// Runs the configured number of outer iterations on `train`.
pub fn distill(train: &LabeledDataset, cfg: &DistillConfig) -> Result<(DistilledArtifact, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Empty("training data"));
    }
    if let Some(c) = train.class_indices().iter().position(|v| v.is_empty()) {
        return Err(Error::invalid(format!("class {} has no training examples", c)));
    }
    let mut d = Distiller::new(cfg.clone(), train.num_classes)?;
    d.run_until(train, cfg.outer.iterations)?;
    let art = d.artifact(train.name.clone(), train.fingerprint())?;
    Ok((art, d.state.losses.clone()))
}

/// Result of distilling with image-derived queries.
#[derive(Clone, Debug)]
pub struct ImageQueryOutput {
    pub artifact: DistilledArtifact,
    pub encoder_spec: ModelSpec,
    pub encoder: ParamSet,
    pub losses: Vec<f64>,
}

/// Query vectors for each class: the encoder output averaged over that
/// class's support images. `supports` is `[classes·shots, C, H, W]` in
/// class-major order.
pub fn encode_queries(
    tape: &mut Tape,
    encoder_spec: &ModelSpec,
    encoder: &[Var],
    supports: Var,
    classes: usize,
    shots: usize,
) -> Result<Var> {
    let e = model_forward(tape, encoder_spec, encoder, ModelInput::Images(supports))?;
    let d_y = encoder_spec.num_classes;
    let e = tape.reshape(e, &[classes, shots, d_y])?;
    let e = tape.sum_axis(e, 1)?;
    let e = tape.reshape(e, &[classes, d_y])?;
    tape.scalar_mul(e, 1.0 / shots as f64)
}

/// Recall driven by support images instead of labels. Returns one query per
/// class, labelled with the class.
pub fn image_queries(
    encoder_spec: &ModelSpec,
    encoder: &ParamSet,
    supports: &[Tensor],
    shots: usize,
) -> Result<Vec<Query>> {
    let stacked = Tensor::stack(supports)?;
    let classes = supports.len() / shots.max(1);
    let mut tape = Tape::new();
    let vars = encoder.to_tape_const(&mut tape);
    let x = tape.constant(stacked);
    let q = encode_queries(&mut tape, encoder_spec, &vars, x, classes, shots)?;
    let d_y = encoder_spec.num_classes;
    Ok(tape
        .value(q)
        .data()
        .chunks(d_y)
        .enumerate()
        .map(|(c, v)| Query::new(v.to_vec(), Some(c)))
        .collect())
}

/// Jointly learns bases, addressing matrices and a query encoder. Each
/// iteration draws `shots` support images per sampled class, encodes them
/// into queries, trains the inner model on the recall and scores it on
/// other images of the same classes. `encoder_spec.num_classes` is the
/// query dimension and must equal `cfg.plan.query_dim`.
pub fn distill_with_image_queries(
    train: &LabeledDataset,
    cfg: &DistillConfig,
    encoder_spec: &ModelSpec,
    shots: usize,
) -> Result<ImageQueryOutput> {
    if cfg.parameterization != Parameterization::Addressed {
        return Err(Error::invalid("image queries need learned addressing"));
    }
    if encoder_spec.num_classes != cfg.plan.query_dim {
        return Err(Error::invalid(format!(
            "encoder output {} differs from query dim {}",
            encoder_spec.num_classes, cfg.plan.query_dim
        )));
    }
    if shots == 0 {
        return Err(Error::invalid("shots must be positive"));
    }
    let by_class = train.class_indices();
    if let Some(c) = by_class.iter().position(|v| v.len() <= shots) {
        return Err(Error::invalid(format!(
            "class {} has {} images, needs more than {} shots",
            c,
            by_class[c].len(),
            shots
        )));
    }
    // validation runs against the classifier; the query dim may differ
    let mut check = cfg.clone();
    check.plan.query_dim = check.plan.query_dim.max(train.num_classes);
    check.validate(train.num_classes)?;

    let mut base = Distiller::new(check, train.num_classes)?;
    base.state.phi[1] = AddressingSet::random(
        cfg.plan.r,
        cfg.plan.query_dim,
        cfg.plan.num_bases,
        &mut stream(cfg.seed, "addressing", 0),
    )?
    .matrices;
    base.state.velocity[1] = Tensor::zeros(base.state.phi[1].shape().to_vec());
    let enc0 = init_params(encoder_spec, derive_seed(cfg.seed, "encoder", 0))?;
    let n_enc = enc0.tensors.len();
    for t in &enc0.tensors {
        base.state.phi.push(t.clone());
        base.state.velocity.push(Tensor::zeros(t.shape().to_vec()));
    }

    for it in 0..cfg.outer.iterations {
        let state = &mut base.state;
        let classes = label_subset(train.num_classes, cfg.outer.label_subset, &mut state.rng);
        let mut support_idx = Vec::new();
        let mut rest = Vec::new();
        for &c in &classes {
            let pool = &by_class[c];
            let order = sample_without_replacement(pool.len(), pool.len(), &mut state.rng);
            support_idx.extend(order[..shots].iter().map(|&i| pool[i]));
            rest.extend(order[shots..].iter().map(|&i| pool[i]));
        }
        let picks = sample_without_replacement(rest.len(), cfg.outer.batch_size, &mut state.rng);
        let real_idx: Vec<usize> = picks.iter().map(|&p| rest[p]).collect();
        let real = train.gather(&real_idx);
        let real_labels = train.gather_labels(&real_idx);

        let mut tape = Tape::new();
        let bases = tape.variable(state.phi[0].clone());
        let addressing = tape.variable(state.phi[1].clone());
        let enc: Vec<Var> = state.phi[2..].iter().map(|t| tape.variable(t.clone())).collect();
        let supports = tape.constant(train.gather(&support_idx));
        let q = encode_queries(&mut tape, encoder_spec, &enc, supports, classes.len(), shots)?;
        let r = cfg.plan.r;
        let syn_labels: Vec<usize> = classes.iter().flat_map(|&c| core::iter::repeat_n(c, r)).collect();
        let j = base.outer_loss(&mut tape, bases, addressing, q, syn_labels, &real, &real_labels)?;
        let mut vars = vec![bases, addressing];
        vars.extend(&enc);
        let grads = meta_gradient(&mut tape, j, &vars).map_err(to_outer_error(it))?;
        let loss = tape.value(j).item();
        let state = &mut base.state;
        momentum_update(&mut state.phi, &mut state.velocity, &grads, cfg.outer.lr, cfg.outer.momentum);
        state.losses.push(loss);
        state.iteration += 1;
    }

    let encoder = ParamSet {
        seed: enc0.seed,
        names: enc0.names.clone(),
        tensors: base.state.phi[2..2 + n_enc].to_vec(),
    };
    let mut artifact = DistilledArtifact {
        version: FORMAT_VERSION,
        bank: base.bank(),
        addressing: AddressingSet::new(base.state.phi[1].clone())?,
        parameterization: Parameterization::Addressed,
        num_classes: train.num_classes.min(cfg.plan.query_dim),
        dataset: train.name.clone(),
        fingerprint: train.fingerprint(),
        budget: cfg.plan.clone(),
        config: Some(cfg.clone()),
    };
    artifact.quantize_f32();
    Ok(ImageQueryOutput {
        artifact,
        encoder_spec: encoder_spec.clone(),
        encoder,
        losses: base.state.losses.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bptt::MomentumMode;
    use crate::data::toy_gaussian;
    use crate::memory::{plan_budget, plan_classical};

    fn toy_cfg(iterations: usize, steps: usize) -> (LabeledDataset, DistillConfig) {
        let data = toy_gaussian(2, 16, 200, 4.0, 1).unwrap();
        let plan = plan_budget(1, 2, [1, 4, 4], 2, 4, 2).unwrap();
        let cfg = DistillConfig {
            model: ModelSpec::mlp([1, 4, 4], 2).with_hidden(16),
            inner: InnerOptConfig {
                steps,
                ..InnerOptConfig::default()
            },
            outer: OuterOptConfig {
                iterations,
                batch_size: 64,
                ..OuterOptConfig::default()
            },
            plan,
            parameterization: Parameterization::Addressed,
            augment: None,
            seed: 7,
        };
        (data, cfg)
    }

    #[test]
    fn toy_plan_matches_docs() {
        let (_, cfg) = toy_cfg(1, 1);
        // 32 floats of budget, 4 bases of 4 floats, matrices of 2x4
        assert_eq!((cfg.plan.budget_floats, cfg.plan.base_floats, cfg.plan.r), (32, 16, 2));
    }

    #[test]
    fn loss_trends_down_on_toy_blobs() {
        let (data, mut cfg) = toy_cfg(300, 20);
        cfg.inner.mode = MomentumMode::Full;
        let (art, losses) = distill(&data, &cfg).unwrap();
        let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
        let tail: f64 = losses[losses.len() - 50..].iter().sum::<f64>() / 50.0;
        assert!(tail < head, "{head} -> {tail}");
        assert!(art.stored_floats() <= art.budget.budget_floats);
        assert_eq!((art.bank.num_bases(), art.addressing.count()), (cfg.plan.num_bases, cfg.plan.r));
    }

    #[test]
    fn same_seed_same_artifact() {
        let (data, cfg) = toy_cfg(5, 5);
        let a = distill(&data, &cfg).unwrap();
        let b = distill(&data, &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, cfg) = toy_cfg(20, 5);
        let mut straight = Distiller::new(cfg.clone(), 2).unwrap();
        straight.run_until(&data, 20).unwrap();
        let mut first = Distiller::new(cfg.clone(), 2).unwrap();
        first.run_until(&data, 10).unwrap();
        let saved = first.state().clone();
        drop(first);
        let mut second = Distiller::resume(cfg, 2, saved).unwrap();
        second.run_until(&data, 20).unwrap();
        assert_eq!(straight.state(), second.state());
    }

    #[test]
    fn update_only_touches_phi() {
        let (data, cfg) = toy_cfg(1, 3);
        let mut d = Distiller::new(cfg, 2).unwrap();
        let before = d.state().phi.clone();
        d.step(&data).unwrap();
        assert_eq!(d.state().phi.len(), 2);
        assert_ne!(d.state().phi, before);
    }

    #[test]
    fn outer_rule_is_sgd_momentum() {
        let mut phi = vec![Tensor::full([2], 1.0)];
        let mut vel = vec![Tensor::full([2], 0.5)];
        momentum_update(&mut phi, &mut vel, &[Tensor::full([2], 2.0)], 0.1, 0.5);
        assert_eq!(vel[0].data(), &[2.25, 2.25]);
        assert_eq!(phi[0].data(), &[1.0 - 0.225, 1.0 - 0.225]);
    }

    #[test]
    fn classical_runs_learn_only_bases() {
        let (data, mut cfg) = toy_cfg(3, 3);
        cfg.plan = plan_classical(32, 2, [1, 4, 4], 2).unwrap();
        cfg.parameterization = Parameterization::Classical;
        assert_eq!((cfg.plan.r, cfg.plan.num_bases), (4, 8));
        let (art, _) = distill(&data, &cfg).unwrap();
        assert_eq!(art.stored_floats(), 32);
        for v in art.addressing.matrices.data() {
            assert!(*v == 0.0 || *v == 1.0);
        }
    }

    #[test]
    fn augmented_runs_are_reproducible() {
        let (data, mut cfg) = toy_cfg(3, 3);
        cfg.augment = Some(AugmentPolicy::default());
        let a = distill(&data, &cfg).unwrap();
        let b = distill(&data, &cfg).unwrap();
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn infeasible_plan_is_rejected() {
        let (data, mut cfg) = toy_cfg(3, 3);
        cfg.plan.r = 0;
        assert!(matches!(distill(&data, &cfg), Err(Error::Budget { .. })));
    }

    #[test]
    fn image_queries_train_the_encoder() {
        let (data, mut cfg) = toy_cfg(2, 3);
        cfg.plan = plan_budget(2, 2, [1, 4, 4], 4, 4, 2).unwrap();
        let enc = ModelSpec::mlp([1, 4, 4], 4).with_hidden(8);
        let out = distill_with_image_queries(&data, &cfg, &enc, 1).unwrap();
        let init = init_params(&enc, derive_seed(cfg.seed, "encoder", 0)).unwrap();
        assert_ne!(out.encoder.tensors, init.tensors);
        let supports: Vec<Tensor> = (0..2)
            .map(|c| Tensor::new([1, 4, 4], data.image(c).to_vec()).unwrap())
            .collect();
        let q = image_queries(&enc, &out.encoder, &supports, 1).unwrap();
        let imgs = crate::memory::recall(&out.artifact.bank, &out.artifact.addressing, &q[0]).unwrap();
        assert_eq!(imgs.len(), cfg.plan.r);
        assert!(imgs.iter().all(|t| t.shape() == [1, 4, 4]));
        assert!(distill_with_image_queries(&data, &cfg, &enc, 500).is_err());
    }
}
