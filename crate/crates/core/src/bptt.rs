//! Differentiable inner training: unrolled SGD with momentum.
//!
//! `m_t = β·m_{t-1} + ∇L(θ_{t-1})`, `θ_t = θ_{t-1} − α·m_t`, with every
//! gradient built as tape nodes so the outer loss can be differentiated
//! through all steps.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{model_forward, ModelInput, ModelSpec};
use crate::rng::{sample_without_replacement, StreamRng};
use crate::tensor::Tensor;

/// Above this many examples the inner loop samples minibatches.
pub const FULL_BATCH_LIMIT: usize = 512;
pub const DEFAULT_MINIBATCH: usize = 256;

/// How the momentum buffer is treated by the backward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentumMode {
    /// No momentum at all: `m_t = g_t`.
    None,
    /// Same forward values as `Full`, but `m_{t-1}` is detached, so
    /// meta-gradients flow only through the current step's gradient.
    ForwardOnly,
    Full,
}

impl MomentumMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MomentumMode::None => "none",
            MomentumMode::ForwardOnly => "forward",
            MomentumMode::Full => "full",
        }
    }
}

impl FromStr for MomentumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MomentumMode::None),
            "forward" | "forward_only" => Ok(MomentumMode::ForwardOnly),
            "full" => Ok(MomentumMode::Full),
            other => Err(Error::invalid(format!("unknown momentum mode {:?}", other))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InnerOptConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// `None` picks full batch up to [`FULL_BATCH_LIMIT`] examples and
    /// [`DEFAULT_MINIBATCH`] beyond.
    pub batch_size: Option<usize>,
    pub mode: MomentumMode,
}

impl Default for InnerOptConfig {
    fn default() -> Self {
        InnerOptConfig {
            steps: 100,
            lr: 0.01,
            momentum: 0.9,
            batch_size: None,
            mode: MomentumMode::Full,
        }
    }
}

impl InnerOptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("inner learning rate {} must be >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("inner momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::invalid("inner batch size must be positive"));
        }
        Ok(())
    }

    /// Minibatch size for `n` examples, `None` for full batch.
    pub fn minibatch(&self, n: usize) -> Option<usize> {
        match self.batch_size {
            Some(b) if b < n => Some(b),
            Some(_) => None,
            None if n <= FULL_BATCH_LIMIT => None,
            None => Some(DEFAULT_MINIBATCH),
        }
    }
}

/// The inner training set as tape nodes.
#[derive(Clone, Debug)]
pub struct InnerData {
    pub input: ModelInput,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Unroll {
    pub theta: Vec<Var>,
    pub momentum: Vec<Var>,
    pub losses: Vec<f64>,
}

/// Runs `cfg.steps` differentiable SGD-momentum steps from `theta0`.
pub fn unroll_inner(
    tape: &mut Tape,
    spec: &ModelSpec,
    theta0: &[Var],
    data: &InnerData,
    cfg: &InnerOptConfig,
    rng: &mut StreamRng,
) -> Result<Unroll> {
    cfg.validate()?;
    let n = data.labels.len();
    if n == 0 {
        return Err(Error::Empty("inner training set"));
    }
    if data.input.batch_size(tape) != n {
        return Err(Error::shape(
            "unroll_inner",
            format!("{} inputs but {} labels", data.input.batch_size(tape), n),
        ));
    }
    let beta = match cfg.mode {
        MomentumMode::None => 0.0,
        _ => cfg.momentum,
    };
    // gradients are taken with respect to θ, so constant starting points
    // become leaves of their own
    let mut theta: Vec<Var> = theta0
        .iter()
        .map(|&v| {
            if tape.requires_grad(v) {
                v
            } else {
                let t = tape.value(v).clone();
                tape.variable(t)
            }
        })
        .collect();
    let mut momentum: Vec<Var> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let minibatch = cfg.minibatch(n);
    for step in 1..=cfg.steps {
        let (input, labels) = match minibatch {
            Some(b) => {
                let idx = sample_without_replacement(n, b, rng);
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                (data.input.select(tape, &idx)?, labels)
            }
            None => (data.input, data.labels.clone()),
        };
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } => Error::InnerDiverged { step },
            other => other,
        };
        let logits = model_forward(tape, spec, &theta, input).map_err(diverged)?;
        let loss = tape.softmax_cross_entropy(logits, &labels).map_err(diverged)?;
        losses.push(tape.value(loss).item());
        let grads = tape.backward(loss, &theta, true).map_err(diverged)?;
        let mut next_theta = Vec::with_capacity(theta.len());
        let mut next_m = Vec::with_capacity(theta.len());
        for (j, &g) in grads.iter().enumerate() {
            let m = if momentum.is_empty() || matches!(cfg.mode, MomentumMode::None) {
                g
            } else {
                let prev = match cfg.mode {
                    MomentumMode::ForwardOnly => tape.detach(momentum[j])?,
                    _ => momentum[j],
                };
                let decayed = tape.scalar_mul(prev, beta).map_err(diverged)?;
                tape.add(decayed, g).map_err(diverged)?
            };
            let delta = tape.scalar_mul(m, cfg.lr).map_err(diverged)?;
            next_theta.push(tape.sub(theta[j], delta).map_err(diverged)?);
            next_m.push(m);
        }
        theta = next_theta;
        momentum = next_m;
    }
    Ok(Unroll { theta, momentum, losses })
}

/// Gradients of the outer loss `j` with respect to the distilled
/// parameters, through everything recorded on the tape.
pub fn meta_gradient(tape: &mut Tape, j: Var, phi: &[Var]) -> Result<Vec<Tensor>> {
    if !tape.try_value(j)?.is_finite() {
        return Err(Error::NonFinite { op: "meta_gradient" });
    }
    tape.grad_values(j, phi)
}
