//! Classifiers trained inside the unrolled loop.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{kaiming_uniform, stream};
use crate::tensor::Tensor;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Flatten followed by one affine layer.
    Linear,
    /// Flatten, linear, relu, linear.
    Mlp,
    /// `depth` blocks of conv3x3, instance norm, relu, 2x2 average pool, then
    /// a linear head.
    Convnet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub hidden_width: usize,
    pub depth: usize,
}

impl ModelSpec {
    pub fn linear(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            input_shape,
            num_classes,
            hidden_width: 0,
            depth: 0,
        }
    }

    pub fn mlp(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_shape,
            num_classes,
            hidden_width: 256,
            depth: 1,
        }
    }

    pub fn convnet(input_shape: [usize; 3], num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Convnet,
            input_shape,
            num_classes,
            hidden_width: 128,
            depth: 3,
        }
    }

    pub fn with_hidden(mut self, width: usize) -> Self {
        self.hidden_width = width;
        self
    }

    pub fn with_depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    /// Spatial size after the conv blocks.
    pub fn feature_plane(&self) -> [usize; 2] {
        let [_, mut h, mut w] = self.input_shape;
        for _ in 0..self.depth {
            h /= 2;
            w /= 2;
        }
        [h, w]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::invalid(format!("num_classes must be at least 2, got {}", self.num_classes)));
        }
        if self.input_dim() == 0 {
            return Err(Error::invalid("input shape has a zero dimension"));
        }
        match self.kind {
            ModelKind::Linear => {}
            ModelKind::Mlp => {
                if self.hidden_width == 0 {
                    return Err(Error::invalid("mlp hidden width must be positive"));
                }
            }
            ModelKind::Convnet => {
                if self.hidden_width == 0 || self.depth == 0 {
                    return Err(Error::invalid("convnet needs positive width and depth"));
                }
                let [h, w] = self.feature_plane();
                if h == 0 || w == 0 {
                    return Err(Error::invalid(format!(
                        "input {}x{} does not survive {} halvings",
                        self.input_shape[1], self.input_shape[2], self.depth
                    )));
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter, in forward order. A fan-in
    /// of zero marks a bias.
    pub fn param_layout(&self) -> Vec<(String, Vec<usize>, usize)> {
        let d = self.input_dim();
        let c = self.num_classes;
        let h = self.hidden_width;
        match self.kind {
            ModelKind::Linear => vec![
                ("fc.w".to_string(), vec![d, c], d),
                ("fc.b".to_string(), vec![c], 0),
            ],
            ModelKind::Mlp => vec![
                ("fc1.w".to_string(), vec![d, h], d),
                ("fc1.b".to_string(), vec![h], 0),
                ("fc2.w".to_string(), vec![h, c], h),
                ("fc2.b".to_string(), vec![c], 0),
            ],
            ModelKind::Convnet => {
                let mut out = Vec::new();
                let mut cin = self.input_shape[0];
                for i in 0..self.depth {
                    out.push((format!("conv{}.w", i), vec![h, cin, 3, 3], cin * 9));
                    cin = h;
                }
                let [fh, fw] = self.feature_plane();
                let feat = h * fh * fw;
                out.push(("head.w".to_string(), vec![feat, c], feat));
                out.push(("head.b".to_string(), vec![c], 0));
                out
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.param_layout().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Model parameters in the order of [`ModelSpec::param_layout`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn zeros_like(spec: &ModelSpec) -> Self {
        let layout = spec.param_layout();
        ParamSet {
            seed: 0,
            names: layout.iter().map(|(n, _, _)| n.clone()).collect(),
            tensors: layout.into_iter().map(|(_, s, _)| Tensor::zeros(s)).collect(),
        }
    }

    /// Puts every tensor on the tape as a differentiable leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.variable(t.clone())).collect()
    }

    pub fn to_tape_const(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    pub fn from_tape(&self, tape: &Tape, vars: &[Var]) -> Self {
        ParamSet {
            seed: self.seed,
            names: self.names.clone(),
            tensors: vars.iter().map(|&v| tape.value(v).clone()).collect(),
        }
    }
}

/// Kaiming-uniform weights, zero biases. Each parameter draws from its own
/// stream so the layout of one layer never changes another's values.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParamSet> {
    spec.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (layer, (name, shape, fan_in)) in spec.param_layout().into_iter().enumerate() {
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            let mut rng = stream(seed, "init", layer as u64);
            kaiming_uniform(&shape, fan_in, &mut rng)
        };
        names.push(name);
        tensors.push(t);
    }
    Ok(ParamSet { seed, names, tensors })
}

/// What the first layer sees.
#[derive(Clone, Copy, Debug)]
pub enum ModelInput {
    /// `[batch, C, H, W]`, or `[batch, d]` for the flat models.
    Images(Var),
    /// Images given as `coeffs · bases` with `coeffs: [batch, K]` and
    /// `bases: [K, d]`. Flat models multiply the bases into the first layer
    /// instead of materializing the images, which is the same function at a
    /// cost that scales with `K` rather than the batch.
    Factored { coeffs: Var, bases: Var },
}

impl ModelInput {
    pub fn batch_size(&self, tape: &Tape) -> usize {
        match *self {
            ModelInput::Images(x) => tape.shape(x)[0],
            ModelInput::Factored { coeffs, .. } => tape.shape(coeffs)[0],
        }
    }

    pub fn materialize(&self, tape: &mut Tape, spec: &ModelSpec) -> Result<Var> {
        let [c, h, w] = spec.input_shape;
        match *self {
            ModelInput::Images(x) => {
                let n = tape.try_value(x)?.shape()[0];
                tape.reshape(x, &[n, c, h, w])
            }
            ModelInput::Factored { coeffs, bases } => {
                let x = tape.matmul(coeffs, bases)?;
                let n = tape.shape(x)[0];
                tape.reshape(x, &[n, c, h, w])
            }
        }
    }

    /// Selects rows of the batch.
    pub fn select(&self, tape: &mut Tape, index: &[usize]) -> Result<Self> {
        Ok(match *self {
            ModelInput::Images(x) => ModelInput::Images(tape.index_select(x, index)?),
            ModelInput::Factored { coeffs, bases } => ModelInput::Factored {
                coeffs: tape.index_select(coeffs, index)?,
                bases,
            },
        })
    }
}

fn first_affine(tape: &mut Tape, spec: &ModelSpec, input: ModelInput, w: Var, b: Var) -> Result<Var> {
    let d = spec.input_dim();
    let y = match input {
        ModelInput::Images(x) => {
            let s = tape.try_value(x)?.shape().to_vec();
            let n = s[0];
            if s.iter().skip(1).product::<usize>() != d {
                return Err(Error::shape(
                    "model_forward",
                    format!("batch {:?} does not match input shape {:?}", s, spec.input_shape),
                ));
            }
            let x = tape.reshape(x, &[n, d])?;
            tape.matmul(x, w)?
        }
        ModelInput::Factored { coeffs, bases } => {
            let bs = tape.try_value(bases)?.shape().to_vec();
            if bs.len() != 2 || bs[1] != d {
                return Err(Error::shape(
                    "model_forward",
                    format!("bases {:?} do not match input dim {}", bs, d),
                ));
            }
            let proj = tape.matmul(bases, w)?;
            tape.matmul(coeffs, proj)?
        }
    };
    tape.add_row_bias(y, b)
}

/// Logits `[batch, num_classes]`. No softmax; the loss owns it.
pub fn model_forward(tape: &mut Tape, spec: &ModelSpec, params: &[Var], input: ModelInput) -> Result<Var> {
    let expected = spec.param_layout().len();
    if params.len() != expected {
        return Err(Error::shape(
            "model_forward",
            format!("expected {} parameter tensors, got {}", expected, params.len()),
        ));
    }
    match spec.kind {
        ModelKind::Linear => first_affine(tape, spec, input, params[0], params[1]),
        ModelKind::Mlp => {
            let h = first_affine(tape, spec, input, params[0], params[1])?;
            let h = tape.relu(h)?;
            tape.linear(h, params[2], params[3])
        }
        ModelKind::Convnet => {
            let mut x = input.materialize(tape, spec)?;
            for &w in &params[..spec.depth] {
                x = tape.conv2d(x, w)?;
                x = tape.instance_norm(x, INSTANCE_NORM_EPS)?;
                x = tape.relu(x)?;
                x = tape.avg_pool2d(x)?;
            }
            let x = tape.flatten(x)?;
            tape.linear(x, params[spec.depth], params[spec.depth + 1])
        }
    }
}
