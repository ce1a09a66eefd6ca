use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl Tape {
    /// Gradients of the scalar `loss` with respect to each node in `wrt`.
    ///
    /// With `create_graph` the gradient nodes are built from differentiable
    /// ops and can be differentiated again; otherwise they are constants.
    /// A `wrt` node that does not influence `loss` gets a zero gradient.
    pub fn backward(&mut self, loss: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        self.check(loss)?;
        for &w in wrt {
            self.check(w)?;
        }
        let loss_shape = self.shape(loss).to_vec();
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss { shape: loss_shape });
        }
        let prev = self.grad_enabled;
        self.grad_enabled = create_graph;
        let out = self.backward_inner(loss, wrt, &loss_shape);
        self.grad_enabled = prev;
        out
    }

    /// Gradient values, leaving the tape as it was before the call.
    pub fn grad_values(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.len();
        let grads = self.backward(loss, wrt, false)?;
        let values = grads.iter().map(|&g| self.value(g).clone()).collect();
        self.truncate(mark);
        Ok(values)
    }

    fn backward_inner(&mut self, loss: Var, wrt: &[Var], loss_shape: &[usize]) -> Result<Vec<Var>> {
        let lo = wrt.iter().map(|v| v.0).min().unwrap_or(loss.0).min(loss.0);
        let span = loss.0 - lo + 1;

        // reaches[i]: node lo + i depends on some wrt node through
        // differentiable ops.
        let mut reaches = vec![false; span];
        for &w in wrt {
            if w.0 <= loss.0 {
                reaches[w.0 - lo] = true;
            }
        }
        for i in 0..span {
            if reaches[i] {
                continue;
            }
            let node = &self.nodes[lo + i];
            if !node.requires_grad {
                continue;
            }
            reaches[i] = node
                .op
                .inputs()
                .iter()
                .any(|v| v.0 >= lo && reaches[v.0 - lo]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; span];
        if reaches[span - 1] {
            let seed = self.constant(Tensor::full(loss_shape.to_vec(), 1.0));
            grads[span - 1] = Some(seed);
        }

        for i in (0..span).rev() {
            let Some(g) = grads[i] else { continue };
            if !self.nodes[lo + i].requires_grad {
                continue;
            }
            let id = Var(lo + i);
            let op = self.nodes[lo + i].op.clone();
            let needs = |v: Var| v.0 >= lo && reaches[v.0 - lo];
            for (input, contrib) in self.vjp(id, &op, g, &needs)? {
                let slot = &mut grads[input.0 - lo];
                *slot = Some(match *slot {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|&w| match (w.0 <= loss.0).then(|| grads[w.0 - lo]).flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.shape(w).to_vec();
                    Ok(self.constant(Tensor::zeros(shape)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of one node, only for inputs where `needs`
    /// holds.
    fn vjp(&mut self, id: Var, op: &Op, g: Var, needs: &dyn Fn(Var) -> bool) -> Result<Vec<(Var, Var)>> {
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb } => {
                if needs(a) {
                    let da = if ta {
                        self.matmul_t(b, g, tb, true)?
                    } else {
                        self.matmul_t(g, b, false, !tb)?
                    };
                    out.push((a, da));
                }
                if needs(b) {
                    let db = if tb {
                        self.matmul_t(g, a, true, ta)?
                    } else {
                        self.matmul_t(a, g, !ta, false)?
                    };
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, g));
                }
            }
            &Op::Sub(a, b) => {
                if needs(a) {
                    out.push((a, g));
                }
                if needs(b) {
                    out.push((b, self.scalar_mul(g, -1.0)?));
                }
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if needs(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            &Op::ScalarMul(x, c) => {
                if needs(x) {
                    out.push((x, self.scalar_mul(g, c)?));
                }
            }
            &Op::AddScalar(x, _) => {
                if needs(x) {
                    out.push((x, g));
                }
            }
            &Op::ScaleBy(x, s) => {
                if needs(x) {
                    out.push((x, self.scale_by(g, s)?));
                }
                if needs(s) {
                    let prod = self.mul(g, x)?;
                    let total = self.sum_all(prod)?;
                    let shape = self.shape(s).to_vec();
                    out.push((s, self.reshape(total, &shape)?));
                }
            }
            &Op::Relu(x) => {
                if needs(x) {
                    let mask = Tensor::from_fn(self.shape(x).to_vec(), |i| {
                        if self.value(x).data()[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    });
                    let mask = self.constant(mask);
                    out.push((x, self.mul(g, mask)?));
                }
            }
            &Op::Exp(x) => {
                if needs(x) {
                    out.push((x, self.mul(g, id)?));
                }
            }
            &Op::Ln(x) => {
                if needs(x) {
                    let inv = self.powf(x, -1.0)?;
                    out.push((x, self.mul(g, inv)?));
                }
            }
            &Op::Powf(x, p) => {
                if needs(x) {
                    let d = self.powf(x, p - 1.0)?;
                    let d = self.scalar_mul(d, p)?;
                    out.push((x, self.mul(g, d)?));
                }
            }
            &Op::SumAxis { x, axis } => {
                if needs(x) {
                    let size = self.shape(x)[axis];
                    out.push((x, self.broadcast_axis(g, axis, size)?));
                }
            }
            &Op::BroadcastAxis { x, axis, .. } => {
                if needs(x) {
                    out.push((x, self.sum_axis(g, axis)?));
                }
            }
            &Op::SumAll(x) => {
                if needs(x) {
                    let shape = self.shape(x).to_vec();
                    out.push((x, self.expand(g, &shape)?));
                }
            }
            Op::Expand { x, .. } => {
                if needs(*x) {
                    let total = self.sum_all(g)?;
                    let shape = self.shape(*x).to_vec();
                    out.push((*x, self.reshape(total, &shape)?));
                }
            }
            Op::Reshape { x, .. } => {
                if needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    out.push((*x, self.reshape(g, &shape)?));
                }
            }
            &Op::SwapLeading(x) => {
                if needs(x) {
                    out.push((x, self.swap_leading(g)?));
                }
            }
            Op::IndexSelect { x, index } => {
                if needs(*x) {
                    let rows = self.shape(*x)[0];
                    out.push((*x, self.apply(Op::ScatterAdd { x: g, index: index.clone(), rows })?));
                }
            }
            Op::ScatterAdd { x, index, .. } => {
                if needs(*x) {
                    out.push((*x, self.apply(Op::IndexSelect { x: g, index: index.clone() })?));
                }
            }
            Op::Concat(xs) => {
                let mut start = 0;
                for &x in xs {
                    let rows = self.shape(x)[0];
                    if needs(x) {
                        let index: Arc<[usize]> = (start..start + rows).collect();
                        out.push((x, self.apply(Op::IndexSelect { x: g, index })?));
                    }
                    start += rows;
                }
            }
            &Op::Conv2d { x, w } => {
                if needs(x) {
                    let wt = self.apply(Op::ConvFlipT(w))?;
                    out.push((x, self.conv2d(g, wt)?));
                }
                if needs(w) {
                    out.push((w, self.apply(Op::Conv2dWeightGrad { x, g })?));
                }
            }
            &Op::Conv2dWeightGrad { x, g: gout } => {
                // value = Σ_n gout_n ⊗ patches(x_n); upstream `g` is kernel shaped
                if needs(x) {
                    let gt = self.apply(Op::ConvFlipT(g))?;
                    out.push((x, self.conv2d(gout, gt)?));
                }
                if needs(gout) {
                    out.push((gout, self.conv2d(x, g)?));
                }
            }
            &Op::ConvFlipT(w) => {
                if needs(w) {
                    out.push((w, self.apply(Op::ConvFlipT(g))?));
                }
            }
            Op::ApplyMap { x, maps, transpose } => {
                if needs(*x) {
                    let adj = self.apply(Op::ApplyMap {
                        x: g,
                        maps: maps.clone(),
                        transpose: !transpose,
                    })?;
                    out.push((*x, adj));
                }
            }
            &Op::Softmax(x) => {
                if needs(x) {
                    // dx = y ⊙ (g − rowsum(g ⊙ y))
                    let cols = self.shape(x)[1];
                    let gy = self.mul(g, id)?;
                    let dot = self.sum_axis(gy, 1)?;
                    let dot = self.broadcast_axis(dot, 1, cols)?;
                    let diff = self.sub(g, dot)?;
                    out.push((x, self.mul(id, diff)?));
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let logits = *logits;
                if needs(logits) {
                    let shape = self.shape(logits).to_vec();
                    let cols = shape[1];
                    let onehot = Tensor::from_fn(shape, |i| if labels[i / cols] == i % cols { 1.0 } else { 0.0 });
                    let onehot = self.constant(onehot);
                    let p = self.softmax(logits)?;
                    let diff = self.sub(p, onehot)?;
                    let diff = self.scalar_mul(diff, 1.0 / labels.len() as f64)?;
                    out.push((logits, self.scale_by(diff, g)?));
                }
            }
        }
        Ok(out)
    }
}
