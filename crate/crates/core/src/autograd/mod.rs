//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs were recorded earlier, so the
//! tape is topologically ordered by construction and `backward` simply
//! walks it in reverse. Gradients reaching a tensor through several uses
//! are summed, which is what makes weight sharing work.

pub mod conv;
pub mod gradcheck;
mod norm;
mod pool;
mod upsample;

pub use conv::ConvSpec;
pub use gradcheck::{grad_check, GradCheckReport};

use crate::error::{Error, Result};
use crate::tensor::{same_shape, Scalar, Tensor};
use crate::train::loss as dice;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: conv::ConvGeom,
    },
    MaxPool2x2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    InstanceNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        cache: norm::NormCache<T>,
    },
    Sigmoid(Var),
    Relu(Var),
    Add(Var, Var),
    Mul(Var, Var),
    ConcatChannels(Vec<Var>),
    Sum(Var),
    Dice {
        prob: Var,
        target: Vec<T>,
        stats: Vec<dice::DiceStats<T>>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (parameter or probed input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// True when every recorded node only references earlier nodes.
    pub fn is_topologically_ordered(&self) -> bool {
        self.nodes
            .iter()
            .enumerate()
            .all(|(i, n)| op_inputs(&n.op).iter().all(|v| v.0 < i))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = conv::geometry(
            self.value(input).shape(),
            self.value(weight).shape(),
            bias.map(|b| self.value(b).shape()),
            spec,
        )?;
        let out = conv::forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor::from_vec(vec![geom.batch, spec.out_channels, geom.ho, geom.wo], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    pub fn maxpool2d(&mut self, input: Var) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let (out, argmax) = pool::maxpool2x2(self.value(input).data(), dims)?;
        let [b, c, h, w] = dims;
        let value = Tensor::from_vec(vec![b, c, h / 2, w / 2], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::MaxPool2x2 { input, argmax }, rg))
    }

    pub fn bilinear_upsample(&mut self, input: Var, scale: usize) -> Result<Var> {
        if scale < 2 {
            return Err(Error::Shape(format!("upsample scale must be ≥ 2, got {scale}")));
        }
        let dims = self.value(input).dims4()?;
        let [b, c, h, w] = dims;
        if h == 0 || w == 0 {
            return Err(Error::Shape("cannot upsample an empty plane".into()));
        }
        let out = upsample::forward(self.value(input).data(), dims, scale);
        let value = Tensor::from_vec(vec![b, c, h * scale, w * scale], out)?;
        let rg = self.requires_grad(input);
        Ok(self.push(value, Op::Upsample { input, scale }, rg))
    }

    pub fn instance_norm(&mut self, input: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let dims = self.value(input).dims4()?;
        let c = dims[1];
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            if self.value(p).shape() != [c] {
                return Err(Error::Shape(format!(
                    "instance norm {name} has shape {:?}, expected [{c}]",
                    self.value(p).shape()
                )));
            }
        }
        let (out, cache) = norm::forward(
            self.value(input).data(),
            dims,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        )?;
        let value = Tensor::from_vec(dims.to_vec(), out)?;
        let rg = self.any_grad(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                cache,
            },
            rg,
        ))
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = self.value(input).map(stable_sigmoid);
        let rg = self.requires_grad(input);
        self.push(value, Op::Sigmoid(input), rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let rg = self.requires_grad(input);
        self.push(value, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a).shape(), self.value(b).shape(), "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.value(a).shape(), self.value(b).shape(), "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.value(a).shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Concatenates 4-D tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let [b, _, h, w] = self.value(*first).dims4()?;
        let mut total_c = 0;
        for v in inputs {
            let [bb, c, hh, ww] = self.value(*v).dims4()?;
            if (bb, hh, ww) != (b, h, w) {
                return Err(Error::Shape(format!(
                    "concat: [{bb}, _, {hh}, {ww}] does not match [{b}, _, {h}, {w}]"
                )));
            }
            total_c += c;
        }
        let mut data = Vec::with_capacity(b * total_c * h * w);
        for bi in 0..b {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[1] * h * w;
                data.extend_from_slice(&t.data()[bi * len..(bi + 1) * len]);
            }
        }
        let value = Tensor::from_vec(vec![b, total_c, h, w], data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::ConcatChannels(inputs.to_vec()), rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(value, Op::Sum(input), rg)
    }

    /// Batch-mean soft Dice loss of probabilities `prob` against a binary target.
    pub fn dice_loss(&mut self, prob: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(prob);
        let [b, ..] = p.dims4()?;
        same_shape(p.shape(), target.shape(), "dice_loss")?;
        let (loss, stats) = dice::dice_forward(p.data(), target.data(), b)?;
        let rg = self.requires_grad(prob);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                prob,
                target: target.data().to_vec(),
                stats,
            },
            rg,
        ))
    }

    /// Gradients of a scalar `loss` with respect to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Autograd(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_from(loss, Tensor::ones(self.value(loss).shape()))
    }

    /// Vector-Jacobian product: propagates `seed` (same shape as `output`) to the leaves.
    pub fn backward_from(&self, output: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        same_shape(self.value(output).shape(), seed.shape(), "backward seed")?;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.into_data());

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }

        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                if matches!(n.op, Op::Leaf) && n.requires_grad {
                    grads[i].take()
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients {
            grads: leaves,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let cg = conv::backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    geom,
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                if let Some(dx) = cg.dx {
                    accumulate(grads, *input, dx);
                }
                if let Some(dw) = cg.dw {
                    accumulate(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.db) {
                    accumulate(grads, *b, db);
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                if needs(*input) {
                    let dx = pool::maxpool2x2_backward(g, argmax, self.value(*input).numel());
                    accumulate(grads, *input, dx);
                }
            }
            Op::Upsample { input, scale } => {
                if needs(*input) {
                    let dims = self.value(*input).dims4().expect("recorded as 4-D");
                    accumulate(grads, *input, upsample::backward(g, dims, *scale));
                }
            }
            Op::InstanceNorm {
                input,
                gamma,
                beta,
                cache,
            } => {
                let dims = self.value(*input).dims4().expect("recorded as 4-D");
                let (dx, dgamma, dbeta) =
                    norm::backward(g, dims, self.value(*gamma).data(), cache);
                if needs(*input) {
                    accumulate(grads, *input, dx);
                }
                if needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Sigmoid(input) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect();
                accumulate(grads, *input, dx);
            }
            Op::Relu(input) => {
                let y = node.value.data();
                let dx = g
                    .iter()
                    .zip(y)
                    .map(|(&g, &y)| if y > T::zero() { g } else { T::zero() })
                    .collect();
                accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        accumulate(grads, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    accumulate(grads, *a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::ConcatChannels(inputs) => {
                let [b, _, h, w] = node.value.dims4().expect("recorded as 4-D");
                let total = node.value.numel() / b;
                let mut offset = 0;
                for v in inputs {
                    let len = self.value(*v).shape()[1] * h * w;
                    if needs(*v) {
                        let mut dx = Vec::with_capacity(b * len);
                        for bi in 0..b {
                            let start = bi * total + offset;
                            dx.extend_from_slice(&g[start..start + len]);
                        }
                        accumulate(grads, *v, dx);
                    }
                    offset += len;
                }
            }
            Op::Sum(input) => {
                let n = self.value(*input).numel();
                accumulate(grads, *input, vec![g[0]; n]);
            }
            Op::Dice {
                prob,
                target,
                stats,
            } => {
                let p = self.value(*prob).data();
                let mut dx = dice::dice_backward(p, target, stats);
                dx.iter_mut().for_each(|v| *v *= g[0]);
                accumulate(grads, *prob, dx);
            }
        }
    }
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Conv2d {
            input,
            weight,
            bias,
            ..
        } => {
            let mut v = vec![*input, *weight];
            v.extend(bias);
            v
        }
        Op::MaxPool2x2 { input, .. } | Op::Upsample { input, .. } => vec![*input],
        Op::InstanceNorm {
            input, gamma, beta, ..
        } => vec![*input, *gamma, *beta],
        Op::Sigmoid(a) | Op::Relu(a) | Op::Sum(a) => vec![*a],
        Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
        Op::ConcatChannels(v) => v.clone(),
        Op::Dice { prob, .. } => vec![*prob],
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Branch on sign so `exp` never overflows.
pub fn stable_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Whether any gradient path reached this leaf.
    pub fn reached(&self, v: Var) -> bool {
        self.grads.get(v.0).is_some_and(|g| g.is_some())
    }

    /// Gradient of a differentiable leaf; zeros if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Tensor<T> {
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::from_vec(self.shapes[v.0].clone(), g.clone()).expect("shape recorded"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Tensor<T> {
        match self.grads.get_mut(v.0).and_then(|g| g.take()) {
            Some(g) => Tensor::from_vec(self.shapes[v.0].clone(), g).expect("shape recorded"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}
