//! Wengert tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! nodes once, from the loss back to index 0, so the tape order is the
//! topological order. Layers with hand-derived gradients (TSBN, LIF, spike
//! thresholds, cross-entropy) plug in through [`BackwardRule`].

use super::ops;
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a custom backward rule can see.
pub struct BackwardCtx<'a, S: Scalar> {
    inputs: Vec<&'a Tensor<S>>,
    output: &'a Tensor<S>,
    grad_output: &'a [S],
}

impl<'a, S: Scalar> BackwardCtx<'a, S> {
    pub fn input(&self, i: usize) -> &'a Tensor<S> {
        self.inputs[i]
    }

    pub fn output(&self) -> &'a Tensor<S> {
        self.output
    }

    pub fn grad_output(&self) -> &'a [S] {
        self.grad_output
    }
}

/// Vector-Jacobian product for an op recorded with [`Tape::custom`].
///
/// Returns one gradient per input, in input order; `None` for inputs that
/// are not differentiable.
pub trait BackwardRule<S: Scalar> {
    fn backward(&self, ctx: &BackwardCtx<'_, S>) -> Result<Vec<Option<Vec<S>>>>;
}

enum Op<S: Scalar> {
    Leaf,
    Detached,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Sum(Var, Vec<usize>),
    Mean(Var, Vec<usize>),
    Variance(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    ConvDw(Var, Var),
    Conv(Var, Var, usize),
    Custom(Vec<Var>, Box<dyn BackwardRule<S>>),
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    recording: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates: nothing is recorded for backward.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor; it collects gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        let needs_grad = self.recording && value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Detached };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::sub(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = ops::scale(self.value(a), s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = ops::map(self.value(a), |x| S::cast(x.wide().exp()));
        v.check_finite()?;
        Ok(self.push(v, Op::Exp(a), &[a]))
    }

    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::sum_axes(self.value(a), axes)?;
        Ok(self.push(v, Op::Sum(a, axes.to_vec()), &[a]))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.sum(a, &axes).expect("all axes are valid")
    }

    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::mean_axes(self.value(a), axes)?;
        Ok(self.push(v, Op::Mean(a, axes.to_vec()), &[a]))
    }

    pub fn variance(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let v = ops::var_axes(self.value(a), axes)?;
        Ok(self.push(v, Op::Variance(a, axes.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let v = ops::transpose_last2(self.value(a))?;
        Ok(self.push(v, Op::Transpose(a), &[a]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b), &[a, b]))
    }

    pub fn conv2d_dw(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = ops::conv2d_dw(self.value(x), self.value(kernel))?;
        Ok(self.push(v, Op::ConvDw(x, kernel), &[x, kernel]))
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(kernel), stride)?;
        Ok(self.push(v, Op::Conv(x, kernel, stride), &[x, kernel]))
    }

    /// Record an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<S>, rule: Box<dyn BackwardRule<S>>) -> Var {
        self.push(output, Op::Custom(inputs.to_vec(), rule), inputs)
    }

    /// Accumulate d`loss`/d`leaf` into every leaf that requires grad.
    ///
    /// Gradients add onto whatever a previous call left; use
    /// [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.recording {
            return Err(Error::Autodiff("backward on a no-grad tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&g);
                continue;
            }
            for (input, grad) in self.vjp(i, &g)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, &v)| *a += v),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    fn vjp(&self, i: usize, g: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
        let node = &self.nodes[i];
        let out_shape = node.value.shape();
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match &node.op {
            Op::Leaf | Op::Detached => Vec::new(),
            Op::Add(a, b) => vec![
                (*a, ops::reduce_to_shape(g, out_shape, val(*a).shape())),
                (*b, ops::reduce_to_shape(g, out_shape, val(*b).shape())),
            ],
            Op::Sub(a, b) => {
                let neg: Vec<S> = g.iter().map(|&v| -v).collect();
                vec![
                    (*a, ops::reduce_to_shape(g, out_shape, val(*a).shape())),
                    (*b, ops::reduce_to_shape(&neg, out_shape, val(*b).shape())),
                ]
            }
            Op::Mul(a, b) => {
                let av = ops::expand_to(val(*a), out_shape);
                let bv = ops::expand_to(val(*b), out_shape);
                let ga: Vec<S> = g.iter().zip(&bv).map(|(&d, &y)| d * y).collect();
                let gb: Vec<S> = g.iter().zip(&av).map(|(&d, &x)| d * x).collect();
                vec![
                    (*a, ops::reduce_to_shape(&ga, out_shape, val(*a).shape())),
                    (*b, ops::reduce_to_shape(&gb, out_shape, val(*b).shape())),
                ]
            }
            Op::Scale(a, s) => {
                let s = S::cast(*s);
                vec![(*a, g.iter().map(|&d| d * s).collect())]
            }
            Op::Exp(a) => vec![(*a, g.iter().zip(node.value.data()).map(|(&d, &y)| d * y).collect())],
            Op::Sum(a, axes) => vec![(*a, ops::expand_reduced(g, val(*a).shape(), axes))],
            Op::Mean(a, axes) => {
                let x = val(*a);
                let (_, count) = ops::reduce_axes_of(x.shape(), axes)?;
                let inv = S::cast(1.0 / count as f64);
                let e = ops::expand_reduced(g, x.shape(), axes);
                vec![(*a, e.into_iter().map(|d| d * inv).collect())]
            }
            Op::Variance(a, axes) => {
                let x = val(*a);
                let (_, count) = ops::reduce_axes_of(x.shape(), axes)?;
                let (mean, _) = ops::mean_var_wide(x, axes)?;
                let mean: Vec<S> = mean.into_iter().map(S::cast).collect();
                let m = ops::expand_reduced(&mean, x.shape(), axes);
                let e = ops::expand_reduced(g, x.shape(), axes);
                let k = 2.0 / count as f64;
                let gx = x
                    .data()
                    .iter()
                    .zip(&m)
                    .zip(&e)
                    .map(|((&xv, &mv), &d)| S::cast(d.wide() * k * (xv.wide() - mv.wide())))
                    .collect();
                vec![(*a, gx)]
            }
            Op::Reshape(a) => vec![(*a, g.to_vec())],
            Op::Transpose(a) => {
                let gt = Tensor::from_vec_unchecked(out_shape, g.to_vec())?;
                vec![(*a, ops::transpose_last2(&gt)?.into_data())]
            }
            Op::Matmul(a, b) => {
                let gt = Tensor::from_vec_unchecked(out_shape, g.to_vec())?;
                let ga = ops::matmul(&gt, &ops::transpose_last2(val(*b))?)?;
                let gb = ops::matmul(&ops::transpose_last2(val(*a))?, &gt)?;
                vec![(*a, ga.into_data()), (*b, gb.into_data())]
            }
            Op::ConvDw(x, k) => {
                let (gx, gk) = ops::conv2d_dw_backward(val(*x), val(*k), g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Conv(x, k, stride) => {
                let (gx, gk) = ops::conv2d_backward(val(*x), val(*k), *stride, g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Custom(inputs, rule) => {
                let ctx = BackwardCtx {
                    inputs: inputs.iter().map(|&v| val(v)).collect(),
                    output: &node.value,
                    grad_output: g,
                };
                let grads = rule.backward(&ctx)?;
                if grads.len() != inputs.len() {
                    return Err(Error::Autodiff(format!(
                        "custom rule returned {} gradients for {} inputs",
                        grads.len(),
                        inputs.len()
                    )));
                }
                inputs
                    .iter()
                    .zip(grads)
                    .filter_map(|(&v, gr)| gr.map(|gr| (v, gr)))
                    .collect()
            }
        })
    }
}
