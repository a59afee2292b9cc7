//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive applied to its variables in execution
//! order. [`Graph::backward`] walks that record once in reverse and
//! accumulates vector-Jacobian products into every node that depends on a
//! parameter. A graph lives for one training step and is then dropped.

pub mod kernels;

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    LeakyRelu(f64),
    Abs,
    Square,
    Sqrt,
    Huber(f64),
    Scale(f64),
    AddScalar(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MulConst(Var, Tensor),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample(Var, usize),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>, usize),
    Fft2 {
        x: Var,
        inverse: bool,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad2d(Var, [usize; 4]),
    Reshape(Var),
    Warp(Var, Var),
    BoxFilter(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Copies the value of `v` into a fresh constant leaf, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    // ------------------------------------------------------------ primitives

    pub fn unary(&mut self, x: Var, op: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out = match op {
            Unary::LeakyRelu(s) => xv.map(|v| if v > 0.0 { v } else { s * v }),
            Unary::Abs => xv.map(f64::abs),
            Unary::Square => xv.map(|v| v * v),
            Unary::Sqrt => {
                if xv.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::invalid("sqrt of negative value"));
                }
                xv.map(f64::sqrt)
            }
            Unary::Huber(d) => {
                if d <= 0.0 {
                    return Err(Error::invalid("huber delta must be > 0"));
                }
                xv.map(|v| huber(v, d))
            }
            Unary::Scale(s) => xv.map(|v| v * s),
            Unary::AddScalar(s) => xv.map(|v| v + s),
        };
        let rg = self.rg(x);
        Ok(self.push(out, Op::Unary(x, op), rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(x, Unary::LeakyRelu(slope))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn huber(&mut self, x: Var, delta: f64) -> Result<Var> {
        self.unary(x, Unary::Huber(delta))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::Scale(s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        self.unary(x, Unary::AddScalar(s))
    }

    pub fn binary(&mut self, a: Var, b: Var, op: Binary) -> Result<Var> {
        let (name, f): (&'static str, fn(f64, f64) -> f64) = match op {
            Binary::Add => ("add", |x, y| x + y),
            Binary::Sub => ("sub", |x, y| x - y),
            Binary::Mul => ("mul", |x, y| x * y),
            Binary::Div => ("div", |x, y| x / y),
        };
        let out =
            kernels::broadcast_binary(name, &self.nodes[a.0].value, &self.nodes[b.0].value, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Binary(a, b, op), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    /// Multiplies by a constant tensor (e.g. a sampling mask), broadcasting it.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let out = kernels::broadcast_binary("mask-mul", &self.nodes[x.0].value, c, |a, b| a * b)?;
        if out.shape() != self.shape(x) {
            return Err(Error::shape("mask-mul", self.shape(x), c.shape()));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MulConst(x, c.clone()), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// 2-D convolution (cross-correlation) over `[N, C, H, W]` with square
    /// kernels `[Cout, Cin, K, K]`, zero padding and stride.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            b.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        )?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            rg,
        ))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let out = kernels::upsample_nearest(&self.nodes[x.0].value, factor)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample(x, factor), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.nodes[x.0].value.sum();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = &self.nodes[x.0].value;
        if v.numel() == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let m = v.sum() / v.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| &self.nodes[p.0].value).collect();
        let out = kernels::concat(&vals, axis)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), rg))
    }

    /// Orthonormal 2-D DFT of a paired-plane complex tensor `[.., 2, H, W]`.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        self.fft_impl(x, false)
    }

    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        self.fft_impl(x, true)
    }

    fn fft_impl(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let out = kernels::fft2(&self.nodes[x.0].value, inverse)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Fft2 { x, inverse }, rg))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = kernels::narrow(&self.nodes[x.0].value, axis, start, len)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Narrow { x, axis, start }, rg))
    }

    pub fn pad2d(&mut self, x: Var, pads: [usize; 4]) -> Result<Var> {
        let out = kernels::pad2d(&self.nodes[x.0].value, pads)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Pad2d(x, pads), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Bilinear warp of `[N, C, H, W]` images by `[N, 2, H, W]` offsets.
    pub fn warp(&mut self, img: Var, field: Var) -> Result<Var> {
        let out = kernels::warp(&self.nodes[img.0].value, &self.nodes[field.0].value)?;
        let rg = self.rg(img) || self.rg(field);
        Ok(self.push(out, Op::Warp(img, field), rg))
    }

    pub fn box_filter(&mut self, x: Var, window: usize) -> Result<Var> {
        let out = kernels::box_filter(&self.nodes[x.0].value, window)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::BoxFilter(x, window), rg))
    }

    // ------------------------------------------------------------ backward

    /// Populates gradients of `loss` with respect to every node that
    /// depends on a parameter leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; call clear_grads first".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.backward_done = false;
    }

    /// Gradient of the last backward pass; zeros for unreachable nodes.
    pub fn grad(&self, v: Var) -> Result<Tensor> {
        if !self.backward_done {
            return Err(Error::Graph("grad requested before backward".into()));
        }
        let shape = self.nodes[v.0].value.shape();
        match &self.grads[v.0] {
            Some(g) => Tensor::from_vec(shape, g.clone()),
            None => Ok(Tensor::zeros(shape)),
        }
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Borrow juggling: collect contributions first, then accumulate.
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, op) => {
                let xv = self.nodes[x.0].value.data();
                let d: Vec<f64> = match *op {
                    Unary::LeakyRelu(s) => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v > 0.0 { *g } else { s * g })
                        .collect(),
                    Unary::Abs => g.iter().zip(xv).map(|(g, &v)| g * sign(v)).collect(),
                    Unary::Square => g.iter().zip(xv).map(|(g, &v)| 2.0 * v * g).collect(),
                    Unary::Sqrt => g.iter().zip(y.data()).map(|(g, &r)| 0.5 * g / r).collect(),
                    Unary::Huber(d) => g
                        .iter()
                        .zip(xv)
                        .map(|(g, &v)| if v.abs() <= d { g * v } else { g * d * sign(v) })
                        .collect(),
                    Unary::Scale(s) => g.iter().map(|g| g * s).collect(),
                    Unary::AddScalar(_) => g.to_vec(),
                };
                out.push((*x, d));
            }
            Op::Binary(a, b, op) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                let os = y.shape();
                let oa = kernels::broadcast_offsets(os, av.shape());
                let ob = kernels::broadcast_offsets(os, bv.shape());
                let (ad, bd) = (av.data(), bv.data());
                let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        g.iter().zip(&ob).map(|(g, &j)| g * bd[j]).collect(),
                        g.iter().zip(&oa).map(|(g, &j)| g * ad[j]).collect(),
                    ),
                    Binary::Div => (
                        g.iter().zip(&ob).map(|(g, &j)| g / bd[j]).collect(),
                        g.iter()
                            .zip(oa.iter().zip(&ob))
                            .map(|(g, (&ia, &ib))| -g * ad[ia] / (bd[ib] * bd[ib]))
                            .collect(),
                    ),
                };
                if self.rg(*a) {
                    out.push((*a, kernels::reduce_to(&ga, os, av.shape())));
                }
                if self.rg(*b) {
                    out.push((*b, kernels::reduce_to(&gb, os, bv.shape())));
                }
            }
            Op::MulConst(x, c) => {
                let offs = kernels::broadcast_offsets(y.shape(), c.shape());
                let d = g.iter().zip(&offs).map(|(g, &j)| g * c.data()[j]).collect();
                out.push((*x, d));
            }
            Op::MatMul(a, b) => {
                let (ga, gb) =
                    kernels::matmul_backward(&self.nodes[a.0].value, &self.nodes[b.0].value, g);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => {
                let need_dx = self.rg(*x);
                let (dx, dw, db) = kernels::conv2d_backward(
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    *stride,
                    *pad,
                    need_dx,
                )?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Upsample(x, f) => {
                out.push((
                    *x,
                    kernels::upsample_nearest_backward(self.nodes[x.0].value.shape(), g, *f),
                ));
            }
            Op::Sum(x) => {
                out.push((*x, vec![g[0]; self.nodes[x.0].value.numel()]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    let piece = kernels::narrow(
                        &Tensor::from_vec(y.shape(), g.to_vec())?,
                        *axis,
                        start,
                        len,
                    )?;
                    out.push((*p, piece.into_data()));
                    start += len;
                }
            }
            Op::Fft2 { x, inverse } => {
                // The adjoint of a unitary DFT is its inverse.
                let gt = Tensor::from_vec(y.shape(), g.to_vec())?;
                out.push((*x, kernels::fft2(&gt, !inverse)?.into_data()));
            }
            Op::Narrow { x, axis, start } => {
                out.push((
                    *x,
                    kernels::narrow_backward(self.nodes[x.0].value.shape(), *axis, *start, g),
                ));
            }
            Op::Pad2d(x, pads) => {
                out.push((
                    *x,
                    kernels::pad2d_backward(self.nodes[x.0].value.shape(), *pads, g),
                ));
            }
            Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Warp(img, field) => {
                let (gi, gf) = kernels::warp_backward(
                    &self.nodes[img.0].value,
                    &self.nodes[field.0].value,
                    g,
                )?;
                out.push((*img, gi));
                out.push((*field, gf));
            }
            Op::BoxFilter(x, window) => {
                // Zero-padded symmetric box sums are self-adjoint.
                let gt = Tensor::from_vec(y.shape(), g.to_vec())?;
                out.push((*x, kernels::box_filter(&gt, *window)?.into_data()));
            }
        }
        for (v, d) in out {
            debug_assert_eq!(d.len(), numel(self.nodes[v.0].value.shape()));
            self.accumulate(v, d);
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn huber(v: f64, delta: f64) -> f64 {
    let a = v.abs();
    if a <= delta {
        0.5 * v * v
    } else {
        delta * (a - 0.5 * delta)
    }
}
