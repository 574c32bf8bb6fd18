//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Values are
//! computed eagerly by the kernels in [`crate::tensor`]; [`backward`] replays
//! the tape in reverse. A tape is confined to a single forward pass and is not
//! shared between threads.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulConst(usize, Rc<Tensor>),
    Scale(usize, f64),
    AddTrailing(usize, usize),
    MatMul(usize, usize),
    Bmm(usize, usize),
    Linear { x: usize, w: usize, b: Option<usize> },
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Tensor, rstd: Vec<f64> },
    Gelu(usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    GatherRows(usize, Rc<Vec<Option<usize>>>),
    Concat(Vec<usize>, usize),
    Narrow { x: usize, axis: usize, start: usize },
    Upsample(usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddTrailing(a, b) => vec![*a, *b],
            Op::MatMul(a, b) | Op::Bmm(a, b) => vec![*a, *b],
            Op::MulConst(a, _)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Reshape(a)
            | Op::Permute(a, _)
            | Op::GatherRows(a, _)
            | Op::Upsample(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Narrow { x, .. } => vec![*x],
            Op::Linear { x, w, b } => {
                let mut p = vec![*x, *w];
                p.extend(b);
                p
            }
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat(parts, _) => parts.clone(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value().shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable input (parameter or image).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.record(value, Op::Leaf, true)
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.record(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn record(&self, value: Tensor, op: Op, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match op {
            Op::Leaf => leaf_grad,
            ref op => op.parents().iter().any(|&p| nodes[p].needs_grad),
        };
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// A non-differentiable value on the same tape.
    pub fn constant_like(&self, value: Tensor) -> Var<'t> {
        self.tape.constant(value)
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'t> {
        self.tape.record(value, op, false)
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().add(&other.value())?;
        Ok(self.push(v, Op::Add(self.id, other.id)))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().sub(&other.value())?;
        Ok(self.push(v, Op::Sub(self.id, other.id)))
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().mul(&other.value())?;
        Ok(self.push(v, Op::Mul(self.id, other.id)))
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&self, c: Rc<Tensor>) -> Result<Var<'t>> {
        let v = self.value().mul(&c)?;
        Ok(self.push(v, Op::MulConst(self.id, c)))
    }

    pub fn scale(&self, factor: f64) -> Result<Var<'t>> {
        let v = self.value().scale(factor)?;
        Ok(self.push(v, Op::Scale(self.id, factor)))
    }

    /// Adds `other` broadcast over leading axes (`other`'s shape is a suffix).
    pub fn add_trailing(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().add_trailing(&other.value())?;
        Ok(self.push(v, Op::AddTrailing(self.id, other.id)))
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().matmul(&other.value())?;
        Ok(self.push(v, Op::MatMul(self.id, other.id)))
    }

    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.same_tape(other);
        let v = self.value().bmm(&other.value())?;
        Ok(self.push(v, Op::Bmm(self.id, other.id)))
    }

    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        self.same_tape(weight);
        let b = bias.map(|b| b.value());
        let v = self.value().linear(&weight.value(), b.as_deref())?;
        Ok(self.push(v, Op::Linear { x: self.id, w: weight.id, b: bias.map(|b| b.id) }))
    }

    pub fn conv1x1(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        if self.value().ndim() != 3 {
            return Err(Error::shape("conv1x1", format!("expected [h,w,C], got {:?}", self.shape())));
        }
        self.linear(weight, bias)
    }

    pub fn softmax_lastdim(&self, mask: Option<&Tensor>) -> Result<Var<'t>> {
        let v = self.value().softmax_lastdim(mask)?;
        Ok(self.push(v, Op::Softmax(self.id)))
    }

    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (out, xhat, rstd) =
            tensor::layer_norm_parts(&self.value(), &gamma.value(), &beta.value(), eps)?;
        Ok(self.push(out, Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, rstd }))
    }

    pub fn gelu(&self) -> Result<Var<'t>> {
        let v = self.value().gelu()?;
        Ok(self.push(v, Op::Gelu(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.id)))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let v = self.value().permute(perm)?;
        Ok(self.push(v, Op::Permute(self.id, perm.to_vec())))
    }

    pub fn transpose_last(&self) -> Result<Var<'t>> {
        let n = self.value().ndim();
        if n < 2 {
            return Err(Error::shape("transpose_last", format!("{:?}", self.shape())));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(&perm)
    }

    pub fn gather_rows(&self, idx: Rc<Vec<Option<usize>>>) -> Result<Var<'t>> {
        let v = self.value().gather_rows(&idx)?;
        Ok(self.push(v, Op::GatherRows(self.id, idx)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat(&refs, axis)?;
        for p in parts {
            first.same_tape(p);
        }
        Ok(first.push(v, Op::Concat(parts.iter().map(|p| p.id).collect(), axis)))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let v = self.value().narrow(axis, start, len)?;
        Ok(self.push(v, Op::Narrow { x: self.id, axis, start }))
    }

    pub fn bilinear_upsample_x2(&self) -> Result<Var<'t>> {
        let v = self.value().bilinear_upsample_x2()?;
        Ok(self.push(v, Op::Upsample(self.id)))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().sum()).ensure_finite("sum")?;
        Ok(self.push(v, Op::Sum(self.id)))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = Tensor::scalar(self.value().mean()).ensure_finite("mean")?;
        Ok(self.push(v, Op::Mean(self.id)))
    }
}

/// Gradients of a scalar loss with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `∂loss/∂var`; zeros when `var` does not influence the loss.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(|g| g.as_ref()) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Reverse pass from a single-element `loss`.
pub fn backward(loss: &Var<'_>) -> Result<Gradients> {
    let tape = loss.tape;
    let nodes = tape.nodes.borrow();
    if nodes[loss.id].value.numel() != 1 {
        return Err(Error::NotScalar(nodes[loss.id].value.shape().to_vec()));
    }
    let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
    grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

    for id in (0..=loss.id).rev() {
        let node = &nodes[id];
        if !node.needs_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        propagate(&nodes, node, &g, &mut grads)?;
        grads[id] = Some(g);
    }
    Ok(Gradients { grads })
}

fn wants(nodes: &Ref<'_, Vec<Node>>, id: usize) -> bool {
    nodes[id].needs_grad
}

fn propagate(
    nodes: &Ref<'_, Vec<Node>>,
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<()> {
    let val = |id: usize| Rc::clone(&nodes[id].value);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(nodes, *b) {
                accumulate(&mut grads[*b], g.clone());
            }
        }
        Op::Sub(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(nodes, *b) {
                accumulate(&mut grads[*b], g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.mul(&val(*b))?);
            }
            if wants(nodes, *b) {
                accumulate(&mut grads[*b], g.mul(&val(*a))?);
            }
        }
        Op::MulConst(a, c) => accumulate(&mut grads[*a], g.mul(c)?),
        Op::Scale(a, f) => accumulate(&mut grads[*a], g.map(|v| v * f)),
        Op::AddTrailing(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.clone());
            }
            if wants(nodes, *b) {
                let bshape = val(*b).shape().to_vec();
                let m = tensor::numel(&bshape).max(1);
                let mut acc = vec![0.0; m];
                for (i, v) in g.data().iter().enumerate() {
                    acc[i % m] += v;
                }
                accumulate(&mut grads[*b], Tensor::new(bshape, acc)?);
            }
        }
        Op::MatMul(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.matmul(&val(*b).transpose_last()?)?);
            }
            if wants(nodes, *b) {
                accumulate(&mut grads[*b], val(*a).transpose_last()?.matmul(g)?);
            }
        }
        Op::Bmm(a, b) => {
            if wants(nodes, *a) {
                accumulate(&mut grads[*a], g.bmm(&val(*b).transpose_last()?)?);
            }
            if wants(nodes, *b) {
                accumulate(&mut grads[*b], val(*a).transpose_last()?.bmm(g)?);
            }
        }
        Op::Linear { x, w, b } => {
            let wv = val(*w);
            let (din, dout) = (wv.shape()[0], wv.shape()[1]);
            let rows = g.numel() / dout;
            let g2 = g.reshape(&[rows, dout])?;
            if wants(nodes, *x) {
                let gx = g2.matmul(&wv.transpose_last()?)?;
                accumulate(&mut grads[*x], gx.reshape(val(*x).shape())?);
            }
            if wants(nodes, *w) {
                let x2 = val(*x).reshape(&[rows, din])?;
                accumulate(&mut grads[*w], x2.transpose_last()?.matmul(&g2)?);
            }
            if let Some(b) = b {
                if wants(nodes, *b) {
                    let mut acc = vec![0.0; dout];
                    for row in g.data().chunks(dout) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    accumulate(&mut grads[*b], Tensor::new(vec![dout], acc)?);
                }
            }
        }
        Op::Softmax(a) => {
            let y = &node.value;
            let n = y.last_dim();
            let mut out = vec![0.0; y.numel()];
            for ((o, yr), gr) in out.chunks_mut(n).zip(y.data().chunks(n)).zip(g.data().chunks(n)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    o[j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(&mut grads[*a], Tensor::new(y.shape().to_vec(), out)?);
        }
        Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
            let gam = val(*gamma);
            let c = gam.numel();
            if wants(nodes, *x) {
                let mut out = vec![0.0; g.numel()];
                for (r, rs) in rstd.iter().enumerate() {
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let xr = &xhat.data()[r * c..(r + 1) * c];
                    let dxhat: Vec<f64> = gr.iter().zip(gam.data()).map(|(a, b)| a * b).collect();
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[r * c + j] = rs / c as f64 * (c as f64 * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
                accumulate(&mut grads[*x], Tensor::new(g.shape().to_vec(), out)?);
            }
            if wants(nodes, *gamma) || wants(nodes, *beta) {
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                for (gr, xr) in g.data().chunks(c).zip(xhat.data().chunks(c)) {
                    for j in 0..c {
                        dg[j] += gr[j] * xr[j];
                        db[j] += gr[j];
                    }
                }
                if wants(nodes, *gamma) {
                    accumulate(&mut grads[*gamma], Tensor::new(vec![c], dg)?);
                }
                if wants(nodes, *beta) {
                    accumulate(&mut grads[*beta], Tensor::new(vec![c], db)?);
                }
            }
        }
        Op::Gelu(a) => {
            let x = val(*a);
            let d = x.map(tensor::gelu_grad_scalar);
            accumulate(&mut grads[*a], g.mul(&d)?);
        }
        Op::Reshape(a) => accumulate(&mut grads[*a], g.reshape(val(*a).shape())?),
        Op::Permute(a, perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            accumulate(&mut grads[*a], g.permute(&inv)?);
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let c = src.last_dim();
            let mut out = vec![0.0; src.numel()];
            for (row, i) in idx.iter().enumerate() {
                if let Some(r) = i {
                    for j in 0..c {
                        out[r * c + j] += g.data()[row * c + j];
                    }
                }
            }
            accumulate(&mut grads[*a], Tensor::new(src.shape().to_vec(), out)?);
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if wants(nodes, p) {
                    accumulate(&mut grads[p], g.narrow(*axis, start, len)?);
                }
                start += len;
            }
        }
        Op::Narrow { x, axis, start } => {
            let src = val(*x);
            let shape = src.shape();
            let outer = tensor::numel(&shape[..*axis]);
            let inner = tensor::numel(&shape[axis + 1..]);
            let len = g.shape()[*axis];
            let mut out = vec![0.0; src.numel()];
            for o in 0..outer {
                let dst = o * shape[*axis] * inner + start * inner;
                let from = o * len * inner;
                out[dst..dst + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
            }
            accumulate(&mut grads[*x], Tensor::new(shape.to_vec(), out)?);
        }
        Op::Upsample(a) => {
            let src = val(*a);
            let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
            let ty = tensor::upsample_taps(h);
            let tx = tensor::upsample_taps(w);
            let mut out = vec![0.0; src.numel()];
            for (oy, ry) in ty.iter().enumerate() {
                for (ox, rx) in tx.iter().enumerate() {
                    let gsrc = &g.data()[(oy * 2 * w + ox) * c..(oy * 2 * w + ox + 1) * c];
                    for &(iy, wy) in ry {
                        for &(ix, wx) in rx {
                            let dst = &mut out[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                            for (d, s) in dst.iter_mut().zip(gsrc) {
                                *d += wy * wx * s;
                            }
                        }
                    }
                }
            }
            accumulate(&mut grads[*a], Tensor::new(src.shape().to_vec(), out)?);
        }
        Op::Sum(a) => {
            let gv = g.data()[0];
            accumulate(&mut grads[*a], Tensor::full(val(*a).shape(), gv));
        }
        Op::Mean(a) => {
            let src = val(*a);
            let gv = g.data()[0] / src.numel() as f64;
            accumulate(&mut grads[*a], Tensor::full(src.shape(), gv));
        }
    }
    Ok(())
}
