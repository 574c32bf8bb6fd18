//! Dense row-major tensors and the forward kernels shared by the autodiff tape.
//!
//! Every kernel here is a pure function of its inputs. Kernels that can
//! produce non-finite values check their output and report
//! [`Error::NonFinite`] instead of returning a poisoned tensor.

use std::fmt;

use crate::error::{Error, Result};

/// Additive mask value used to exclude attention logits.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor { shape: shape.to_vec(), data: (0..numel(shape)).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NotScalar(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let off = index.iter().zip(strides(&self.shape)).map(|(i, s)| i * s).sum::<usize>();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(self, op: &'static str) -> Result<Self> {
        if self.is_finite() {
            Ok(self)
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape, shape),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let n = self.ndim();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {n} axes")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        let gather_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut data = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; n];
        let mut off = 0usize;
        for _ in 0..self.numel() {
            data.push(self.data[off]);
            for ax in (0..n).rev() {
                idx[ax] += 1;
                off += gather_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                off -= gather_strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Tensor { shape: out_shape, data })
    }

    fn zip_same(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Tensor { shape: self.shape.clone(), data }.ensure_finite(op)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_same(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| v * factor).collect() }
            .ensure_finite("scale")
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Adds `other` broadcast over the leading axes; `other`'s shape must be a
    /// suffix of `self`'s shape.
    pub fn add_trailing(&self, other: &Tensor) -> Result<Tensor> {
        if !is_suffix(other.shape(), self.shape()) {
            return Err(Error::shape(
                "add_trailing",
                format!("{:?} is not a trailing shape of {:?}", other.shape, self.shape),
            ));
        }
        let m = other.numel().max(1);
        let data = self.data.iter().enumerate().map(|(i, v)| v + other.data[i % m]).collect();
        Tensor { shape: self.shape.clone(), data }.ensure_finite("add_trailing")
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    /// Standard matrix product `[m,k]·[k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k, n) = match (self.shape(), other.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", self.shape, other.shape),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Tensor { shape: vec![m, n], data: out }.ensure_finite("matmul")
    }

    /// Batched matrix product `[b,m,k]·[b,k,n]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let (b, m, k, n) = match (self.shape(), other.shape()) {
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(Error::shape("bmm", format!("{:?} x {:?}", self.shape, other.shape))),
        };
        let mut out = vec![0.0; b * m * n];
        for i in 0..b {
            matmul_into(
                &self.data[i * m * k..(i + 1) * m * k],
                &other.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor { shape: vec![b, m, n], data: out }.ensure_finite("bmm")
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::shape("transpose_last", format!("{:?}", self.shape)));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 1, n - 2);
        self.permute(&perm)
    }

    /// Softmax over the last axis. `mask`, when given, is added to the logits
    /// first and must have a trailing shape of `self`.
    pub fn softmax_lastdim(&self, mask: Option<&Tensor>) -> Result<Tensor> {
        let n = self.last_dim();
        if n == 0 || self.ndim() == 0 {
            return Err(Error::shape("softmax", "last axis must have extent >= 1"));
        }
        if let Some(m) = mask {
            if !is_suffix(m.shape(), self.shape()) {
                return Err(Error::shape(
                    "softmax",
                    format!("mask {:?} does not broadcast to {:?}", m.shape, self.shape),
                ));
            }
        }
        let mut data = self.data.clone();
        if let Some(m) = mask {
            let mn = m.numel();
            for (i, v) in data.iter_mut().enumerate() {
                *v += m.data[i % mn];
            }
        }
        for row in data.chunks_mut(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Tensor { shape: self.shape.clone(), data }.ensure_finite("softmax")
    }

    /// Layer normalization over the last axis followed by the affine map.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_parts(self, gamma, beta, eps)?.0)
    }

    pub fn gelu(&self) -> Result<Tensor> {
        self.map(gelu_scalar).ensure_finite("gelu")
    }

    /// Affine map on the last axis: `x·W + b` with `W: [in,out]`, `b: [out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (din, dout) = match weight.shape() {
            [i, o] => (*i, *o),
            s => return Err(Error::shape("linear", format!("weight must be 2-D, got {s:?}"))),
        };
        if self.ndim() == 0 || self.last_dim() != din {
            return Err(Error::shape(
                "linear",
                format!("input {:?} vs weight {:?}", self.shape, weight.shape),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [dout] {
                return Err(Error::shape("linear", format!("bias {:?}, expected [{dout}]", b.shape)));
            }
        }
        let rows = self.numel() / din;
        let mut out = vec![0.0; rows * dout];
        matmul_into(&self.data, &weight.data, &mut out, rows, din, dout);
        if let Some(b) = bias {
            for row in out.chunks_mut(dout) {
                for (v, bb) in row.iter_mut().zip(&b.data) {
                    *v += bb;
                }
            }
        }
        let mut shape = self.shape.clone();
        *shape.last_mut().unwrap() = dout;
        Tensor { shape, data: out }.ensure_finite("linear")
    }

    /// 1×1 convolution on an `[h,w,Cin]` map.
    pub fn conv1x1(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        if self.ndim() != 3 {
            return Err(Error::shape("conv1x1", format!("expected [h,w,C], got {:?}", self.shape)));
        }
        self.linear(weight, bias)
    }

    /// Bilinear ×2 upsampling of an `[h,w,C]` map with half-pixel centers.
    pub fn bilinear_upsample_x2(&self) -> Result<Tensor> {
        let (h, w, c) = match self.shape() {
            [h, w, c] if *h > 0 && *w > 0 => (*h, *w, *c),
            s => return Err(Error::shape("bilinear_upsample_x2", format!("{s:?}"))),
        };
        let ty = upsample_taps(h);
        let tx = upsample_taps(w);
        let mut out = vec![0.0; 4 * h * w * c];
        for (oy, ry) in ty.iter().enumerate() {
            for (ox, rx) in tx.iter().enumerate() {
                let dst = &mut out[(oy * 2 * w + ox) * c..(oy * 2 * w + ox + 1) * c];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let src = &self.data[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                        let wgt = wy * wx;
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
        Tensor { shape: vec![2 * h, 2 * w, c], data: out }.ensure_finite("bilinear_upsample_x2")
    }

    /// Views `self` as rows of its last axis and gathers them by index;
    /// `None` produces a zero row. The result has shape `[idx.len(), C]`.
    pub fn gather_rows(&self, idx: &[Option<usize>]) -> Result<Tensor> {
        let c = self.last_dim();
        let rows = if c == 0 { 0 } else { self.numel() / c };
        let mut data = Vec::with_capacity(idx.len() * c);
        for i in idx {
            match i {
                Some(r) if *r < rows => data.extend_from_slice(&self.data[r * c..(r + 1) * c]),
                Some(r) => {
                    return Err(Error::shape("gather_rows", format!("row {r} out of {rows}")))
                }
                None => data.extend(std::iter::repeat_n(0.0, c)),
            }
        }
        Ok(Tensor { shape: vec![idx.len(), c], data })
    }

    /// Concatenates tensors along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {nd}-D")));
        }
        for p in parts {
            if p.ndim() != nd
                || p.shape[..axis] != first.shape[..axis]
                || p.shape[axis + 1..] != first.shape[axis + 1..]
            {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", p.shape, first.shape)));
            }
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let mut shape = first.shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }

    /// Slice `[start, start+len)` of `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {:?}", start + len, self.shape),
            ));
        }
        let outer = numel(&self.shape[..axis]);
        let inner = numel(&self.shape[axis + 1..]);
        let full = self.shape[axis] * inner;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

/// `out[m,n] += a[m,k]·b[k,n]` for row-major slices.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// Source taps for each output index of a ×2 half-pixel upsample along one axis.
pub(crate) fn upsample_taps(len: usize) -> Vec<Vec<(usize, f64)>> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f64;
            if i0 == i1 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Layer norm forward returning `(output, normalized, reciprocal std per row)`.
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let c = x.last_dim();
    if x.ndim() == 0 || c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gamma {:?}, beta {:?}", x.shape, gamma.shape, beta.shape),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let rows = x.numel() / c;
    let mut xhat = vec![0.0; x.numel()];
    let mut out = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let src = &x.data[r * c..(r + 1) * c];
        let mean = src.iter().sum::<f64>() / c as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..c {
            let n = (src[j] - mean) * rs;
            xhat[r * c + j] = n;
            out[r * c + j] = n * gamma.data[j] + beta.data[j];
        }
    }
    let shape = x.shape.clone();
    Ok((
        Tensor { shape: shape.clone(), data: out }.ensure_finite("layer_norm")?,
        Tensor { shape, data: xhat },
        rstd,
    ))
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let b = random(&[3, 2], 1);
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let a = Tensor::new(vec![1, 1], vec![2.0]).unwrap();
        let c = Tensor::new(vec![1, 1], vec![3.0]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[4, 5], 2);
        let b = random(&[5, 3], 3);
        let got = a.matmul(&b).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                let mut acc = 0.0;
                for p in 0..5 {
                    acc += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((got.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        assert!(matches!(
            random(&[2, 3], 0).matmul(&random(&[2, 3], 0)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::zeros(&[3]);
        for v in x.softmax_lastdim(None).unwrap().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(Tensor::new(vec![1], vec![7.0]).unwrap().softmax_lastdim(None).unwrap().data(), &[1.0]);

        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let mask = Tensor::new(vec![3], vec![0.0, 0.0, MASK_NEG]).unwrap();
        let got = x.softmax_lastdim(Some(&mask)).unwrap();
        let (e1, e2) = (1f64.exp(), 2f64.exp());
        assert!((got.data()[0] - e1 / (e1 + e2)).abs() < 1e-12);
        assert!((got.data()[1] - e2 / (e1 + e2)).abs() < 1e-12);
        assert!(got.data()[2].abs() < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::ones(&[4]);
        let b = Tensor::zeros(&[4]);
        let y = Tensor::full(&[2, 4], 3.5).layer_norm(&g, &b, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let x = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let y = x.layer_norm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).unwrap();
        // var = 1, so each entry is ±1/sqrt(1+eps)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-12);
        assert!((y.data()[1] - expect).abs() < 1e-12);
        assert!(y.mean().abs() < 1e-12);

        let beta = Tensor::new(vec![2], vec![0.7, -0.2]).unwrap();
        let y = random(&[3, 2], 4).layer_norm(&Tensor::zeros(&[2]), &beta, 1e-5).unwrap();
        for row in y.data().chunks(2) {
            assert_eq!(row, beta.data());
        }
        assert!(x.layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[2]), 1e-5).is_err());
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
    }

    #[test]
    fn linear_examples() {
        let x = random(&[2, 3, 4], 5);
        let eye = Tensor::from_fn(&[4, 4], |i| if i % 5 == 0 { 1.0 } else { 0.0 });
        assert_eq!(x.linear(&eye, Some(&Tensor::zeros(&[4]))).unwrap(), x);
        let b = random(&[2], 6);
        let y = x.linear(&Tensor::zeros(&[4, 2]), Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        for row in y.data().chunks(2) {
            assert_eq!(row, b.data());
        }
        let w = random(&[4, 2], 7);
        let flat = x.reshape(&[6, 4]).unwrap();
        let oracle = flat.matmul(&w).unwrap().add_trailing(&b).unwrap();
        assert!(y.shape() == [2, 3, 2]);
        let got = x.linear(&w, Some(&b)).unwrap().reshape(&[6, 2]).unwrap();
        assert!(got.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn conv1x1_is_per_pixel_linear() {
        let x = random(&[3, 3, 2], 8);
        let w = random(&[2, 3], 9);
        let b = random(&[3], 10);
        let y = x.conv1x1(&w, Some(&b)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for o in 0..3 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        acc += x.at(&[i, j, c]) * w.at(&[c, o]);
                    }
                    assert!((y.at(&[i, j, o]) - acc).abs() < 1e-12);
                }
            }
        }
        let one = random(&[1, 1, 2], 11);
        assert_eq!(
            one.conv1x1(&w, Some(&b)).unwrap().data(),
            one.reshape(&[2]).unwrap().linear(&w, Some(&b)).unwrap().data()
        );
    }

    #[test]
    fn upsample_constant_and_single_pixel() {
        let x = Tensor::full(&[3, 2, 2], 1.25);
        let y = x.bilinear_upsample_x2().unwrap();
        assert_eq!(y.shape(), &[6, 4, 2]);
        assert!(y.data().iter().all(|v| (*v - 1.25).abs() < 1e-15));
        let one = Tensor::new(vec![1, 1, 1], vec![4.0]).unwrap();
        assert_eq!(one.bilinear_upsample_x2().unwrap().data(), &[4.0; 4]);
    }

    #[test]
    fn upsample_ramp_closed_form() {
        // x[i,j] = 10 i + j; sample positions along an axis are
        // clamp((o + 0.5)/2 - 0.5, 0, 1) = [0, 0.25, 0.75, 1].
        let x = Tensor::new(vec![2, 2, 1], vec![0.0, 1.0, 10.0, 11.0]).unwrap();
        let y = x.bilinear_upsample_x2().unwrap();
        let pos = [0.0, 0.25, 0.75, 1.0];
        for oy in 0..4 {
            for ox in 0..4 {
                let expect = 10.0 * pos[oy] + pos[ox];
                assert!((y.at(&[oy, ox, 0]) - expect).abs() < 1e-12, "({oy},{ox})");
            }
        }
    }

    #[test]
    fn gather_concat_narrow() {
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = x.gather_rows(&[Some(2), None, Some(0)]).unwrap();
        assert_eq!(g.data(), &[5.0, 6.0, 0.0, 0.0, 1.0, 2.0]);
        assert!(x.gather_rows(&[Some(3)]).is_err());
        let c = Tensor::concat(&[&x, &x.narrow(1, 1, 1).unwrap()], 1).unwrap();
        assert_eq!(c.shape(), &[3, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 2.0, 3.0, 4.0, 4.0, 5.0, 6.0, 6.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let x = Tensor::new(vec![1], vec![f64::MAX]).unwrap();
        assert!(matches!(x.scale(10.0), Err(Error::NonFinite(_))));
    }

    proptest! {
        #[test]
        fn permute_round_trip(dims in proptest::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let x = random(&dims, seed);
            let n = dims.len();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..n).rev() { perm.swap(i, rng.gen_range(0..=i)); }
            let mut inv = vec![0; n];
            for (i, &p) in perm.iter().enumerate() { inv[p] = i; }
            let back = x.permute(&perm).unwrap().permute(&inv).unwrap();
            prop_assert_eq!(back, x.clone());
            let flat = x.reshape(&[x.numel()]).unwrap().reshape(&dims).unwrap();
            prop_assert_eq!(flat, x);
        }

        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            vals in proptest::collection::vec(-30.0f64..30.0, 1..24),
            shift in -50.0f64..50.0,
        ) {
            let x = Tensor::new(vec![vals.len()], vals).unwrap();
            let s = x.softmax_lastdim(None).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-9);
            prop_assert!(s.data().iter().all(|v| *v >= 0.0));
            let shifted = x.map(|v| v + shift).softmax_lastdim(None).unwrap();
            prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
        }
    }
}
