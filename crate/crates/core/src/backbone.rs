//! Four-stage hierarchical windowed-attention backbone.
//!
//! Feature maps are `[h, w, C]` row-major. Windows, tokens inside a window,
//! and patches are all enumerated row-major. Shifted-window attention rolls
//! the map by `(-s, -s)`, attends inside windows under a region mask, and
//! rolls back.

use std::rc::Rc;

use crate::autograd::Var;
use crate::config::{SwinConfig, LN_EPS, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::tensor::{Tensor, MASK_NEG};

/// The four stage outputs, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: [Tensor; 4],
}

impl FeaturePyramid {
    /// Checks extents and channels against `config`.
    pub fn validate(&self, config: &SwinConfig) -> Result<()> {
        for (s, level) in self.levels.iter().enumerate() {
            let (h, w) = config.stage_extent(s);
            let expect = [h, w, config.stage_channels(s)];
            if level.shape() != expect {
                return Err(Error::shape(
                    "FeaturePyramid",
                    format!("level {s} is {:?}, expected {expect:?}", level.shape()),
                ));
            }
            if !level.is_finite() {
                return Err(Error::NonFinite("FeaturePyramid"));
            }
        }
        Ok(())
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Row-major 4×4×3 patch extraction index over an image viewed as `[H·W, 3]`.
pub(crate) fn patch_index(h: usize, w: usize) -> Vec<Option<usize>> {
    let (ph, pw) = (h / PATCH_SIZE, w / PATCH_SIZE);
    let mut idx = Vec::with_capacity(h * w);
    for py in 0..ph {
        for px in 0..pw {
            for iy in 0..PATCH_SIZE {
                for ix in 0..PATCH_SIZE {
                    idx.push(Some((py * PATCH_SIZE + iy) * w + px * PATCH_SIZE + ix));
                }
            }
        }
    }
    idx
}

/// Source row for each partitioned token. The map is zero-padded to a
/// multiple of `m` and rolled by `(-shift, -shift)` before partitioning.
pub(crate) fn partition_index(h: usize, w: usize, m: usize, shift: usize) -> Vec<Option<usize>> {
    let (hp, wp) = (round_up(h, m), round_up(w, m));
    let mut idx = Vec::with_capacity(hp * wp);
    for wy in 0..hp / m {
        for wx in 0..wp / m {
            for ty in 0..m {
                for tx in 0..m {
                    let r = (wy * m + ty + shift) % hp;
                    let c = (wx * m + tx + shift) % wp;
                    idx.push((r < h && c < w).then_some(r * w + c));
                }
            }
        }
    }
    idx
}

/// Inverse of [`partition_index`]: for each original position, the row of
/// the partitioned tensor that holds it.
pub(crate) fn reverse_index(h: usize, w: usize, m: usize, shift: usize) -> Vec<Option<usize>> {
    let (hp, wp) = (round_up(h, m), round_up(w, m));
    let per_row = wp / m;
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let rs = (r + hp - shift % hp) % hp;
            let cs = (c + wp - shift % wp) % wp;
            let window = (rs / m) * per_row + cs / m;
            idx.push(Some(window * m * m + (rs % m) * m + cs % m));
        }
    }
    idx
}

fn check_map(x: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match x.shape() {
        [h, w, c] => Ok((*h, *w, *c)),
        s => Err(Error::shape(op, format!("expected [h,w,C], got {s:?}"))),
    }
}

/// Splits `[h,w,C]` into `[(h/M)(w/M), M², C]`, zero-padding right/bottom
/// when the extents are not multiples of `m`.
pub fn window_partition(x: &Tensor, m: usize) -> Result<Tensor> {
    let (h, w, c) = check_map(x, "window_partition")?;
    if m == 0 {
        return Err(Error::InvalidArgument("window size must be positive".into()));
    }
    let idx = partition_index(h, w, m, 0);
    let n_windows = idx.len() / (m * m);
    x.reshape(&[h * w, c])?.gather_rows(&idx)?.reshape(&[n_windows, m * m, c])
}

/// Inverse of [`window_partition`]; crops any padding.
pub fn window_reverse(windows: &Tensor, h: usize, w: usize, m: usize) -> Result<Tensor> {
    let c = windows.last_dim();
    let expect = round_up(h, m) * round_up(w, m);
    if windows.ndim() != 3 || windows.shape()[1] != m * m || windows.shape()[0] * m * m != expect {
        return Err(Error::shape(
            "window_reverse",
            format!("{:?} does not hold {h}x{w} in {m}x{m} windows", windows.shape()),
        ));
    }
    windows
        .reshape(&[expect, c])?
        .gather_rows(&reverse_index(h, w, m, 0))?
        .reshape(&[h, w, c])
}

fn roll(x: &Tensor, dy: usize, dx: usize) -> Result<Tensor> {
    let (h, w, c) = check_map(x, "cyclic_shift")?;
    let idx: Vec<Option<usize>> = (0..h)
        .flat_map(|r| (0..w).map(move |col| Some(((r + dy) % h) * w + (col + dx) % w)))
        .collect();
    x.reshape(&[h * w, c])?.gather_rows(&idx)?.reshape(&[h, w, c])
}

/// Toroidal roll by `(-s, -s)`: element `(0,0)` moves to `(h-s, w-s)`.
pub fn cyclic_shift(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, _) = check_map(x, "cyclic_shift")?;
    roll(x, s % h.max(1), s % w.max(1))
}

/// Roll by `(+s, +s)`, undoing [`cyclic_shift`].
pub fn cyclic_unshift(x: &Tensor, s: usize) -> Result<Tensor> {
    let (h, w, _) = check_map(x, "cyclic_unshift")?;
    roll(x, (h - s % h.max(1)) % h.max(1), (w - s % w.max(1)) % w.max(1))
}

fn region_labels(len: usize, m: usize, s: usize) -> Vec<usize> {
    (0..len)
        .map(|i| {
            if s == 0 || i < len - m {
                0
            } else if i < len - s {
                1
            } else {
                2
            }
        })
        .collect()
}

/// Attention mask for shifted windows on an `h×w` map whose extents are
/// multiples of `m`: 0 where two tokens come from the same pre-shift region,
/// [`MASK_NEG`] otherwise. Shape `[nWindows, M², M²]`.
pub fn build_shift_mask(h: usize, w: usize, m: usize, s: usize) -> Result<Tensor> {
    if m == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) || s >= m {
        return Err(Error::InvalidArgument(format!(
            "shift mask needs extents divisible by window and shift < window (h={h}, w={w}, M={m}, s={s})"
        )));
    }
    let rows = region_labels(h, m, s);
    let cols = region_labels(w, m, s);
    let labels: Vec<usize> = partition_index(h, w, m, 0)
        .into_iter()
        .map(|i| {
            let i = i.expect("no padding");
            rows[i / w] * 3 + cols[i % w]
        })
        .collect();
    Ok(pairwise_mask(&labels, m * m, |a, b| a == b))
}

fn pairwise_mask<T: Copy>(tokens: &[T], n: usize, keep: impl Fn(T, T) -> bool) -> Tensor {
    let windows = tokens.len() / n;
    let mut data = Vec::with_capacity(windows * n * n);
    for win in tokens.chunks(n) {
        for &q in win {
            for &k in win {
                data.push(if keep(q, k) { 0.0 } else { MASK_NEG });
            }
        }
    }
    Tensor::new(vec![windows, n, n], data).expect("mask shape")
}

/// Mask for one block: the shifted-region mask combined with exclusion of
/// padded keys. `None` when nothing needs masking.
pub(crate) fn block_mask(h: usize, w: usize, m: usize, s: usize) -> Result<Option<Tensor>> {
    let padded = !h.is_multiple_of(m) || !w.is_multiple_of(m);
    if s == 0 && !padded {
        return Ok(None);
    }
    let (hp, wp) = (round_up(h, m), round_up(w, m));
    let rows = region_labels(hp, m, s);
    let cols = region_labels(wp, m, s);
    // (region, is_real) per partitioned token
    let tokens: Vec<(usize, bool)> = (0..hp / m)
        .flat_map(|wy| (0..wp / m).map(move |wx| (wy, wx)))
        .flat_map(|(wy, wx)| {
            (0..m * m).map(move |t| (wy * m + t / m, wx * m + t % m))
        })
        .map(|(r, c)| {
            let real = (r + s) % hp < h && (c + s) % wp < w;
            (rows[r] * 3 + cols[c], real)
        })
        .collect();
    Ok(Some(pairwise_mask(&tokens, m * m, |q, k| q.0 == k.0 && k.1)))
}

/// `(Δy + M−1)(2M−1) + (Δx + M−1)` for every query/key pair in a window.
pub(crate) fn relative_position_index(m: usize) -> Vec<Option<usize>> {
    let span = 2 * m - 1;
    let mut idx = Vec::with_capacity(m * m * m * m);
    for q in 0..m * m {
        for k in 0..m * m {
            let dy = (q / m) + m - 1 - (k / m);
            let dx = (q % m) + m - 1 - (k % m);
            idx.push(Some(dy * span + dx));
        }
    }
    idx
}

/// Parameters of one transformer block, bound to a tape.
pub struct BlockWeights<'t> {
    pub heads: usize,
    pub norm1: (Var<'t>, Var<'t>),
    pub qkv_w: Var<'t>,
    pub qkv_b: Var<'t>,
    /// `[(2M−1)², heads]`, absent when the bias table is disabled.
    pub rel_bias: Option<Var<'t>>,
    pub proj_w: Var<'t>,
    pub proj_b: Var<'t>,
    pub norm2: (Var<'t>, Var<'t>),
    pub fc1_w: Var<'t>,
    pub fc1_b: Var<'t>,
    pub fc2_w: Var<'t>,
    pub fc2_b: Var<'t>,
}

impl<'t> BlockWeights<'t> {
    pub fn from_params(params: &BoundParams<'t>, prefix: &str, heads: usize) -> Result<Self> {
        let p = |n: &str| params.var(&format!("{prefix}.{n}"));
        Ok(BlockWeights {
            heads,
            norm1: (p("norm1.gamma")?, p("norm1.beta")?),
            qkv_w: p("attn.qkv.weight")?,
            qkv_b: p("attn.qkv.bias")?,
            rel_bias: params.opt(&format!("{prefix}.attn.rel_bias")),
            proj_w: p("attn.proj.weight")?,
            proj_b: p("attn.proj.bias")?,
            norm2: (p("norm2.gamma")?, p("norm2.beta")?),
            fc1_w: p("mlp.fc1.weight")?,
            fc1_b: p("mlp.fc1.bias")?,
            fc2_w: p("mlp.fc2.weight")?,
            fc2_b: p("mlp.fc2.bias")?,
        })
    }
}

/// Multi-head self-attention inside each window.
///
/// `windows` is `[nW, N, C]` with `N = M²`; `mask`, if given, is `[nW, N, N]`.
pub fn window_attention<'t>(
    windows: &Var<'t>,
    weights: &BlockWeights<'t>,
    mask: Option<&Tensor>,
) -> Result<Var<'t>> {
    let shape = windows.shape();
    let [nw, n, c] = shape[..] else {
        return Err(Error::shape("window_attention", format!("expected [nW,N,C], got {shape:?}")));
    };
    let h = weights.heads;
    if h == 0 || c % h != 0 {
        return Err(Error::shape("window_attention", format!("{h} heads do not divide {c} channels")));
    }
    let d = c / h;
    let qkv = windows.linear(&weights.qkv_w, Some(&weights.qkv_b))?;
    let split = |i: usize| -> Result<Var<'t>> {
        qkv.narrow(2, i * c, c)?
            .reshape(&[nw, n, h, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[nw * h, n, d])
    };
    let q = split(0)?.scale(1.0 / (d as f64).sqrt())?;
    let k = split(1)?;
    let v = split(2)?;
    let mut scores = q.bmm(&k.transpose_last()?)?.reshape(&[nw, h, n, n])?;
    if let Some(table) = &weights.rel_bias {
        let rows = table.value().shape()[0];
        let m = (n as f64).sqrt().round() as usize;
        if m * m != n || rows != (2 * m - 1) * (2 * m - 1) {
            return Err(Error::shape(
                "window_attention",
                format!("bias table with {rows} rows does not fit windows of {n} tokens"),
            ));
        }
        let bias = table
            .gather_rows(Rc::new(relative_position_index(m)))?
            .reshape(&[n, n, h])?
            .permute(&[2, 0, 1])?;
        scores = scores.add_trailing(&bias)?;
    }
    let expanded;
    let mask = match mask {
        Some(mk) => {
            if mk.shape() != [nw, n, n] {
                return Err(Error::shape(
                    "window_attention",
                    format!("mask {:?}, expected [{nw}, {n}, {n}]", mk.shape()),
                ));
            }
            let mut data = Vec::with_capacity(nw * h * n * n);
            for win in mk.data().chunks(n * n) {
                for _ in 0..h {
                    data.extend_from_slice(win);
                }
            }
            expanded = Tensor::new(vec![nw, h, n, n], data)?;
            Some(&expanded)
        }
        None => None,
    };
    let attn = scores.softmax_lastdim(mask)?.reshape(&[nw * h, n, n])?;
    attn.bmm(&v)?
        .reshape(&[nw, h, n, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nw, n, c])?
        .linear(&weights.proj_w, Some(&weights.proj_b))
}

/// One transformer block: windowed (or shifted-window, when `shift > 0`)
/// attention and an MLP, each pre-normed with a residual connection.
pub fn swin_block<'t>(
    x: &Var<'t>,
    weights: &BlockWeights<'t>,
    window: usize,
    shift: usize,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("swin_block", format!("expected [h,w,C], got {shape:?}")));
    };
    if window == 0 || shift >= window {
        return Err(Error::InvalidArgument(format!("shift {shift} must be below window {window}")));
    }
    let n = window * window;
    let xn = x.layer_norm(&weights.norm1.0, &weights.norm1.1, LN_EPS)?;
    let part = Rc::new(partition_index(h, w, window, shift));
    let n_windows = part.len() / n;
    let windows = xn.reshape(&[h * w, c])?.gather_rows(part)?.reshape(&[n_windows, n, c])?;
    let mask = block_mask(h, w, window, shift)?;
    let attended = window_attention(&windows, weights, mask.as_ref())?;
    let merged = attended
        .reshape(&[n_windows * n, c])?
        .gather_rows(Rc::new(reverse_index(h, w, window, shift)))?
        .reshape(&[h, w, c])?;
    let x = x.add(&merged)?;
    let hidden = x
        .layer_norm(&weights.norm2.0, &weights.norm2.1, LN_EPS)?
        .linear(&weights.fc1_w, Some(&weights.fc1_b))?
        .gelu()?
        .linear(&weights.fc2_w, Some(&weights.fc2_b))?;
    x.add(&hidden)
}

/// Splits an `[H,W,3]` image into 4×4 patches (flattened row-major, 48
/// values each) and projects them to `C` channels.
pub fn patch_embed<'t>(image: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    let shape = image.shape();
    let [h, w, 3] = shape[..] else {
        return Err(Error::shape("patch_embed", format!("expected [H,W,3], got {shape:?}")));
    };
    if h % PATCH_SIZE != 0 || w % PATCH_SIZE != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "patch_embed",
            format!("{h}x{w} is not divisible by the patch size {PATCH_SIZE}"),
        ));
    }
    let k = PATCH_SIZE * PATCH_SIZE * 3;
    image
        .reshape(&[h * w, 3])?
        .gather_rows(Rc::new(patch_index(h, w)))?
        .reshape(&[h / PATCH_SIZE, w / PATCH_SIZE, k])?
        .linear(weight, Some(bias))
}

/// Concatenates each 2×2 neighbourhood (top-left, top-right, bottom-left,
/// bottom-right), normalizes, and projects `4C → 2C`.
pub fn patch_merging<'t>(
    x: &Var<'t>,
    norm: (&Var<'t>, &Var<'t>),
    reduction: &Var<'t>,
) -> Result<Var<'t>> {
    let shape = x.shape();
    let [h, w, c] = shape[..] else {
        return Err(Error::shape("patch_merging", format!("expected [h,w,C], got {shape:?}")));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("patch_merging", format!("odd extent {h}x{w}")));
    }
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                idx.push(Some((2 * i + dy) * w + 2 * j + dx));
            }
        }
    }
    x.reshape(&[h * w, c])?
        .gather_rows(Rc::new(idx))?
        .reshape(&[h / 2, w / 2, 4 * c])?
        .layer_norm(norm.0, norm.1, LN_EPS)?
        .linear(reduction, None)
}

pub fn block_prefix(stage: usize, block: usize) -> String {
    format!("stages.{stage}.blocks.{block}")
}

/// Runs the four stages and returns their outputs, each captured before
/// the following patch merge.
pub fn backbone_forward<'t>(
    image: &Var<'t>,
    config: &SwinConfig,
    params: &BoundParams<'t>,
) -> Result<[Var<'t>; 4]> {
    let shape = image.shape();
    if shape != [config.input_h, config.input_w, 3] {
        return Err(Error::shape(
            "backbone_forward",
            format!("image {shape:?} vs config input {}x{}", config.input_h, config.input_w),
        ));
    }
    let mut x = patch_embed(image, &params.var("patch_embed.weight")?, &params.var("patch_embed.bias")?)?;
    let mut outs = Vec::with_capacity(4);
    for stage in 0..4 {
        if stage > 0 {
            let p = format!("stages.{}.merge", stage - 1);
            x = patch_merging(
                &x,
                (&params.var(&format!("{p}.norm.gamma"))?, &params.var(&format!("{p}.norm.beta"))?),
                &params.var(&format!("{p}.reduction.weight"))?,
            )?;
        }
        let (window, shift) = config.stage_window(stage);
        for block in 0..config.depths[stage] {
            let weights = BlockWeights::from_params(params, &block_prefix(stage, block), config.heads[stage])?;
            let s = if block % 2 == 1 { shift } else { 0 };
            x = swin_block(&x, &weights, window, s)?;
        }
        outs.push(x);
    }
    Ok([outs[0], outs[1], outs[2], outs[3]])
}
