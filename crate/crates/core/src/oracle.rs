//! Slow, independent reference implementations used by the test suites and
//! `selfcheck`.
//!
//! Nothing here uses the tensor kernels: every reference is written as plain
//! loops over `f64` slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{backward, Tape, Var};
use crate::config::{LN_EPS, PATCH_SIZE};
use crate::error::{Error, Result};
use crate::eval::{oks, oks_thresholds, EvalParams, GroundTruthInstance, MetricsReport, PredictionInstance};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn layer_norm_row(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let denom = (var + LN_EPS).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) / denom * g + b).collect()
}

/// `x · W + b` with `W` stored `[din, dout]`.
fn linear_row(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let dout = w.shape()[1];
    let mut out = match b {
        Some(b) => b.data().to_vec(),
        None => vec![0.0; dout],
    };
    for (i, xi) in x.iter().enumerate() {
        for (o, wv) in out.iter_mut().zip(&w.data()[i * dout..(i + 1) * dout]) {
            *o += xi * wv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Window-grid coordinates of a token after padding to `ext_p` and rolling
/// by `-shift`, plus its region label (0, 1 or 2) along that axis.
fn shifted_axis(p: usize, ext_p: usize, m: usize, shift: usize) -> (usize, usize) {
    let q = (p + ext_p - shift % ext_p) % ext_p;
    let region = if q < ext_p - m {
        0
    } else if q < ext_p - shift {
        1
    } else {
        2
    };
    (q, region)
}

/// One transformer block where token `p` attends to token `q` iff `allowed`
/// says so; `offset(p, q)` gives the bias-table row for the pair.
fn reference_block_with(
    x: &Tensor,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
    offset: impl Fn(usize, usize) -> usize,
) -> Result<Tensor> {
    let [h, w, c] = x.shape()[..] else {
        return Err(Error::shape("reference_block", format!("{:?}", x.shape())));
    };
    let p = |n: &str| params.get(&format!("{prefix}.{n}"));
    let (g1, b1) = (p("norm1.gamma")?, p("norm1.beta")?);
    let (g2, b2) = (p("norm2.gamma")?, p("norm2.beta")?);
    let table = params.get(&format!("{prefix}.attn.rel_bias")).ok();
    let n = h * w;
    let d = c / heads;
    let tokens: Vec<&[f64]> = x.data().chunks(c).collect();
    let (qkv_w, qkv_b) = (p("attn.qkv.weight")?, p("attn.qkv.bias")?);
    let (proj_w, proj_b) = (p("attn.proj.weight")?, p("attn.proj.bias")?);
    let (fc1_w, fc1_b) = (p("mlp.fc1.weight")?, p("mlp.fc1.bias")?);
    let (fc2_w, fc2_b) = (p("mlp.fc2.weight")?, p("mlp.fc2.bias")?);
    let qkv: Vec<Vec<f64>> =
        tokens.iter().map(|t| linear_row(&layer_norm_row(t, g1.data(), b1.data()), qkv_w, Some(qkv_b))).collect();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(n * c);
    for i in 0..n {
        let mut attended = vec![0.0; c];
        for head in 0..heads {
            let q = &qkv[i][head * d..(head + 1) * d];
            let keys: Vec<usize> = (0..n).filter(|&j| allowed(i, j)).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|&j| {
                    let k = &qkv[j][c + head * d..c + (head + 1) * d];
                    let dot: f64 = q.iter().zip(k).map(|(a, b)| a * b).sum();
                    let bias = table.map_or(0.0, |t| t.data()[offset(i, j) * heads + head]);
                    dot * scale + bias
                })
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (&j, e) in keys.iter().zip(&exps) {
                let v = &qkv[j][2 * c + head * d..2 * c + (head + 1) * d];
                for (a, vv) in attended[head * d..(head + 1) * d].iter_mut().zip(v) {
                    *a += e / z * vv;
                }
            }
        }
        let projected = linear_row(&attended, proj_w, Some(proj_b));
        let x1: Vec<f64> = tokens[i].iter().zip(&projected).map(|(a, b)| a + b).collect();
        let hidden: Vec<f64> =
            linear_row(&layer_norm_row(&x1, g2.data(), b2.data()), fc1_w, Some(fc1_b)).into_iter().map(gelu).collect();
        let mlp = linear_row(&hidden, fc2_w, Some(fc2_b));
        out.extend(x1.iter().zip(&mlp).map(|(a, b)| a + b));
    }
    Tensor::new(vec![h, w, c], out)
}

/// Block with dense attention over every token of the map; the bias table
/// must cover offsets up to `max(h, w) − 1`.
pub fn dense_block(x: &Tensor, params: &ParamStore, prefix: &str, heads: usize) -> Result<Tensor> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let m = h.max(w);
    reference_block_with(x, params, prefix, heads, |_, _| true, |i, j| {
        let (dy, dx) = ((i / w) + m - 1 - (j / w), (i % w) + m - 1 - (j % w));
        dy * (2 * m - 1) + dx
    })
}

/// Block where each token attends to the real tokens sharing both its
/// shifted window and its wrap-around region.
pub fn region_block(
    x: &Tensor,
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    window: usize,
    shift: usize,
) -> Result<Tensor> {
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let (hp, wp) = (h.div_ceil(window) * window, w.div_ceil(window) * window);
    let coords = |i: usize| {
        let (qy, ry) = shifted_axis(i / w, hp, window, shift);
        let (qx, rx) = shifted_axis(i % w, wp, window, shift);
        (qy, qx, ry, rx)
    };
    reference_block_with(
        x,
        params,
        prefix,
        heads,
        |i, j| {
            let (ay, ax, ry, rx) = coords(i);
            let (by, bx, sy, sx) = coords(j);
            ay / window == by / window && ax / window == bx / window && (ry, rx) == (sy, sx)
        },
        |i, j| {
            let (ay, ax, _, _) = coords(i);
            let (by, bx, _, _) = coords(j);
            let dy = ay % window + window - 1 - by % window;
            let dx = ax % window + window - 1 - bx % window;
            dy * (2 * window - 1) + dx
        },
    )
}

/// Random, deliberately non-trivial weights for one block under `prefix`.
pub fn random_block_params(prefix: &str, c: usize, heads: usize, window: usize, rng: &mut impl Rng) -> ParamStore {
    let mut uniform = |shape: &[usize], centre: f64, spread: f64| {
        Tensor::from_fn(shape, |_| centre + rng.gen_range(-spread..spread))
    };
    let span = 2 * window - 1;
    let hidden = 4 * c;
    let mut p = ParamStore::new();
    for (name, t) in [
        ("norm1.gamma", uniform(&[c], 1.0, 0.3)),
        ("norm1.beta", uniform(&[c], 0.0, 0.3)),
        ("attn.qkv.weight", uniform(&[c, 3 * c], 0.0, 0.6)),
        ("attn.qkv.bias", uniform(&[3 * c], 0.0, 0.2)),
        ("attn.rel_bias", uniform(&[span * span, heads], 0.0, 1.0)),
        ("attn.proj.weight", uniform(&[c, c], 0.0, 0.4)),
        ("attn.proj.bias", uniform(&[c], 0.0, 0.2)),
        ("norm2.gamma", uniform(&[c], 1.0, 0.3)),
        ("norm2.beta", uniform(&[c], 0.0, 0.3)),
        ("mlp.fc1.weight", uniform(&[c, hidden], 0.0, 0.4)),
        ("mlp.fc1.bias", uniform(&[hidden], 0.0, 0.2)),
        ("mlp.fc2.weight", uniform(&[hidden, c], 0.0, 0.3)),
        ("mlp.fc2.bias", uniform(&[c], 0.0, 0.2)),
    ] {
        p.insert(format!("{prefix}.{name}"), t);
    }
    p
}

/// Direct 4×4, stride-4 convolution equivalent of the patch embedding.
pub fn reference_patch_embed(image: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [h, w, 3] = image.shape()[..] else {
        return Err(Error::shape("reference_patch_embed", format!("{:?}", image.shape())));
    };
    let c = weight.shape()[1];
    let (oh, ow) = (h / PATCH_SIZE, w / PATCH_SIZE);
    let mut out = Vec::with_capacity(oh * ow * c);
    for i in 0..oh {
        for j in 0..ow {
            for o in 0..c {
                let mut acc = bias.data()[o];
                for py in 0..PATCH_SIZE {
                    for px in 0..PATCH_SIZE {
                        for ch in 0..3 {
                            let pixel = image.at(&[i * PATCH_SIZE + py, j * PATCH_SIZE + px, ch]);
                            acc += pixel * weight.at(&[(py * PATCH_SIZE + px) * 3 + ch, o]);
                        }
                    }
                }
                out.push(acc);
            }
        }
    }
    Tensor::new(vec![oh, ow, c], out)
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    /// Largest relative error: `‖a − n‖ / max(‖a‖, ‖n‖, GRAD_SCALE_FLOOR)` for
    /// directional checks; coordinate checks use the larger of that scale and
    /// the gradient's max-abs entry.
    pub max_rel_error: f64,
    pub checks: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checks: self.checks + other.checks,
        }
    }
}

/// Gradient norms below this are compared in absolute terms.
pub const GRAD_SCALE_FLOOR: f64 = 1e-8;

fn rel_error(a: &[f64], n: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(GRAD_SCALE_FLOOR)
}

/// Central-difference check of `f` at `inputs`.
///
/// The output of `f` is reduced to a scalar with fixed random weights. Each
/// input gets one directional check along a random direction and up to
/// `coords` single-coordinate checks.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, seed: u64, coords: usize) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let tape = Tape::new();
    let leaves: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &leaves)?;
    let weights = std::rc::Rc::new(Tensor::from_fn(&out.shape(), |_| rng.gen_range(-1.0..1.0)));
    let loss = out.mul_const(weights.clone())?.sum()?;
    let grads = backward(&loss)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|l| grads.get(l)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        Ok(out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    let perturbed = |idx: usize, dir: &Tensor, step: f64| -> Result<f64> {
        let mut xs = inputs.to_vec();
        let moved: Vec<f64> = xs[idx].data().iter().zip(dir.data()).map(|(x, d)| x + step * d).collect();
        xs[idx] = Tensor::new(xs[idx].shape().to_vec(), moved)?;
        eval(&xs)
    };

    let mut report = GradCheck::default();
    for (idx, input) in inputs.iter().enumerate() {
        let dir = Tensor::from_fn(input.shape(), |_| rng.gen_range(-1.0..1.0));
        let numeric = (perturbed(idx, &dir, eps)? - perturbed(idx, &dir, -eps)?) / (2.0 * eps);
        let exact: f64 = analytic[idx].data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        report = report.merge(GradCheck { max_rel_error: rel_error(&[exact], &[numeric]), checks: 1 });

        let picks = coords.min(input.numel());
        if picks == 0 {
            continue;
        }
        let mut a = Vec::with_capacity(picks);
        let mut n = Vec::with_capacity(picks);
        for _ in 0..picks {
            let i = rng.gen_range(0..input.numel());
            let unit = Tensor::from_fn(input.shape(), |j| if j == i { 1.0 } else { 0.0 });
            n.push((perturbed(idx, &unit, eps)? - perturbed(idx, &unit, -eps)?) / (2.0 * eps));
            a.push(analytic[idx].data()[i]);
        }
        // single coordinates are judged against the scale of the whole gradient
        let scale = analytic[idx].data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a.iter().zip(&n).map(|(x, y)| (x - y).abs()).fold(0.0f64, f64::max)
            / scale.max(GRAD_SCALE_FLOOR);
        report = report.merge(GradCheck { max_rel_error: err.min(rel_error(&a, &n)), checks: picks });
    }
    Ok(report)
}

/// Matching class of a detection: matched to a counted ground truth (2),
/// matched to an ignored one (1), or unmatched (0).
type MatchKey = (u8, f64);

/// Exhaustive search for the per-image matching whose detection keys, read
/// in confidence order, are lexicographically largest.
fn best_matching(
    sims: &[Vec<f64>],
    gt_ignored: &[bool],
    threshold: f64,
) -> Vec<Option<usize>> {
    fn search(
        d: usize,
        sims: &[Vec<f64>],
        ignored: &[bool],
        t: f64,
        taken: &mut Vec<bool>,
        current: &mut Vec<Option<usize>>,
        best: &mut Option<(Vec<MatchKey>, Vec<Option<usize>>)>,
    ) {
        if d == sims.len() {
            let keys: Vec<MatchKey> = current
                .iter()
                .enumerate()
                .map(|(d, m)| match m {
                    Some(g) => (if ignored[*g] { 1 } else { 2 }, sims[d][*g]),
                    None => (0, 0.0),
                })
                .collect();
            let better = match best {
                None => true,
                Some((b, _)) => keys.partial_cmp(b) == Some(std::cmp::Ordering::Greater),
            };
            if better {
                *best = Some((keys, current.clone()));
            }
            return;
        }
        current.push(None);
        search(d + 1, sims, ignored, t, taken, current, best);
        current.pop();
        for g in 0..ignored.len() {
            if !taken[g] && sims[d][g] >= t {
                taken[g] = true;
                current.push(Some(g));
                search(d + 1, sims, ignored, t, taken, current, best);
                current.pop();
                taken[g] = false;
            }
        }
    }
    let mut best = None;
    search(0, sims, gt_ignored, threshold, &mut vec![false; gt_ignored.len()], &mut Vec::new(), &mut best);
    best.map(|(_, m)| m).unwrap_or_default()
}

/// Brute-force counterpart of [`crate::eval::evaluate`].
pub fn brute_force_evaluate(
    preds: &[PredictionInstance],
    gts: &[GroundTruthInstance],
    params: &EvalParams,
) -> Result<MetricsReport> {
    let mut images: Vec<u64> = match &params.image_ids {
        Some(ids) => ids.clone(),
        None => gts.iter().map(|g| g.image_id).collect(),
    };
    images.sort_unstable();
    images.dedup();
    if let Some(p) = preds.iter().find(|p| images.binary_search(&p.image_id).is_err()) {
        return Err(Error::UnknownImage(p.image_id));
    }
    let medium = |a: f64| a > crate::eval::MEDIUM_AREA && a <= crate::eval::LARGE_AREA;
    let large = |a: f64| a > crate::eval::LARGE_AREA;
    let all = |_: f64| true;
    let ranges: [&dyn Fn(f64) -> bool; 3] = [&all, &medium, &large];
    let mut aps = [[0.0; 10]; 3];
    let mut ars = [0.0; 10];
    for (r, in_range) in ranges.iter().enumerate() {
        for (t, threshold) in oks_thresholds().into_iter().enumerate() {
            // (score, counted, true positive)
            let mut scored: Vec<(f64, bool, bool)> = Vec::new();
            let mut positives = 0usize;
            for &image in &images {
                let mut dets: Vec<&PredictionInstance> = preds.iter().filter(|p| p.image_id == image).collect();
                dets.sort_by(|a, b| b.score.total_cmp(&a.score));
                dets.truncate(params.max_dets);
                let g: Vec<&GroundTruthInstance> = gts.iter().filter(|g| g.image_id == image).collect();
                let ignored: Vec<bool> =
                    g.iter().map(|g| g.keypoints.num_labelled() == 0 || !in_range(g.area)).collect();
                positives += ignored.iter().filter(|i| !**i).count();
                let sims: Vec<Vec<f64>> = dets
                    .iter()
                    .map(|d| g.iter().map(|gt| oks(d, gt, &params.constants).unwrap_or(0.0)).collect())
                    .collect();
                for (d, m) in best_matching(&sims, &ignored, threshold).iter().enumerate() {
                    let counted = match m {
                        Some(g) => !ignored[*g],
                        None => in_range(dets[d].keypoint_box_area()),
                    };
                    scored.push((dets[d].score, counted, m.is_some()));
                }
            }
            if positives == 0 {
                continue;
            }
            scored.sort_by(|a, b| b.0.total_cmp(&a.0));
            let mut curve = Vec::new();
            let (mut tp, mut fp) = (0usize, 0usize);
            for &(_, counted, hit) in &scored {
                if !counted {
                    continue;
                }
                if hit {
                    tp += 1;
                } else {
                    fp += 1;
                }
                curve.push((tp as f64 / positives as f64, tp as f64 / (tp + fp) as f64));
            }
            let mut sum = 0.0;
            for level in 0..crate::eval::RECALL_POINTS {
                let level = level as f64 / 100.0;
                sum += curve.iter().filter(|(rc, _)| *rc >= level).map(|(_, p)| *p).fold(0.0, f64::max);
            }
            aps[r][t] = sum / crate::eval::RECALL_POINTS as f64;
            if r == 0 {
                ars[t] = curve.last().map_or(0.0, |c| c.0);
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(MetricsReport {
        ap: mean(&aps[0]),
        ap50: aps[0][0],
        ap75: aps[0][5],
        ap_m: mean(&aps[1]),
        ap_l: mean(&aps[2]),
        ar: mean(&ars),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_axis_regions() {
        // extent 8, window 4, shift 2: rolled coordinates 0..3 | 4..5 | 6..7
        let labels: Vec<usize> = (0..8).map(|p| shifted_axis(p, 8, 4, 2).1).collect();
        assert_eq!(labels, vec![2, 2, 0, 0, 0, 0, 1, 1]);
        assert_eq!(shifted_axis(2, 8, 4, 2).0, 0);
    }

    #[test]
    fn rel_error_scale() {
        assert_eq!(rel_error(&[1.0], &[1.0]), 0.0);
        assert!((rel_error(&[1.0], &[0.5]) - 0.5).abs() < 1e-15);
        assert_eq!(rel_error(&[0.0], &[0.0]), 0.0);
        assert!((rel_error(&[0.0], &[1e-10]) - 1e-2).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_catches_wrong_gradient() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 2.0]).unwrap();
        let good = check_gradients(std::slice::from_ref(&x), |_, v| v[0].mul(&v[0]), 1, 3).unwrap();
        assert!(good.max_rel_error < 1e-8);
        // value of x², gradient of 2x² through a constant reattached to the tape
        let bad = check_gradients(
            &[x],
            |t, v| {
                let doubled = v[0].mul(&v[0])?.scale(2.0)?;
                let shift = t.constant(v[0].value().map(|a| -a * a));
                doubled.add(&shift)
            },
            1,
            3,
        )
        .unwrap();
        assert!(bad.max_rel_error > 0.1);
    }
}
