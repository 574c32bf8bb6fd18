//! Gaussian heatmap targets, masked L2 loss and argmax decoding.
//!
//! Heatmap coordinates are network-input coordinates divided by
//! [`HEATMAP_STRIDE`]; heatmap pixel `(i, j)` sits at coordinate `(j, i)`.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::coco::CropTransform;
use crate::config::PATCH_SIZE;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ratio between network-input and heatmap resolution.
pub const HEATMAP_STRIDE: f64 = PATCH_SIZE as f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    /// 0 = unlabelled, 1 = labelled but occluded, 2 = visible.
    pub v: u8,
}

impl Keypoint {
    pub fn labelled(&self) -> bool {
        self.v > 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Keypoint>,
}

impl KeypointSet {
    pub fn new(points: Vec<Keypoint>) -> Self {
        KeypointSet { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_labelled(&self) -> usize {
        self.points.iter().filter(|p| p.labelled()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTarget {
    /// `[Hm, Wm, K]`.
    pub maps: Tensor,
    /// 1 for supervised channels, 0 otherwise.
    pub weights: Vec<f64>,
}

/// Renders one Gaussian per labelled keypoint, centred on the nearest
/// heatmap pixel and truncated beyond 3σ.
pub fn gaussian_targets(
    kps: &KeypointSet,
    transform: &CropTransform,
    hm_h: usize,
    hm_w: usize,
    sigma: f64,
) -> Result<HeatmapTarget> {
    if hm_h == 0 || hm_w == 0 {
        return Err(Error::InvalidArgument(format!("heatmap extent {hm_h}x{hm_w} must be positive")));
    }
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let k = kps.len();
    let mut maps = vec![0.0; hm_h * hm_w * k];
    let mut weights = vec![0.0; k];
    let cutoff = 9.0 * sigma * sigma;
    for (c, kp) in kps.points.iter().enumerate() {
        if !kp.labelled() {
            continue;
        }
        let (ix, iy) = transform.apply(kp.x, kp.y);
        let (mx, my) = ((ix / HEATMAP_STRIDE).round(), (iy / HEATMAP_STRIDE).round());
        if !(mx >= 0.0 && my >= 0.0 && mx < hm_w as f64 && my < hm_h as f64) {
            continue;
        }
        weights[c] = 1.0;
        for y in 0..hm_h {
            for x in 0..hm_w {
                let d2 = (x as f64 - mx).powi(2) + (y as f64 - my).powi(2);
                if d2 <= cutoff {
                    maps[(y * hm_w + x) * k + c] = (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
        }
    }
    Ok(HeatmapTarget { maps: Tensor::new(vec![hm_h, hm_w, k], maps)?, weights })
}

/// Mean squared error over pixels, averaged over supervised channels.
/// Zero when no channel is supervised.
pub fn masked_mse<'t>(pred: &Var<'t>, target: &HeatmapTarget) -> Result<Var<'t>> {
    let shape = pred.shape();
    if shape != target.maps.shape() || target.weights.len() != *shape.last().unwrap_or(&0) {
        return Err(Error::shape(
            "masked_mse",
            format!("prediction {shape:?} vs target {:?}", target.maps.shape()),
        ));
    }
    let k = target.weights.len();
    let pixels = target.maps.numel() / k.max(1);
    let active: f64 = target.weights.iter().sum();
    let t = pred.constant_like(target.maps.clone());
    let diff = pred.sub(&t)?;
    let sq = diff.mul(&diff)?;
    let mask = Tensor::from_fn(target.maps.shape(), |i| target.weights[i % k]);
    let total = sq.mul_const(Rc::new(mask))?.sum()?;
    if active == 0.0 {
        return total.scale(0.0);
    }
    total.scale(1.0 / (pixels as f64 * active))
}

/// Plain-value version of [`masked_mse`].
pub fn masked_mse_value(pred: &Tensor, target: &HeatmapTarget) -> Result<f64> {
    if pred.shape() != target.maps.shape() {
        return Err(Error::shape(
            "masked_mse",
            format!("prediction {:?} vs target {:?}", pred.shape(), target.maps.shape()),
        ));
    }
    let k = target.weights.len();
    let active: f64 = target.weights.iter().sum();
    if active == 0.0 {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.maps.data())
        .enumerate()
        .map(|(i, (p, t))| target.weights[i % k] * (p - t) * (p - t))
        .sum();
    Ok(total / ((pred.numel() / k) as f64 * active))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedKeypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Per-channel argmax (ties go to the smallest row-major index), optionally
/// shifted a quarter pixel toward the larger neighbour on each axis.
pub fn decode_heatmaps(hm: &Tensor, refine: bool) -> Result<Vec<DecodedKeypoint>> {
    let [h, w, k] = hm.shape()[..] else {
        return Err(Error::shape("decode_heatmaps", format!("expected [Hm,Wm,K], got {:?}", hm.shape())));
    };
    let at = |y: usize, x: usize, c: usize| hm.data()[(y * w + x) * k + c];
    let mut out = Vec::with_capacity(k);
    for c in 0..k {
        let mut best = (0usize, 0usize);
        let mut score = f64::NEG_INFINITY;
        for y in 0..h {
            for x in 0..w {
                let v = at(y, x, c);
                if v > score {
                    score = v;
                    best = (y, x);
                }
            }
        }
        let (by, bx) = best;
        let (mut fx, mut fy) = (bx as f64, by as f64);
        if refine {
            if bx > 0 && bx + 1 < w {
                fx += 0.25 * (at(by, bx + 1, c) - at(by, bx - 1, c)).signum_or_zero();
            }
            if by > 0 && by + 1 < h {
                fy += 0.25 * (at(by + 1, bx, c) - at(by - 1, bx, c)).signum_or_zero();
            }
        }
        out.push(DecodedKeypoint { x: fx, y: fy, score });
    }
    Ok(out)
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

/// Maps decoded heatmap coordinates back to original-image pixels.
pub fn coords_to_image_space(coords: &[DecodedKeypoint], transform: &CropTransform) -> Vec<DecodedKeypoint> {
    coords
        .iter()
        .map(|c| {
            let (x, y) = transform.invert(c.x * HEATMAP_STRIDE, c.y * HEATMAP_STRIDE);
            DecodedKeypoint { x, y, score: c.score }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{backward, Tape};

    fn kp(x: f64, y: f64, v: u8) -> Keypoint {
        Keypoint { x, y, v }
    }

    #[test]
    fn gaussian_peak_and_offsets() {
        let id = CropTransform::identity();
        let set = KeypointSet::new(vec![kp(20.0, 12.0, 2), kp(1e9, f64::MAX, 0)]);
        let t = gaussian_targets(&set, &id, 16, 16, 2.0).unwrap();
        assert_eq!(t.weights, vec![1.0, 0.0]);
        assert_eq!(t.maps.at(&[3, 5, 0]), 1.0);
        let max = t.maps.data().iter().step_by(2).copied().fold(f64::MIN, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(t.maps.at(&[3, 6, 0]), (-0.125f64).exp());
        assert!(t.maps.data().iter().skip(1).step_by(2).all(|v| *v == 0.0));
        // beyond 3 sigma
        assert_eq!(t.maps.at(&[3, 12, 0]), 0.0);
    }

    #[test]
    fn outside_keypoint_gets_zero_weight() {
        let set = KeypointSet::new(vec![kp(-30.0, 4.0, 2)]);
        let t = gaussian_targets(&set, &CropTransform::identity(), 8, 8, 2.0).unwrap();
        assert_eq!(t.weights, vec![0.0]);
        assert!(t.maps.data().iter().all(|v| *v == 0.0));
        assert!(gaussian_targets(&set, &CropTransform::identity(), 0, 8, 2.0).is_err());
        assert!(gaussian_targets(&set, &CropTransform::identity(), 8, 8, 0.0).is_err());
    }

    #[test]
    fn mse_examples() {
        let target = HeatmapTarget { maps: Tensor::ones(&[1, 1, 1]), weights: vec![1.0] };
        let tape = Tape::new();
        let pred = tape.leaf(Tensor::full(&[1, 1, 1], 0.5));
        let loss = masked_mse(&pred, &target).unwrap();
        assert_eq!(loss.value().item().unwrap(), 0.25);
        let g = backward(&loss).unwrap().get(&pred);
        assert_eq!(g.data(), &[-1.0]);

        let same = tape.leaf(Tensor::ones(&[1, 1, 1]));
        assert_eq!(masked_mse(&same, &target).unwrap().value().item().unwrap(), 0.0);

        let off = HeatmapTarget { maps: Tensor::ones(&[1, 1, 1]), weights: vec![0.0] };
        assert_eq!(masked_mse(&pred, &off).unwrap().value().item().unwrap(), 0.0);
        assert_eq!(masked_mse_value(&pred.value(), &off).unwrap(), 0.0);
        assert_eq!(masked_mse_value(&pred.value(), &target).unwrap(), 0.25);
    }

    #[test]
    fn decode_examples() {
        let set = KeypointSet::new(vec![kp(24.0, 36.0, 2)]);
        let t = gaussian_targets(&set, &CropTransform::identity(), 16, 16, 2.0).unwrap();
        let d = decode_heatmaps(&t.maps, true).unwrap();
        assert_eq!((d[0].x, d[0].y, d[0].score), (6.0, 9.0, 1.0));

        let flat = Tensor::full(&[4, 4, 1], 0.3);
        let d = decode_heatmaps(&flat, true).unwrap();
        assert_eq!((d[0].x, d[0].y), (0.0, 0.0));

        let mut skew = t.maps.clone();
        skew.data_mut()[9 * 16 + 7] += 0.1;
        let d = decode_heatmaps(&skew, true).unwrap();
        assert_eq!((d[0].x, d[0].y), (6.25, 9.0));
        let raw = decode_heatmaps(&skew, false).unwrap();
        assert_eq!((raw[0].x, raw[0].y), (6.0, 9.0));
    }

    #[test]
    fn image_space_scaling() {
        let c = [DecodedKeypoint { x: 2.5, y: 1.0, score: 0.7 }];
        let out = coords_to_image_space(&c, &CropTransform::identity());
        assert_eq!((out[0].x, out[0].y, out[0].score), (10.0, 4.0, 0.7));
        let half = CropTransform::new(0.5, 0.0, 0.0).unwrap();
        let out = coords_to_image_space(&c, &half);
        assert_eq!((out[0].x, out[0].y), (20.0, 8.0));
    }
}
