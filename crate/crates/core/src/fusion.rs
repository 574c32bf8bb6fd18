//! Top-down pyramid fusion and the heatmap regression head.

use crate::autograd::Var;
use crate::config::FusionMethod;
use crate::error::{Error, Result};
use crate::params::BoundParams;

/// Fusion and head parameters bound to a tape.
pub struct FusionWeights<'t> {
    /// One `Cs → D` projection per pyramid level, finest first.
    pub laterals: [(Var<'t>, Var<'t>); 4],
    /// `2D → D` projections applied after each concatenation, indexed by the
    /// finer level being merged (0..3). Only present in concat mode.
    pub merges: Option<[(Var<'t>, Var<'t>); 3]>,
    pub head: (Var<'t>, Var<'t>),
}

impl<'t> FusionWeights<'t> {
    pub fn from_params(params: &BoundParams<'t>, method: FusionMethod) -> Result<Self> {
        let pair = |p: String| -> Result<(Var<'t>, Var<'t>)> {
            Ok((params.var(&format!("{p}.weight"))?, params.var(&format!("{p}.bias"))?))
        };
        let laterals = [
            pair("fusion.lateral.0".into())?,
            pair("fusion.lateral.1".into())?,
            pair("fusion.lateral.2".into())?,
            pair("fusion.lateral.3".into())?,
        ];
        let merges = match method {
            FusionMethod::Sum => None,
            FusionMethod::Concat => Some([
                pair("fusion.merge.0".into())?,
                pair("fusion.merge.1".into())?,
                pair("fusion.merge.2".into())?,
            ]),
        };
        Ok(FusionWeights { laterals, merges, head: pair("head".into())? })
    }
}

/// 1×1 projection of one pyramid level to the fusion width.
pub fn lateral_project<'t>(feature: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    feature.conv1x1(weight, Some(bias))
}

/// Upsamples `upper` ×2 and merges it with `lower`. `merge` is the `2D → D`
/// projection and is required for [`FusionMethod::Concat`].
pub fn top_down_step<'t>(
    upper: &Var<'t>,
    lower: &Var<'t>,
    method: FusionMethod,
    merge: Option<(&Var<'t>, &Var<'t>)>,
) -> Result<Var<'t>> {
    let (us, ls) = (upper.shape(), lower.shape());
    if us.len() != 3 || ls.len() != 3 || ls[0] != 2 * us[0] || ls[1] != 2 * us[1] || ls[2] != us[2] {
        return Err(Error::shape("top_down_step", format!("upper {us:?} vs lower {ls:?}")));
    }
    let up = upper.bilinear_upsample_x2()?;
    match method {
        FusionMethod::Sum => up.add(lower),
        FusionMethod::Concat => {
            let (w, b) = merge.ok_or_else(|| {
                Error::InvalidArgument("concat fusion needs a merge projection".into())
            })?;
            Var::concat(&[up, *lower], 2)?.conv1x1(w, Some(b))
        }
    }
}

/// Fuses the pyramid coarsest-to-finest into a `[H/4, W/4, D]` map.
pub fn fuse_pyramid<'t>(
    levels: &[Var<'t>; 4],
    weights: &FusionWeights<'t>,
    method: FusionMethod,
) -> Result<Var<'t>> {
    let lateral = |i: usize| lateral_project(&levels[i], &weights.laterals[i].0, &weights.laterals[i].1);
    let mut fused = lateral(3)?;
    for level in (0..3).rev() {
        let merge = weights.merges.as_ref().map(|m| (&m[level].0, &m[level].1));
        fused = top_down_step(&fused, &lateral(level)?, method, merge)?;
    }
    Ok(fused)
}

/// 1×1 projection to one heatmap channel per keypoint, no output activation.
pub fn heatmap_head<'t>(fused: &Var<'t>, weight: &Var<'t>, bias: &Var<'t>) -> Result<Var<'t>> {
    fused.conv1x1(weight, Some(bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::tensor::Tensor;

    #[test]
    fn sum_with_zero_upper_is_lower() {
        let tape = Tape::new();
        let upper = tape.constant(Tensor::zeros(&[2, 3, 4]));
        let lower = tape.constant(Tensor::from_fn(&[4, 6, 4], |i| i as f64 * 0.1));
        let out = top_down_step(&upper, &lower, FusionMethod::Sum, None).unwrap();
        assert_eq!(*out.value(), *lower.value());
    }

    #[test]
    fn sum_of_constants() {
        let tape = Tape::new();
        let upper = tape.constant(Tensor::full(&[1, 2, 3], 0.5));
        let lower = tape.constant(Tensor::full(&[2, 4, 3], 2.0));
        let out = top_down_step(&upper, &lower, FusionMethod::Sum, None).unwrap();
        assert!(out.value().data().iter().all(|v| (*v - 2.5).abs() < 1e-15));
    }

    #[test]
    fn concat_on_single_pixel() {
        let tape = Tape::new();
        let upper = tape.constant(Tensor::new(vec![1, 1, 2], vec![1.0, 2.0]).unwrap());
        let lower = tape.constant(Tensor::from_fn(&[2, 2, 2], |i| i as f64));
        let w = tape.constant(Tensor::from_fn(&[4, 2], |i| (i as f64 - 3.0) * 0.5));
        let b = tape.constant(Tensor::new(vec![2], vec![0.1, -0.1]).unwrap());
        let out = top_down_step(&upper, &lower, FusionMethod::Concat, Some((&w, &b))).unwrap();
        assert_eq!(out.shape(), vec![2, 2, 2]);
        let wv = w.value();
        for p in 0..4 {
            let stacked = [1.0, 2.0, (2 * p) as f64, (2 * p + 1) as f64];
            for o in 0..2 {
                let expect = b.value().data()[o]
                    + (0..4).map(|i| stacked[i] * wv.at(&[i, o])).sum::<f64>();
                assert!((out.value().data()[p * 2 + o] - expect).abs() < 1e-12);
            }
        }
        assert!(top_down_step(&upper, &lower, FusionMethod::Concat, None).is_err());
    }

    #[test]
    fn extent_mismatch_rejected() {
        let tape = Tape::new();
        let upper = tape.constant(Tensor::zeros(&[2, 2, 1]));
        let lower = tape.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(top_down_step(&upper, &lower, FusionMethod::Sum, None).is_err());
    }
}
