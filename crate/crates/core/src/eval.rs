//! Object keypoint similarity and COCO-style AP/AR aggregation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{DecodedKeypoint, KeypointSet};

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub fn oks_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

pub const RECALL_POINTS: usize = 101;
pub const MEDIUM_AREA: f64 = 32.0 * 32.0;
pub const LARGE_AREA: f64 = 96.0 * 96.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthInstance {
    pub id: u64,
    pub image_id: u64,
    pub keypoints: KeypointSet,
    /// Person segment area in px² (the squared OKS scale).
    pub area: f64,
    /// `[x, y, w, h]`.
    pub bbox: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionInstance {
    pub image_id: u64,
    pub keypoints: Vec<DecodedKeypoint>,
    pub score: f64,
}

impl PredictionInstance {
    /// Instance confidence is the mean keypoint score.
    pub fn new(image_id: u64, keypoints: Vec<DecodedKeypoint>) -> Self {
        let score = if keypoints.is_empty() {
            0.0
        } else {
            keypoints.iter().map(|k| k.score).sum::<f64>() / keypoints.len() as f64
        };
        PredictionInstance { image_id, keypoints, score }
    }

    /// Area of the keypoints' bounding box, used for area-range filtering of
    /// unmatched predictions.
    pub fn keypoint_box_area(&self) -> f64 {
        let xs = self.keypoints.iter().map(|k| k.x);
        let ys = self.keypoints.iter().map(|k| k.y);
        let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        let (y0, y1) = ys.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if x0.is_finite() {
            (x1 - x0) * (y1 - y0)
        } else {
            0.0
        }
    }
}

/// Per-keypoint falloff constants `k_i`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointConstants(pub Vec<f64>);

impl KeypointConstants {
    /// The published COCO person constants (`k_i = 2σ_i`).
    pub fn coco() -> Self {
        const SIGMAS: [f64; 17] = [
            0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072, 0.062, 0.062, 0.107,
            0.107, 0.087, 0.087, 0.089, 0.089,
        ];
        KeypointConstants(SIGMAS.iter().map(|s| 2.0 * s).collect())
    }

    pub fn uniform(k: usize, value: f64) -> Self {
        KeypointConstants(vec![value; k])
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_m: f64,
    pub ap_l: f64,
    pub ar: f64,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "AP    {:.4}", self.ap)?;
        writeln!(f, "AP50  {:.4}", self.ap50)?;
        writeln!(f, "AP75  {:.4}", self.ap75)?;
        writeln!(f, "APM   {:.4}", self.ap_m)?;
        writeln!(f, "APL   {:.4}", self.ap_l)?;
        write!(f, "AR    {:.4}", self.ar)
    }
}

/// `mean_i exp(-d_i² / (2 s² k_i²))` over labelled ground-truth keypoints,
/// with `s² = area`.
pub fn oks(pred: &PredictionInstance, gt: &GroundTruthInstance, k: &KeypointConstants) -> Result<f64> {
    let n = gt.keypoints.len();
    if pred.keypoints.len() != n || k.0.len() != n {
        return Err(Error::shape(
            "oks",
            format!("{} predicted, {} labelled, {} constants", pred.keypoints.len(), n, k.0.len()),
        ));
    }
    if !(gt.area > 0.0) {
        return Err(Error::InvalidArgument(format!("ground-truth area must be positive, got {}", gt.area)));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((g, p), ki) in gt.keypoints.points.iter().zip(&pred.keypoints).zip(&k.0) {
        if !g.labelled() {
            continue;
        }
        let d2 = (p.x - g.x).powi(2) + (p.y - g.y).powi(2);
        total += (-d2 / (2.0 * gt.area * ki * ki)).exp();
        count += 1;
    }
    if count == 0 {
        return Err(Error::UnevaluableInstance);
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalParams {
    pub constants: KeypointConstants,
    /// Predictions kept per image, highest confidence first.
    pub max_dets: usize,
    /// Images in the evaluation set; the ground-truth images when `None`.
    pub image_ids: Option<Vec<u64>>,
}

impl EvalParams {
    pub fn new(constants: KeypointConstants) -> Self {
        EvalParams { constants, max_dets: 20, image_ids: None }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum AreaRange {
    All,
    Medium,
    Large,
}

impl AreaRange {
    pub(crate) fn contains(self, area: f64) -> bool {
        match self {
            AreaRange::All => true,
            AreaRange::Medium => area > MEDIUM_AREA && area <= LARGE_AREA,
            AreaRange::Large => area > LARGE_AREA,
        }
    }
}

/// Matching outcome of one detection at one threshold.
#[derive(Clone, Copy, Debug)]
struct DetResult {
    score: f64,
    matched: bool,
    ignored: bool,
}

struct ImageEval {
    /// `[threshold][detection]`
    dets: Vec<Vec<DetResult>>,
    positives: usize,
}

fn evaluate_image(
    dets: &[&PredictionInstance],
    gts: &[&GroundTruthInstance],
    range: AreaRange,
    params: &EvalParams,
) -> Result<ImageEval> {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    let gt_ignore: Vec<bool> =
        gts.iter().map(|g| g.keypoints.num_labelled() == 0 || !range.contains(g.area)).collect();
    order.sort_by_key(|&g| gt_ignore[g]);

    let mut sims = vec![vec![0.0; gts.len()]; dets.len()];
    for (d, det) in dets.iter().enumerate() {
        for (g, gt) in gts.iter().enumerate() {
            sims[d][g] = match oks(det, gt, &params.constants) {
                Ok(v) => v,
                Err(Error::UnevaluableInstance) => 0.0,
                Err(e) => return Err(e),
            };
        }
    }

    let mut per_threshold = Vec::with_capacity(10);
    for t in oks_thresholds() {
        let mut gt_taken = vec![false; gts.len()];
        let mut results = Vec::with_capacity(dets.len());
        for (d, det) in dets.iter().enumerate() {
            let mut best: Option<usize> = None;
            let mut bar = t.min(1.0 - 1e-10);
            for &g in &order {
                if gt_taken[g] {
                    continue;
                }
                if let Some(b) = best {
                    if !gt_ignore[b] && gt_ignore[g] {
                        break;
                    }
                }
                if sims[d][g] < bar {
                    continue;
                }
                bar = sims[d][g];
                best = Some(g);
            }
            let result = match best {
                Some(g) => {
                    gt_taken[g] = true;
                    DetResult { score: det.score, matched: true, ignored: gt_ignore[g] }
                }
                None => DetResult {
                    score: det.score,
                    matched: false,
                    ignored: !range.contains(det.keypoint_box_area()),
                },
            };
            results.push(result);
        }
        per_threshold.push(results);
    }
    Ok(ImageEval { dets: per_threshold, positives: gt_ignore.iter().filter(|i| !**i).count() })
}

/// Precision interpolated at 101 recall points, and final recall.
fn precision_recall(mut dets: Vec<DetResult>, positives: usize) -> (f64, f64) {
    if positives == 0 {
        return (0.0, 0.0);
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for d in dets.iter().filter(|d| !d.ignored) {
        if d.matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / positives as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < level);
        sum += precision.get(idx).copied().unwrap_or(0.0);
    }
    (sum / RECALL_POINTS as f64, recall.last().copied().unwrap_or(0.0))
}

fn evaluate_range(
    images: &BTreeSet<u64>,
    preds: &BTreeMap<u64, Vec<&PredictionInstance>>,
    gts: &BTreeMap<u64, Vec<&GroundTruthInstance>>,
    range: AreaRange,
    params: &EvalParams,
) -> Result<([f64; 10], [f64; 10])> {
    let mut pooled: Vec<Vec<DetResult>> = vec![Vec::new(); 10];
    let mut positives = 0;
    for image in images {
        let dets = preds.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let g = gts.get(image).map(Vec::as_slice).unwrap_or(&[]);
        let e = evaluate_image(dets, g, range, params)?;
        positives += e.positives;
        for (t, d) in e.dets.into_iter().enumerate() {
            pooled[t].extend(d);
        }
    }
    let mut ap = [0.0; 10];
    let mut ar = [0.0; 10];
    for (t, dets) in pooled.into_iter().enumerate() {
        (ap[t], ar[t]) = precision_recall(dets, positives);
    }
    Ok((ap, ar))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// COCO-style keypoint AP/AR. Area ranges with no ground truth report 0.
pub fn evaluate(
    preds: &[PredictionInstance],
    gts: &[GroundTruthInstance],
    params: &EvalParams,
) -> Result<MetricsReport> {
    let images: BTreeSet<u64> = match &params.image_ids {
        Some(ids) => ids.iter().copied().collect(),
        None => gts.iter().map(|g| g.image_id).collect(),
    };
    let mut by_image: BTreeMap<u64, Vec<&PredictionInstance>> = BTreeMap::new();
    for p in preds {
        if !images.contains(&p.image_id) {
            return Err(Error::UnknownImage(p.image_id));
        }
        if !p.score.is_finite() || p.keypoints.iter().any(|k| !(k.x.is_finite() && k.y.is_finite())) {
            return Err(Error::NonFinite("prediction"));
        }
        by_image.entry(p.image_id).or_default().push(p);
    }
    for dets in by_image.values_mut() {
        dets.sort_by(|a, b| b.score.total_cmp(&a.score));
        dets.truncate(params.max_dets);
    }
    let mut gt_by_image: BTreeMap<u64, Vec<&GroundTruthInstance>> = BTreeMap::new();
    for g in gts {
        gt_by_image.entry(g.image_id).or_default().push(g);
    }
    let (ap_all, ar_all) = evaluate_range(&images, &by_image, &gt_by_image, AreaRange::All, params)?;
    let (ap_m, _) = evaluate_range(&images, &by_image, &gt_by_image, AreaRange::Medium, params)?;
    let (ap_l, _) = evaluate_range(&images, &by_image, &gt_by_image, AreaRange::Large, params)?;
    Ok(MetricsReport {
        ap: mean(&ap_all),
        ap50: ap_all[0],
        ap75: ap_all[5],
        ap_m: mean(&ap_m),
        ap_l: mean(&ap_l),
        ar: mean(&ar_all),
    })
}
