//! Oracle suites shared by the `selfcheck` command and the test suites.

use std::fmt;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{
    cyclic_shift, cyclic_unshift, patch_embed, patch_merging, swin_block, window_partition, window_reverse,
    BlockWeights,
};
use crate::coco::{crop_transform, parse_predictions, write_predictions, CROP_PADDING};
use crate::config::{FusionMethod, SwinConfig};
use crate::error::Result;
use crate::eval::{evaluate, oks, EvalParams, GroundTruthInstance, KeypointConstants, PredictionInstance};
use crate::heatmap::{
    coords_to_image_space, decode_heatmaps, gaussian_targets, masked_mse, DecodedKeypoint, HeatmapTarget, Keypoint,
    KeypointSet, HEATMAP_STRIDE,
};
use crate::model::PoseModel;
use crate::oracle::{brute_force_evaluate, check_gradients, dense_block, random_block_params, region_block, GradCheck};
use crate::params::{BoundParams, ParamStore};
use crate::profile::count_params;
use crate::tensor::{Tensor, MASK_NEG};
use crate::weights::{decode, load_weights, save_weights, Dtype};

pub const ATTENTION_DENSE_TOL: f64 = 1e-9;
pub const ATTENTION_REGION_TOL: f64 = 1e-8;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const GRADIENT_SEEDS: u64 = 5;
pub const METRIC_SCENES: usize = 100;

/// One line of the self-check table.
#[derive(Clone, Debug, PartialEq)]
pub struct SuiteOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl SuiteOutcome {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        SuiteOutcome { name: name.into(), passed, detail: detail.into() }
    }

    fn from_result(name: &str, r: Result<SuiteOutcome>) -> Self {
        r.unwrap_or_else(|e| SuiteOutcome::new(name, false, format!("error: {e}")))
    }
}

impl fmt::Display for SuiteOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<4} {:<28} {}", if self.passed { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Largest deviations `(dense, shifted)` between the windowed block and
/// the brute-force references, over `seeds` random draws.
pub fn attention_deviation(seeds: u64) -> Result<(f64, f64)> {
    let (mut dense, mut region) = (0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (h, w, c, heads) in [(4, 4, 8, 2), (3, 5, 6, 3), (8, 8, 4, 1)] {
            let m = h.max(w);
            let params = random_block_params("blk", c, heads, m, &mut rng);
            let x = uniform(&[h, w, c], &mut rng).scale(1.5)?;
            dense = dense.max(run_block(&x, &params, heads, m, 0)?.max_abs_diff(&dense_block(&x, &params, "blk", heads)?));
        }
        for (h, w, m, s) in [(8, 8, 4, 2), (6, 6, 4, 2), (8, 5, 4, 1), (7, 7, 3, 1), (8, 8, 2, 1), (8, 8, 4, 0)] {
            let (c, heads) = (6, 2);
            let params = random_block_params("blk", c, heads, m, &mut rng);
            let x = uniform(&[h, w, c], &mut rng).scale(1.5)?;
            let fast = run_block(&x, &params, heads, m, s)?;
            region = region.max(fast.max_abs_diff(&region_block(&x, &params, "blk", heads, m, s)?));
        }
    }
    Ok((dense, region))
}

fn run_block(x: &Tensor, params: &ParamStore, heads: usize, window: usize, shift: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let weights = BlockWeights::from_params(&bound, "blk", heads)?;
    Ok(swin_block(&tape.constant(x.clone()), &weights, window, shift)?.value().as_ref().clone())
}

type OpFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

fn shifted_block<'t>(_t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    let weights = BlockWeights {
        heads: 2,
        norm1: (v[1], v[2]),
        qkv_w: v[3],
        qkv_b: v[4],
        rel_bias: Some(v[5]),
        proj_w: v[6],
        proj_b: v[7],
        norm2: (v[8], v[9]),
        fc1_w: v[10],
        fc1_b: v[11],
        fc2_w: v[12],
        fc2_b: v[13],
    };
    swin_block(&v[0], &weights, 4, 2)
}

fn mse_op<'t>(_t: &'t Tape, v: &[Var<'t>]) -> Result<Var<'t>> {
    let target = HeatmapTarget {
        maps: Tensor::from_fn(&[3, 3, 2], |i| (i as f64 * 0.37).sin().abs()),
        weights: vec![1.0, 0.0],
    };
    masked_mse(&v[0], &target)
}

/// The op table: name, input shapes, and the op applied to them.
fn op_table() -> Vec<(&'static str, Vec<Vec<usize>>, OpFn)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].add(&v[1])),
        ("sub", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].sub(&v[1])),
        ("mul", vec![vec![3, 4], vec![3, 4]], |_, v| v[0].mul(&v[1])),
        ("mul_const", vec![vec![3, 4]], |_, v| v[0].mul_const(Rc::new(Tensor::from_fn(&[3, 4], |i| i as f64 - 5.0)))),
        ("scale", vec![vec![5]], |_, v| v[0].scale(-2.5)),
        ("add_trailing", vec![vec![2, 3, 4], vec![3, 4]], |_, v| v[0].add_trailing(&v[1])),
        ("matmul", vec![vec![3, 4], vec![4, 5]], |_, v| v[0].matmul(&v[1])),
        ("bmm", vec![vec![2, 3, 4], vec![2, 4, 5]], |_, v| v[0].bmm(&v[1])),
        ("linear", vec![vec![2, 3, 4], vec![4, 5], vec![5]], |_, v| v[0].linear(&v[1], Some(&v[2]))),
        ("conv1x1", vec![vec![3, 3, 4], vec![4, 2], vec![2]], |_, v| v[0].conv1x1(&v[1], Some(&v[2]))),
        ("softmax", vec![vec![2, 5]], |_, v| v[0].softmax_lastdim(None)),
        ("softmax_masked", vec![vec![2, 5]], |_, v| {
            let mask = Tensor::from_fn(&[2, 5], |i| if i % 3 == 1 { MASK_NEG } else { 0.0 });
            v[0].softmax_lastdim(Some(&mask))
        }),
        ("layer_norm", vec![vec![3, 6], vec![6], vec![6]], |_, v| v[0].layer_norm(&v[1], &v[2], crate::config::LN_EPS)),
        ("gelu", vec![vec![4, 3]], |_, v| v[0].gelu()),
        ("permute_reshape", vec![vec![2, 3, 4]], |_, v| v[0].permute(&[2, 0, 1])?.reshape(&[4, 6])),
        ("transpose_last", vec![vec![2, 3, 4]], |_, v| v[0].transpose_last()),
        ("gather_rows", vec![vec![4, 3]], |_, v| v[0].gather_rows(Rc::new(vec![Some(2), None, Some(0), Some(2)]))),
        ("concat", vec![vec![2, 3], vec![2, 2]], |_, v| Var::concat(&[v[0], v[1]], 1)),
        ("narrow", vec![vec![3, 5]], |_, v| v[0].narrow(1, 1, 3)),
        ("upsample_x2", vec![vec![3, 4, 2]], |_, v| v[0].bilinear_upsample_x2()),
        ("sum", vec![vec![3, 4]], |_, v| v[0].sum()),
        ("mean", vec![vec![3, 4]], |_, v| v[0].mean()),
        ("patch_embed", vec![vec![8, 12, 3], vec![48, 5], vec![5]], |_, v| patch_embed(&v[0], &v[1], &v[2])),
        ("patch_merging", vec![vec![4, 6, 3], vec![12], vec![12], vec![12, 6]], |_, v| {
            patch_merging(&v[0], (&v[1], &v[2]), &v[3])
        }),
        ("masked_mse", vec![vec![3, 3, 2]], mse_op),
        (
            "swin_block_shifted",
            vec![
                vec![6, 6, 4],
                vec![4],
                vec![4],
                vec![4, 12],
                vec![12],
                vec![49, 2],
                vec![4, 4],
                vec![4],
                vec![4],
                vec![4],
                vec![4, 16],
                vec![16],
                vec![16, 4],
                vec![4],
            ],
            shifted_block,
        ),
    ]
}

/// Finite-difference results for every differentiable op at one seed.
pub fn op_gradient_checks(seed: u64) -> Result<Vec<(&'static str, GradCheck)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    op_table()
        .into_iter()
        .map(|(name, shapes, op)| {
            let inputs: Vec<Tensor> = shapes.iter().map(|s| uniform(s, &mut rng)).collect();
            Ok((name, check_gradients(&inputs, op, seed, 4)?))
        })
        .collect()
}

/// Finite-difference check of the whole toy model, from image and every
/// parameter to the heatmaps.
pub fn model_gradient_check(fusion: FusionMethod, seed: u64) -> Result<GradCheck> {
    let mut model = PoseModel::new(SwinConfig::toy(fusion), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // move away from the near-linear regime of the small initialization
    for (_, t) in model.params.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    let image = uniform(&[64, 64, 3], &mut rng);
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.clone()).collect();
    let mut inputs = vec![image];
    inputs.extend(model.params.iter().map(|(_, t)| t.clone()));
    check_gradients(
        &inputs,
        |_, v| {
            let bound = BoundParams::from_vars(names.iter().cloned(), &v[1..]);
            model.forward(&bound, &v[0])
        },
        seed,
        1,
    )
}

pub fn gradient_suite(seeds: u64) -> Result<(GradCheck, GradCheck)> {
    let mut ops = GradCheck::default();
    let mut model = GradCheck::default();
    for seed in 0..seeds {
        for (_, r) in op_gradient_checks(seed)? {
            ops = ops.merge(r);
        }
        for fusion in [FusionMethod::Sum, FusionMethod::Concat] {
            model = model.merge(model_gradient_check(fusion, seed)?);
        }
    }
    Ok((ops, model))
}

/// Bit-exact round trips; returns the names of any that failed.
pub fn round_trip_failures(seed: u64) -> Result<Vec<&'static str>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failed = Vec::new();
    for (h, w, m, s) in [(8, 8, 4, 2), (12, 8, 4, 1), (6, 9, 3, 1)] {
        let x = uniform(&[h, w, 5], &mut rng);
        if window_reverse(&window_partition(&x, m)?, h, w, m)? != x {
            failed.push("window partition/reverse");
        }
        if cyclic_unshift(&cyclic_shift(&x, s)?, s)? != x {
            failed.push("cyclic shift/unshift");
        }
    }
    let model = PoseModel::new(SwinConfig::toy(FusionMethod::Concat), seed)?;
    let exact = save_weights(&model, Dtype::F64);
    let reloaded = load_weights(&exact, &model.config)?;
    if reloaded != model || save_weights(&reloaded, Dtype::F64) != exact {
        failed.push("weights save/load (f64)");
    }
    let compact = save_weights(&model, Dtype::F32);
    let once = load_weights(&compact, &model.config)?;
    let image = uniform(&[64, 64, 3], &mut rng);
    if save_weights(&once, Dtype::F32) != compact
        || decode(&compact)?.params != once.params
        || once.heatmaps(&image)? != load_weights(&compact, &model.config)?.heatmaps(&image)?
    {
        failed.push("weights save/load (f32)");
    }
    let preds: Vec<PredictionInstance> = (0..6)
        .map(|i| {
            PredictionInstance::new(
                i,
                (0..17)
                    .map(|_| DecodedKeypoint {
                        x: rng.gen_range(-50.0..700.0),
                        y: rng.gen_range(-50.0..700.0),
                        score: rng.gen_range(0.0..1.0),
                    })
                    .collect(),
            )
        })
        .collect();
    if parse_predictions(&write_predictions(&preds))? != preds {
        failed.push("prediction serialize/parse");
    }
    Ok(failed)
}

/// Random small scene: a few images with a handful of people and detections.
pub fn random_scene(rng: &mut ChaCha8Rng) -> (Vec<PredictionInstance>, Vec<GroundTruthInstance>, EvalParams) {
    let k = 4;
    let n_images = rng.gen_range(1..=3);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    let mut id = 0;
    for image in 1..=n_images as u64 {
        for _ in 0..rng.gen_range(0..=3) {
            id += 1;
            let side: f64 = [20.0, 60.0, 150.0][rng.gen_range(0..3)] * rng.gen_range(0.8..1.2);
            let points = (0..k)
                .map(|_| Keypoint {
                    x: rng.gen_range(0.0..200.0),
                    y: rng.gen_range(0.0..200.0),
                    v: [0, 1, 2, 2][rng.gen_range(0..4)],
                })
                .collect();
            gts.push(GroundTruthInstance {
                id,
                image_id: image,
                keypoints: KeypointSet::new(points),
                area: side * side,
                bbox: [0.0, 0.0, side, side],
            });
        }
        let image_gts: Vec<&GroundTruthInstance> = gts.iter().filter(|g| g.image_id == image).collect();
        for _ in 0..rng.gen_range(0..=4) {
            let keypoints: Vec<DecodedKeypoint> = match image_gts.get(rng.gen_range(0..=image_gts.len())) {
                Some(g) => {
                    let noise = (g.area.sqrt() * rng.gen_range(0.0..0.25)).max(1e-3);
                    g.keypoints
                        .points
                        .iter()
                        .map(|p| DecodedKeypoint {
                            x: p.x + rng.gen_range(-noise..noise),
                            y: p.y + rng.gen_range(-noise..noise),
                            score: 1.0,
                        })
                        .collect()
                }
                None => (0..k)
                    .map(|_| DecodedKeypoint { x: rng.gen_range(0.0..200.0), y: rng.gen_range(0.0..200.0), score: 1.0 })
                    .collect(),
            };
            preds.push(PredictionInstance { image_id: image, keypoints, score: rng.gen_range(0.0..1.0) });
        }
    }
    let mut params = EvalParams::new(KeypointConstants::uniform(k, 0.1));
    params.image_ids = Some((1..=n_images as u64).collect());
    params.max_dets = [20, 2][rng.gen_range(0..2)];
    (preds, gts, params)
}

/// Number of random scenes where `evaluate` differs from the brute-force
/// evaluator in any reported value.
pub fn metric_mismatches(scenes: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..scenes {
        let (preds, gts, params) = random_scene(&mut rng);
        if evaluate(&preds, &gts, &params)? != brute_force_evaluate(&preds, &gts, &params)? {
            bad += 1;
        }
    }
    Ok(bad)
}

/// `(AP, AR)` of exact predictions on a fixed multi-image scene.
pub fn perfect_prediction_metrics() -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut gts = Vec::new();
    for (id, (image, side)) in [(1u64, 40.0), (1, 120.0), (2, 70.0), (3, 200.0), (3, 50.0)].into_iter().enumerate() {
        let points =
            (0..17).map(|_| Keypoint { x: rng.gen_range(0.0..300.0), y: rng.gen_range(0.0..300.0), v: 2 }).collect();
        gts.push(GroundTruthInstance {
            id: id as u64,
            image_id: image,
            keypoints: KeypointSet::new(points),
            area: side * side,
            bbox: [0.0, 0.0, side, side],
        });
    }
    let preds: Vec<PredictionInstance> = gts
        .iter()
        .map(|g| {
            let kps = g.keypoints.points.iter().map(|p| DecodedKeypoint { x: p.x, y: p.y, score: 0.9 }).collect();
            PredictionInstance::new(g.image_id, kps)
        })
        .collect();
    let report = evaluate(&preds, &gts, &EvalParams::new(KeypointConstants::coco()))?;
    Ok((report.ap, report.ar))
}

/// `|OKS − exp(−0.5)|` for a keypoint displaced by exactly `s·k`.
pub fn oks_spot_error() -> Result<f64> {
    let gt = GroundTruthInstance {
        id: 1,
        image_id: 1,
        keypoints: KeypointSet::new(vec![Keypoint { x: 10.0, y: 10.0, v: 2 }, Keypoint { x: 0.0, y: 0.0, v: 0 }]),
        area: 400.0,
        bbox: [0.0, 0.0, 20.0, 20.0],
    };
    let pred = PredictionInstance::new(
        1,
        vec![DecodedKeypoint { x: 12.0, y: 10.0, score: 1.0 }, DecodedKeypoint { x: 99.0, y: 99.0, score: 1.0 }],
    );
    Ok((oks(&pred, &gt, &KeypointConstants::uniform(2, 0.1))? - (-0.5f64).exp()).abs())
}

/// Worst per-axis recovery error, in heatmap pixels, of keypoints sent
/// through crop → targets → decode → inverse transform without a network.
pub fn pipeline_identity_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let (out_h, out_w) = [(64, 64), (256, 192), (384, 288)][rng.gen_range(0..3)];
        let (bw, bh) = (rng.gen_range(20.0..400.0), rng.gen_range(20.0..400.0));
        let bbox = [rng.gen_range(-20.0..300.0), rng.gen_range(-20.0..300.0), bw, bh];
        let transform = crop_transform(bbox, out_h, out_w, CROP_PADDING)?;
        let points: Vec<Keypoint> = (0..17)
            .map(|_| Keypoint {
                x: bbox[0] + rng.gen_range(0.0..bw),
                y: bbox[1] + rng.gen_range(0.0..bh),
                v: 2,
            })
            .collect();
        let set = KeypointSet::new(points);
        let (hm_h, hm_w) = (out_h / HEATMAP_STRIDE as usize, out_w / HEATMAP_STRIDE as usize);
        let target = gaussian_targets(&set, &transform, hm_h, hm_w, 2.0)?;
        let decoded = coords_to_image_space(&decode_heatmaps(&target.maps, true)?, &transform);
        let unit = HEATMAP_STRIDE / transform.scale();
        for (p, d) in set.points.iter().zip(&decoded) {
            worst = worst.max((p.x - d.x).abs() / unit).max((p.y - d.y).abs() / unit);
        }
    }
    Ok(worst)
}

/// Every oracle suite, one outcome each.
pub fn run_all() -> Vec<SuiteOutcome> {
    let mut out = Vec::new();
    out.push(SuiteOutcome::from_result(
        "attention oracle",
        attention_deviation(GRADIENT_SEEDS).map(|(d, r)| {
            SuiteOutcome::new(
                "attention oracle",
                d < ATTENTION_DENSE_TOL && r < ATTENTION_REGION_TOL,
                format!("dense {d:.1e} (< {ATTENTION_DENSE_TOL:.0e}), shifted {r:.1e} (< {ATTENTION_REGION_TOL:.0e})"),
            )
        }),
    ));
    out.push(SuiteOutcome::from_result(
        "gradient checks",
        gradient_suite(GRADIENT_SEEDS).map(|(ops, model)| {
            SuiteOutcome::new(
                "gradient checks",
                ops.max_rel_error < GRADIENT_TOL && model.max_rel_error < GRADIENT_TOL,
                format!(
                    "ops {:.1e} over {} checks, model {:.1e} over {} checks (< {GRADIENT_TOL:.0e})",
                    ops.max_rel_error, ops.checks, model.max_rel_error, model.checks
                ),
            )
        }),
    ));
    out.push(SuiteOutcome::from_result(
        "round trips",
        round_trip_failures(0).map(|f| {
            SuiteOutcome::new("round trips", f.is_empty(), if f.is_empty() { "all bit-exact".into() } else { f.join(", ") })
        }),
    ));
    out.push(SuiteOutcome::from_result(
        "metric oracle",
        (|| {
            let bad = metric_mismatches(METRIC_SCENES, 0)?;
            let (ap, ar) = perfect_prediction_metrics()?;
            let spot = oks_spot_error()?;
            Ok(SuiteOutcome::new(
                "metric oracle",
                bad == 0 && ap == 1.0 && ar == 1.0 && spot < 1e-12,
                format!("{bad}/{METRIC_SCENES} scene mismatches, perfect AP {ap} AR {ar}, OKS spot {spot:.1e}"),
            ))
        })(),
    ));
    out.push(SuiteOutcome::from_result(
        "pipeline identity",
        pipeline_identity_error(50, 0).map(|e| {
            SuiteOutcome::new("pipeline identity", e <= 0.5 + 1e-9, format!("worst {e:.3} heatmap px (<= 0.5)"))
        }),
    ));
    out.push(SuiteOutcome::from_result(
        "parameter accounting",
        (|| {
            let mut ok = true;
            for fusion in [FusionMethod::Sum, FusionMethod::Concat] {
                let config = SwinConfig::toy(fusion);
                ok &= count_params(&config) == PoseModel::new(config, 0)?.num_params();
            }
            Ok(SuiteOutcome::new("parameter accounting", ok, "analytic count equals registered scalars"))
        })(),
    ));
    out
}
