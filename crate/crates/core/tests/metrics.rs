use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use winpose::eval::{evaluate, oks, EvalParams, GroundTruthInstance, KeypointConstants, PredictionInstance};
use winpose::heatmap::{DecodedKeypoint, Keypoint, KeypointSet};
use winpose::oracle::brute_force_evaluate;
use winpose::selfcheck::{metric_mismatches, oks_spot_error, perfect_prediction_metrics, random_scene};

fn gt(points: &[(f64, f64, u8)], area: f64) -> GroundTruthInstance {
    GroundTruthInstance {
        id: 1,
        image_id: 1,
        keypoints: KeypointSet::new(points.iter().map(|&(x, y, v)| Keypoint { x, y, v }).collect()),
        area,
        bbox: [0.0, 0.0, area.sqrt(), area.sqrt()],
    }
}

fn pred(points: &[(f64, f64)]) -> PredictionInstance {
    PredictionInstance::new(1, points.iter().map(|&(x, y)| DecodedKeypoint { x, y, score: 1.0 }).collect())
}

#[test]
fn greedy_matching_agrees_with_exhaustive_search() {
    assert_eq!(metric_mismatches(300, 7).unwrap(), 0);
}

#[test]
fn exact_predictions_score_one() {
    assert_eq!(perfect_prediction_metrics().unwrap(), (1.0, 1.0));
}

#[test]
fn displacement_of_one_falloff_unit_gives_exp_minus_half() {
    assert!(oks_spot_error().unwrap() < 1e-12);
}

#[test]
fn unlabelled_keypoints_do_not_count() {
    let g = gt(&[(0.0, 0.0, 2), (5.0, 5.0, 0), (9.0, 9.0, 1)], 100.0);
    let k = KeypointConstants::uniform(3, 0.1);
    let exact = oks(&pred(&[(0.0, 0.0), (500.0, -500.0), (9.0, 9.0)]), &g, &k).unwrap();
    assert_eq!(exact, 1.0);
}

#[test]
fn oks_rejects_bad_inputs() {
    let k = KeypointConstants::uniform(2, 0.1);
    let p = pred(&[(0.0, 0.0), (1.0, 1.0)]);
    assert!(oks(&p, &gt(&[(0.0, 0.0, 0), (1.0, 1.0, 0)], 100.0), &k).is_err());
    assert!(oks(&p, &gt(&[(0.0, 0.0, 2), (1.0, 1.0, 2)], 0.0), &k).is_err());
    assert!(oks(&pred(&[(0.0, 0.0)]), &gt(&[(0.0, 0.0, 2), (1.0, 1.0, 2)], 100.0), &k).is_err());
}

#[test]
fn predictions_on_unknown_images_are_rejected() {
    let g = gt(&[(0.0, 0.0, 2)], 100.0);
    let mut p = pred(&[(0.0, 0.0)]);
    p.image_id = 99;
    assert!(evaluate(&[p], &[g], &EvalParams::new(KeypointConstants::uniform(1, 0.1))).is_err());
}

#[test]
fn no_predictions_score_zero() {
    let g = gt(&[(0.0, 0.0, 2)], 100.0);
    let report = evaluate(&[], &[g], &EvalParams::new(KeypointConstants::uniform(1, 0.1))).unwrap();
    assert_eq!((report.ap, report.ar), (0.0, 0.0));
}

proptest! {
    #[test]
    fn oks_is_bounded_and_monotone(dx in 0.0f64..50.0, extra in 0.0f64..50.0, area in 1.0f64..1e5) {
        let g = gt(&[(10.0, 10.0, 2)], area);
        let k = KeypointConstants::uniform(1, 0.1);
        let near = oks(&pred(&[(10.0 + dx, 10.0)]), &g, &k).unwrap();
        let far = oks(&pred(&[(10.0 + dx + extra, 10.0)]), &g, &k).unwrap();
        prop_assert!((0.0..=1.0).contains(&near));
        prop_assert!(far <= near);
    }

    #[test]
    fn metrics_are_bounded_and_match_the_oracle(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (preds, gts, params) = random_scene(&mut rng);
        let report = evaluate(&preds, &gts, &params).unwrap();
        for v in [report.ap, report.ap50, report.ap75, report.ap_m, report.ap_l, report.ar] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!(report.ap50 >= report.ap75);
        prop_assert_eq!(report, brute_force_evaluate(&preds, &gts, &params).unwrap());
    }

    #[test]
    fn prediction_order_does_not_matter(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut preds, gts, params) = random_scene(&mut rng);
        let forward = evaluate(&preds, &gts, &params).unwrap();
        preds.reverse();
        // exact ties in score may legitimately reorder matches
        let mut scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
        scores.sort_by(f64::total_cmp);
        prop_assume!(scores.windows(2).all(|w| w[0] != w[1]));
        prop_assert_eq!(evaluate(&preds, &gts, &params).unwrap(), forward);
    }
}
