use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use winpose::backbone::{cyclic_shift, cyclic_unshift, window_partition, window_reverse};
use winpose::coco::{parse_predictions, write_predictions};
use winpose::config::{FusionMethod, RunConfig, SwinConfig};
use winpose::eval::PredictionInstance;
use winpose::heatmap::DecodedKeypoint;
use winpose::model::PoseModel;
use winpose::selfcheck::round_trip_failures;
use winpose::weights::{decode, load_from_path, load_weights, save_to_path, save_weights, Dtype};
use winpose::Tensor;

fn map(h: usize, w: usize, c: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[h, w, c], |_| rand::Rng::gen_range(&mut rng, -1e3..1e3))
}

proptest! {
    #[test]
    fn partition_then_reverse_is_identity(h in 1usize..14, w in 1usize..14, c in 1usize..4, m in 1usize..8, seed: u64) {
        let x = map(h, w, c, seed);
        let windows = window_partition(&x, m).unwrap();
        prop_assert_eq!(windows.shape()[1], m * m);
        prop_assert_eq!(window_reverse(&windows, h, w, m).unwrap(), x);
    }

    #[test]
    fn shift_then_unshift_is_identity(h in 1usize..12, w in 1usize..12, s in 0usize..16, seed: u64) {
        let x = map(h, w, 2, seed);
        prop_assert_eq!(cyclic_unshift(&cyclic_shift(&x, s).unwrap(), s).unwrap(), x.clone());
        prop_assert_eq!(cyclic_shift(&cyclic_unshift(&x, s).unwrap(), s).unwrap(), x);
    }

    #[test]
    fn predictions_survive_serialization(
        rows in prop::collection::vec(
            (0u64..1000, prop::collection::vec((-1e4f64..1e4, -1e4f64..1e4, 0.0f64..1.0), 17)),
            0..8,
        )
    ) {
        let preds: Vec<PredictionInstance> = rows
            .into_iter()
            .map(|(id, kps)| PredictionInstance::new(id, kps.into_iter().map(|(x, y, score)| DecodedKeypoint { x, y, score }).collect()))
            .collect();
        prop_assert_eq!(parse_predictions(&write_predictions(&preds)).unwrap(), preds);
    }

    #[test]
    fn f64_weights_are_exact(seed in 0u64..1000) {
        let model = PoseModel::new(SwinConfig::toy(FusionMethod::Sum), seed).unwrap();
        let bytes = save_weights(&model, Dtype::F64);
        prop_assert_eq!(load_weights(&bytes, &model.config).unwrap(), model);
    }

    #[test]
    fn truncated_weights_are_rejected(cut in 0usize..4096) {
        let model = PoseModel::new(SwinConfig::toy(FusionMethod::Sum), 1).unwrap();
        let bytes = save_weights(&model, Dtype::F32);
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(decode(&bytes[..cut]).is_err());
    }
}

#[test]
fn f32_weights_are_idempotent() {
    let model = PoseModel::new(SwinConfig::toy(FusionMethod::Concat), 3).unwrap();
    let once = save_weights(&model, Dtype::F32);
    let reloaded = load_weights(&once, &model.config).unwrap();
    assert_eq!(save_weights(&reloaded, Dtype::F32), once);
}

#[test]
fn weights_through_the_filesystem() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.swpw");
    let model = PoseModel::new(SwinConfig::toy(FusionMethod::Concat), 5).unwrap();
    save_to_path(&model, Dtype::F64, &path).unwrap();
    assert_eq!(load_from_path(&path, &model.config).unwrap(), model);
}

#[test]
fn weights_refuse_a_different_architecture() {
    let model = PoseModel::new(SwinConfig::toy(FusionMethod::Concat), 5).unwrap();
    let bytes = save_weights(&model, Dtype::F32);
    assert!(load_weights(&bytes, &SwinConfig::toy(FusionMethod::Sum)).is_err());
}

#[test]
fn run_config_json_round_trip() {
    let mut cfg = RunConfig::new(SwinConfig::toy(FusionMethod::Sum));
    cfg.sigma = Some(1.5);
    cfg.epochs = 7;
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
}

#[test]
fn selfcheck_round_trips_pass() {
    assert!(round_trip_failures(0).unwrap().is_empty());
}
