//! Adam, the training loop and end-to-end inference.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{backward, Tape};
use crate::coco::{crop_person, normalize_image, synth_dataset, CropTransform, SyntheticDataset};
use crate::config::{FusionMethod, OptimizerConfig, RunConfig, SwinConfig};
use crate::error::{Error, Result};
use crate::eval::{GroundTruthInstance, PredictionInstance};
use crate::heatmap::{coords_to_image_space, decode_heatmaps, gaussian_targets, masked_mse, masked_mse_value, HeatmapTarget};
use crate::model::PoseModel;
use crate::params::{GradientRecord, ParamStore};
use crate::tensor::Tensor;

/// Adam without weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: OptimizerConfig,
    first: GradientRecord,
    second: GradientRecord,
    steps: i32,
}

impl Adam {
    pub fn new(config: OptimizerConfig) -> Self {
        Adam { config, first: GradientRecord::new(), second: GradientRecord::new(), steps: 0 }
    }

    pub fn steps(&self) -> usize {
        self.steps as usize
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &GradientRecord, lr: f64) -> Result<()> {
        self.steps += 1;
        let OptimizerConfig { beta1, beta2, eps, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.steps);
        let c2 = 1.0 - beta2.powi(self.steps);
        for (name, value) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != value.shape() {
                return Err(Error::shape("Adam::step", format!("gradient of `{name}` is {:?}", g.shape())));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (w, &gi)) in value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// A normalized network input with its heatmap target and crop transform.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image_id: u64,
    pub input: Tensor,
    pub target: HeatmapTarget,
    pub transform: CropTransform,
}

/// Builds a sample from an already-cropped `[H,W,3]` image in `[0,1]`.
pub fn sample_from_crop(
    run: &RunConfig,
    image_id: u64,
    crop: &Tensor,
    transform: CropTransform,
    gt: &GroundTruthInstance,
) -> Result<TrainSample> {
    let cfg = &run.model;
    if crop.shape() != [cfg.input_h, cfg.input_w, 3] {
        return Err(Error::shape(
            "sample_from_crop",
            format!("input {:?} does not match the configured {}x{}", crop.shape(), cfg.input_h, cfg.input_w),
        ));
    }
    let (hm_h, hm_w) = cfg.heatmap_extent();
    Ok(TrainSample {
        image_id,
        input: normalize_image(crop, &run.pixel_mean, &run.pixel_std)?,
        target: gaussian_targets(&gt.keypoints, &transform, hm_h, hm_w, run.sigma())?,
        transform,
    })
}

/// Crops the annotated person out of a full image and builds its sample.
pub fn sample_from_image(run: &RunConfig, image: &Tensor, gt: &GroundTruthInstance) -> Result<TrainSample> {
    let (crop, transform) = crop_person(image, gt.bbox, run.model.input_h, run.model.input_w)?;
    sample_from_crop(run, gt.image_id, &crop, transform, gt)
}

/// Synthetic images are generated at network resolution, so they are used
/// uncropped with an identity transform.
pub fn synthetic_samples(run: &RunConfig, data: &SyntheticDataset) -> Result<Vec<TrainSample>> {
    data.index
        .annotations
        .iter()
        .zip(&data.images)
        .map(|(gt, img)| sample_from_crop(run, gt.image_id, img, CropTransform::identity(), gt))
        .collect()
}

/// Loss history of a run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    /// Mean batch loss of every optimizer step, measured before the update.
    pub step_losses: Vec<f64>,
    /// Mean of the step losses of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Loss and summed gradients of one batch, accumulated in batch order.
pub fn batch_gradients(model: &PoseModel, batch: &[&TrainSample]) -> Result<(f64, GradientRecord)> {
    let mut total = 0.0;
    let mut acc: Option<GradientRecord> = None;
    for sample in batch {
        let tape = Tape::new();
        let bound = model.params.bind(&tape);
        let x = tape.constant(sample.input.clone());
        let pred = model.forward(&bound, &x)?;
        let loss = masked_mse(&pred, &sample.target)?;
        total += loss.value().item()?;
        let grads = bound.gradients(&backward(&loss)?);
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(acc) => {
                for (name, g) in grads {
                    let slot = acc.get_mut(&name).expect("same parameter set");
                    for (a, b) in slot.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap_or_default();
    for g in grads.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grads))
}

/// Trains for `run.epochs` epochs with Adam and the milestone schedule.
/// Batches are drawn from a seeded permutation of `samples` per epoch.
pub fn train(model: &mut PoseModel, samples: &[TrainSample], run: &RunConfig) -> Result<TrainHistory> {
    run.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut adam = Adam::new(run.optimizer.clone());
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..run.epochs {
        order.shuffle(&mut rng);
        let lr = run.optimizer.lr_at(epoch);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(run.batch_size) {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let step = history.step_losses.len();
            let (loss, grads) = match batch_gradients(model, &batch) {
                Err(Error::NonFinite(op)) => {
                    log::error!("non-finite value in `{op}` at epoch {epoch}, step {step}");
                    return Err(Error::Diverged { epoch, step, loss: f64::NAN });
                }
                r => r?,
            };
            if !loss.is_finite() || grads.values().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, step, loss });
            }
            adam.step(&mut model.params, &grads, lr)?;
            history.step_losses.push(loss);
            epoch_total += loss;
            batches += 1;
        }
        let mean = epoch_total / batches as f64;
        log::info!("epoch {epoch}: loss {mean:.6e} (lr {lr:.1e})");
        history.epoch_losses.push(mean);
    }
    Ok(history)
}

/// Heatmaps → keypoints in original-image coordinates for one sample.
pub fn predict(model: &PoseModel, input: &Tensor, transform: &CropTransform, image_id: u64) -> Result<PredictionInstance> {
    let (h, w) = (model.config.input_h, model.config.input_w);
    if input.shape() != [h, w, 3] {
        return Err(Error::shape("predict", format!("input {:?} does not match the configured {h}x{w}", input.shape())));
    }
    let hm = model.heatmaps(input)?;
    let decoded = decode_heatmaps(&hm, true)?;
    Ok(PredictionInstance::new(image_id, coords_to_image_space(&decoded, transform)))
}

/// Runs [`predict`] on every sample, in parallel across samples.
pub fn infer(model: &PoseModel, samples: &[TrainSample]) -> Result<Vec<PredictionInstance>> {
    samples
        .par_iter()
        .map(|s| predict(model, &s.input, &s.transform, s.image_id))
        .collect()
}

/// Mean heatmap loss over `samples` at the current weights.
pub fn dataset_loss(model: &PoseModel, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("loss over an empty sample set".into()));
    }
    let losses = samples
        .par_iter()
        .map(|s| masked_mse_value(&model.heatmaps(&s.input)?, &s.target))
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Mean Euclidean distance in input pixels between predicted and labelled
/// ground-truth keypoints.
pub fn mean_keypoint_error(preds: &[PredictionInstance], gts: &[GroundTruthInstance]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in preds.iter().zip(gts) {
        if p.keypoints.len() != g.keypoints.len() {
            return Err(Error::shape("mean_keypoint_error", format!("{} vs {}", p.keypoints.len(), g.keypoints.len())));
        }
        for (d, k) in p.keypoints.iter().zip(&g.keypoints.points) {
            if k.labelled() {
                total += (d.x - k.x).hypot(d.y - k.y);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UnevaluableInstance);
    }
    Ok(total / count as f64)
}

pub const TOY_IMAGES: usize = 8;
pub const TOY_STEPS: usize = 300;
pub const TOY_LR: f64 = 1e-3;

/// Outcome of the desk-scale overfitting run.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyRun {
    pub model: PoseModel,
    pub history: TrainHistory,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub mean_error_px: f64,
}

impl ToyRun {
    pub fn loss_ratio(&self) -> f64 {
        self.final_loss / self.initial_loss
    }
}

/// Full-batch Adam at a constant rate on eight synthetic 64×64 images.
pub fn toy_overfit(fusion: FusionMethod, seed: u64, steps: usize) -> Result<ToyRun> {
    let mut run = RunConfig::new(SwinConfig::toy(fusion));
    run.seed = seed;
    run.batch_size = TOY_IMAGES;
    run.epochs = steps;
    run.optimizer.lr = TOY_LR;
    run.optimizer.milestones.clear();
    let data = synth_dataset(TOY_IMAGES, run.model.input_h, seed)?;
    let samples = synthetic_samples(&run, &data)?;
    let mut model = PoseModel::new(run.model.clone(), seed)?;
    let initial_loss = dataset_loss(&model, &samples)?;
    let history = train(&mut model, &samples, &run)?;
    let final_loss = dataset_loss(&model, &samples)?;
    let mean_error_px = mean_keypoint_error(&infer(&model, &samples)?, &data.index.annotations)?;
    Ok(ToyRun { model, history, initial_loss, final_loss, mean_error_px })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coco::synth_dataset;
    use crate::config::{FusionMethod, SwinConfig};

    #[test]
    fn schedule_examples() {
        let opt = OptimizerConfig::default();
        assert_eq!(opt.lr_at(59), 5e-5);
        assert!((opt.lr_at(60) - 5e-6).abs() < 1e-20);
        assert!((opt.lr_at(160) - 5e-8).abs() < 1e-22);
    }

    #[test]
    fn zero_gradient_step_is_noop() {
        let model = PoseModel::new(SwinConfig::toy(FusionMethod::Sum), 0).unwrap();
        let mut params = model.params.clone();
        let grads: GradientRecord = params.iter().map(|(n, t)| (n.clone(), Tensor::zeros(t.shape()))).collect();
        let mut adam = Adam::new(OptimizerConfig::default());
        adam.step(&mut params, &grads, 1e-3).unwrap();
        assert_eq!(params, model.params);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut params = ParamStore::new();
        params.insert("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let mut grads = GradientRecord::new();
        grads.insert("w".into(), Tensor::new(vec![2], vec![3.0, -0.5]).unwrap());
        let mut adam = Adam::new(OptimizerConfig::default());
        adam.step(&mut params, &grads, 0.1).unwrap();
        let w = params.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 0.9).abs() < 1e-8);
    }

    #[test]
    fn empty_inputs() {
        let mut model = PoseModel::new(SwinConfig::toy(FusionMethod::Sum), 0).unwrap();
        let run = RunConfig::new(model.config.clone());
        assert!(train(&mut model, &[], &run).is_err());
        assert!(infer(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn short_run_is_deterministic() {
        let config = SwinConfig::toy(FusionMethod::Sum);
        let mut run = RunConfig::new(config.clone());
        run.epochs = 2;
        run.batch_size = 2;
        run.optimizer.lr = 1e-3;
        let data = synth_dataset(3, 64, 1).unwrap();
        let samples = synthetic_samples(&run, &data).unwrap();
        let mut a = PoseModel::new(config.clone(), 5).unwrap();
        let mut b = PoseModel::new(config, 5).unwrap();
        let ha = train(&mut a, &samples, &run).unwrap();
        let hb = train(&mut b, &samples, &run).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        assert_eq!(ha.step_losses.len(), 4);
        let preds = infer(&a, &samples).unwrap();
        assert_eq!(preds, infer(&a, &samples).unwrap());
        assert_eq!(preds.len(), 3);
    }
}
