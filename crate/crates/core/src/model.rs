//! The full pose network: backbone, pyramid fusion and heatmap head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{self, block_prefix, FeaturePyramid};
use crate::config::{FusionMethod, SwinConfig, PATCH_SIZE};
use crate::error::Result;
use crate::fusion::{self, FusionWeights};
use crate::params::{BoundParams, Init, ParamStore};
use crate::tensor::Tensor;

const WEIGHT_STD: f64 = 0.02;

/// Name, shape and initializer of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn spec(out: &mut Vec<ParamSpec>, name: String, shape: Vec<usize>, init: Init) {
    out.push(ParamSpec { name, shape, init });
}

fn linear(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize, bias: bool) {
    spec(out, format!("{prefix}.weight"), vec![din, dout], Init::TruncNormal(WEIGHT_STD));
    if bias {
        spec(out, format!("{prefix}.bias"), vec![dout], Init::Zeros);
    }
}

/// 1×1 or patch convolution: fan-in-scaled normal instead of the transformer std.
fn conv(out: &mut Vec<ParamSpec>, prefix: &str, din: usize, dout: usize) {
    spec(out, format!("{prefix}.weight"), vec![din, dout], Init::TruncNormal(1.0 / (din as f64).sqrt()));
    spec(out, format!("{prefix}.bias"), vec![dout], Init::Zeros);
}

fn norm(out: &mut Vec<ParamSpec>, prefix: &str, c: usize) {
    spec(out, format!("{prefix}.gamma"), vec![c], Init::Ones);
    spec(out, format!("{prefix}.beta"), vec![c], Init::Zeros);
}

/// Every parameter the model registers for `config`, in a fixed order.
pub fn param_specs(config: &SwinConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let patch = PATCH_SIZE * PATCH_SIZE * 3;
    conv(&mut out, "patch_embed", patch, config.embed_dim);
    for stage in 0..4 {
        let c = config.stage_channels(stage);
        let heads = config.heads[stage];
        let (window, _) = config.stage_window(stage);
        for block in 0..config.depths[stage] {
            let p = block_prefix(stage, block);
            norm(&mut out, &format!("{p}.norm1"), c);
            linear(&mut out, &format!("{p}.attn.qkv"), c, 3 * c, true);
            if config.relative_position_bias {
                let span = 2 * window - 1;
                spec(&mut out, format!("{p}.attn.rel_bias"), vec![span * span, heads], Init::TruncNormal(WEIGHT_STD));
            }
            linear(&mut out, &format!("{p}.attn.proj"), c, c, true);
            norm(&mut out, &format!("{p}.norm2"), c);
            let hidden = config.mlp_hidden(c);
            linear(&mut out, &format!("{p}.mlp.fc1"), c, hidden, true);
            linear(&mut out, &format!("{p}.mlp.fc2"), hidden, c, true);
        }
        if stage < 3 {
            norm(&mut out, &format!("stages.{stage}.merge.norm"), 4 * c);
            linear(&mut out, &format!("stages.{stage}.merge.reduction"), 4 * c, 2 * c, false);
        }
    }
    let d = config.fusion_channels;
    for stage in 0..4 {
        conv(&mut out, &format!("fusion.lateral.{stage}"), config.stage_channels(stage), d);
    }
    if config.fusion_method == FusionMethod::Concat {
        for level in 0..3 {
            conv(&mut out, &format!("fusion.merge.{level}"), 2 * d, d);
        }
    }
    linear(&mut out, "head", d, config.num_keypoints, true);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub config: SwinConfig,
    pub params: ParamStore,
}

impl PoseModel {
    /// Builds a model with deterministic initial weights.
    pub fn new(config: SwinConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for s in param_specs(&config) {
            params.insert(s.name, s.init.sample(&s.shape, &mut rng));
        }
        Ok(PoseModel { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: SwinConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(crate::Error::InvalidArgument(format!(
                "expected {} parameter tensors, got {}",
                specs.len(),
                params.len()
            )));
        }
        for s in &specs {
            let t = params.get(&s.name)?;
            if t.shape() != s.shape.as_slice() {
                return Err(crate::Error::shape(
                    "PoseModel::from_params",
                    format!("{} is {:?}, expected {:?}", s.name, t.shape(), s.shape),
                ));
            }
        }
        Ok(PoseModel { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Backbone only, on a tape.
    pub fn pyramid<'t>(&self, params: &BoundParams<'t>, image: &Var<'t>) -> Result<[Var<'t>; 4]> {
        backbone::backbone_forward(image, &self.config, params)
    }

    /// Full forward pass to `[H/4, W/4, K]` heatmaps on a tape.
    pub fn forward<'t>(&self, params: &BoundParams<'t>, image: &Var<'t>) -> Result<Var<'t>> {
        let levels = self.pyramid(params, image)?;
        let weights = FusionWeights::from_params(params, self.config.fusion_method)?;
        let fused = fusion::fuse_pyramid(&levels, &weights, self.config.fusion_method)?;
        fusion::heatmap_head(&fused, &weights.head.0, &weights.head.1)
    }

    /// Gradient-free convenience: heatmaps for one normalized input image.
    pub fn heatmaps(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(image.clone());
        Ok(self.forward(&bound, &x)?.value().as_ref().clone())
    }

    pub fn feature_pyramid(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape);
        let x = tape.constant(image.clone());
        let levels = self.pyramid(&bound, &x)?;
        let pyramid = FeaturePyramid { levels: levels.map(|v| v.value().as_ref().clone()) };
        pyramid.validate(&self.config)?;
        Ok(pyramid)
    }
}
