//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are twice the multiply-add count of one forward pass. Normalization,
//! softmax, GELU, residual adds and upsampling are not counted. Per-term
//! multiply-adds, with `N` tokens of a stage, `Np` tokens after padding to the
//! window grid, window side `M`, `C` channels, MLP width `R`, fused width `D`
//! and `K` keypoints:
//!
//! | term            | multiply-adds                  |
//! |-----------------|--------------------------------|
//! | patch embed     | `N0 · 48 · C`                  |
//! | qkv             | `Np · C · 3C`                  |
//! | scores          | `Np · M² · C`                  |
//! | weighted sum    | `Np · M² · C`                  |
//! | position bias   | `Np · M² · heads`              |
//! | projection      | `Np · C²`                      |
//! | MLP             | `2 · N · C · R`                |
//! | patch merge     | `N/4 · 4C · 2C`                |
//! | lateral         | `N_s · C_s · D`                |
//! | concat merge    | `N_s · 2D · D`                 |
//! | head            | `N0 · D · K`                   |

use std::fmt;

use crate::config::{FusionMethod, Preset, SwinConfig, PATCH_SIZE};

/// Trainable scalars per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamBreakdown {
    pub patch_embed: usize,
    pub blocks: [usize; 4],
    pub merges: [usize; 3],
    pub fusion: usize,
    pub head: usize,
}

impl ParamBreakdown {
    pub fn backbone(&self) -> usize {
        self.patch_embed + self.blocks.iter().sum::<usize>() + self.merges.iter().sum::<usize>()
    }

    pub fn total(&self) -> usize {
        self.backbone() + self.fusion + self.head
    }
}

fn linear_params(din: usize, dout: usize, bias: bool) -> usize {
    din * dout + if bias { dout } else { 0 }
}

/// Parameters of one transformer block.
pub fn block_params(config: &SwinConfig, stage: usize) -> usize {
    let c = config.stage_channels(stage);
    let (window, _) = config.stage_window(stage);
    let hidden = config.mlp_hidden(c);
    let bias_table = if config.relative_position_bias {
        (2 * window - 1).pow(2) * config.heads[stage]
    } else {
        0
    };
    2 * c
        + linear_params(c, 3 * c, true)
        + bias_table
        + linear_params(c, c, true)
        + 2 * c
        + linear_params(c, hidden, true)
        + linear_params(hidden, c, true)
}

pub fn param_breakdown(config: &SwinConfig) -> ParamBreakdown {
    let d = config.fusion_channels;
    let mut out = ParamBreakdown {
        patch_embed: linear_params(PATCH_SIZE * PATCH_SIZE * 3, config.embed_dim, true),
        ..Default::default()
    };
    for s in 0..4 {
        out.blocks[s] = config.depths[s] * block_params(config, s);
        out.fusion += linear_params(config.stage_channels(s), d, true);
    }
    for s in 0..3 {
        let c = config.stage_channels(s);
        out.merges[s] = 2 * 4 * c + linear_params(4 * c, 2 * c, false);
    }
    if config.fusion_method == FusionMethod::Concat {
        out.fusion += 3 * linear_params(2 * d, d, true);
    }
    out.head = linear_params(d, config.num_keypoints, true);
    out
}

/// Exact number of trainable scalars of the model built from `config`.
pub fn count_params(config: &SwinConfig) -> usize {
    param_breakdown(config).total()
}

/// Multiply-adds per component for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlopBreakdown {
    pub patch_embed: f64,
    pub attention: f64,
    pub mlp: f64,
    pub merges: f64,
    pub fusion: f64,
    pub head: f64,
}

impl FlopBreakdown {
    pub fn multiply_adds(&self) -> f64 {
        self.patch_embed + self.attention + self.mlp + self.merges + self.fusion + self.head
    }

    pub fn gflops(&self) -> f64 {
        2.0 * self.multiply_adds() / 1e9
    }
}

pub fn flop_breakdown(config: &SwinConfig) -> FlopBreakdown {
    let d = config.fusion_channels as f64;
    let (h0, w0) = config.stage_extent(0);
    let n0 = (h0 * w0) as f64;
    let mut out = FlopBreakdown {
        patch_embed: n0 * (PATCH_SIZE * PATCH_SIZE * 3) as f64 * config.embed_dim as f64,
        head: n0 * d * config.num_keypoints as f64,
        ..Default::default()
    };
    for s in 0..4 {
        let (h, w) = config.stage_extent(s);
        let (m, _) = config.stage_window(s);
        let n = (h * w) as f64;
        let np = (h.div_ceil(m) * m * w.div_ceil(m) * m) as f64;
        let c = config.stage_channels(s) as f64;
        let m2 = (m * m) as f64;
        let bias = if config.relative_position_bias { np * m2 * config.heads[s] as f64 } else { 0.0 };
        let attn = np * c * 3.0 * c + 2.0 * np * m2 * c + bias + np * c * c;
        let mlp = 2.0 * n * c * config.mlp_hidden(config.stage_channels(s)) as f64;
        out.attention += config.depths[s] as f64 * attn;
        out.mlp += config.depths[s] as f64 * mlp;
        if s < 3 {
            out.merges += n / 4.0 * 4.0 * c * 2.0 * c;
        }
        out.fusion += n * c * d;
        if s < 3 && config.fusion_method == FusionMethod::Concat {
            out.fusion += n * 2.0 * d * d;
        }
    }
    out
}

/// GFLOPs of one forward pass at the config's input extent.
pub fn estimate_flops(config: &SwinConfig) -> f64 {
    flop_breakdown(config).gflops()
}

/// Published model-size figures: params (millions) and GFLOPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceSize {
    pub preset: Preset,
    pub input: usize,
    pub fusion: FusionMethod,
    pub params_m: f64,
    pub gflops: f64,
}

pub const REFERENCE_SIZES: [ReferenceSize; 8] = [
    ReferenceSize { preset: Preset::SwinS, input: 224, fusion: FusionMethod::Concat, params_m: 49.5, gflops: 11.9 },
    ReferenceSize { preset: Preset::SwinS, input: 224, fusion: FusionMethod::Sum, params_m: 49.1, gflops: 11.7 },
    ReferenceSize { preset: Preset::SwinB, input: 224, fusion: FusionMethod::Concat, params_m: 88.0, gflops: 15.9 },
    ReferenceSize { preset: Preset::SwinB, input: 224, fusion: FusionMethod::Sum, params_m: 87.3, gflops: 15.7 },
    ReferenceSize { preset: Preset::SwinL, input: 224, fusion: FusionMethod::Concat, params_m: 197.9, gflops: 24.2 },
    ReferenceSize { preset: Preset::SwinL, input: 224, fusion: FusionMethod::Sum, params_m: 196.4, gflops: 23.6 },
    ReferenceSize { preset: Preset::SwinL, input: 384, fusion: FusionMethod::Concat, params_m: 197.9, gflops: 204.5 },
    ReferenceSize { preset: Preset::SwinL, input: 384, fusion: FusionMethod::Sum, params_m: 196.4, gflops: 202.6 },
];

pub const PARAM_TOLERANCE: f64 = 0.05;
pub const FLOP_TOLERANCE: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileRow {
    pub label: String,
    pub input: usize,
    pub fusion: FusionMethod,
    pub params: usize,
    pub gflops: f64,
    pub reference: Option<ReferenceSize>,
}

impl ProfileRow {
    pub fn new(label: impl Into<String>, config: &SwinConfig, reference: Option<ReferenceSize>) -> Self {
        ProfileRow {
            label: label.into(),
            input: config.input_h,
            fusion: config.fusion_method,
            params: count_params(config),
            gflops: estimate_flops(config),
            reference,
        }
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }

    /// Relative deviations `(params, gflops)` from the reference, if any.
    pub fn deviation(&self) -> Option<(f64, f64)> {
        self.reference.map(|r| (self.params_m() / r.params_m - 1.0, self.gflops / r.gflops - 1.0))
    }
}

/// One row per reference entry, computed from the matching preset.
pub fn reference_table() -> Vec<ProfileRow> {
    REFERENCE_SIZES
        .iter()
        .map(|r| {
            let config = SwinConfig::preset(r.preset, r.input, r.fusion);
            ProfileRow::new(r.preset.to_string(), &config, Some(*r))
        })
        .collect()
}

pub struct ProfileTable<'a>(pub &'a [ProfileRow]);

impl fmt::Display for ProfileTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>5} {:<7} {:>12} {:>10} {:>10} {:>10} {:>8} {:>8}",
            "model", "input", "fusion", "params", "GFLOPs", "ref M", "ref GF", "dP", "dF"
        )?;
        for r in self.0 {
            write!(
                f,
                "{:<8} {:>5} {:<7} {:>11.2}M {:>10.2}",
                r.label,
                r.input,
                r.fusion.to_string(),
                r.params_m(),
                r.gflops
            )?;
            match (r.reference, r.deviation()) {
                (Some(re), Some((dp, df))) => writeln!(
                    f,
                    " {:>10.1} {:>10.1} {:>+7.1}% {:>+7.1}%",
                    re.params_m,
                    re.gflops,
                    100.0 * dp,
                    100.0 * df
                )?,
                _ => writeln!(f, " {:>10} {:>10} {:>8} {:>8}", "-", "-", "-", "-")?,
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{param_specs, PoseModel};

    fn hand_count_config() -> SwinConfig {
        SwinConfig {
            embed_dim: 8,
            depths: [1, 0, 0, 0],
            heads: [1, 1, 1, 1],
            ..SwinConfig::toy(FusionMethod::Sum)
        }
    }

    #[test]
    fn hand_counted_backbone() {
        let b = param_breakdown(&hand_count_config());
        assert_eq!(b.patch_embed, 48 * 8 + 8);
        // norm1 16, qkv 8·24+24, bias table 7²·1, proj 8·8+8, norm2 16,
        // fc1 8·32+32, fc2 32·8+8
        assert_eq!(b.blocks, [16 + 216 + 49 + 72 + 16 + 288 + 264, 0, 0, 0]);
        assert_eq!(b.merges, [64 + 512, 128 + 2048, 256 + 8192]);
    }

    #[test]
    fn count_matches_registered_scalars() {
        for fusion in [FusionMethod::Sum, FusionMethod::Concat] {
            let config = SwinConfig::toy(fusion);
            let model = PoseModel::new(config.clone(), 0).unwrap();
            assert_eq!(count_params(&config), model.num_params());
            let large = SwinConfig::swin_l(384, fusion);
            let registered: usize = param_specs(&large).iter().map(|s| s.shape.iter().product::<usize>()).sum();
            assert_eq!(count_params(&large), registered);
        }
    }

    #[test]
    fn concat_exceeds_sum() {
        for r in reference_table().chunks(2) {
            assert_eq!(r[0].fusion, FusionMethod::Concat);
            assert!(r[0].params > r[1].params && r[0].gflops > r[1].gflops);
        }
    }

    #[test]
    fn flops_single_linear_layer() {
        let config = hand_count_config();
        let f = flop_breakdown(&config);
        assert_eq!(f.patch_embed, (16 * 16 * 48 * 8) as f64);
        assert_eq!(f.head, (16 * 16 * 16 * 17) as f64);
    }

    #[test]
    fn table_renders() {
        let rows = reference_table();
        let text = ProfileTable(&rows).to_string();
        assert_eq!(text.lines().count(), 9);
        assert!(text.contains("swin-l"));
    }
}
