//! Model shape configuration and the end-to-end wiring
//! clip -> pyramid -> fused map -> (mask) -> pooled map -> visual tokens -> decoder.

use serde::{Deserialize, Serialize};

use crate::backbone::{self, patchify, VideoClip};
use crate::decoder::{self, TextBatch};
use crate::encoder::{self, catalog_for, MaskPlan, RegionParams};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Initializer, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Sampled frames `T`.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// First-stage channel width `C1`; stage `m` has `C1 * 2^(m-1)`.
    pub base_channels: usize,
    /// Backbone stages `M`.
    pub stages: usize,
    /// Fused channel count `C`.
    pub fused_channels: usize,
    /// Decoder width `d`.
    pub hidden_size: usize,
    /// Decoder layers `Z`.
    pub layers: usize,
    pub heads: usize,
    /// FFN width as a multiple of `d`.
    pub ffn_multiplier: usize,
    pub vocab_size: usize,
    /// Longest text sequence the position table covers.
    pub max_text_len: usize,
    /// Gated shallow-context Q/K; `false` gives the plain transformer stack.
    pub enhanced: bool,
    /// Region masking of the fused map during training.
    pub masking: bool,
    pub regions: RegionParams,
}

impl ModelConfig {
    /// Desk-scale preset: 8 frames of 64x64.
    pub fn toy() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            base_channels: 8,
            stages: 4,
            fused_channels: 32,
            hidden_size: 64,
            layers: 4,
            heads: 4,
            ffn_multiplier: 4,
            vocab_size: 32,
            max_text_len: 50,
            enhanced: true,
            masking: true,
            regions: RegionParams {
                grid_cell: 2,
                delta_x: 1,
                delta_y: 1,
                threshold: 0.3,
            },
        }
    }

    /// Full-size shapes: 32 frames of 224x224, `d = 768`, 30,522-token vocabulary.
    pub fn full() -> Self {
        Self {
            frames: 32,
            height: 224,
            width: 224,
            base_channels: 96,
            stages: 4,
            fused_channels: 768,
            hidden_size: 768,
            layers: 4,
            heads: 12,
            ffn_multiplier: 4,
            vocab_size: 30522,
            max_text_len: 50,
            enhanced: true,
            masking: true,
            regions: RegionParams {
                grid_cell: 4,
                delta_x: 2,
                delta_y: 2,
                threshold: 0.3,
            },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!("unknown preset `{other}` (expected toy or full)"))),
        }
    }

    /// Spatial extent of the fused map (stride 8).
    pub fn fused_hw(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    pub fn fused_shape(&self) -> [usize; 4] {
        let (h, w) = self.fused_hw();
        [self.frames / 2, h, w, self.fused_channels]
    }

    /// `[T/2 - 1, H/32, W/32, C]`.
    pub fn final_shape(&self) -> [usize; 4] {
        [
            (self.frames / 2).saturating_sub(1),
            self.height / 32,
            self.width / 32,
            self.fused_channels,
        ]
    }

    pub fn n_visual(&self) -> usize {
        let [t, h, w, _] = self.final_shape();
        t * h * w
    }

    /// Every violated constraint, not just the first.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(
            self.frames >= 4 && self.frames.is_multiple_of(2),
            format!("frames must be even and >= 4, got {}", self.frames),
        );
        for (name, v) in [("height", self.height), ("width", self.width)] {
            check(v > 0 && v % 32 == 0, format!("{name} must be a positive multiple of 32, got {v}"));
        }
        check(
            (1..=4).contains(&self.stages),
            format!("stages must be in 1..=4, got {}", self.stages),
        );
        check(self.base_channels > 0, "base_channels must be positive".into());
        check(
            self.fused_channels > 0 && self.stages > 0 && self.fused_channels.is_multiple_of(self.stages),
            format!(
                "fused_channels ({}) must be a positive multiple of stages ({})",
                self.fused_channels, self.stages
            ),
        );
        check(
            self.heads > 0 && self.hidden_size > 0 && self.hidden_size.is_multiple_of(self.heads),
            format!(
                "hidden_size ({}) must be a positive multiple of heads ({})",
                self.hidden_size, self.heads
            ),
        );
        check(self.layers >= 1, "layers must be >= 1".into());
        check(self.ffn_multiplier >= 1, "ffn_multiplier must be >= 1".into());
        check(
            self.vocab_size > 5,
            format!("vocab_size must exceed the 6 reserved tokens, got {}", self.vocab_size),
        );
        check(
            self.max_text_len >= 2,
            format!("max_text_len must be >= 2, got {}", self.max_text_len),
        );
        let r = &self.regions;
        check(
            r.grid_cell > 0 && r.delta_x > 0 && r.delta_y > 0,
            "grid_cell, delta_x and delta_y must be positive".into(),
        );
        check(
            (0.0..=1.0).contains(&r.threshold),
            format!("region threshold must be in [0, 1], got {}", r.threshold),
        );
        if errs.is_empty() && self.masking {
            match catalog_for(self) {
                Ok(c) if c.is_empty() => errs.push(
                    "masking is enabled but the region catalog is empty; disable masking".into(),
                ),
                Ok(_) => {}
                Err(e) => errs.push(e.to_string()),
            }
        }
        errs
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(errs))
        }
    }
}

/// Parameters that receive the reduced backbone learning rate.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

/// Backbone, fusion and visual projection only.
pub fn init_video_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.ensure_valid()?;
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    backbone::init_params(cfg, &mut init, &mut store)?;
    encoder::init_params(cfg, &mut init, &mut store)?;
    decoder::init_visual_params(cfg, &mut init, &mut store)?;
    Ok(store)
}

/// All parameters of the model, seeded.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.ensure_valid()?;
    let mut init = Initializer::new(seed);
    let mut store = ParamStore::new();
    backbone::init_params(cfg, &mut init, &mut store)?;
    encoder::init_params(cfg, &mut init, &mut store)?;
    decoder::init_params(cfg, &mut init, &mut store)?;
    Ok(store)
}

/// Pooled video representation `[T/2 - 1, H/32, W/32, C]`; masking applies
/// only when a plan is given.
pub fn final_representation<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    clip: &VideoClip,
    plan: Option<&MaskPlan>,
) -> Result<Var> {
    if clip.dims() != (cfg.frames, cfg.height, cfg.width) {
        return Err(Error::Shape(format!(
            "clip {} is {:?}, model expects ({}, {}, {})",
            clip.clip_id,
            clip.dims(),
            cfg.frames,
            cfg.height,
            cfg.width
        )));
    }
    let patches = g.constant(patchify(clip)?);
    let stages = backbone::extract_pyramid(g, store, cfg, patches)?;
    let fused = encoder::fuse_pyramid(g, store, cfg, &stages)?;
    let masked = encoder::apply_mask(g, fused, plan)?;
    encoder::pool_final(g, masked)
}

/// Visual tokens `[N_v, d]` for one clip.
pub fn visual_tokens<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    clip: &VideoClip,
    plan: Option<&MaskPlan>,
) -> Result<Var> {
    let f = final_representation(g, store, cfg, clip, plan)?;
    decoder::tokenize_visual(g, store, cfg, f)
}

/// Unmasked visual tokens as a plain value, for reuse across decoding steps.
pub fn encode_clip<T: Scalar>(store: &ParamStore<T>, cfg: &ModelConfig, clip: &VideoClip) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = visual_tokens(&mut g, store, cfg, clip, None)?;
    Ok(g.value(v).clone())
}

/// Vocabulary logits `[N, |vocab|]` given precomputed visual tokens.
pub fn logits_for<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &TextBatch,
    visual: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::inference();
    let v = g.constant(visual.clone());
    let logits = decoder::decode_logits(&mut g, store, cfg, text, v)?;
    Ok(g.value(logits).clone())
}
