//! Whole-model gradient check: the full masked-LM loss of one random clip and
//! caption, evaluated in f64, against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::VideoClip;
use crate::data::{CLS, EOS};
use crate::encoder::{catalog_for, sample_mask_plan, MaskPlan};
use crate::error::Result;
use crate::model::{init_params, ModelConfig};
use crate::tensor::{grad_check, GradCheckOptions, GradCheckReport};
use crate::train::{corrupt_caption, sample_loss, MaskedBatch};

/// Maximum relative error accepted for the model check.
pub const TOLERANCE: f64 = 1e-3;

/// Finite-difference step for the model check. At `1e-5` the roundoff of an
/// O(1) loss (~1e-16 / eps) swamps gradients near 1e-8; at `1e-3` truncation
/// error dominates. `1e-4` sits between the two.
pub const MODEL_EPS: f64 = 1e-4;

/// Default options for the model check: `MODEL_EPS`, 32 sampled coordinates
/// per parameter tensor.
pub fn model_options(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        eps: MODEL_EPS,
        max_coords: Some(32),
        seed,
        inject_fault: false,
    }
}

/// Random clip, corrupted caption and (when masking) mask plan.
pub struct Fixture {
    pub clip: VideoClip,
    pub batch: MaskedBatch,
    pub plan: Option<MaskPlan>,
}

pub fn fixture(cfg: &ModelConfig, seed: u64) -> Result<Fixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.frames * cfg.height * cfg.width * 3;
    let pixels: Vec<u8> = (0..n).map(|_| rng.gen()).collect();
    let clip = VideoClip::new("gradcheck", cfg.frames, cfg.height, cfg.width, pixels)?;
    let words = 6.min(cfg.max_text_len.saturating_sub(2)).max(1);
    let mut ids = vec![CLS];
    ids.extend((0..words).map(|_| rng.gen_range(6..cfg.vocab_size)));
    ids.push(EOS);
    let batch = corrupt_caption(&ids, 0.5, &mut rng)?;
    let plan = if cfg.masking {
        Some(sample_mask_plan(&catalog_for(cfg)?, cfg.frames / 2, rng.gen())?)
    } else {
        None
    };
    Ok(Fixture { clip, batch, plan })
}

/// Coarse component a parameter belongs to, for reporting coverage.
pub fn component(name: &str) -> &'static str {
    if name.starts_with("backbone.") {
        "backbone"
    } else if name.starts_with("encoder.") {
        "fusion"
    } else if name.contains(".gate.") {
        "decoder gates"
    } else if name.contains(".attn.") {
        "decoder attention"
    } else if name.starts_with("decoder.layer") {
        "decoder ffn/norm"
    } else {
        "embeddings/head"
    }
}

pub fn model_grad_check(cfg: &ModelConfig, opts: &GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
    cfg.ensure_valid()?;
    let store = init_params::<f64>(cfg, seed)?;
    let fx = fixture(cfg, seed ^ 0x5EED)?;
    let scale = 1.0 / fx.batch.len() as f64;
    grad_check(
        &store,
        |g, s| sample_loss(g, s, cfg, &fx.clip, &fx.batch, fx.plan.as_ref(), scale),
        opts,
    )
}
