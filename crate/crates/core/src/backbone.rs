//! Trainable hierarchical video feature extractor.
//!
//! A patch embedding followed by `M` residual feed-forward stages; stages after
//! the first halve the spatial grid with a 2x2 patch merge. Every stage output
//! is kept, giving a pyramid at strides 4, 8, 16 and 32 with channel widths
//! `C1 * 2^(m-1)`.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::{Graph, Initializer, ParamStore, Scalar, Tensor, Var};

/// Spatio-temporal extent of one patch: 2 frames x 4 x 4 pixels x RGB.
pub const PATCH_T: usize = 2;
pub const PATCH_HW: usize = 4;
pub const PATCH_DIM: usize = PATCH_T * PATCH_HW * PATCH_HW * 3;

/// Raw 8-bit RGB frames, `T x H x W x 3`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VideoClip {
    pub clip_id: String,
    frames: usize,
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl VideoClip {
    pub fn new(clip_id: impl Into<String>, frames: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if frames < 4 || !frames.is_multiple_of(2) {
            return Err(Error::Shape(format!("clip needs an even frame count >= 4, got {frames}")));
        }
        if height == 0 || width == 0 || !height.is_multiple_of(32) || !width.is_multiple_of(32) {
            return Err(Error::Shape(format!(
                "clip height and width must be multiples of 32, got {height}x{width}"
            )));
        }
        let expected = frames * height * width * 3;
        if pixels.len() != expected {
            return Err(Error::Shape(format!(
                "clip {frames}x{height}x{width}x3 needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Self {
            clip_id: clip_id.into(),
            frames,
            height,
            width,
            pixels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [u8; 3] {
        let o = ((t * self.height + y) * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.frames, self.height, self.width)
    }
}

/// Per-stage feature maps, each `[T/2, H/s_m, W/s_m, C_m]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    pub stages: Vec<Tensor<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.stages.iter().map(|s| s.shape().to_vec()).collect()
    }
}

pub fn stage_channels(cfg: &ModelConfig, m: usize) -> usize {
    cfg.base_channels << (m - 1)
}

pub fn stage_stride(m: usize) -> usize {
    4 << (m - 1)
}

/// Expected `[T/2, H/s_m, W/s_m, C_m]` of stage `m` (stage 0 is the patch embedding).
pub fn stage_shape(cfg: &ModelConfig, m: usize) -> [usize; 4] {
    let m_eff = m.max(1);
    let s = stage_stride(m_eff);
    [cfg.frames / 2, cfg.height / s, cfg.width / s, stage_channels(cfg, m_eff)]
}

/// Cuts a clip into non-overlapping 2x4x4 patches with pixels scaled to `[0, 1]`.
/// Output `[T/2, H/4, W/4, 96]`, patch vector ordered (frame, row, col, channel).
pub fn patchify<T: Scalar>(clip: &VideoClip) -> Result<Tensor<T>> {
    let (t, h, w) = clip.dims();
    if t % PATCH_T != 0 || h % PATCH_HW != 0 || w % PATCH_HW != 0 {
        return Err(Error::Shape(format!("clip {t}x{h}x{w} not divisible into 2x4x4 patches")));
    }
    let (pt, ph, pw) = (t / PATCH_T, h / PATCH_HW, w / PATCH_HW);
    let scale = T::of(1.0 / 255.0);
    let px = clip.pixels();
    let mut data = Vec::with_capacity(pt * ph * pw * PATCH_DIM);
    for a in 0..pt {
        for b in 0..ph {
            for c in 0..pw {
                for dt in 0..PATCH_T {
                    for dy in 0..PATCH_HW {
                        let row = ((a * PATCH_T + dt) * h + b * PATCH_HW + dy) * w + c * PATCH_HW;
                        for &v in &px[row * 3..(row + PATCH_HW) * 3] {
                            data.push(T::of(v as f64) * scale);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![pt, ph, pw, PATCH_DIM], data)
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer, store: &mut ParamStore<T>) -> Result<()> {
    let c1 = cfg.base_channels;
    store.insert("backbone.patch_embed.weight", init.weight(PATCH_DIM, c1))?;
    store.insert("backbone.patch_embed.bias", init.bias(c1))?;
    for m in 1..=cfg.stages {
        let c_in = stage_channels(cfg, m.saturating_sub(1).max(1));
        let hidden = 2 * c_in;
        let p = format!("backbone.stage{m}");
        store.insert(format!("{p}.mixer.fc1.weight"), init.weight(c_in, hidden))?;
        store.insert(format!("{p}.mixer.fc1.bias"), init.bias(hidden))?;
        store.insert(format!("{p}.mixer.fc2.weight"), init.weight(hidden, c_in))?;
        store.insert(format!("{p}.mixer.fc2.bias"), init.bias(c_in))?;
        if m >= 2 {
            let c_out = stage_channels(cfg, m);
            store.insert(format!("{p}.merge.weight"), init.weight(4 * c_in, c_out))?;
            store.insert(format!("{p}.merge.bias"), init.bias(c_out))?;
        }
    }
    Ok(())
}

/// Affine projection of each patch to `C1` channels.
pub fn patch_embed<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, patches: Var) -> Result<Var> {
    if g.shape(patches).last() != Some(&PATCH_DIM) {
        return Err(Error::Shape(format!(
            "patch embedding expects {PATCH_DIM} inputs per patch, got {:?}",
            g.shape(patches)
        )));
    }
    let w = g.param(store, "backbone.patch_embed.weight")?;
    let b = g.param(store, "backbone.patch_embed.bias")?;
    g.linear(patches, w, Some(b))
}

/// Residual feed-forward mixer, then (for `m >= 2`) a 2x2 patch merge
/// projected to `C_m` channels.
pub fn stage_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    m: usize,
) -> Result<Var> {
    let expected = stage_shape(cfg, m - 1);
    if g.shape(x) != expected {
        return Err(Error::Shape(format!(
            "stage {m} expects input {expected:?}, got {:?}",
            g.shape(x)
        )));
    }
    let p = format!("backbone.stage{m}");
    let fc1 = g.param(store, &format!("{p}.mixer.fc1.weight"))?;
    let b1 = g.param(store, &format!("{p}.mixer.fc1.bias"))?;
    let fc2 = g.param(store, &format!("{p}.mixer.fc2.weight"))?;
    let b2 = g.param(store, &format!("{p}.mixer.fc2.bias"))?;
    let h = g.linear(x, fc1, Some(b1))?;
    let h = g.gelu(h);
    let h = g.linear(h, fc2, Some(b2))?;
    let y = g.add(x, h)?;
    if m < 2 {
        return Ok(y);
    }
    let merged = g.space_to_depth(y)?;
    let w = g.param(store, &format!("{p}.merge.weight"))?;
    let b = g.param(store, &format!("{p}.merge.bias"))?;
    g.linear(merged, w, Some(b))
}

/// Every stage output, in stage order.
pub fn extract_pyramid<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    patches: Var,
) -> Result<Vec<Var>> {
    let mut x = patch_embed(g, store, patches)?;
    let mut stages = Vec::with_capacity(cfg.stages);
    for m in 1..=cfg.stages {
        x = stage_block(g, store, cfg, x, m)?;
        stages.push(x);
    }
    Ok(stages)
}

/// Value-level pyramid for one clip.
pub fn pyramid_for_clip<T: Scalar>(
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    clip: &VideoClip,
) -> Result<FeaturePyramid<T>> {
    let mut g = Graph::inference();
    let patches = g.constant(patchify(clip)?);
    let stages = extract_pyramid(&mut g, store, cfg, patches)?;
    Ok(FeaturePyramid {
        stages: stages.into_iter().map(|v| g.value(v).clone()).collect(),
    })
}
