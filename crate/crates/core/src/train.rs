//! Masked-language-model training: caption corruption, the NLL objective,
//! the warmup/decay schedule and Adam with decoupled weight decay.
//!
//! A step draws `batch_size * accumulation_steps` examples, corrupts each
//! with its own `(seed, step, index)` stream, runs the independent
//! forward/backward passes (in parallel when enabled) and sums the gradients
//! in a fixed order. The loss is normalised by the number of masked tokens in
//! the whole step, so accumulating micro-batches gives exactly the gradient of
//! their concatenation.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::VideoClip;
use crate::data::{CLS, MASK, PAD};
use crate::decoder::{decode_logits, TextBatch};
use crate::encoder::{catalog_for, sample_mask_plan, MaskPlan, RegionCatalog};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{self, is_backbone_param, ModelConfig};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub mask_rate: f64,
    /// Longest wrapped caption (`[CLS] .. [EOS]`) used for training.
    pub max_caption_len: usize,
    pub backbone_lr_multiplier: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    /// Overrides the epoch-derived step count (and the schedule length).
    pub max_steps: Option<usize>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.05,
            batch_size: 6,
            accumulation_steps: 4,
            epochs: 50,
            mask_rate: 0.5,
            max_caption_len: 50,
            backbone_lr_multiplier: 0.05,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            seed: 42,
            max_steps: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let unit = |name: &str, v: f64, errs: &mut Vec<String>| {
            if !(0.0..=1.0).contains(&v) {
                errs.push(format!("{name} must be in [0, 1], got {v}"));
            }
        };
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            errs.push(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        unit("warmup_ratio", self.warmup_ratio, &mut errs);
        unit("mask_rate", self.mask_rate, &mut errs);
        unit("backbone_lr_multiplier", self.backbone_lr_multiplier, &mut errs);
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            errs.push(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&v) {
                errs.push(format!("{name} must be in [0, 1), got {v}"));
            }
        }
        if self.adam_epsilon <= 0.0 {
            errs.push(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("accumulation_steps", self.accumulation_steps),
            ("epochs", self.epochs),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be >= 1"));
            }
        }
        if self.max_caption_len < 3 {
            errs.push(format!("max_caption_len must be >= 3, got {}", self.max_caption_len));
        }
        if self.max_steps == Some(0) {
            errs.push("max_steps must be >= 1 when given".into());
        }
        errs
    }

    pub fn samples_per_step(&self) -> usize {
        self.batch_size * self.accumulation_steps
    }

    pub fn total_steps(&self, n_examples: usize) -> usize {
        self.max_steps
            .unwrap_or_else(|| self.epochs * n_examples.div_ceil(self.samples_per_step()).max(1))
    }
}

/// Linear warmup to the base rate over the first `warmup_ratio * total`
/// steps, then linear decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, cfg: &TrainConfig) -> f64 {
    if total == 0 || step >= total {
        return 0.0;
    }
    let warm = (cfg.warmup_ratio * total as f64).round() as usize;
    let base = cfg.learning_rate;
    if step < warm {
        base * step as f64 / warm as f64
    } else {
        base * (total - step) as f64 / (total - warm) as f64
    }
}

/// A corrupted caption: `[MASK]` substituted at `positions`, originals in `labels`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskedBatch {
    pub input_ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub labels: Vec<usize>,
}

impl MaskedBatch {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Masks each content position (everything after `[CLS]` except `[PAD]`,
/// `[EOS]` included) with probability `rate`, forcing at least one.
pub fn corrupt_caption(ids: &[usize], rate: f64, rng: &mut impl Rng) -> Result<MaskedBatch> {
    if ids.first() != Some(&CLS) {
        return Err(Error::Input("caption must start with [CLS]".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate {rate} outside [0, 1]")));
    }
    let content: Vec<usize> = (1..ids.len()).filter(|&i| ids[i] != PAD).collect();
    if content.is_empty() {
        return Err(Error::Input("caption has no content tokens".into()));
    }
    let mut positions: Vec<usize> = content.iter().copied().filter(|_| rng.gen::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(content[rng.gen_range(0..content.len())]);
    }
    let labels = positions.iter().map(|&p| ids[p]).collect();
    let mut input_ids = ids.to_vec();
    for &p in &positions {
        input_ids[p] = MASK;
    }
    Ok(MaskedBatch {
        input_ids,
        positions,
        labels,
    })
}

/// `scale * sum(-log p(label))` over the masked positions.
pub fn mlm_loss_scaled<T: Scalar>(g: &mut Graph<T>, logits: Var, batch: &MaskedBatch, scale: f64) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Input("no masked positions to score".into()));
    }
    let logp = g.log_softmax_rows(logits)?;
    let picks: Vec<(usize, usize)> = batch.positions.iter().copied().zip(batch.labels.iter().copied()).collect();
    g.nll(logp, &picks, T::of(scale))
}

/// Mean negative log-likelihood of the originals at the masked positions.
pub fn mlm_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, batch: &MaskedBatch) -> Result<Var> {
    mlm_loss_scaled(g, logits, batch, 1.0 / batch.len() as f64)
}

/// Full model loss for one corrupted caption on one clip.
pub fn sample_loss<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    clip: &VideoClip,
    batch: &MaskedBatch,
    plan: Option<&MaskPlan>,
    scale: f64,
) -> Result<Var> {
    let visual = model::visual_tokens(g, store, cfg, clip, plan)?;
    let logits = decode_logits(g, store, cfg, &TextBatch::new(batch.input_ids.clone()), visual)?;
    mlm_loss_scaled(g, logits, batch, scale)
}

/// Parameters exempt from weight decay: biases and normalisation gains.
pub fn no_decay(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with("head_bias") || name.contains("norm")
}

/// First and second moments per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    /// Updates applied so far.
    pub t: usize,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(n, p)| (n.to_owned(), Tensor::zeros(p.value.shape())))
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// One Adam update from the gradients stored in `store`. `lr_of` gives
    /// each parameter's rate; decoupled decay is `lr * weight_decay * p`.
    pub fn update(
        &mut self,
        store: &mut ParamStore<T>,
        cfg: &TrainConfig,
        lr_of: impl Fn(&str) -> f64,
    ) -> Result<()> {
        self.t += 1;
        let (b1, b2, eps) = (T::of(cfg.adam_beta1), T::of(cfg.adam_beta2), T::of(cfg.adam_epsilon));
        let c1 = T::one() - T::of(cfg.adam_beta1.powi(self.t as i32));
        let c2 = T::one() - T::of(cfg.adam_beta2.powi(self.t as i32));
        for (name, p) in store.iter_mut() {
            let Some(grad) = &p.grad else { continue };
            let m = self.m.get_mut(name).ok_or_else(|| Error::Invariant(format!("no Adam moment for {name}")))?;
            let v = self.v.get_mut(name).ok_or_else(|| Error::Invariant(format!("no Adam moment for {name}")))?;
            let lr = T::of(lr_of(name));
            let decay = if no_decay(name) { T::zero() } else { T::of(cfg.weight_decay) };
            let value = p.value.data_mut();
            for (k, &gk) in grad.data().iter().enumerate() {
                let mk = b1 * m.data()[k] + (T::one() - b1) * gk;
                let vk = b2 * v.data()[k] + (T::one() - b2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let step = (mk / c1) / ((vk / c2).sqrt() + eps);
                value[k] = value[k] - lr * (step + decay * value[k]);
            }
        }
        Ok(())
    }
}

/// One training pair.
#[derive(Clone, Debug)]
pub struct Example {
    pub clip: Arc<VideoClip>,
    /// `[CLS] w1 .. wn [EOS]`.
    pub ids: Vec<usize>,
}

/// Corruption and mask plan prepared for one example of a step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub example: usize,
    pub batch: MaskedBatch,
    pub plan: Option<MaskPlan>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub masked: usize,
}

/// SplitMix64-style mix of `(seed, a, b)` into one stream seed.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    /// Updates completed.
    pub step: usize,
    pub exec: Execution,
    catalog: Option<RegionCatalog>,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig, exec: Execution) -> Result<Self> {
        let params = model::init_params(&model, cfg.seed)?;
        Self::resume(model, cfg, params, None, 0, exec)
    }

    pub fn resume(
        model: ModelConfig,
        cfg: TrainConfig,
        params: ParamStore<f32>,
        adam: Option<AdamState<f32>>,
        step: usize,
        exec: Execution,
    ) -> Result<Self> {
        let mut errs = model.validate();
        errs.extend(cfg.validate());
        if !errs.is_empty() {
            return Err(Error::Validation(errs));
        }
        let catalog = if model.masking { Some(catalog_for(&model)?) } else { None };
        let adam = adam.unwrap_or_else(|| AdamState::new(&params));
        Ok(Self {
            model,
            cfg,
            params,
            adam,
            step,
            exec,
            catalog,
        })
    }

    /// Example indices used by `step`: consecutive positions in a stream of
    /// per-epoch seeded shuffles.
    pub fn step_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let per = self.cfg.samples_per_step();
        let mut out = Vec::with_capacity(per);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for j in step * per..(step + 1) * per {
            let (epoch, pos) = (j / n, j % n);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 1, epoch as u64)));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[pos]);
        }
        out
    }

    /// Corrupts the chosen examples and draws their mask plans.
    pub fn prepare(&self, step: usize, data: &[Example], indices: &[usize]) -> Result<Vec<PreparedSample>> {
        indices
            .iter()
            .enumerate()
            .map(|(k, &idx)| {
                let ex = data.get(idx).ok_or_else(|| Error::Invariant(format!("example {idx} out of range")))?;
                let mut ids = ex.ids.clone();
                ids.truncate(self.cfg.max_caption_len.min(self.model.max_text_len));
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 2 + step as u64, k as u64));
                let batch = corrupt_caption(&ids, self.cfg.mask_rate, &mut rng)?;
                let plan = match &self.catalog {
                    Some(c) => Some(sample_mask_plan(c, self.model.frames / 2, rng.gen())?),
                    None => None,
                };
                Ok(PreparedSample {
                    example: idx,
                    batch,
                    plan,
                })
            })
            .collect()
    }

    /// Loss (already scaled) and parameter gradients of one prepared sample.
    pub fn sample_gradients(
        &self,
        data: &[Example],
        s: &PreparedSample,
        scale: f64,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
        let mut g = Graph::new();
        let clip = &data[s.example].clip;
        let loss = sample_loss(&mut g, &self.params, &self.model, clip, &s.batch, s.plan.as_ref(), scale)?;
        let value = g.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss of example {} at step {}", s.example, self.step)));
        }
        Ok((value, g.backward(loss)?.params()))
    }

    /// Summed loss and gradients over `samples`, each scaled by `scale`,
    /// reduced in input order.
    pub fn gradients(
        &self,
        data: &[Example],
        samples: &[PreparedSample],
        scale: f64,
    ) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
        let parts = self.exec.map(samples, |s| self.sample_gradients(data, s, scale));
        let mut loss = 0.0;
        let mut total: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for part in parts {
            let (l, grads) = part?;
            loss += l;
            for (name, g) in grads {
                match total.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b),
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        Ok((loss, total))
    }

    /// One optimizer update over `accumulation_steps` micro-batches.
    pub fn train_step(&mut self, data: &[Example], total_steps: usize) -> Result<StepMetrics> {
        if data.is_empty() {
            return Err(Error::Input("no training examples".into()));
        }
        let indices = self.step_indices(self.step, data.len());
        let samples = self.prepare(self.step, data, &indices)?;
        let masked: usize = samples.iter().map(|s| s.batch.len()).sum();
        let scale = 1.0 / masked as f64;
        self.params.zero_grads();
        let mut loss = 0.0;
        for micro in samples.chunks(self.cfg.batch_size) {
            let (l, grads) = self.gradients(data, micro, scale)?;
            loss += l;
            self.params.accumulate_grads(&grads)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss {loss} at step {}", self.step)));
        }
        let grad_norm = self
            .params
            .iter()
            .filter_map(|(_, p)| p.grad.as_ref())
            .flat_map(|g| g.data().iter().map(|&x| (x as f64) * (x as f64)))
            .sum::<f64>()
            .sqrt();
        let lr = lr_schedule(self.step, total_steps, &self.cfg);
        let mult = self.cfg.backbone_lr_multiplier;
        self.adam
            .update(&mut self.params, &self.cfg, |name| if is_backbone_param(name) { lr * mult } else { lr })?;
        self.params.zero_grads();
        let metrics = StepMetrics {
            step: self.step + 1,
            loss,
            grad_norm,
            lr,
            masked,
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs until `total_steps`, reporting each step.
    pub fn train(
        &mut self,
        data: &[Example],
        mut on_step: impl FnMut(&Trainer, &StepMetrics) -> Result<()>,
    ) -> Result<Vec<StepMetrics>> {
        let total = self.cfg.total_steps(data.len());
        let mut log = Vec::new();
        while self.step < total {
            let m = self.train_step(data, total)?;
            on_step(self, &m)?;
            log.push(m);
        }
        Ok(log)
    }
}
