//! Autoregressive caption generation: start from `[CLS] [MASK]`, fill the
//! mask, append a new one, until `[EOS]` or the length cap. Beam search ranks
//! hypotheses by length-normalised log-probability.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::VideoClip;
use crate::data::{is_special, Vocabulary, CLS, EOS, MASK};
use crate::decoder::TextBatch;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::metrics::Prediction;
use crate::model::{encode_clip, logits_for, ModelConfig};
use crate::tensor::ops::{log_softmax_rows, BLOCKED};
use crate::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub beam: usize,
    /// Maximum generated tokens, `[EOS]` included.
    pub max_len: usize,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self { beam: 4, max_len: 20 }
    }
}

impl GenerateConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.beam == 0 {
            errs.push("beam must be >= 1".into());
        }
        if self.max_len == 0 {
            errs.push("max_len must be >= 1".into());
        }
        errs
    }
}

/// Anything that maps a `[CLS] ...` prefix to next-token log-probabilities.
pub trait StepModel {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;

    /// Longest prefix (without the trailing mask) the model can extend.
    fn max_prefix(&self) -> usize {
        usize::MAX
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Starts with `[CLS]`.
    pub ids: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    pub fn start() -> Self {
        Self {
            ids: vec![CLS],
            log_prob: 0.0,
            finished: false,
        }
    }

    pub fn generated(&self) -> usize {
        self.ids.len() - 1
    }

    /// Log-probability per generated token.
    pub fn score(&self) -> f64 {
        if self.generated() == 0 {
            0.0
        } else {
            self.log_prob / self.generated() as f64
        }
    }

    fn extend(&self, token: usize, lp: f64, cap: usize) -> Self {
        let mut ids = self.ids.clone();
        ids.push(token);
        let finished = token == EOS || ids.len() > cap;
        Self {
            ids,
            log_prob: self.log_prob + lp,
            finished,
        }
    }
}

/// Best first: higher score, then the lexicographically smaller sequence.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.score().total_cmp(&a.score()).then_with(|| a.ids.cmp(&b.ids))
}

pub fn next_token_distribution(model: &dyn StepModel, hyp: &Hypothesis) -> Result<Vec<f64>> {
    if hyp.finished {
        return Err(Error::Contract("cannot extend a finished hypothesis".into()));
    }
    model.next_log_probs(&hyp.ids)
}

/// Tokens ordered by log-probability (desc), ties to the lower id.
fn top_tokens(lp: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..lp.len()).collect();
    idx.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn effective_cap(model: &dyn StepModel, max_len: usize) -> usize {
    max_len.min(model.max_prefix().saturating_sub(1)).max(1)
}

/// Argmax rollout.
pub fn greedy(model: &dyn StepModel, max_len: usize) -> Result<Hypothesis> {
    let cap = effective_cap(model, max_len);
    let mut h = Hypothesis::start();
    while !h.finished {
        let lp = next_token_distribution(model, &h)?;
        let tok = top_tokens(&lp, 1)[0];
        h = h.extend(tok, lp[tok], cap);
    }
    Ok(h)
}

/// Beam search keeping the `beam` best candidates per step. Finished
/// hypotheses retire into a pool that also holds the greedy rollout, so the
/// result never scores below greedy decoding.
pub fn beam_search(model: &dyn StepModel, beam: usize, max_len: usize) -> Result<Hypothesis> {
    let beam = beam.max(1);
    let cap = effective_cap(model, max_len);
    let mut pool = vec![greedy(model, cap)?];
    let mut active = vec![Hypothesis::start()];
    while !active.is_empty() {
        let mut candidates = Vec::with_capacity(active.len() * beam);
        for h in &active {
            let lp = next_token_distribution(model, h)?;
            for tok in top_tokens(&lp, beam) {
                candidates.push(h.extend(tok, lp[tok], cap));
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam);
        let (done, live): (Vec<_>, Vec<_>) = candidates.into_iter().partition(|h| h.finished);
        pool.extend(done);
        active = live;
    }
    pool.sort_by(rank);
    Ok(pool.swap_remove(0))
}

/// The trained decoder with one clip's visual tokens fixed.
pub struct CaptionModel<'a> {
    pub store: &'a ParamStore<f32>,
    pub cfg: &'a ModelConfig,
    pub visual: Tensor<f32>,
}

impl<'a> CaptionModel<'a> {
    pub fn new(store: &'a ParamStore<f32>, cfg: &'a ModelConfig, clip: &VideoClip) -> Result<Self> {
        Ok(Self {
            store,
            cfg,
            visual: encode_clip(store, cfg, clip)?,
        })
    }
}

impl StepModel for CaptionModel<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut ids = prefix.to_vec();
        ids.push(MASK);
        let logits = logits_for(self.store, self.cfg, &TextBatch::new(ids), &self.visual)?;
        let v = logits.cols();
        // Only words and [EOS] may be emitted.
        let row = logits.data()[logits.numel() - v..]
            .iter()
            .enumerate()
            .map(|(id, &x)| if is_special(id) && id != EOS { BLOCKED } else { x as f64 })
            .collect();
        let last: Tensor<f64> = Tensor::new(vec![1, v], row)?;
        Ok(log_softmax_rows(&last).into_data())
    }

    fn max_prefix(&self) -> usize {
        self.cfg.max_text_len - 1
    }
}

pub fn generate_ids(store: &ParamStore<f32>, cfg: &ModelConfig, clip: &VideoClip, opts: &GenerateConfig) -> Result<Vec<usize>> {
    let model = CaptionModel::new(store, cfg, clip)?;
    Ok(beam_search(&model, opts.beam, opts.max_len)?.ids)
}

/// Clip -> caption text, special tokens stripped.
pub fn generate_caption(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    clip: &VideoClip,
    opts: &GenerateConfig,
) -> Result<String> {
    Ok(vocab.decode(&generate_ids(store, cfg, clip, opts)?))
}

/// Captions for many clips, in input order.
pub fn generate_all(
    store: &ParamStore<f32>,
    cfg: &ModelConfig,
    vocab: &Vocabulary,
    clips: &[VideoClip],
    opts: &GenerateConfig,
    exec: Execution,
) -> Result<Vec<Prediction>> {
    exec.map(clips, |clip| {
        Ok(Prediction {
            video_id: clip.clip_id.clone(),
            caption: generate_caption(store, cfg, vocab, clip, opts)?,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = Vec::new();
    for p in preds {
        serde_json::to_writer(&mut out, p).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
