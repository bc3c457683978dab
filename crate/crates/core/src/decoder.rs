//! Enhanced transformer decoder over the joint text + visual token sequence.
//!
//! Each layer gates its queries and keys against `O_bar`, the mean of the
//! outputs of all earlier layers (the layer input for the first layer):
//!
//! ```text
//! lambda_q = sigmoid(Q w_q + O_bar w_oq)      Q_hat = (1 - lambda_q) Q + lambda_q (O_bar W_oq)
//! lambda_k = sigmoid(K w_k + O_bar w_ok)      K_hat = (1 - lambda_k) K + lambda_k (O_bar W_ok)
//! ```
//!
//! Layers are pre-norm with residual connections around attention and the
//! feed-forward block. The vocabulary head is tied to the word embedding.

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::ops::BLOCKED;
use crate::tensor::{Graph, Initializer, ParamStore, Scalar, Tensor, Var};

/// Token ids with per-position pad flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextBatch {
    pub ids: Vec<usize>,
    pub pad: Vec<bool>,
}

impl TextBatch {
    pub fn new(ids: Vec<usize>) -> Self {
        let pad = vec![false; ids.len()];
        Self { ids, pad }
    }

    /// Appends `[PAD]` up to `len` positions.
    pub fn padded(ids: Vec<usize>, len: usize, pad_id: usize) -> Self {
        let n = ids.len();
        let mut b = Self::new(ids);
        if len > n {
            b.ids.resize(len, pad_id);
            b.pad.resize(len, true);
        }
        b
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which of the `L x L` query/key pairs may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub n_text: usize,
    pub n_visual: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn len(&self) -> usize {
        self.n_text + self.n_visual
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.len() + col]
    }

    /// Additive form: 0 where allowed, a large negative surrogate elsewhere.
    pub fn additive<T: Scalar>(&self) -> Tensor<T> {
        let l = self.len();
        let blocked = T::of(BLOCKED);
        Tensor::from_fn(&[l, l], |i| if self.allowed[i] { T::zero() } else { blocked })
    }
}

/// Text rows see earlier non-pad text and every visual token; visual rows see
/// only visual tokens; every row sees itself.
pub fn build_attention_mask(n_text: usize, n_visual: usize, pad: &[bool]) -> AttentionMask {
    let l = n_text + n_visual;
    let is_pad = |j: usize| j < n_text && pad.get(j).copied().unwrap_or(false);
    let mut allowed = vec![false; l * l];
    for i in 0..l {
        for j in 0..l {
            allowed[i * l + j] = i == j
                || if i < n_text {
                    (j <= i || j >= n_text) && !is_pad(j)
                } else {
                    j >= n_text
                };
        }
    }
    AttentionMask {
        n_text,
        n_visual,
        allowed,
    }
}

/// Stored outputs of the layers run so far.
#[derive(Clone, Debug, Default)]
pub struct LayerTrace {
    pub outputs: Vec<Var>,
}

impl LayerTrace {
    /// Index of the layer about to run (1-based).
    pub fn next_layer(&self) -> usize {
        self.outputs.len() + 1
    }

    pub fn push(&mut self, o: Var) {
        self.outputs.push(o);
    }
}

/// `O_bar` for the next layer: the layer input when no layer has run yet,
/// otherwise the mean of all stored outputs.
pub fn shallow_context<T: Scalar>(g: &mut Graph<T>, trace: &LayerTrace, input: Var) -> Result<Var> {
    if trace.outputs.is_empty() {
        Ok(input)
    } else {
        g.mean(&trace.outputs)
    }
}

pub struct EnhancedQk {
    pub q: Var,
    pub k: Var,
    pub lambda_q: Var,
    pub lambda_k: Var,
}

fn gate<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    which: &str,
    x: Var,
    context: Var,
) -> Result<(Var, Var)> {
    let w_x = g.param(store, &format!("{prefix}.gate.w_{which}"))?;
    let w_o = g.param(store, &format!("{prefix}.gate.w_o{which}"))?;
    let proj = g.param(store, &format!("{prefix}.gate.proj_{which}"))?;
    let a = g.matmul(x, w_x)?;
    let b = g.matmul(context, w_o)?;
    let logit = g.add(a, b)?;
    let lambda = g.sigmoid(logit);
    let keep = g.affine(lambda, -T::one(), T::one());
    let kept = g.scale_rows(x, keep)?;
    let shallow = g.matmul(context, proj)?;
    let mixed = g.scale_rows(shallow, lambda)?;
    Ok((g.add(kept, mixed)?, lambda))
}

/// Gated mixing of full-width `Q` and `K` with the shallow context.
pub fn enhanced_qk<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    q: Var,
    k: Var,
    context: Var,
) -> Result<EnhancedQk> {
    let (q_hat, lambda_q) = gate(g, store, prefix, "q", q, context)?;
    let (k_hat, lambda_k) = gate(g, store, prefix, "k", k, context)?;
    Ok(EnhancedQk {
        q: q_hat,
        k: k_hat,
        lambda_q,
        lambda_k,
    })
}

/// Scaled dot-product attention over `heads` column blocks, mask added to the
/// logits before the softmax. Returns the re-concatenated heads (no output
/// projection).
pub fn multi_head_attention<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &Tensor<T>,
    heads: usize,
) -> Result<Var> {
    let d = g.value(q).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("hidden size {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let logits = g.matmul_nt(qh, kh)?;
        let logits = g.scale(logits, scale);
        let logits = g.add_const(logits, mask)?;
        let p = g.softmax_rows(logits)?;
        outs.push(g.matmul(p, vh)?);
    }
    if outs.len() == 1 {
        Ok(outs[0])
    } else {
        g.concat(&outs)
    }
}

pub fn layer_prefix(z: usize) -> String {
    format!("decoder.layer{z}")
}

/// The visual projection `psi_v` alone; all the video side needs.
pub fn init_visual_params<T: Scalar>(
    cfg: &ModelConfig,
    init: &mut Initializer,
    store: &mut ParamStore<T>,
) -> Result<()> {
    store.insert("decoder.visual_proj.weight", init.weight(cfg.fused_channels, cfg.hidden_size))?;
    store.insert("decoder.visual_proj.bias", init.bias(cfg.hidden_size))
}

pub fn init_params<T: Scalar>(cfg: &ModelConfig, init: &mut Initializer, store: &mut ParamStore<T>) -> Result<()> {
    let d = cfg.hidden_size;
    let f = cfg.ffn_multiplier * d;
    init_visual_params(cfg, init, store)?;
    store.insert("decoder.word_embedding", init.uniform(&[cfg.vocab_size, d], d))?;
    store.insert("decoder.position_embedding", init.uniform(&[cfg.max_text_len, d], d))?;
    for z in 1..=cfg.layers {
        let p = layer_prefix(z);
        for n in ["norm1", "norm2"] {
            store.insert(format!("{p}.{n}.gain"), Tensor::ones(&[d]))?;
            store.insert(format!("{p}.{n}.bias"), Tensor::zeros(&[d]))?;
        }
        for n in ["wq", "wk", "wv"] {
            store.insert(format!("{p}.attn.{n}"), init.weight(d, d))?;
        }
        store.insert(format!("{p}.attn.wo"), init.weight(d, d))?;
        store.insert(format!("{p}.attn.bo"), init.bias(d))?;
        for n in ["w_q", "w_k", "w_oq", "w_ok"] {
            store.insert(format!("{p}.gate.{n}"), init.weight(d, 1))?;
        }
        store.insert(format!("{p}.gate.proj_q"), init.weight(d, d))?;
        store.insert(format!("{p}.gate.proj_k"), init.weight(d, d))?;
        store.insert(format!("{p}.ffn.fc1.weight"), init.weight(d, f))?;
        store.insert(format!("{p}.ffn.fc1.bias"), init.bias(f))?;
        store.insert(format!("{p}.ffn.fc2.weight"), init.weight(f, d))?;
        store.insert(format!("{p}.ffn.fc2.bias"), init.bias(d))?;
    }
    store.insert("decoder.final_norm.gain", Tensor::ones(&[d]))?;
    store.insert("decoder.final_norm.bias", Tensor::zeros(&[d]))?;
    store.insert("decoder.head_bias", Tensor::zeros(&[cfg.vocab_size]))?;
    Ok(())
}

/// Word embedding plus learned position embedding.
pub fn embed_text<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &TextBatch,
) -> Result<Var> {
    if text.is_empty() {
        return Err(Error::Shape("empty text sequence".into()));
    }
    if text.len() > cfg.max_text_len {
        return Err(Error::Lookup {
            id: text.len() - 1,
            rows: cfg.max_text_len,
        });
    }
    let words = g.param(store, "decoder.word_embedding")?;
    let positions = g.param(store, "decoder.position_embedding")?;
    let w = g.gather(words, &text.ids)?;
    let pos: Vec<usize> = (0..text.len()).collect();
    let p = g.gather(positions, &pos)?;
    g.add(w, p)
}

/// Flattens `[T', H', W', C]` cells to tokens and projects them to the hidden size.
pub fn tokenize_visual<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    final_map: Var,
) -> Result<Var> {
    let s = g.shape(final_map).to_vec();
    if s.len() != 4 || s[3] != cfg.fused_channels {
        return Err(Error::Shape(format!(
            "visual tokenizer expects [t, h, w, {}], got {s:?}",
            cfg.fused_channels
        )));
    }
    let flat = g.reshape(final_map, &[s[0] * s[1] * s[2], s[3]])?;
    let w = g.param(store, "decoder.visual_proj.weight")?;
    let b = g.param(store, "decoder.visual_proj.bias")?;
    g.linear(flat, w, Some(b))
}

/// Output of one decoder layer together with the gates it used.
pub struct LayerOutput {
    pub output: Var,
    pub gates: Option<(Var, Var)>,
}

/// One decoder layer. With `enhanced` false this is the plain pre-norm
/// transformer layer and `trace` is ignored.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    z: usize,
    input: Var,
    trace: &LayerTrace,
    mask: &Tensor<T>,
    enhanced: bool,
) -> Result<LayerOutput> {
    let p = layer_prefix(z);
    let param = |g: &mut Graph<T>, n: &str| g.param(store, &format!("{p}.{n}"));
    let (n1g, n1b) = (param(g, "norm1.gain")?, param(g, "norm1.bias")?);
    let x = g.layer_norm(input, n1g, n1b)?;
    let (wq, wk, wv) = (param(g, "attn.wq")?, param(g, "attn.wk")?, param(g, "attn.wv")?);
    let mut q = g.matmul(x, wq)?;
    let mut k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let mut gates = None;
    if enhanced {
        let context = shallow_context(g, trace, input)?;
        let e = enhanced_qk(g, store, &p, q, k, context)?;
        q = e.q;
        k = e.k;
        gates = Some((e.lambda_q, e.lambda_k));
    }
    let attn = multi_head_attention(g, q, k, v, mask, cfg.heads)?;
    let (wo, bo) = (param(g, "attn.wo")?, param(g, "attn.bo")?);
    let attn = g.linear(attn, wo, Some(bo))?;
    let h = g.add(input, attn)?;

    let (n2g, n2b) = (param(g, "norm2.gain")?, param(g, "norm2.bias")?);
    let x2 = g.layer_norm(h, n2g, n2b)?;
    let (f1, b1) = (param(g, "ffn.fc1.weight")?, param(g, "ffn.fc1.bias")?);
    let (f2, b2) = (param(g, "ffn.fc2.weight")?, param(g, "ffn.fc2.bias")?);
    let f = g.linear(x2, f1, Some(b1))?;
    let f = g.gelu(f);
    let f = g.linear(f, f2, Some(b2))?;
    let output = g.add(h, f)?;
    if !g.value(output).is_finite() {
        return Err(Error::NonFinite(format!("decoder layer {z} output")));
    }
    Ok(LayerOutput { output, gates })
}

/// Everything the decoder stack produced for one sequence.
pub struct DecoderRun {
    pub logits: Var,
    pub layer_outputs: Vec<Var>,
    /// The `O_bar` each layer actually used (only when enhanced).
    pub contexts: Vec<Var>,
}

/// Joint sequence `[text; visual]` through `Z` layers, then the tied
/// vocabulary head on the first `N` rows.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &TextBatch,
    visual_tokens: Var,
) -> Result<DecoderRun> {
    let n = text.len();
    let n_visual = g.value(visual_tokens).rows();
    let words = embed_text(g, store, cfg, text)?;
    let joint = g.concat_rows(&[words, visual_tokens])?;
    let mask = build_attention_mask(n, n_visual, &text.pad).additive::<T>();
    let mut trace = LayerTrace::default();
    let mut contexts = Vec::new();
    let mut x = joint;
    for z in 1..=cfg.layers {
        if cfg.enhanced {
            contexts.push(shallow_context(g, &trace, joint)?);
        }
        let out = decoder_layer(g, store, cfg, z, x, &trace, &mask, cfg.enhanced)?;
        trace.push(out.output);
        x = out.output;
    }
    let text_rows = g.slice_rows(x, 0, n)?;
    let (fg, fb) = (
        g.param(store, "decoder.final_norm.gain")?,
        g.param(store, "decoder.final_norm.bias")?,
    );
    let normed = g.layer_norm(text_rows, fg, fb)?;
    let words = g.param(store, "decoder.word_embedding")?;
    let logits = g.matmul_nt(normed, words)?;
    let hb = g.param(store, "decoder.head_bias")?;
    let logits = g.add_bias(logits, hb)?;
    Ok(DecoderRun {
        logits,
        layer_outputs: trace.outputs,
        contexts,
    })
}

/// Vocabulary logits `[N, |vocab|]`.
pub fn decode_logits<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    cfg: &ModelConfig,
    text: &TextBatch,
    visual_tokens: Var,
) -> Result<Var> {
    Ok(decode(g, store, cfg, text, visual_tokens)?.logits)
}
