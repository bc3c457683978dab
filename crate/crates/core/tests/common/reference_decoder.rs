//! Independent loop implementation of the plain pre-norm decoder stack.

use vidcap_core::decoder::layer_prefix;
use vidcap_core::model::{init_params, ModelConfig};
use vidcap_core::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn toy(enhanced: bool) -> ModelConfig {
    ModelConfig {
        enhanced,
        ..ModelConfig::toy()
    }
}

pub fn random_visual(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[cfg.n_visual(), cfg.hidden_size], |_| rng.gen_range(-1.0..1.0))
}

pub fn random_text(cfg: &ModelConfig, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut ids = vec![1];
    ids.extend((1..n).map(|_| rng.gen_range(3..cfg.vocab_size)));
    ids
}

/// Store with gates and norms moved off their initial values so nothing is
/// accidentally symmetric.
pub fn perturbed_store(cfg: &ModelConfig, seed: u64) -> ParamStore<f64> {
    let mut store = init_params::<f64>(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 99);
    for (name, p) in store.iter_mut() {
        if name.contains("norm") || name.ends_with("bias") || name.ends_with(".bo") {
            for v in p.value.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    store
}

pub fn mat(t: &Tensor<f64>) -> Mat {
    t.data().chunks(t.cols()).map(|r| r.to_vec()).collect()
}

pub fn vecp(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(name).unwrap().data().to_vec()
}

pub fn matp(store: &ParamStore<f64>, name: &str) -> Mat {
    mat(store.value(name).unwrap())
}

pub fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum()).collect())
        .collect()
}

pub fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = (var + 1e-5).sqrt();
            row.iter().enumerate().map(|(j, v)| (v - mean) / sd * gain[j] + bias[j]).collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Text row `i` sees text `j <= i` and every visual token; visual rows see
/// visual tokens only.
pub fn visible(n_text: usize, i: usize, j: usize) -> bool {
    if i < n_text {
        j <= i || j >= n_text
    } else {
        j >= n_text
    }
}

/// Attention by explicit summation over the visible keys only.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize, n_text: usize) -> Mat {
    let d = q[0].len();
    let dh = d / heads;
    let l = q.len();
    let mut out = vec![vec![0.0; d]; l];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..l {
            let scores: Vec<Option<f64>> = (0..l)
                .map(|j| {
                    visible(n_text, i, j).then(|| {
                        cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                })
                .collect();
            let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = scores.iter().flatten().map(|s| (s - max).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let p = (s - max).exp() / z;
                    for c in cols.clone() {
                        out[i][c] += p * v[j][c];
                    }
                }
            }
        }
    }
    out
}

pub fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

pub fn add_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|x| x.iter().zip(b).map(|(p, q)| p + q).collect()).collect()
}

/// Plain pre-norm transformer stack with the tied head.
pub fn reference_logits(store: &ParamStore<f64>, cfg: &ModelConfig, ids: &[usize], visual: &Tensor<f64>) -> Mat {
    let word = matp(store, "decoder.word_embedding");
    let pos = matp(store, "decoder.position_embedding");
    let n = ids.len();
    let mut x: Mat = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| word[id].iter().zip(&pos[i]).map(|(a, b)| a + b).collect())
        .collect();
    x.extend(mat(visual));
    for z in 1..=cfg.layers {
        let p = layer_prefix(z);
        let xn = layer_norm(&x, &vecp(store, &format!("{p}.norm1.gain")), &vecp(store, &format!("{p}.norm1.bias")));
        let q = mm(&xn, &matp(store, &format!("{p}.attn.wq")));
        let k = mm(&xn, &matp(store, &format!("{p}.attn.wk")));
        let v = mm(&xn, &matp(store, &format!("{p}.attn.wv")));
        let a = attend(&q, &k, &v, cfg.heads, n);
        let a = add_row(&mm(&a, &matp(store, &format!("{p}.attn.wo"))), &vecp(store, &format!("{p}.attn.bo")));
        let h = add(&x, &a);
        let hn = layer_norm(&h, &vecp(store, &format!("{p}.norm2.gain")), &vecp(store, &format!("{p}.norm2.bias")));
        let f = add_row(&mm(&hn, &matp(store, &format!("{p}.ffn.fc1.weight"))), &vecp(store, &format!("{p}.ffn.fc1.bias")));
        let f: Mat = f.into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
        let f = add_row(&mm(&f, &matp(store, &format!("{p}.ffn.fc2.weight"))), &vecp(store, &format!("{p}.ffn.fc2.bias")));
        x = add(&h, &f);
    }
    let text = layer_norm(
        &x[..n].to_vec(),
        &vecp(store, "decoder.final_norm.gain"),
        &vecp(store, "decoder.final_norm.bias"),
    );
    let head_bias = vecp(store, "decoder.head_bias");
    text.iter()
        .map(|row| {
            word.iter()
                .zip(&head_bias)
                .map(|(w, b)| row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>() + b)
                .collect()
        })
        .collect()
}

// ---- tests ----------------------------------------------------------------
