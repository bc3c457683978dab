//! Naive metric references: plain loops and exhaustive search.

use vidcap_core::metrics::{EvalCorpus, EvalItem};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Sent = Vec<String>;

pub const WORDS: [&str; 5] = ["a", "red", "square", "moves", "left"];

pub fn sentence(rng: &mut ChaCha8Rng, min: usize) -> Sent {
    let n = rng.gen_range(min..=8);
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())].to_string()).collect()
}

pub fn random_corpus(rng: &mut ChaCha8Rng) -> EvalCorpus {
    let videos = rng.gen_range(1..=5);
    EvalCorpus {
        items: (0..videos)
            .map(|v| {
                let refs = rng.gen_range(1..=3);
                EvalItem {
                    video_id: format!("v{v}"),
                    candidate: sentence(rng, 0),
                    references: (0..refs).map(|_| sentence(rng, 1)).collect(),
                }
            })
            .collect(),
    }
}

pub fn windows(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

pub fn count(g: &[String], s: &[String]) -> usize {
    windows(s, g.len()).iter().filter(|w| w.as_slice() == g).count()
}

pub fn distinct(grams: Vec<Vec<String>>) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in grams {
        if !out.contains(&g) {
            out.push(g);
        }
    }
    out
}

pub fn naive_bleu(c: &EvalCorpus) -> f64 {
    let mut matched = [0f64; 4];
    let mut total = [0f64; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for item in &c.items {
        let cl = item.candidate.len();
        cand_len += cl;
        let mut best = item.references[0].len();
        for r in &item.references {
            let (d, bd) = (r.len().abs_diff(cl), best.abs_diff(cl));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        ref_len += best;
        for n in 1..=4 {
            total[n - 1] += windows(&item.candidate, n).len() as f64;
            for g in distinct(windows(&item.candidate, n)) {
                let in_cand = count(&g, &item.candidate);
                let in_refs = item.references.iter().map(|r| count(&g, r)).max().unwrap();
                matched[n - 1] += in_cand.min(in_refs) as f64;
            }
        }
    }
    if matched.contains(&0.0) {
        return 0.0;
    }
    let bp = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    let mut logsum = 0.0;
    for n in 0..4 {
        logsum += (matched[n] / total[n]).ln() / 4.0;
    }
    bp * logsum.exp()
}

#[allow(clippy::needless_range_loop)]
pub fn naive_meteor_sentence(c: &[String], r: &[String]) -> f64 {
    let mut taken = vec![false; r.len()];
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for i in 0..c.len() {
        for j in 0..r.len() {
            if !taken[j] && c[i] == r[j] {
                taken[j] = true;
                pairs.push((i, j));
                break;
            }
        }
    }
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let mut ch = 1;
    for k in 1..m {
        if !(pairs[k].0 == pairs[k - 1].0 + 1 && pairs[k].1 == pairs[k - 1].1 + 1) {
            ch += 1;
        }
    }
    let p = m as f64 / c.len() as f64;
    let rr = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rr / (rr + 9.0 * p);
    let frag = ch as f64 / m as f64;
    (1.0 - 0.5 * frag * frag * frag) * fmean
}

pub fn naive_meteor(c: &EvalCorpus) -> f64 {
    let mut sum = 0.0;
    for item in &c.items {
        let mut best = 0.0f64;
        for r in &item.references {
            best = best.max(naive_meteor_sentence(&item.candidate, r));
        }
        sum += best;
    }
    sum / c.items.len() as f64
}

pub fn is_subsequence(sub: &[&String], s: &[String]) -> bool {
    let mut it = s.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// Longest common subsequence by trying every subsequence of `a`.
pub fn naive_lcs(a: &[String], b: &[String]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn naive_rouge(c: &EvalCorpus) -> f64 {
    let mut sum = 0.0;
    for item in &c.items {
        let mut best = 0.0f64;
        for r in &item.references {
            let l = naive_lcs(&item.candidate, r) as f64;
            if l > 0.0 {
                let p = l / item.candidate.len() as f64;
                let rr = l / r.len() as f64;
                best = best.max(2.44 * p * rr / (rr + 1.44 * p));
            }
        }
        sum += best;
    }
    sum / c.items.len() as f64
}

pub fn naive_vector(s: &[String], n: usize, df: &[(Vec<String>, usize)], videos: f64) -> Vec<(Vec<String>, f64)> {
    let all = windows(s, n);
    let total = all.len() as f64;
    distinct(all)
        .into_iter()
        .map(|g| {
            let d = df.iter().find(|(h, _)| *h == g).map(|(_, k)| *k).unwrap_or(1);
            let tf = count(&g, s) as f64 / total;
            let w = tf * (videos / d as f64).ln();
            (g, w)
        })
        .collect()
}

pub fn naive_cosine(a: &[(Vec<String>, f64)], b: &[(Vec<String>, f64)]) -> f64 {
    let mut dot = 0.0;
    for (g, x) in a {
        for (h, y) in b {
            if g == h {
                dot += x * y;
            }
        }
    }
    let na: f64 = a.iter().map(|(_, x)| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|(_, y)| y * y).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn naive_cider(c: &EvalCorpus) -> f64 {
    let videos = c.items.len() as f64;
    let mut total = 0.0;
    for item in &c.items {
        let mut score = 0.0;
        for n in 1..=4 {
            let mut df: Vec<(Vec<String>, usize)> = Vec::new();
            for other in &c.items {
                let grams = distinct(other.references.iter().flat_map(|r| windows(r, n)).collect());
                for g in grams {
                    match df.iter_mut().find(|(h, _)| *h == g) {
                        Some(e) => e.1 += 1,
                        None => df.push((g, 1)),
                    }
                }
            }
            let cv = naive_vector(&item.candidate, n, &df, videos);
            let mut s = 0.0;
            for r in &item.references {
                s += naive_cosine(&cv, &naive_vector(r, n, &df, videos));
            }
            score += 0.25 * s / item.references.len() as f64;
        }
        total += score;
    }
    total / videos
}

// ---- tests ----------------------------------------------------------------
