//! Corpus-level caption metrics: BLEU-4, METEOR (exact match), ROUGE-L and
//! CIDEr (plain TF-IDF cosine, no length penalty, no x10 scaling).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::error::{Error, Result};

pub const UNIFORM4: [f64; 4] = [0.25; 4];
pub const METEOR_ALPHA: f64 = 3.0;
pub const METEOR_GAMMA: f64 = 0.5;
pub const METEOR_THETA: f64 = 3.0;
pub const ROUGE_BETA: f64 = 1.2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    pub video_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EvalCorpus {
    pub items: Vec<EvalItem>,
}

impl EvalCorpus {
    /// Tokenizes raw strings; every candidate needs at least one reference.
    pub fn from_text<S: AsRef<str>>(items: &[(&str, S, Vec<S>)]) -> Result<Self> {
        let mut out = Vec::with_capacity(items.len());
        for (id, cand, refs) in items {
            out.push(EvalItem {
                video_id: id.to_string(),
                candidate: tokenize(cand.as_ref()),
                references: refs.iter().map(|r| tokenize(r.as_ref())).collect(),
            });
        }
        let c = Self { items: out };
        c.check()?;
        Ok(c)
    }

    pub fn check(&self) -> Result<()> {
        match self.items.iter().find(|i| i.references.is_empty()) {
            Some(i) => Err(Error::Input(format!("video `{}` has no references", i.video_id))),
            None => Ok(()),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

type Counts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> Counts<'_> {
    let mut c = BTreeMap::new();
    if n > 0 && tokens.len() >= n {
        for g in tokens.windows(n) {
            *c.entry(g).or_default() += 1;
        }
    }
    c
}

pub fn bleu4(corpus: &EvalCorpus) -> f64 {
    bleu_weighted(corpus, UNIFORM4)
}

/// Corpus BLEU with per-order weights; zero whenever any clipped precision is zero.
pub fn bleu_weighted(corpus: &EvalCorpus, weights: [f64; 4]) -> f64 {
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c, mut r) = (0usize, 0usize);
    for item in &corpus.items {
        let cand = &item.candidate;
        c += cand.len();
        r += item
            .references
            .iter()
            .map(|x| x.len())
            .min_by_key(|&len| (len.abs_diff(cand.len()), len))
            .unwrap_or(0);
        for n in 1..=4 {
            let counts = ngrams(cand, n);
            let mut max_ref: Counts = BTreeMap::new();
            for reference in &item.references {
                for (g, k) in ngrams(reference, n) {
                    let e = max_ref.entry(g).or_default();
                    *e = (*e).max(k);
                }
            }
            for (g, k) in counts {
                total[n - 1] += k;
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }
    if (0..4).any(|i| matched[i] == 0) || c == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| weights[i] * (matched[i] as f64 / total[i] as f64).ln())
        .sum();
    brevity_penalty(c, r) * log_p.exp()
}

pub fn brevity_penalty(c: usize, r: usize) -> f64 {
    if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    }
}

/// Unigram alignment: each candidate token, in order, takes the first unused
/// equal reference token. Returns `(candidate index, reference index)` pairs.
pub fn align(candidate: &[String], reference: &[String]) -> Vec<(usize, usize)> {
    let mut used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (i, w) in candidate.iter().enumerate() {
        if let Some(j) = (0..reference.len()).find(|&j| !used[j] && reference[j] == *w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    pairs
}

/// Maximal runs of alignment pairs adjacent in both sentences.
pub fn chunks(pairs: &[(usize, usize)]) -> usize {
    pairs
        .iter()
        .enumerate()
        .filter(|&(k, &(i, j))| k == 0 || pairs[k - 1] != (i.wrapping_sub(1), j.wrapping_sub(1)))
        .count()
}

pub fn meteor_sentence(candidate: &[String], reference: &[String]) -> f64 {
    let pairs = align(candidate, reference);
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / candidate.len() as f64;
    let r = m as f64 / reference.len() as f64;
    let a2 = METEOR_ALPHA * METEOR_ALPHA;
    let f_mean = (a2 + 1.0) * p * r / (r + a2 * p);
    let pen = METEOR_GAMMA * (chunks(&pairs) as f64 / m as f64).powf(METEOR_THETA);
    (1.0 - pen) * f_mean
}

/// Mean over videos of the best single-reference sentence score.
pub fn meteor(corpus: &EvalCorpus) -> f64 {
    mean_over(corpus, |item| {
        item.references
            .iter()
            .map(|r| meteor_sentence(&item.candidate, r))
            .fold(0.0, f64::max)
    })
}

pub fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_sentence(candidate: &[String], reference: &[String]) -> f64 {
    let l = lcs(candidate, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / candidate.len() as f64;
    let r = l as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn rouge_l(corpus: &EvalCorpus) -> f64 {
    mean_over(corpus, |item| {
        item.references
            .iter()
            .map(|r| rouge_l_sentence(&item.candidate, r))
            .fold(0.0, f64::max)
    })
}

pub fn cider(corpus: &EvalCorpus) -> f64 {
    cider_weighted(corpus, UNIFORM4)
}

/// TF-IDF n-gram vector of one sentence.
fn tfidf<'a>(tokens: &'a [String], n: usize, df: &Counts, videos: f64) -> BTreeMap<&'a [String], f64> {
    let counts = ngrams(tokens, n);
    let total: usize = counts.values().sum();
    counts
        .into_iter()
        .map(|(g, k)| {
            let idf = (videos / df.get(g).copied().unwrap_or(1) as f64).ln();
            (g, k as f64 / total as f64 * idf)
        })
        .collect()
}

fn cosine(a: &BTreeMap<&[String], f64>, b: &BTreeMap<&[String], f64>) -> f64 {
    let norm = |v: &BTreeMap<&[String], f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().filter_map(|(g, x)| b.get(g).map(|y| x * y)).sum();
    dot / (na * nb)
}

pub fn cider_weighted(corpus: &EvalCorpus, weights: [f64; 4]) -> f64 {
    let videos = corpus.len() as f64;
    let mut per_video = vec![0.0; corpus.len()];
    for n in 1..=4 {
        // Document frequency: number of videos whose references contain the n-gram.
        let mut df: Counts = BTreeMap::new();
        for item in &corpus.items {
            let seen: BTreeSet<&[String]> = item.references.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in seen {
                *df.entry(g).or_default() += 1;
            }
        }
        for (v, item) in corpus.items.iter().enumerate() {
            let c = tfidf(&item.candidate, n, &df, videos);
            let sum: f64 = item
                .references
                .iter()
                .map(|r| cosine(&c, &tfidf(r, n, &df, videos)))
                .sum();
            per_video[v] += weights[n - 1] * sum / item.references.len() as f64;
        }
    }
    if per_video.is_empty() {
        0.0
    } else {
        per_video.iter().sum::<f64>() / per_video.len() as f64
    }
}

fn mean_over(corpus: &EvalCorpus, f: impl Fn(&EvalItem) -> f64) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    corpus.items.iter().map(f).sum::<f64>() / corpus.len() as f64
}

/// `0.451 -> 45.1`.
pub fn percent(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub bleu4: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
}

impl Scores {
    fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            bleu4: f(self.bleu4),
            meteor: f(self.meteor),
            rouge_l: f(self.rouge_l),
            cider: f(self.cider),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub videos: usize,
    pub references: usize,
    /// Fractions in `[0, 1]`.
    pub scores: Scores,
    /// The same scores x100, one decimal.
    pub percent: Scores,
}

impl MetricReport {
    pub fn table(&self) -> String {
        let p = &self.percent;
        format!(
            "{:<8} {:>6}\n{:<8} {:>6.1}\n{:<8} {:>6.1}\n{:<8} {:>6.1}\n{:<8} {:>6.1}\n",
            "metric", "score", "BLEU-4", p.bleu4, "METEOR", p.meteor, "ROUGE-L", p.rouge_l, "CIDEr", p.cider
        )
    }
}

pub fn score_corpus(corpus: &EvalCorpus) -> Result<MetricReport> {
    if corpus.is_empty() {
        return Err(Error::Input("nothing to evaluate".into()));
    }
    corpus.check()?;
    let scores = Scores {
        bleu4: bleu4(corpus),
        meteor: meteor(corpus),
        rouge_l: rouge_l(corpus),
        cider: cider(corpus),
    };
    Ok(MetricReport {
        videos: corpus.len(),
        references: corpus.items.iter().map(|i| i.references.len()).sum(),
        scores,
        percent: scores.map(percent),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub video_id: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct References {
    pub video_id: String,
    pub captions: Vec<String>,
}

/// A predictions line: `caption`, or a references-style `captions` list whose
/// first entry is taken (so a references file can be scored against itself).
#[derive(Deserialize)]
struct PredictionLine {
    video_id: String,
    caption: Option<String>,
    captions: Option<Vec<String>>,
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    read_jsonl::<PredictionLine>(path)?
        .into_iter()
        .map(|l| {
            let caption = l.caption.or_else(|| l.captions.and_then(|c| c.into_iter().next()));
            caption
                .map(|caption| Prediction {
                    video_id: l.video_id.clone(),
                    caption,
                })
                .ok_or_else(|| Error::Input(format!("{}: prediction for `{}` has no caption", path.display(), l.video_id)))
        })
        .collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Scores a predictions file against a references file.
pub fn evaluate(predictions: &Path, references: &Path) -> Result<MetricReport> {
    let preds = read_predictions(predictions)?;
    if preds.is_empty() {
        return Err(Error::Input(format!("{} contains no predictions", predictions.display())));
    }
    let refs: BTreeMap<String, Vec<String>> = read_jsonl::<References>(references)?
        .into_iter()
        .map(|r| (r.video_id, r.captions))
        .collect();
    let mut seen = BTreeSet::new();
    let mut items = Vec::with_capacity(preds.len());
    for p in preds {
        if !seen.insert(p.video_id.clone()) {
            return Err(Error::Input(format!("duplicate prediction for `{}`", p.video_id)));
        }
        let r = refs
            .get(&p.video_id)
            .ok_or_else(|| Error::Input(format!("no references for video `{}`", p.video_id)))?;
        items.push(EvalItem {
            candidate: tokenize(&p.caption),
            references: r.iter().map(|s| tokenize(s)).collect(),
            video_id: p.video_id,
        });
    }
    score_corpus(&EvalCorpus { items })
}
