//! Synthetic moving-shapes corpus, vocabulary, and the on-disk formats:
//! the `EVCF` clip container and the JSON Lines manifest.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::VideoClip;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const EOS: usize = 4;
pub const UNK: usize = 5;
pub const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[EOS]", "[UNK]"];

pub fn is_special(id: usize) -> bool {
    id < RESERVED.len()
}

/// Lowercase, punctuation stripped, whitespace split.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = String;

    fn try_from(f: VocabFile) -> std::result::Result<Self, String> {
        if f.tokens.len() < RESERVED.len() || f.tokens[..RESERVED.len()] != RESERVED {
            return Err("vocabulary must start with the reserved tokens".into());
        }
        let index: HashMap<String, usize> = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != f.tokens.len() {
            return Err("vocabulary contains duplicate tokens".into());
        }
        Ok(Self { tokens: f.tokens, index })
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl Vocabulary {
    /// Reserved tokens first, then words by descending frequency, ties lexicographic.
    pub fn build<'a>(captions: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for c in captions {
            any = true;
            for w in tokenize(c) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(&w.as_str())).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens: Vec<String> = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Word ids of a sentence; unknown words map to `[UNK]`.
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        tokenize(sentence).iter().map(|w| self.id(w)).collect()
    }

    /// `[CLS] w1 .. wn [EOS]`.
    pub fn wrap(&self, sentence: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(self.encode(sentence));
        ids.push(EOS);
        ids
    }

    /// Space-joined words; special tokens are dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| !is_special(i))
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Motion {
    Left,
    Right,
    Up,
    Down,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const MOTIONS: [Motion; 4] = [Motion::Left, Motion::Right, Motion::Up, Motion::Down];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Circle => "circle",
            Self::Triangle => "triangle",
        }
    }

    /// Whether offset `(dy, dx)` inside a `size` box is covered.
    fn covers(self, dy: usize, dx: usize, size: usize) -> bool {
        match self {
            Self::Square => true,
            Self::Circle => {
                let c = (size as f64 - 1.0) / 2.0;
                let r = size as f64 / 2.0;
                (dy as f64 - c).powi(2) + (dx as f64 - c).powi(2) <= r * r
            }
            // Apex at the top, base along the bottom row.
            Self::Triangle => {
                let half = (dy + 1) as f64 * size as f64 / (2.0 * size as f64);
                let c = (size as f64 - 1.0) / 2.0;
                (dx as f64 - c).abs() <= half
            }
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Self::Red => "red",
            Self::Green => "green",
            Self::Blue => "blue",
            Self::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Self::Red => [230, 30, 30],
            Self::Green => [30, 200, 40],
            Self::Blue => [40, 60, 230],
            Self::Yellow => [240, 220, 30],
        }
    }
}

impl Motion {
    pub fn word(self) -> &'static str {
        match self {
            Self::Left => "left",
            Self::Right => "right",
            Self::Up => "up",
            Self::Down => "down",
        }
    }

    /// Unit step `(dy, dx)`.
    pub fn direction(self) -> (i64, i64) {
        match self {
            Self::Left => (0, -1),
            Self::Right => (0, 1),
            Self::Up => (-1, 0),
            Self::Down => (1, 0),
        }
    }
}

/// Regular grammar every generated caption satisfies.
pub const CAPTION_PATTERN: &str =
    r"^(a|the) (red|green|blue|yellow) (square|circle|triangle) (moves|is moving) (left|right|up|down)$";

pub fn is_template_caption(caption: &str) -> bool {
    static RE: std::sync::OnceLock<regex::Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| regex::Regex::new(CAPTION_PATTERN).expect("valid pattern"))
        .is_match(caption)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Captions per clip are drawn from `1..=max_captions` (at most 3).
    pub max_captions: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 64,
            width: 64,
            seed: 0,
            max_captions: 3,
        }
    }
}

/// Ground truth behind one generated clip.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthLabel {
    pub shape: ShapeKind,
    pub color: Color,
    pub motion: Motion,
    pub size: usize,
    /// Pixels moved per frame.
    pub speed: usize,
    /// Top-left corner `(y, x)` in frame 0.
    pub start: (usize, usize),
}

impl SynthLabel {
    pub fn captions(&self, n: usize) -> Vec<String> {
        let (c, s, m) = (self.color.word(), self.shape.word(), self.motion.word());
        [
            format!("a {c} {s} moves {m}"),
            format!("a {c} {s} is moving {m}"),
            format!("the {c} {s} moves {m}"),
        ]
        .into_iter()
        .take(n.clamp(1, 3))
        .collect()
    }

    /// Top-left corner in frame `t`.
    pub fn position(&self, t: usize) -> (usize, usize) {
        let (dy, dx) = self.motion.direction();
        let step = (t * self.speed) as i64;
        (
            (self.start.0 as i64 + dy * step) as usize,
            (self.start.1 as i64 + dx * step) as usize,
        )
    }
}

pub struct SynthSample {
    pub clip: VideoClip,
    pub captions: Vec<String>,
    pub label: SynthLabel,
}

pub fn clip_id(index: usize) -> String {
    format!("clip{index:05}")
}

/// Clip `index` of the corpus; depends only on `(spec, index)`.
pub fn generate_clip(spec: &SynthSpec, index: usize) -> Result<SynthSample> {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    if t < 2 || h == 0 || w == 0 {
        return Err(Error::Generation(format!("canvas {t}x{h}x{w} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let shape = SHAPES[rng.gen_range(0..SHAPES.len())];
    let color = COLORS[rng.gen_range(0..COLORS.len())];
    let motion = MOTIONS[rng.gen_range(0..MOTIONS.len())];
    let n_captions = rng.gen_range(1..=spec.max_captions.clamp(1, 3));

    let size = h.min(w) / 4;
    let along = if matches!(motion, Motion::Left | Motion::Right) { w } else { h };
    let across = if matches!(motion, Motion::Left | Motion::Right) { h } else { w };
    if size < 3 || along < size + (t - 1) {
        return Err(Error::Generation(format!(
            "a {size}px shape cannot travel {} frames across {along}px",
            t - 1
        )));
    }
    let speed = ((along - size) / (2 * (t - 1))).clamp(1, 4);
    let travel = speed * (t - 1);
    let slack = along - size - travel;
    let offset = rng.gen_range(0..=slack);
    let lateral = rng.gen_range(0..=across - size);
    let first = match motion {
        Motion::Right | Motion::Down => offset,
        Motion::Left | Motion::Up => offset + travel,
    };
    let start = match motion {
        Motion::Left | Motion::Right => (lateral, first),
        Motion::Up | Motion::Down => (first, lateral),
    };
    let label = SynthLabel {
        shape,
        color,
        motion,
        size,
        speed,
        start,
    };

    let rgb = color.rgb();
    let mut pixels = vec![0u8; t * h * w * 3];
    for f in 0..t {
        let (y0, x0) = label.position(f);
        for dy in 0..size {
            for dx in 0..size {
                if shape.covers(dy, dx, size) {
                    let o = ((f * h + y0 + dy) * w + x0 + dx) * 3;
                    pixels[o..o + 3].copy_from_slice(&rgb);
                }
            }
        }
    }
    let clip = VideoClip::new(clip_id(index), t, h, w, pixels)?;
    Ok(SynthSample {
        clip,
        captions: label.captions(n_captions),
        label,
    })
}

const MAGIC: &[u8; 4] = b"EVCF";
const HEADER_LEN: usize = 4 + 4 * 4;

pub fn encode_clip_bytes(clip: &VideoClip) -> Vec<u8> {
    let (t, h, w) = clip.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + clip.pixels().len());
    out.extend_from_slice(MAGIC);
    for d in [t, h, w, 3] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(clip.pixels());
    out
}

pub fn decode_clip_bytes(path: &Path, bytes: &[u8], clip_id: &str) -> Result<VideoClip> {
    let fail = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected EVCF".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let dim = |k: usize| u32::from_le_bytes(bytes[4 + 4 * k..8 + 4 * k].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    if c != 3 {
        return Err(fail(16, format!("channel count {c}, expected 3")));
    }
    let payload = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(3))
        .ok_or_else(|| fail(4, format!("dimensions {t}x{h}x{w} overflow")))?;
    let have = bytes.len() - HEADER_LEN;
    if have < payload {
        return Err(fail(
            bytes.len(),
            format!("truncated payload: {have} of {payload} bytes"),
        ));
    }
    if have > payload {
        return Err(fail(HEADER_LEN + payload, format!("{} trailing bytes", have - payload)));
    }
    VideoClip::new(clip_id, t, h, w, bytes[HEADER_LEN..].to_vec())
        .map_err(|e| fail(4, e.to_string()))
}

pub fn write_clip(path: &Path, clip: &VideoClip) -> Result<()> {
    fs::write(path, encode_clip_bytes(clip)).map_err(|e| Error::io(path, e))
}

pub fn read_clip(path: &Path, clip_id: &str) -> Result<VideoClip> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_clip_bytes(path, &bytes, clip_id)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Input(format!("unknown split `{other}` (train, val or test)"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Relative to the manifest's directory.
    pub clip_path: String,
    pub captions: Vec<String>,
    pub split: Split,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut out, e).map_err(|err| Error::json(path, err))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parses and validates a manifest: known splits, unique ids, non-empty
/// captions, existing clip files.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().unwrap_or(Path::new("."));
    let fail = |line: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(&line).map_err(|err| fail(n, err.to_string()))?;
        if !seen.insert(e.video_id.clone()) {
            return Err(fail(n, format!("duplicate video_id `{}`", e.video_id)));
        }
        if e.captions.is_empty() {
            return Err(fail(n, format!("`{}` has no captions", e.video_id)));
        }
        if !root.join(&e.clip_path).is_file() {
            return Err(fail(n, format!("clip file `{}` does not exist", e.clip_path)));
        }
        entries.push(e);
    }
    Ok(entries)
}

/// A corpus directory: manifest plus clip files.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let entries = load_manifest(&root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn load_clip(&self, entry: &ManifestEntry) -> Result<VideoClip> {
        read_clip(&self.root.join(&entry.clip_path), &entry.video_id)
    }
}

/// Split of clip `index` in an `n`-clip corpus: the last tenth is test, the
/// tenth before it val, the rest train.
pub fn split_for(index: usize, n: usize) -> Split {
    let held = n / 10;
    if index >= n - held {
        Split::Test
    } else if index >= n - 2 * held {
        Split::Val
    } else {
        Split::Train
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct CorpusStats {
    pub clips: usize,
    pub captions: usize,
    pub per_split: BTreeMap<String, usize>,
    pub vocabulary: usize,
}

#[derive(Serialize)]
struct ReferenceLine<'a> {
    video_id: &'a str,
    captions: &'a [String],
}

pub fn references_file(split: Split) -> String {
    format!("references_{split}.jsonl")
}

/// Writes `n` clips, the manifest and one reference file per split under `out`.
pub fn write_corpus(out: &Path, n: usize, spec: &SynthSpec) -> Result<CorpusStats> {
    let clips_dir = out.join("clips");
    fs::create_dir_all(&clips_dir).map_err(|e| Error::io(&clips_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for index in 0..n {
        let s = generate_clip(spec, index)?;
        let rel = format!("clips/{}.evcf", s.clip.clip_id);
        write_clip(&out.join(&rel), &s.clip)?;
        entries.push(ManifestEntry {
            video_id: s.clip.clip_id.clone(),
            clip_path: rel,
            captions: s.captions,
            split: split_for(index, n),
        });
    }
    write_manifest(&out.join(MANIFEST_FILE), &entries)?;
    let mut stats = CorpusStats {
        clips: n,
        ..Default::default()
    };
    for split in [Split::Train, Split::Val, Split::Test] {
        let path = out.join(references_file(split));
        let mut buf = Vec::new();
        let mut count = 0;
        for e in entries.iter().filter(|e| e.split == split) {
            serde_json::to_writer(&mut buf, &ReferenceLine {
                video_id: &e.video_id,
                captions: &e.captions,
            })
            .map_err(|err| Error::json(&path, err))?;
            buf.push(b'\n');
            count += 1;
        }
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(&path, e))?;
        stats.per_split.insert(split.to_string(), count);
    }
    stats.captions = entries.iter().map(|e| e.captions.len()).sum();
    stats.vocabulary = Vocabulary::build(entries.iter().flat_map(|e| e.captions.iter().map(String::as_str)))?.len();
    Ok(stats)
}
