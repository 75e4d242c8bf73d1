//! Byte-level text corpora and the two synthetic tasks.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

/// Default cap on bytes read from a text file.
pub const DEFAULT_TEXT_BYTES: usize = 1 << 20;

fn default_max_bytes() -> usize {
    DEFAULT_TEXT_BYTES
}
fn default_synthetic_bytes() -> usize {
    600_000
}
fn default_copy_tokens() -> usize {
    40_000
}
fn default_noise() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Any file, read as bytes and split 90/5/5 by position.
    TextFile {
        path: PathBuf,
        #[serde(default = "default_max_bytes")]
        max_bytes: usize,
    },
    /// Generated English-like prose, split like a text file.
    SyntheticText {
        #[serde(default = "default_synthetic_bytes")]
        bytes: usize,
        #[serde(default)]
        seed: u64,
    },
    /// Uniform random tokens; the target at `t` is the input at `t - delay`.
    Copy {
        vocab: usize,
        delay: usize,
        #[serde(default = "default_copy_tokens")]
        tokens: usize,
        #[serde(default)]
        seed: u64,
    },
    /// 16x16 single-channel images of a square, cross or disc.
    Shapes {
        train: usize,
        dev: usize,
        test: usize,
        #[serde(default = "default_noise")]
        noise: f64,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenTask {
    /// Logit `t` predicts token `t + 1`.
    NextToken,
    /// Logit `t` predicts token `t - delay`.
    Copy { delay: usize },
}

#[derive(Debug, Clone)]
pub struct TokenData {
    pub vocab: usize,
    pub task: TokenTask,
    pub train: Vec<u8>,
    pub dev: Vec<u8>,
    pub test: Vec<u8>,
}

impl TokenData {
    pub fn split(&self, split: Split) -> &[u8] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Stream bytes consumed by one example of `n` model positions.
    pub fn window_len(&self, n: usize) -> usize {
        match self.task {
            TokenTask::NextToken => n + 1,
            TokenTask::Copy { .. } => n,
        }
    }

    /// Model inputs and per-position targets for one stream window.
    pub fn example(&self, window: &[u8]) -> (Vec<usize>, Vec<Option<usize>>) {
        let tokens: Vec<usize> = window.iter().map(|&b| b as usize).collect();
        match self.task {
            TokenTask::NextToken => {
                let n = tokens.len() - 1;
                (tokens[..n].to_vec(), tokens[1..].iter().map(|&t| Some(t)).collect())
            }
            TokenTask::Copy { delay } => {
                let targets = (0..tokens.len()).map(|t| t.checked_sub(delay).map(|s| tokens[s])).collect();
                (tokens, targets)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    /// Row-major `[h, w]` intensities.
    pub pixels: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct ImageData {
    pub hw: (usize, usize),
    pub classes: usize,
    pub train: Vec<Image>,
    pub dev: Vec<Image>,
    pub test: Vec<Image>,
}

impl ImageData {
    pub fn split(&self, split: Split) -> &[Image] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Labels and little-endian pixels of every split, in order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for img in self.train.iter().chain(&self.dev).chain(&self.test) {
            out.push(img.label as u8);
            out.extend(img.pixels.iter().flat_map(|p| p.to_le_bytes()));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub enum Dataset {
    Tokens(TokenData),
    Images(ImageData),
}

pub fn make_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::TextFile { path, max_bytes } => {
            let mut bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
            bytes.truncate(*max_bytes);
            Ok(Dataset::Tokens(text_splits(bytes)?))
        }
        DatasetSpec::SyntheticText { bytes, seed } => Ok(Dataset::Tokens(text_splits(synthetic_text(*bytes, *seed))?)),
        DatasetSpec::Copy { vocab, delay, tokens, seed } => {
            if *vocab == 0 || *vocab > 256 {
                return Err(HarnessError::Data(format!("copy vocab {vocab} overflows byte tokens (1..=256)")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let stream: Vec<u8> = (0..*tokens).map(|_| rng.gen_range(0..*vocab) as u8).collect();
            let (train, dev, test) = split_90_5_5(stream)?;
            Ok(Dataset::Tokens(TokenData {
                vocab: *vocab,
                task: TokenTask::Copy { delay: *delay },
                train,
                dev,
                test,
            }))
        }
        DatasetSpec::Shapes { train, dev, test, noise, seed } => {
            if *train == 0 || *dev == 0 {
                return Err(HarnessError::Data("shapes needs non-empty train and dev sets".into()));
            }
            if !(*noise >= 0.0 && noise.is_finite()) {
                return Err(HarnessError::Data(format!("shapes noise must be non-negative, got {noise}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let mut draw = |count: usize| (0..count).map(|_| random_shape(&mut rng, *noise)).collect::<Vec<_>>();
            Ok(Dataset::Images(ImageData {
                hw: (SHAPE_HW, SHAPE_HW),
                classes: SHAPE_CLASSES.len(),
                train: draw(*train),
                dev: draw(*dev),
                test: draw(*test),
            }))
        }
    }
}

fn text_splits(bytes: Vec<u8>) -> Result<TokenData> {
    let (train, dev, test) = split_90_5_5(bytes)?;
    Ok(TokenData {
        vocab: 256,
        task: TokenTask::NextToken,
        train,
        dev,
        test,
    })
}

/// 90/5/5 split by position.
pub fn split_90_5_5(mut bytes: Vec<u8>) -> Result<(Vec<u8>, Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() {
        return Err(HarnessError::Data("empty corpus".into()));
    }
    let n = bytes.len();
    let (a, b) = (n * 90 / 100, n * 95 / 100);
    let test = bytes.split_off(b);
    let dev = bytes.split_off(a);
    Ok((bytes, dev, test))
}

pub const SHAPE_HW: usize = 16;
pub const SHAPE_CLASSES: [&str; 3] = ["square", "cross", "disc"];

fn random_shape<R: Rng>(rng: &mut R, noise: f64) -> Image {
    let label = rng.gen_range(0..SHAPE_CLASSES.len());
    let r = rng.gen_range(2..=5i64);
    let hw = SHAPE_HW as i64;
    let (cy, cx) = (rng.gen_range(r..hw - r), rng.gen_range(r..hw - r));
    let intensity = rng.gen_range(0.5..1.0);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut pixels = Vec::with_capacity(SHAPE_HW * SHAPE_HW);
    for y in 0..hw {
        for x in 0..hw {
            let (dy, dx) = (y - cy, x - cx);
            let inside = match label {
                0 => dy.abs() <= r && dx.abs() <= r,
                1 => (dy == 0 || dx == 0) && dy.abs() <= r && dx.abs() <= r,
                _ => dy * dy + dx * dx <= r * r,
            };
            let base = if inside { intensity } else { 0.0 };
            let jitter = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            pixels.push(base + jitter);
        }
    }
    Image { pixels, label }
}

const DETERMINERS: &[&str] = &["the", "a", "this", "that", "every", "some", "no", "one", "her", "his", "our", "their"];
const ADJECTIVES: &[&str] = &[
    "old", "small", "quiet", "bright", "early", "long", "green", "cold", "heavy", "simple", "strange", "narrow", "open",
    "dark", "careful", "distant", "famous", "broken", "gentle", "rapid", "northern", "wooden", "final", "common",
];
const NOUNS: &[&str] = &[
    "river", "city", "house", "road", "teacher", "garden", "machine", "letter", "mountain", "window", "village",
    "engine", "market", "child", "soldier", "library", "harbour", "station", "painter", "forest", "bridge", "winter",
    "question", "history", "language", "number", "family", "island", "church", "company", "government", "system",
    "music", "morning", "evening", "century", "king", "ship", "field", "book",
];
const VERBS: &[&str] = &[
    "crossed", "watched", "built", "found", "carried", "followed", "opened", "described", "reached", "changed",
    "remembered", "visited", "measured", "painted", "repaired", "left", "joined", "answered", "studied", "wrote",
];
const INTRANSITIVE: &[&str] = &["arrived", "waited", "slept", "returned", "vanished", "grew", "fell", "stayed", "began", "ended"];
const ADVERBS: &[&str] = &["slowly", "again", "later", "quietly", "often", "never", "soon", "finally", "almost", "twice"];
const PREPOSITIONS: &[&str] = &["in", "near", "across", "under", "behind", "through", "beyond", "over", "along", "after"];
const CONNECTIVES: &[&str] = &["and", "but", "while", "because", "so", "although", "when"];

fn pick<'a, R: Rng>(rng: &mut R, words: &[&'a str]) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

fn noun_phrase<R: Rng>(rng: &mut R, out: &mut Vec<String>) {
    out.push(pick(rng, DETERMINERS).to_string());
    if rng.gen_bool(0.4) {
        out.push(pick(rng, ADJECTIVES).to_string());
    }
    let noun = pick(rng, NOUNS);
    out.push(if rng.gen_bool(0.15) { format!("{noun}s") } else { noun.to_string() });
    if rng.gen_bool(0.2) {
        out.push(pick(rng, PREPOSITIONS).to_string());
        out.push("the".into());
        out.push(pick(rng, NOUNS).to_string());
    }
}

fn clause<R: Rng>(rng: &mut R, out: &mut Vec<String>) {
    noun_phrase(rng, out);
    if rng.gen_bool(0.7) {
        out.push(pick(rng, VERBS).to_string());
        noun_phrase(rng, out);
    } else {
        out.push(pick(rng, INTRANSITIVE).to_string());
    }
    if rng.gen_bool(0.25) {
        out.push(pick(rng, ADVERBS).to_string());
    }
    if rng.gen_bool(0.1) {
        out.push(format!("in {}", rng.gen_range(1700..2000)));
    }
}

/// Deterministic English-like prose of exactly `bytes` bytes.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::with_capacity(bytes + 256);
    while text.len() < bytes {
        let sentences = rng.gen_range(2..7);
        for k in 0..sentences {
            let mut words = Vec::new();
            clause(&mut rng, &mut words);
            if rng.gen_bool(0.35) {
                words.push(",".into());
                words.push(pick(&mut rng, CONNECTIVES).to_string());
                clause(&mut rng, &mut words);
            }
            let mut sentence = words.join(" ").replace(" ,", ",");
            if let Some(first) = sentence.get_mut(0..1) {
                first.make_ascii_uppercase();
            }
            sentence.push(if rng.gen_bool(0.1) { '?' } else { '.' });
            if k > 0 {
                text.push(' ');
            }
            text.push_str(&sentence);
        }
        text.push('\n');
    }
    let mut out = text.into_bytes();
    out.truncate(bytes);
    out
}
