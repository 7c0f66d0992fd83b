// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic training corpus: a background token stream with planted,
//! repeated canary sequences plus never-planted negative controls.
//!
//! The Markov background is an order-k chain whose transition table is tied
//! across token classes: the next token's class depends on the classes of the
//! previous k tokens, and the token within a class is Zipf-distributed. That
//! gives a small, learnable table whose order-k dependence needs attention
//! to resolve. Optional copy spans re-emit a recent stretch of background, so
//! in-context copying is rewarded during training.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_tokens, save_tokens};
use crate::error::{AscError, Result};
use crate::metrics::Canary;
use crate::seed::derive_seed;

/// Token classes used by the Markov background.
const MARKOV_CLASSES: usize = 16;
/// Successor classes per context and their probabilities.
const SUCCESSOR_PROBS: [f64; 3] = [0.6, 0.3, 0.1];
const REPEAT_MIN_LEN: usize = 16;
const REPEAT_MAX_LEN: usize = 32;
/// Longest stretch of background before each repeat of a segment.
const REPEAT_MAX_GAP: usize = 16;
/// Each episode holds the segment this many times in all.
const REPEAT_COPIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackgroundGenerator {
    MarkovChain { order: usize, seed: u64 },
    UniformRandom { seed: u64 },
}

/// Describes a corpus to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub background: BackgroundGenerator,
    pub vocab_size: usize,
    /// Background tokens in the training stream (canaries come on top).
    pub background_tokens: usize,
    /// Tokens in the held-out stream drawn from the same background process.
    pub heldout_tokens: usize,
    pub n_canaries: usize,
    pub canary_prefix_len: usize,
    pub canary_suffix_len: usize,
    pub canary_repetitions: usize,
    /// Negative-control canaries: generated like canaries, never planted.
    pub n_controls: usize,
    /// Per-token probability of starting a repeat episode in the training
    /// background: a uniformly random segment, a short stretch of
    /// background, then the same segment again.
    pub repeat_rate: f64,
    /// Seed for canary sampling and placement.
    pub seed: u64,
}

/// Named `(l_p, l_s)` presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CanaryPreset {
    /// 32-token prefix, 32-token suffix.
    PythiaStyle,
    /// 150-token prefix, 50-token suffix.
    NeoStyle,
}

impl CanaryPreset {
    pub fn lengths(self) -> (usize, usize) {
        match self {
            CanaryPreset::PythiaStyle => (32, 32),
            CanaryPreset::NeoStyle => (150, 50),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pythia-style" => Ok(Self::PythiaStyle),
            "neo-style" => Ok(Self::NeoStyle),
            other => Err(AscError::config(
                &["preset"],
                format!("unknown preset {other:?}; expected pythia-style or neo-style"),
            )),
        }
    }
}

impl CorpusSpec {
    /// A spec with `preset` canary lengths and an order-2 Markov background.
    pub fn from_preset(preset: CanaryPreset, vocab_size: usize, n_canaries: usize, repetitions: usize, seed: u64) -> Self {
        let (l_p, l_s) = preset.lengths();
        Self {
            background: BackgroundGenerator::MarkovChain {
                order: 2,
                seed: derive_seed(seed, "background"),
            },
            vocab_size,
            background_tokens: 1 << 20,
            heldout_tokens: 1 << 14,
            n_canaries,
            canary_prefix_len: l_p,
            canary_suffix_len: l_s,
            canary_repetitions: repetitions,
            n_controls: n_canaries,
            repeat_rate: 0.01,
            seed,
        }
    }

    pub fn canary_len(&self) -> usize {
        self.canary_prefix_len + self.canary_suffix_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(AscError::config(&["vocab_size"], "vocab_size must be at least 2"));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(AscError::config(&["vocab_size"], "vocab_size must fit in u32"));
        }
        if self.canary_prefix_len == 0 || self.canary_suffix_len == 0 {
            return Err(AscError::config(
                &["canary_prefix_len", "canary_suffix_len"],
                "canary prefix and suffix must be non-empty",
            ));
        }
        if !(0.0..1.0).contains(&self.repeat_rate) {
            return Err(AscError::config(&["repeat_rate"], "repeat_rate must lie in [0, 1)"));
        }
        if let BackgroundGenerator::MarkovChain { order, .. } = self.background {
            if !(1..=4).contains(&order) {
                return Err(AscError::config(&["order"], format!("Markov order must be 1..=4, got {order}")));
            }
        }
        // Need room for all canaries and controls with distinct prefixes.
        let needed = (self.n_canaries + self.n_controls) as f64;
        let available_log2 = self.canary_prefix_len as f64 * (self.vocab_size as f64).log2();
        if needed > 0.0 && available_log2 < (4.0 * needed).log2() {
            return Err(AscError::config(
                &["vocab_size", "n_canaries"],
                format!(
                    "vocabulary of {} with prefix length {} is too small for {} distinct canaries",
                    self.vocab_size, self.canary_prefix_len, needed
                ),
            ));
        }
        Ok(())
    }
}

/// A built corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub train: Vec<u32>,
    pub heldout: Vec<u32>,
    /// Planted canaries; each occurs `canary_repetitions` times in `train`.
    pub canaries: Vec<Canary>,
    /// Negative controls; absent from `train`.
    pub controls: Vec<Canary>,
}

/// Order-k class-tied Markov source.
struct MarkovSource {
    order: usize,
    class_of: Vec<usize>,
    members: Vec<Vec<u32>>,
    member_cdf: Vec<Vec<f64>>,
    /// Per context, `SUCCESSOR_PROBS.len()` successor classes.
    successors: Vec<[usize; 3]>,
}

impl MarkovSource {
    fn new(order: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_classes = MARKOV_CLASSES.min(vocab);
        let mut perm: Vec<u32> = (0..vocab as u32).collect();
        perm.shuffle(&mut rng);
        let mut class_of = vec![0; vocab];
        let mut members = vec![Vec::new(); n_classes];
        for (i, &t) in perm.iter().enumerate() {
            class_of[t as usize] = i % n_classes;
            members[i % n_classes].push(t);
        }
        let member_cdf = members
            .iter()
            .map(|m| {
                let weights: Vec<f64> = (0..m.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut acc = 0.0;
                weights
                    .iter()
                    .map(|w| {
                        acc += w / total;
                        acc
                    })
                    .collect()
            })
            .collect();
        let n_contexts = n_classes.pow(order as u32);
        let successors = (0..n_contexts)
            .map(|_| {
                let mut picks = [0usize; 3];
                let mut chosen: Vec<usize> = (0..n_classes).collect();
                chosen.shuffle(&mut rng);
                for (slot, c) in picks.iter_mut().zip(chosen.iter().cycle()) {
                    *slot = *c;
                }
                picks
            })
            .collect();
        Self {
            order,
            class_of,
            members,
            member_cdf,
            successors,
        }
    }

    fn next(&self, history: &[u32], rng: &mut ChaCha8Rng) -> u32 {
        let n_classes = self.members.len();
        let ctx = history[history.len() - self.order..]
            .iter()
            .fold(0usize, |acc, &t| acc * n_classes + self.class_of[t as usize]);
        let r: f64 = rng.gen();
        let mut acc = 0.0;
        let mut class = self.successors[ctx][SUCCESSOR_PROBS.len() - 1];
        for (p, c) in SUCCESSOR_PROBS.iter().zip(self.successors[ctx]) {
            acc += p;
            if r < acc {
                class = c;
                break;
            }
        }
        let r: f64 = rng.gen();
        let cdf = &self.member_cdf[class];
        let idx = cdf.partition_point(|&c| c < r).min(cdf.len() - 1);
        self.members[class][idx]
    }
}

/// Samples `len` background tokens, with repeat episodes when `episodes`
/// is set. Also returns, for each of the `len + 1` offsets, whether another
/// sequence may be inserted there without splitting an episode.
fn sample_background(spec: &CorpusSpec, len: usize, path_seed: u64, episodes: bool) -> (Vec<u32>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(path_seed);
    let vocab = spec.vocab_size as u32;
    let source = match spec.background {
        BackgroundGenerator::MarkovChain { order, seed } => Some(MarkovSource::new(order, spec.vocab_size, seed)),
        BackgroundGenerator::UniformRandom { .. } => None,
    };
    let warmup = source.as_ref().map_or(0, |s| s.order);
    let next = |out: &[u32], rng: &mut ChaCha8Rng| match &source {
        Some(src) if out.len() >= warmup => src.next(out, rng),
        _ => rng.gen_range(0..vocab),
    };
    let mut out: Vec<u32> = Vec::with_capacity(len + REPEAT_COPIES * (REPEAT_MAX_LEN + REPEAT_MAX_GAP));
    let mut insertable = vec![true; len + 1];
    while out.len() < len {
        if episodes && spec.repeat_rate > 0.0 && rng.gen::<f64>() < spec.repeat_rate {
            let start = out.len();
            let span = rng.gen_range(REPEAT_MIN_LEN..=REPEAT_MAX_LEN);
            let segment: Vec<u32> = (0..span).map(|_| rng.gen_range(0..vocab)).collect();
            out.extend_from_slice(&segment);
            for _ in 1..REPEAT_COPIES {
                for _ in 0..rng.gen_range(0..=REPEAT_MAX_GAP) {
                    let tok = next(&out, &mut rng);
                    out.push(tok);
                }
                out.extend_from_slice(&segment);
            }
            for flag in insertable.iter_mut().take(out.len().min(len + 1)).skip(start + 1) {
                *flag = false;
            }
            continue;
        }
        let tok = next(&out, &mut rng);
        out.push(tok);
    }
    out.truncate(len);
    (out, insertable)
}

/// Hashes of every length-`n` window, for rejection checks.
fn window_hashes(stream: &[u32], n: usize) -> HashSet<u64> {
    stream.windows(n).map(hash_tokens).collect()
}

fn hash_tokens(tokens: &[u32]) -> u64 {
    // FNV-1a over the little-endian bytes.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tokens {
        for b in t.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Builds the training stream, held-out stream, canaries and controls.
pub fn build_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let background_seed = match spec.background {
        BackgroundGenerator::MarkovChain { seed, .. } | BackgroundGenerator::UniformRandom { seed } => seed,
    };
    let (background, insertable) =
        sample_background(spec, spec.background_tokens, derive_seed(background_seed, "train-path"), true);
    let (heldout, _) = sample_background(spec, spec.heldout_tokens, derive_seed(background_seed, "heldout-path"), false);

    let clen = spec.canary_len();
    let forbidden = window_hashes(&background, clen);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "canaries"));
    let total = spec.n_canaries + spec.n_controls;
    let mut seen_full = HashSet::new();
    let mut seen_prefix = HashSet::new();
    let mut drawn = Vec::with_capacity(total);
    let mut attempts = 0usize;
    let max_attempts = 1000 * (total + 1);
    while drawn.len() < total {
        attempts += 1;
        if attempts > max_attempts {
            return Err(AscError::config(
                &["vocab_size", "n_canaries"],
                "could not draw enough distinct canaries; vocabulary too small",
            ));
        }
        let seq: Vec<u32> = (0..clen).map(|_| rng.gen_range(0..spec.vocab_size as u32)).collect();
        let h = hash_tokens(&seq);
        let hp = hash_tokens(&seq[..spec.canary_prefix_len]);
        if forbidden.contains(&h) || seen_full.contains(&h) || seen_prefix.contains(&hp) {
            continue;
        }
        seen_full.insert(h);
        seen_prefix.insert(hp);
        drawn.push(Canary {
            prefix: seq[..spec.canary_prefix_len].to_vec(),
            suffix: seq[spec.canary_prefix_len..].to_vec(),
        });
    }
    let controls = drawn.split_off(spec.n_canaries);
    let canaries = drawn;

    // Occurrence list, shuffled, dropped at uniformly random background
    // offsets that do not split a repeat episode.
    let mut occurrences: Vec<usize> = (0..spec.n_canaries)
        .flat_map(|c| std::iter::repeat(c).take(spec.canary_repetitions))
        .collect();
    occurrences.shuffle(&mut rng);
    let mut offsets: Vec<usize> = (0..occurrences.len())
        .map(|_| loop {
            let off = rng.gen_range(0..=background.len());
            if insertable[off] {
                break off;
            }
        })
        .collect();
    offsets.sort_unstable();

    let mut train = Vec::with_capacity(background.len() + occurrences.len() * clen);
    let mut cursor = 0;
    for (&off, &c) in offsets.iter().zip(&occurrences) {
        train.extend_from_slice(&background[cursor..off]);
        cursor = off;
        train.extend_from_slice(&canaries[c].prefix);
        train.extend_from_slice(&canaries[c].suffix);
    }
    train.extend_from_slice(&background[cursor..]);

    Ok(Corpus {
        spec: spec.clone(),
        train,
        heldout,
        canaries,
        controls,
    })
}

pub const TRAIN_FILE: &str = "train.bin";
pub const HELDOUT_FILE: &str = "heldout.bin";
pub const CANARY_FILE: &str = "canaries.json";
pub const CONTROL_FILE: &str = "controls.json";
pub const SPEC_FILE: &str = "corpus_spec.json";

pub fn save_canaries(path: &Path, canaries: &[Canary]) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(canaries)?)?;
    Ok(())
}

pub fn load_canaries(path: &Path) -> Result<Vec<Canary>> {
    let bytes = fs::read(path).map_err(|e| AscError::Load(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| AscError::Load(format!("{}: {e}", path.display())))
}

impl Corpus {
    /// Writes the corpus into `dir` (created if needed).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_tokens(&dir.join(TRAIN_FILE), &self.train)?;
        save_tokens(&dir.join(HELDOUT_FILE), &self.heldout)?;
        save_canaries(&dir.join(CANARY_FILE), &self.canaries)?;
        save_canaries(&dir.join(CONTROL_FILE), &self.controls)?;
        fs::write(dir.join(SPEC_FILE), serde_json::to_vec_pretty(&self.spec)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let spec_bytes = fs::read(dir.join(SPEC_FILE))
            .map_err(|e| AscError::Load(format!("{}: {e}", dir.join(SPEC_FILE).display())))?;
        let spec: CorpusSpec =
            serde_json::from_slice(&spec_bytes).map_err(|e| AscError::Load(format!("corpus spec: {e}")))?;
        Ok(Self {
            spec,
            train: load_tokens(&dir.join(TRAIN_FILE))?,
            heldout: load_tokens(&dir.join(HELDOUT_FILE))?,
            canaries: load_canaries(&dir.join(CANARY_FILE))?,
            controls: load_canaries(&dir.join(CONTROL_FILE))?,
        })
    }
}

/// Counts occurrences of `needle` in `haystack` by direct comparison at every offset.
pub fn count_occurrences(haystack: &[u32], needle: &[u32]) -> usize {
    if needle.is_empty() || needle.len() > haystack.len() {
        return 0;
    }
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            background: BackgroundGenerator::MarkovChain { order: 2, seed: 5 },
            vocab_size: 64,
            background_tokens: 20_000,
            heldout_tokens: 2_000,
            n_canaries: 5,
            canary_prefix_len: 6,
            canary_suffix_len: 4,
            canary_repetitions: 7,
            n_controls: 3,
            repeat_rate: 0.01,
            seed: 11,
        }
    }

    fn full(c: &Canary) -> Vec<u32> {
        c.prefix.iter().chain(&c.suffix).copied().collect()
    }

    #[test]
    fn each_canary_planted_exactly_repetitions_times() {
        let spec = small_spec();
        let corpus = build_corpus(&spec).unwrap();
        assert_eq!(corpus.canaries.len(), 5);
        assert_eq!(corpus.controls.len(), 3);
        assert_eq!(corpus.train.len(), 20_000 + 5 * 7 * 10);
        for c in &corpus.canaries {
            assert_eq!(count_occurrences(&corpus.train, &full(c)), 7);
        }
        for c in &corpus.controls {
            assert_eq!(count_occurrences(&corpus.train, &full(c)), 0);
        }
    }

    #[test]
    fn no_canaries_gives_pure_background() {
        let mut spec = small_spec();
        spec.n_canaries = 0;
        let corpus = build_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), spec.background_tokens);
        assert!(corpus.canaries.is_empty());
    }

    #[test]
    fn zero_repetitions_leaves_canaries_absent() {
        let mut spec = small_spec();
        spec.canary_repetitions = 0;
        let corpus = build_corpus(&spec).unwrap();
        assert_eq!(corpus.canaries.len(), 5);
        for c in &corpus.canaries {
            assert_eq!(count_occurrences(&corpus.train, &full(c)), 0);
        }
    }

    #[test]
    fn repeat_episodes_are_marked_atomic() {
        let spec = CorpusSpec { repeat_rate: 0.05, ..small_spec() };
        let (tokens, insertable) = sample_background(&spec, 5_000, 3, true);
        assert_eq!(insertable.len(), tokens.len() + 1);
        let mut episodes = 0;
        let mut i = 1;
        while i < insertable.len() {
            if insertable[i] {
                i += 1;
                continue;
            }
            let start = i - 1;
            while i < insertable.len() && !insertable[i] {
                i += 1;
            }
            if i == insertable.len() {
                break;
            }
            let ep = &tokens[start..i];
            assert!(
                (REPEAT_MIN_LEN..=REPEAT_MAX_LEN).any(|k| REPEAT_COPIES * k <= ep.len() && ep[..k] == ep[ep.len() - k..]),
                "episode at {start} is not a repeat"
            );
            episodes += 1;
        }
        assert!(episodes > 20, "{episodes} episodes");

        let (_, heldout) = sample_background(&spec, 5_000, 3, false);
        assert!(heldout.iter().all(|&f| f));
    }

    #[test]
    fn build_is_deterministic() {
        let spec = small_spec();
        assert_eq!(build_corpus(&spec).unwrap(), build_corpus(&spec).unwrap());
        let mut other = spec.clone();
        other.seed += 1;
        assert_ne!(build_corpus(&spec).unwrap().canaries, build_corpus(&other).unwrap().canaries);
    }

    #[test]
    fn tiny_vocab_is_a_config_error() {
        let mut spec = small_spec();
        spec.vocab_size = 2;
        spec.canary_prefix_len = 2;
        spec.n_canaries = 50;
        assert!(matches!(build_corpus(&spec), Err(AscError::Config { .. })));
    }

    #[test]
    fn markov_background_is_low_entropy() {
        let spec = CorpusSpec { heldout_tokens: 50_000, ..small_spec() };
        let corpus = build_corpus(&spec).unwrap();
        // Distinct trigrams against the expected count for uniform noise,
        // V³(1 − e^(−n/V³)).
        let trigrams: HashSet<&[u32]> = corpus.heldout.windows(3).collect();
        let cells = (spec.vocab_size as f64).powi(3);
        let n = (corpus.heldout.len() - 2) as f64;
        let uniform_expected = cells * (1.0 - (-n / cells).exp());
        assert!((trigrams.len() as f64) < 0.5 * uniform_expected, "{} vs {uniform_expected}", trigrams.len());
        assert!(corpus.heldout.iter().all(|&t| (t as usize) < spec.vocab_size));
    }

    #[test]
    fn presets() {
        assert_eq!(CanaryPreset::parse("pythia-style").unwrap().lengths(), (32, 32));
        assert_eq!(CanaryPreset::parse("neo-style").unwrap().lengths(), (150, 50));
        assert!(CanaryPreset::parse("gpt").is_err());
    }

    #[test]
    fn save_and_load() {
        let corpus = build_corpus(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        corpus.save(dir.path()).unwrap();
        assert_eq!(Corpus::load(dir.path()).unwrap(), corpus);
    }
}
