//! Temperature-based language sampling and the monolingual/parallel mixture.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{CorpusStats, Document, ParallelPair, RawTask};
use crate::{seeded_rng, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error("no keys to sample from")]
    Empty,
    #[error("count for key {0} must be positive")]
    NonPositiveCount(String),
    #[error("alpha must lie in [0, 1], got {0}")]
    Alpha(f64),
    #[error("parallel_ratio must lie in [0, 1], got {0}")]
    Ratio(f64),
    #[error("{side} side is selected with probability {prob} but has no data")]
    EmptySide { side: &'static str, prob: f64 },
    #[error("key {0} has a count in the corpus statistics but no records")]
    MissingRecords(String),
    #[error("unknown pair keying {0:?} (expected `pair` or `target-lang`)")]
    UnknownKeying(String),
}

/// How parallel data is keyed for temperature sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairKeying {
    /// One key per (source, target) language pair.
    #[default]
    Pair,
    /// One key per target language, pooling every pair into it.
    TargetLanguage,
}

impl FromStr for PairKeying {
    type Err = SamplerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pair" => Ok(Self::Pair),
            "target-lang" | "target_lang" => Ok(Self::TargetLanguage),
            _ => Err(SamplerError::UnknownKeying(s.to_string())),
        }
    }
}

impl Display for PairKeying {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Pair => "pair",
            Self::TargetLanguage => "target-lang",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub alpha: f64,
    pub parallel_ratio: f64,
    pub seed: u64,
    #[serde(default)]
    pub pair_keying: PairKeying,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            parallel_ratio: 0.10,
            seed: 0,
            pair_keying: PairKeying::Pair,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(SamplerError::Alpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.parallel_ratio) {
            return Err(SamplerError::Ratio(self.parallel_ratio));
        }
        Ok(())
    }
}

/// A categorical distribution over ordered keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<K> {
    keys: Vec<K>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl<K> Distribution<K> {
    fn from_parts(keys: Vec<K>, probs: Vec<f64>) -> Self {
        let mut acc = 0.0;
        let cumulative = probs
            .iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect();
        Self {
            keys,
            probs,
            cumulative,
        }
    }

    pub fn keys(&self) -> &[K] {
        &self.keys
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Index of a key drawn by inverse-CDF sampling.
    pub fn sample_index(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().expect("distribution is non-empty");
        let u = rng.gen::<f64>() * total;
        match self.cumulative.iter().position(|&c| u < c) {
            Some(i) => i,
            // Only reachable through rounding at the top end; fall back to
            // the last key that carries mass.
            None => self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0),
        }
    }
}

impl<K: PartialEq> Distribution<K> {
    pub fn prob(&self, key: &K) -> Option<f64> {
        self.keys
            .iter()
            .position(|k| k == key)
            .map(|i| self.probs[i])
    }
}

/// `p(k) ∝ (count(k) / Σ count)^alpha`, keys in lexicographic order.
pub fn language_probs<K: Ord + Clone + Debug>(
    counts: &BTreeMap<K, u64>,
    alpha: f64,
) -> Result<Distribution<K>, SamplerError> {
    if counts.is_empty() {
        return Err(SamplerError::Empty);
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SamplerError::Alpha(alpha));
    }
    if let Some((k, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(SamplerError::NonPositiveCount(format!("{k:?}")));
    }
    let total: f64 = counts.values().map(|&c| c as f64).sum();
    let weights: Vec<f64> = counts
        .values()
        .map(|&c| (c as f64 / total).powf(alpha))
        .collect();
    let norm: f64 = weights.iter().sum();
    let probs = weights.iter().map(|w| w / norm).collect();
    Ok(Distribution::from_parts(
        counts.keys().cloned().collect(),
        probs,
    ))
}

/// Draws a key from `d`.
pub fn sample_language<'a, K>(d: &'a Distribution<K>, rng: &mut Rng) -> &'a K {
    &d.keys[d.sample_index(rng)]
}

/// Round-robin over one key's records, reshuffled at the start of each epoch.
struct KeyCursor<T> {
    items: Vec<T>,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
}

impl<T: Clone> KeyCursor<T> {
    fn new(items: Vec<T>) -> Self {
        let order = (0..items.len()).collect();
        Self {
            items,
            order,
            pos: usize::MAX,
            epoch: 0,
        }
    }

    fn next(&mut self, rng: &mut Rng) -> T {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let item = self.items[self.order[self.pos]].clone();
        self.pos += 1;
        item
    }
}

type PairKey = (String, String);

/// Infinite, seeded stream of raw tasks: a side (parallel vs monolingual)
/// is drawn first, then a key under the temperature distribution, then the
/// next record of that key.
pub struct MixedStream {
    spec: MixtureSpec,
    rng: Rng,
    mono_dist: Option<Distribution<String>>,
    mono: Vec<KeyCursor<Document>>,
    pair_dist: Option<Distribution<PairKey>>,
    pairs: Vec<KeyCursor<ParallelPair>>,
    drawn_mono: u64,
    drawn_parallel: u64,
}

impl MixedStream {
    pub fn new(
        mono: Vec<Document>,
        parallel: Vec<ParallelPair>,
        stats: &CorpusStats,
        spec: MixtureSpec,
    ) -> Result<Self, SamplerError> {
        spec.validate()?;
        let p = spec.parallel_ratio;
        if p < 1.0 && stats.mono_counts.is_empty() {
            return Err(SamplerError::EmptySide {
                side: "monolingual",
                prob: 1.0 - p,
            });
        }
        if p > 0.0 && stats.pair_counts.is_empty() {
            return Err(SamplerError::EmptySide {
                side: "parallel",
                prob: p,
            });
        }

        let (mono_dist, mono_cursors) = if stats.mono_counts.is_empty() {
            (None, Vec::new())
        } else {
            let dist = language_probs(&stats.mono_counts, spec.alpha)?;
            let mut groups: BTreeMap<String, Vec<Document>> = BTreeMap::new();
            for d in mono {
                groups.entry(d.lang.clone()).or_default().push(d);
            }
            let cursors = take_groups(dist.keys(), groups, |k| k.clone())?;
            (Some(dist), cursors)
        };

        let (pair_dist, pair_cursors) = if stats.pair_counts.is_empty() {
            (None, Vec::new())
        } else {
            let counts: BTreeMap<PairKey, u64> = match spec.pair_keying {
                PairKeying::Pair => stats.pair_counts.clone(),
                PairKeying::TargetLanguage => {
                    let mut by_tgt = BTreeMap::new();
                    for ((_, tgt), c) in &stats.pair_counts {
                        *by_tgt.entry((String::new(), tgt.clone())).or_default() += c;
                    }
                    by_tgt
                }
            };
            let dist = language_probs(&counts, spec.alpha)?;
            let mut groups: BTreeMap<PairKey, Vec<ParallelPair>> = BTreeMap::new();
            for pair in parallel {
                let key = match spec.pair_keying {
                    PairKeying::Pair => (pair.src_lang.clone(), pair.tgt_lang.clone()),
                    PairKeying::TargetLanguage => (String::new(), pair.tgt_lang.clone()),
                };
                groups.entry(key).or_default().push(pair);
            }
            let cursors = take_groups(dist.keys(), groups, |(s, t)| format!("{s}->{t}"))?;
            (Some(dist), cursors)
        };

        Ok(Self {
            spec,
            rng: seeded_rng(spec.seed),
            mono_dist,
            mono: mono_cursors,
            pair_dist,
            pairs: pair_cursors,
            drawn_mono: 0,
            drawn_parallel: 0,
        })
    }

    /// Convenience constructor computing the statistics from the records.
    pub fn from_records(
        mono: Vec<Document>,
        parallel: Vec<ParallelPair>,
        spec: MixtureSpec,
    ) -> Result<Self, SamplerError> {
        let stats = CorpusStats::from_records(&mono, &parallel);
        Self::new(mono, parallel, &stats, spec)
    }

    pub fn spec(&self) -> &MixtureSpec {
        &self.spec
    }

    pub fn mono_distribution(&self) -> Option<&Distribution<String>> {
        self.mono_dist.as_ref()
    }

    pub fn pair_distribution(&self) -> Option<&Distribution<PairKey>> {
        self.pair_dist.as_ref()
    }

    /// `(monolingual, parallel)` draws so far.
    pub fn drawn(&self) -> (u64, u64) {
        (self.drawn_mono, self.drawn_parallel)
    }
}

fn take_groups<K: Ord, T: Clone>(
    keys: &[K],
    mut groups: BTreeMap<K, Vec<T>>,
    show: impl Fn(&K) -> String,
) -> Result<Vec<KeyCursor<T>>, SamplerError> {
    keys.iter()
        .map(|k| match groups.remove(k) {
            Some(items) if !items.is_empty() => Ok(KeyCursor::new(items)),
            _ => Err(SamplerError::MissingRecords(show(k))),
        })
        .collect()
}

impl Iterator for MixedStream {
    type Item = RawTask;

    fn next(&mut self) -> Option<RawTask> {
        let parallel = self.rng.gen::<f64>() < self.spec.parallel_ratio;
        if parallel {
            let dist = self.pair_dist.as_ref().expect("validated at construction");
            let i = dist.sample_index(&mut self.rng);
            self.drawn_parallel += 1;
            Some(RawTask::Parallel(self.pairs[i].next(&mut self.rng)))
        } else {
            let dist = self.mono_dist.as_ref().expect("validated at construction");
            let i = dist.sample_index(&mut self.rng);
            self.drawn_mono += 1;
            Some(RawTask::Mono(self.mono[i].next(&mut self.rng)))
        }
    }
}
