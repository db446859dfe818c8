//! Pre-training objectives: span-corruption MLM, text-to-text TLM, NMT,
//! Denoised-NMT and Denoised-NMT+LM.
//!
//! Each objective is available as a plain builder function (`build_mlm`,
//! `build_nmt`, ...) and as a strategy behind the [`Objective`] trait, so the
//! trainer can pick one by name at runtime from an [`ObjectiveRegistry`].
//!
//! Builders return `Ok(None)` when a record is too short to produce an
//! example; callers skip those instead of aborting the stream.

mod builders;
mod span;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::RawTask;
use crate::vocab::{TokenId, TokenSeq, Vocab, VocabError, EOS};
use crate::Rng;

pub use builders::{build_denoised_nmt, build_denoised_nmt_lm, build_mlm, build_nmt, build_tlm};
pub use span::{
    masked_count, reconstruct, span_corrupt, span_corrupt_with, span_count, Corruption,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("noise density must lie in (0, 1), got {0}")]
    NoiseDensity(f64),
    #[error("mean span length must be at least 1, got {0}")]
    MeanSpanLength(f64),
    #[error("sequence has {len} maskable tokens, need at least {min}")]
    TooShort { len: usize, min: usize },
    #[error("input already contains special token id {0}")]
    SpecialToken(TokenId),
    #[error("span corruption needs at least 2 sentinels, vocabulary has {0}")]
    NotEnoughSentinels(usize),
    #[error("could not place {masked} masked tokens in a sequence of {len}")]
    Unplaceable { len: usize, masked: usize },
    #[error("sentinel mismatch: {0}")]
    SentinelMismatch(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("objective {objective} cannot consume a {got} record")]
    WrongSource {
        objective: &'static str,
        got: &'static str,
    },
    #[error("unknown objective {0:?} (known: mlm, tlm, nmt, dnmt, dnmt-lm)")]
    Unknown(String),
}

/// Span-corruption parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub noise_density: f64,
    pub mean_span_length: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            noise_density: 0.15,
            mean_span_length: 3.0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if !(self.noise_density > 0.0 && self.noise_density < 1.0) {
            return Err(ObjectiveError::NoiseDensity(self.noise_density));
        }
        if !(self.mean_span_length >= 1.0) {
            return Err(ObjectiveError::MeanSpanLength(self.mean_span_length));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveKind {
    Mlm,
    Tlm,
    Nmt,
    DenoisedNmt,
    DenoisedNmtLm,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 5] = [
        Self::Mlm,
        Self::Tlm,
        Self::Nmt,
        Self::DenoisedNmt,
        Self::DenoisedNmtLm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Mlm => "mlm",
            Self::Tlm => "tlm",
            Self::Nmt => "nmt",
            Self::DenoisedNmt => "dnmt",
            Self::DenoisedNmtLm => "dnmt-lm",
        }
    }

    /// Whether the encoder input starts with the target-language code.
    pub fn has_lang_prefix(self) -> bool {
        !matches!(self, Self::Mlm | Self::Tlm)
    }

    pub fn source(self) -> TaskSource {
        match self {
            Self::Mlm => TaskSource::Monolingual,
            _ => TaskSource::Parallel,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveKind {
    type Err = ObjectiveError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ObjectiveError::Unknown(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskSource {
    Monolingual,
    Parallel,
}

/// One seq2seq training instance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub objective: ObjectiveKind,
    pub input: TokenSeq,
    pub target: TokenSeq,
    pub src_lang: String,
    pub tgt_lang: Option<String>,
}

impl Example {
    /// Checks the structural invariants every objective guarantees:
    /// EOS-terminated target, language-code prefix iff the objective names
    /// a target language, and strictly increasing sentinels.
    pub fn check_invariants(&self, vocab: &Vocab) -> Result<(), String> {
        if self.target.last() != Some(&EOS) {
            return Err("target does not end with EOS".into());
        }
        let prefixed = self.input.first().is_some_and(|&t| vocab.is_lang_code(t));
        if prefixed != self.objective.has_lang_prefix() {
            return Err(format!(
                "{}: language-code prefix present = {prefixed}",
                self.objective
            ));
        }
        if self.input.iter().skip(1).any(|&t| vocab.is_lang_code(t)) {
            return Err("language code after position 0".into());
        }
        let in_sentinels = sentinel_indices(&self.input, vocab);
        let tgt_sentinels = sentinel_indices(&self.target, vocab);
        if !is_consecutive(&in_sentinels) || !is_consecutive(&tgt_sentinels) {
            return Err("sentinels are not S_0, S_1, ... in order".into());
        }
        let expected_target = match self.objective {
            ObjectiveKind::Mlm | ObjectiveKind::Tlm => in_sentinels.len() + 1,
            _ => 0,
        };
        if tgt_sentinels.len() != expected_target {
            return Err(format!(
                "target has {} sentinels, expected {expected_target}",
                tgt_sentinels.len()
            ));
        }
        Ok(())
    }
}

fn sentinel_indices(seq: &[TokenId], vocab: &Vocab) -> Vec<usize> {
    seq.iter()
        .filter_map(|&t| vocab.sentinel_index(t))
        .collect()
}

fn is_consecutive(idx: &[usize]) -> bool {
    idx.iter().enumerate().all(|(i, &s)| i == s)
}

/// A pre-training objective strategy.
pub trait Objective: Send + Sync {
    fn kind(&self) -> ObjectiveKind;

    fn name(&self) -> &'static str {
        self.kind().name()
    }

    fn source(&self) -> TaskSource {
        self.kind().source()
    }

    /// Builds one example, or `Ok(None)` if the record is too short.
    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError>;
}

macro_rules! wrong_source {
    ($name:expr, $task:expr) => {
        Err(ObjectiveError::WrongSource {
            objective: $name,
            got: if $task.is_parallel() {
                "parallel"
            } else {
                "monolingual"
            },
        })
    };
}

pub struct MaskedLm;

impl Objective for MaskedLm {
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Mlm
    }

    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError> {
        match task {
            RawTask::Mono(doc) => build_mlm(doc, vocab, noise, rng),
            _ => wrong_source!(self.name(), task),
        }
    }
}

pub struct TranslationLm;

impl Objective for TranslationLm {
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Tlm
    }

    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError> {
        match task {
            RawTask::Parallel(p) => build_tlm(p, vocab, noise, rng),
            _ => wrong_source!(self.name(), task),
        }
    }
}

pub struct Translation;

impl Objective for Translation {
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::Nmt
    }

    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        _: &NoiseSpec,
        _: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError> {
        match task {
            RawTask::Parallel(p) => build_nmt(p, vocab).map(Some),
            _ => wrong_source!(self.name(), task),
        }
    }
}

pub struct DenoisedTranslation;

impl Objective for DenoisedTranslation {
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::DenoisedNmt
    }

    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError> {
        match task {
            RawTask::Parallel(p) => build_denoised_nmt(p, vocab, noise, rng),
            _ => wrong_source!(self.name(), task),
        }
    }
}

pub struct DenoisedTranslationLm;

impl Objective for DenoisedTranslationLm {
    fn kind(&self) -> ObjectiveKind {
        ObjectiveKind::DenoisedNmtLm
    }

    fn build(
        &self,
        task: &RawTask,
        vocab: &Vocab,
        noise: &NoiseSpec,
        rng: &mut Rng,
    ) -> Result<Option<Example>, ObjectiveError> {
        match task {
            RawTask::Parallel(p) => build_denoised_nmt_lm(p, vocab, noise, rng),
            _ => wrong_source!(self.name(), task),
        }
    }
}

/// Objectives keyed by CLI name.
#[derive(Clone)]
pub struct ObjectiveRegistry {
    entries: BTreeMap<String, Arc<dyn Objective>>,
}

impl Default for ObjectiveRegistry {
    fn default() -> Self {
        let mut r = Self {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(MaskedLm));
        r.register(Arc::new(TranslationLm));
        r.register(Arc::new(Translation));
        r.register(Arc::new(DenoisedTranslation));
        r.register(Arc::new(DenoisedTranslationLm));
        r
    }
}

impl ObjectiveRegistry {
    pub fn register(&mut self, objective: Arc<dyn Objective>) -> Option<Arc<dyn Objective>> {
        self.entries.insert(objective.name().to_string(), objective)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Objective>, ObjectiveError> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| ObjectiveError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}

/// Renders an example with special tokens bracketed, for fixture review.
pub fn render_example(ex: &Example, vocab: &Vocab) -> String {
    let show = |seq: &[TokenId]| {
        vocab
            .decode(seq)
            .unwrap_or_else(|e| format!("<invalid: {e}>"))
    };
    let langs = match &ex.tgt_lang {
        Some(t) => format!("{} -> {}", ex.src_lang, t),
        None => ex.src_lang.clone(),
    };
    format!(
        "objective: {}\nlangs:     {}\ninput:     {}\ntarget:    {}\nlengths:   input {} / target {}\n",
        ex.objective,
        langs,
        show(&ex.input),
        show(&ex.target),
        ex.input.len(),
        ex.target.len()
    )
}
