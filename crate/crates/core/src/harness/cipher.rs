use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::{Document, ParallelPair};
use crate::{seeded_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WordOrder {
    Identity,
    Reverse,
}

impl fmt::Display for WordOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WordOrder::Identity => "identity",
            WordOrder::Reverse => "reverse",
        })
    }
}

impl FromStr for WordOrder {
    type Err = HarnessError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(WordOrder::Identity),
            "reverse" => Ok(WordOrder::Reverse),
            _ => Err(HarnessError::Config(format!("unknown word order {s:?}"))),
        }
    }
}

/// A derived language: a letter permutation (identity when `permutation_seed`
/// is `None`) plus a word-order rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedLang {
    pub code: String,
    pub permutation_seed: Option<u64>,
    pub order: WordOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CipherSpec {
    pub base_lang: String,
    pub derived: Vec<DerivedLang>,
    pub words: Vec<String>,
    pub min_words: usize,
    pub max_words: usize,
    /// Letters each seeded permutation moves (one cycle through them);
    /// 26 permutes the whole alphabet.
    pub moved_letters: usize,
}

const LETTERS: std::ops::RangeInclusive<u8> = b'a'..=b'z';

/// Pronounceable lowercase pseudo-words of two or three syllables.
pub fn pseudo_words(count: usize, seed: u64) -> Vec<String> {
    const ONSETS: &[&str] = &[
        "b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "ch", "sh", "tr",
        "pl",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &[&str] = &["", "", "", "n", "r", "s", "k"];
    let mut rng = seeded_rng(seed);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let syllables = rng.gen_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS.choose(&mut rng).unwrap());
            w.push_str(VOWELS.choose(&mut rng).unwrap());
            w.push_str(CODAS.choose(&mut rng).unwrap());
        }
        if w.len() <= 8 && seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

impl Default for CipherSpec {
    /// Base language plus five derived languages, each swapping two letters.
    fn default() -> Self {
        let derived = ["xa", "xb", "xc", "xd", "xe"]
            .iter()
            .enumerate()
            .map(|(i, code)| DerivedLang {
                code: code.to_string(),
                permutation_seed: Some(101 + i as u64),
                order: WordOrder::Identity,
            })
            .collect();
        CipherSpec {
            base_lang: "en".into(),
            derived,
            words: pseudo_words(300, 7),
            min_words: 3,
            max_words: 6,
            moved_letters: 2,
        }
    }
}

impl CipherSpec {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut codes = HashSet::new();
        for code in std::iter::once(&self.base_lang).chain(self.derived.iter().map(|d| &d.code)) {
            if code.is_empty() || code.chars().any(char::is_whitespace) {
                return Err(HarnessError::Config(format!(
                    "invalid language code {code:?}"
                )));
            }
            if !codes.insert(code.as_str()) {
                return Err(HarnessError::Config(format!(
                    "duplicate language code {code:?}"
                )));
            }
        }
        if self.words.is_empty() {
            return Err(HarnessError::Config("word list is empty".into()));
        }
        let unique: HashSet<&String> = self.words.iter().collect();
        if unique.len() != self.words.len() {
            return Err(HarnessError::Config("word list has duplicates".into()));
        }
        if let Some(w) = self
            .words
            .iter()
            .find(|w| w.is_empty() || !w.bytes().all(|b| LETTERS.contains(&b)))
        {
            return Err(HarnessError::Config(format!(
                "word {w:?} is not lowercase ASCII letters"
            )));
        }
        if self.moved_letters == 1 || self.moved_letters > 26 {
            return Err(HarnessError::Config(format!(
                "moved_letters must be 0 or 2..=26, got {}",
                self.moved_letters
            )));
        }
        if self.min_words == 0 || self.min_words > self.max_words {
            return Err(HarnessError::Config(format!(
                "bad sentence length range {}..={}",
                self.min_words, self.max_words
            )));
        }
        Ok(())
    }

    /// Base language first, then derived languages in declaration order.
    pub fn languages(&self) -> Vec<String> {
        std::iter::once(self.base_lang.clone())
            .chain(self.derived.iter().map(|d| d.code.clone()))
            .collect()
    }

    /// Number of distinct sentences the word list and length range allow,
    /// saturating at `u64::MAX`.
    pub fn capacity(&self) -> u64 {
        let w = self.words.len() as u64;
        (self.min_words..=self.max_words)
            .map(|len| w.checked_pow(len as u32).unwrap_or(u64::MAX))
            .fold(0u64, |a, b| a.saturating_add(b))
    }

    pub fn ciphers(&self) -> BTreeMap<String, Cipher> {
        let mut out = BTreeMap::new();
        out.insert(self.base_lang.clone(), Cipher::identity());
        for d in &self.derived {
            let cipher = match d.permutation_seed {
                Some(seed) => Cipher::from_seed(seed, self.moved_letters, d.order),
                None => Cipher {
                    order: d.order,
                    ..Cipher::identity()
                },
            };
            out.insert(d.code.clone(), cipher);
        }
        out
    }
}

/// Byte substitution over lowercase letters plus a word-order rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cipher {
    forward: [u8; 256],
    inverse: [u8; 256],
    pub order: WordOrder,
}

impl Cipher {
    pub fn identity() -> Self {
        let table: [u8; 256] = std::array::from_fn(|i| i as u8);
        Cipher {
            forward: table,
            inverse: table,
            order: WordOrder::Identity,
        }
    }

    /// Picks `moved` letters at random and sends each to the next one in a
    /// single cycle; every other letter is fixed.
    pub fn from_seed(seed: u64, moved: usize, order: WordOrder) -> Self {
        let mut picked: Vec<u8> = LETTERS.collect();
        picked.shuffle(&mut seeded_rng(seed));
        picked.truncate(moved.min(26));
        let mut image: Vec<u8> = LETTERS.collect();
        for (i, &b) in picked.iter().enumerate() {
            image[(b - b'a') as usize] = picked[(i + 1) % picked.len()];
        }
        Self::from_letters(&image, order).expect("a cycle is a permutation")
    }

    /// `image[i]` is the substitute of letter `b'a' + i`.
    pub fn from_letters(image: &[u8], order: WordOrder) -> Result<Self, HarnessError> {
        let sorted: Vec<u8> = {
            let mut s = image.to_vec();
            s.sort_unstable();
            s
        };
        if sorted != LETTERS.collect::<Vec<_>>() {
            return Err(HarnessError::Config(
                "letter image is not a permutation of a..z".into(),
            ));
        }
        let mut c = Cipher {
            order,
            ..Cipher::identity()
        };
        for (src, &dst) in LETTERS.zip(image) {
            c.forward[src as usize] = dst;
            c.inverse[dst as usize] = src;
        }
        Ok(c)
    }

    pub fn letters(&self) -> Vec<u8> {
        LETTERS.map(|b| self.forward[b as usize]).collect()
    }

    fn reorder(&self, text: &str) -> String {
        match self.order {
            WordOrder::Identity => text.to_string(),
            WordOrder::Reverse => text.split(' ').rev().collect::<Vec<_>>().join(" "),
        }
    }

    /// Base text to cipher text. Non-letter bytes pass through.
    pub fn encipher(&self, text: &str) -> String {
        let bytes: Vec<u8> = self
            .reorder(text)
            .bytes()
            .map(|b| self.forward[b as usize])
            .collect();
        String::from_utf8(bytes).expect("permutation preserves ASCII")
    }

    pub fn decipher(&self, text: &str) -> String {
        let bytes: Vec<u8> = text.bytes().map(|b| self.inverse[b as usize]).collect();
        self.reorder(&String::from_utf8(bytes).expect("permutation preserves ASCII"))
    }
}

/// Rule-based translator built from the stored ciphers.
#[derive(Debug, Clone)]
pub struct OracleTranslator {
    ciphers: BTreeMap<String, Cipher>,
}

impl OracleTranslator {
    pub fn new(spec: &CipherSpec) -> Self {
        OracleTranslator {
            ciphers: spec.ciphers(),
        }
    }

    pub fn translate(
        &self,
        src_lang: &str,
        tgt_lang: &str,
        text: &str,
    ) -> Result<String, HarnessError> {
        let get = |l: &str| {
            self.ciphers
                .get(l)
                .ok_or_else(|| HarnessError::Config(format!("unknown language {l:?}")))
        };
        Ok(get(tgt_lang)?.encipher(&get(src_lang)?.decipher(text)))
    }
}

/// One record of a translation task file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub src_lang: String,
    pub tgt_lang: String,
    pub input: String,
    pub target: String,
}

impl TaskRecord {
    pub fn direction(&self) -> String {
        format!("{}-{}", self.src_lang, self.tgt_lang)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSizes {
    pub mono_per_lang: usize,
    pub pairs_per_direction: usize,
    pub task_train_per_direction: usize,
    pub task_valid_per_direction: usize,
    pub task_test_per_direction: usize,
}

impl Default for CorpusSizes {
    fn default() -> Self {
        CorpusSizes {
            mono_per_lang: 5000,
            pairs_per_direction: 2000,
            task_train_per_direction: 2000,
            task_valid_per_direction: 10,
            task_test_per_direction: 30,
        }
    }
}

impl CorpusSizes {
    pub fn base_sentences(&self, langs: usize) -> usize {
        let directions = 2 * (langs - 1);
        self.mono_per_lang * langs
            + directions
                * (self.pairs_per_direction
                    + self.task_train_per_direction
                    + self.task_valid_per_direction
                    + self.task_test_per_direction)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TaskSplits {
    pub train: Vec<TaskRecord>,
    pub valid: Vec<TaskRecord>,
    pub test: Vec<TaskRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CipherCorpus {
    pub spec: CipherSpec,
    pub mono: Vec<Document>,
    pub parallel: Vec<ParallelPair>,
    pub task: TaskSplits,
}

fn sample_sentences(
    spec: &CipherSpec,
    n: usize,
    rng: &mut Rng,
) -> Result<Vec<String>, HarnessError> {
    let capacity = spec.capacity();
    if n as u64 > capacity {
        return Err(HarnessError::Capacity {
            requested: n as u64,
            capacity,
        });
    }
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    if capacity <= 4 * n as u64 {
        let mut all = Vec::new();
        let mut stack: Vec<Vec<usize>> = vec![Vec::new()];
        while let Some(prefix) = stack.pop() {
            if prefix.len() >= spec.min_words {
                all.push(
                    prefix
                        .iter()
                        .map(|&i| spec.words[i].as_str())
                        .collect::<Vec<_>>()
                        .join(" "),
                );
            }
            if prefix.len() < spec.max_words {
                for i in 0..spec.words.len() {
                    let mut p = prefix.clone();
                    p.push(i);
                    stack.push(p);
                }
            }
        }
        all.sort();
        all.shuffle(rng);
        all.truncate(n);
        return Ok(all);
    }
    while out.len() < n {
        let len = rng.gen_range(spec.min_words..=spec.max_words);
        let s = (0..len)
            .map(|_| spec.words.choose(rng).unwrap().as_str())
            .collect::<Vec<_>>()
            .join(" ");
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Generates monolingual text for every language, English-centric parallel
/// pairs in both directions, and a translation task whose train, validation
/// and test splits share no base sentence with each other or with the
/// pre-training data.
pub fn gen_cipher_corpus(
    spec: &CipherSpec,
    sizes: &CorpusSizes,
    rng: &mut Rng,
) -> Result<CipherCorpus, HarnessError> {
    spec.validate()?;
    let langs = spec.languages();
    let ciphers = spec.ciphers();
    let need = sizes.base_sentences(langs.len());
    let pool = sample_sentences(spec, need, rng)?;
    let mut pool = pool.into_iter();
    let mut take = |n: usize| -> Vec<String> { pool.by_ref().take(n).collect() };

    let mut mono = Vec::with_capacity(sizes.mono_per_lang * langs.len());
    for lang in &langs {
        let c = &ciphers[lang];
        mono.extend(
            take(sizes.mono_per_lang)
                .into_iter()
                .map(|s| Document::new(lang.clone(), c.encipher(&s))),
        );
    }

    let mut directions = Vec::new();
    for d in &spec.derived {
        directions.push((spec.base_lang.clone(), d.code.clone()));
        directions.push((d.code.clone(), spec.base_lang.clone()));
    }
    let pair = |src: &str, tgt: &str, s: &str| (ciphers[src].encipher(s), ciphers[tgt].encipher(s));

    let mut parallel = Vec::new();
    for (src, tgt) in &directions {
        for s in take(sizes.pairs_per_direction) {
            let (a, b) = pair(src, tgt, &s);
            parallel.push(ParallelPair::new(src.clone(), tgt.clone(), a, b));
        }
    }

    let mut task = TaskSplits::default();
    for (split, per_dir, name) in [
        (&mut task.train, sizes.task_train_per_direction, "train"),
        (&mut task.valid, sizes.task_valid_per_direction, "valid"),
        (&mut task.test, sizes.task_test_per_direction, "test"),
    ] {
        for (src, tgt) in &directions {
            for (i, s) in take(per_dir).into_iter().enumerate() {
                let (input, target) = pair(src, tgt, &s);
                split.push(TaskRecord {
                    id: format!("{name}-{src}-{tgt}-{i}"),
                    src_lang: src.clone(),
                    tgt_lang: tgt.clone(),
                    input,
                    target,
                });
            }
        }
    }
    Ok(CipherCorpus {
        spec: spec.clone(),
        mono,
        parallel,
        task,
    })
}
