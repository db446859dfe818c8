//! Text scorers and the aggregation rules used in result tables. All scores
//! are percentages in `[0, 100]`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("score {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("cannot aggregate an empty set of {0}")]
    Empty(&'static str),
    #[error("unknown metric {0:?}")]
    Unknown(String),
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Score(f64);

impl Score {
    pub const ZERO: Score = Score(0.0);
    pub const FULL: Score = Score(100.0);

    pub fn new(value: f64) -> Result<Score, MetricsError> {
        if (0.0..=100.0).contains(&value) {
            Ok(Score(value))
        } else {
            Err(MetricsError::OutOfRange(value))
        }
    }

    /// From a fraction in `[0, 1]`.
    pub fn from_fraction(f: f64) -> Score {
        Score((f * 100.0).clamp(0.0, 100.0))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Score {
    type Error = MetricsError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Score::new(v)
    }
}

impl From<Score> for f64 {
    fn from(s: Score) -> f64 {
        s.0
    }
}

impl fmt::Display for Score {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.1}", self.0)
    }
}

pub type LangScores = BTreeMap<String, Score>;

/// A task's entry in a results row. QA tasks carry an (F1, EM) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum TaskScore {
    Single(Score),
    Qa { f1: Score, em: Score },
}

impl TaskScore {
    /// What the task contributes to a row average.
    pub fn contribution(&self) -> f64 {
        match *self {
            TaskScore::Single(s) => s.0,
            TaskScore::Qa { f1, em } => (f1.0 + em.0) / 2.0,
        }
    }
}

pub type TaskScores = BTreeMap<String, TaskScore>;

/// Trim, collapse whitespace runs to one space, lowercase.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn exact_match(pred: &str, gold: &str) -> Score {
    if normalize(pred) == normalize(gold) {
        Score::FULL
    } else {
        Score::ZERO
    }
}

fn tokens(text: &str) -> Vec<String> {
    normalize(text)
        .split(' ')
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn f1_from_counts(overlap: usize, n_pred: usize, n_gold: usize) -> Score {
    match (n_pred, n_gold) {
        (0, 0) => Score::FULL,
        (0, _) | (_, 0) => Score::ZERO,
        _ if overlap == 0 => Score::ZERO,
        _ => {
            let p = overlap as f64 / n_pred as f64;
            let r = overlap as f64 / n_gold as f64;
            Score::from_fraction(2.0 * p * r / (p + r))
        }
    }
}

/// Multiset token-overlap F1.
pub fn token_f1(pred: &str, gold: &str) -> Score {
    let (p, g) = (tokens(pred), tokens(gold));
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for t in &g {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    f1_from_counts(overlap, p.len(), g.len())
}

/// Longest common subsequence length by dynamic programming.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence-level ROUGE-L F over whitespace tokens.
pub fn rouge_l(pred: &str, gold: &str) -> Score {
    let (p, g) = (tokens(pred), tokens(gold));
    if p.is_empty() && g.is_empty() {
        return Score::FULL;
    }
    f1_from_counts(lcs_len(&p, &g), p.len(), g.len())
}

pub type Entity = (String, String);

/// Parses `[TYPE span] [TYPE span] ...`. Anything else (stray text,
/// unbalanced brackets, empty type or span) makes the whole output
/// unparseable and yields `None`.
pub fn parse_entities(text: &str) -> Option<BTreeSet<Entity>> {
    let mut out = BTreeSet::new();
    let mut rest = text.trim_start();
    while !rest.is_empty() {
        let body = rest.strip_prefix('[')?;
        let close = body.find(']')?;
        let inner = &body[..close];
        if inner.contains('[') {
            return None;
        }
        let inner = inner.trim();
        let split = inner.find(char::is_whitespace)?;
        let (ty, span) = (&inner[..split], inner[split..].trim());
        if ty.is_empty() || span.is_empty() {
            return None;
        }
        out.insert((
            ty.to_string(),
            span.split_whitespace().collect::<Vec<_>>().join(" "),
        ));
        rest = body[close + 1..].trim_start();
    }
    Some(out)
}

pub fn render_entities<'a>(entities: impl IntoIterator<Item = &'a Entity>) -> String {
    entities
        .into_iter()
        .map(|(t, s)| format!("[{t} {s}]"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Exact (type, span) match F1 between two entity sets.
pub fn entity_f1(pred: &BTreeSet<Entity>, gold: &BTreeSet<Entity>) -> Score {
    f1_from_counts(pred.intersection(gold).count(), pred.len(), gold.len())
}

/// Entity F1 on tagged text; unparseable predictions count as empty.
pub fn entity_f1_text(pred: &str, gold: &str) -> Score {
    let p = parse_entities(pred).unwrap_or_default();
    let g = parse_entities(gold).unwrap_or_default();
    entity_f1(&p, &g)
}

/// Unweighted mean over languages.
pub fn average_languages(ls: &LangScores) -> Result<Score, MetricsError> {
    if ls.is_empty() {
        return Err(MetricsError::Empty("languages"));
    }
    Ok(Score(
        ls.values().map(|s| s.0).sum::<f64>() / ls.len() as f64,
    ))
}

/// Unweighted mean over tasks; QA tasks contribute mean(F1, EM).
pub fn task_average(ts: &TaskScores) -> Result<Score, MetricsError> {
    if ts.is_empty() {
        return Err(MetricsError::Empty("tasks"));
    }
    Ok(Score(
        ts.values().map(TaskScore::contribution).sum::<f64>() / ts.len() as f64,
    ))
}

/// Median; the mean of the middle two for even counts.
pub fn median_of_runs(scores: &[Score]) -> Result<Score, MetricsError> {
    median(&scores.iter().map(|s| s.0).collect::<Vec<_>>())
        .map(Score)
        .ok_or(MetricsError::Empty("runs"))
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// A named metric, selectable by CLI name.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &'static str;

    fn score(&self, pred: &str, gold: &str) -> Score;

    /// Corpus-level score over `(prediction, reference)` pairs. Defaults to
    /// the mean of the per-example scores.
    fn corpus_score(&self, pairs: &[(&str, &str)]) -> Score {
        if pairs.is_empty() {
            return Score::ZERO;
        }
        Score(pairs.iter().map(|(p, g)| self.score(p, g).0).sum::<f64>() / pairs.len() as f64)
    }
}

pub struct ExactMatch;
pub struct TokenF1;
pub struct RougeL;
/// Micro-averaged over the corpus.
pub struct EntityF1;

impl Scorer for ExactMatch {
    fn name(&self) -> &'static str {
        "em"
    }

    fn score(&self, pred: &str, gold: &str) -> Score {
        exact_match(pred, gold)
    }
}

impl Scorer for TokenF1 {
    fn name(&self) -> &'static str {
        "f1"
    }

    fn score(&self, pred: &str, gold: &str) -> Score {
        token_f1(pred, gold)
    }
}

impl Scorer for RougeL {
    fn name(&self) -> &'static str {
        "rouge-l"
    }

    fn score(&self, pred: &str, gold: &str) -> Score {
        rouge_l(pred, gold)
    }
}

impl Scorer for EntityF1 {
    fn name(&self) -> &'static str {
        "entity-f1"
    }

    fn score(&self, pred: &str, gold: &str) -> Score {
        entity_f1_text(pred, gold)
    }

    fn corpus_score(&self, pairs: &[(&str, &str)]) -> Score {
        let (mut tp, mut np, mut ng) = (0, 0, 0);
        for (p, g) in pairs {
            let p = parse_entities(p).unwrap_or_default();
            let g = parse_entities(g).unwrap_or_default();
            tp += p.intersection(&g).count();
            np += p.len();
            ng += g.len();
        }
        f1_from_counts(tp, np, ng)
    }
}

#[derive(Clone)]
pub struct ScorerRegistry {
    entries: BTreeMap<String, Arc<dyn Scorer>>,
}

impl Default for ScorerRegistry {
    fn default() -> Self {
        let mut r = ScorerRegistry {
            entries: BTreeMap::new(),
        };
        r.register(Arc::new(ExactMatch));
        r.register(Arc::new(TokenF1));
        r.register(Arc::new(RougeL));
        r.register(Arc::new(EntityF1));
        r
    }
}

impl ScorerRegistry {
    pub fn register(&mut self, scorer: Arc<dyn Scorer>) -> Option<Arc<dyn Scorer>> {
        self.entries.insert(scorer.name().to_string(), scorer)
    }

    pub fn get(&self, name: &str) -> Result<Arc<dyn Scorer>, MetricsError> {
        self.entries
            .get(name)
            .cloned()
            .ok_or_else(|| MetricsError::Unknown(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }
}
