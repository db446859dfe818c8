use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::batching::{to_batch, Packer, TaskExample};
use super::{Checkpoint, RunManifest, TrainConfig, TrainError};
use crate::metrics::{average_languages, LangScores, Scorer};
use crate::model::{adam_step, greedy_decode_all, loss_and_grads, ModelError, OptState, Params};
use crate::vocab::{TokenSeq, Vocab};

/// One validation or test item: encoded input and a reference string.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub id: String,
    pub lang: String,
    pub input: TokenSeq,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub per_lang: LangScores,
    /// Unweighted mean over languages.
    pub aggregate: f64,
    pub predictions: Vec<String>,
}

/// Scores `(lang, prediction, reference)` triples per language and averages
/// the languages.
pub fn score_predictions<'a>(
    triples: impl IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    scorer: &dyn Scorer,
) -> Result<(LangScores, f64), TrainError> {
    let mut by_lang: std::collections::BTreeMap<&str, Vec<(&str, &str)>> = Default::default();
    for (lang, pred, gold) in triples {
        by_lang.entry(lang).or_default().push((pred, gold));
    }
    let per_lang: LangScores = by_lang
        .into_iter()
        .map(|(l, pairs)| (l.to_string(), scorer.corpus_score(&pairs)))
        .collect();
    let aggregate = average_languages(&per_lang)?.value();
    Ok((per_lang, aggregate))
}

/// Decodes every item greedily and scores it per language.
pub fn evaluate(
    params: &Params<f32>,
    items: &[EvalItem],
    scorer: &dyn Scorer,
    vocab: &Vocab,
) -> Result<EvalResult, TrainError> {
    let max_len = params.config().max_len;
    let mut inputs = Vec::with_capacity(items.len());
    for it in items {
        let mut x = it.input.clone();
        x.truncate(max_len);
        inputs.push(x);
    }
    let limit = items
        .iter()
        .map(|it| 2 * it.reference.len() + 8)
        .max()
        .unwrap_or(0)
        .min(max_len);
    let outputs = greedy_decode_all(params, &inputs, limit)?;
    let predictions: Vec<String> = outputs.iter().map(|o| vocab.decode_text(o)).collect();
    let (per_lang, aggregate) = score_predictions(
        items
            .iter()
            .zip(&predictions)
            .map(|(it, p)| (it.lang.as_str(), p.as_str(), it.reference.as_str())),
        scorer,
    )?;
    Ok(EvalResult {
        per_lang,
        aggregate,
        predictions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValPoint {
    pub step: u64,
    pub score: f64,
    pub per_lang: LangScores,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub best: Checkpoint,
    pub history: Vec<ValPoint>,
    pub losses: Vec<f64>,
}

impl FinetuneOutcome {
    pub fn best_score(&self) -> f64 {
        self.history
            .iter()
            .find(|p| p.step == self.best.step)
            .map_or(f64::NAN, |p| p.score)
    }
}

/// Fine-tunes from `start` with a fresh optimizer, shuffling the training
/// set every epoch. Validation runs at every checkpoint; the best one wins
/// and ties go to the earliest step.
pub fn finetune(
    cfg: &TrainConfig,
    train: &[TaskExample],
    val: &[EvalItem],
    scorer: &dyn Scorer,
    vocab: &Vocab,
    start: &Checkpoint,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    if val.is_empty() {
        return Err(TrainError::Config("validation set is empty".into()));
    }
    let max_len = start.model_config().max_len;
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut params = start.params.clone();
    let mut opt = OptState::new(params.layout().clone(), cfg.adam());
    let mut run = RunManifest::new("finetune", cfg.seed);
    run.init_seed = start.run.init_seed;
    run.objective = start.run.objective.clone();
    run.batch_tokens = cfg.batch_tokens;
    run.learning_rate = cfg.learning_rate;
    run.parent = Some(format!("{}@{}", start.run.stage, start.step));

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut packer = Packer::new(cfg.batch_tokens, max_len);
    let mut history = Vec::new();
    let mut losses = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;

    for step in 1..=cfg.steps {
        let examples = loop {
            if let Some(b) = packer.pop() {
                break b;
            }
            order.shuffle(&mut rng);
            for &i in &order {
                packer.push(train[i].clone());
            }
            packer.flush();
        };
        let batch = to_batch(&examples);
        let (loss, grads) = loss_and_grads(&params, &batch).map_err(|e| match e {
            ModelError::NonFinite { tensor } => TrainError::NonFinite {
                step,
                tensor,
                last_good: best.as_ref().map(|b| Box::new(b.1.clone())),
            },
            e => e.into(),
        })?;
        adam_step(&mut params, &grads, &mut opt)?;
        losses.push(loss as f64);

        if step % cfg.checkpoint_every == 0 {
            let res = evaluate(&params, val, scorer, vocab)?;
            log::debug!(
                "finetune step {step}: loss {loss:.4}, validation {:.2}",
                res.aggregate
            );
            history.push(ValPoint {
                step,
                score: res.aggregate,
                per_lang: res.per_lang,
            });
            if best.as_ref().is_none_or(|(s, _)| res.aggregate > *s) {
                let ck = Checkpoint {
                    step,
                    params: params.clone(),
                    opt: opt.clone(),
                    vocab: vocab.layout(),
                    run: run.clone(),
                };
                best = Some((res.aggregate, ck));
            }
        }
    }
    let (_, best) = best.expect("checkpoint_every <= steps guarantees one evaluation");
    Ok(FinetuneOutcome {
        best,
        history,
        losses,
    })
}
