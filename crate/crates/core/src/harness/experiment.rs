use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cipher::{CipherCorpus, TaskRecord};
use super::data::{eval_items, few_shot_subsample, task_examples};
use super::HarnessError;
use crate::metrics::{median, ScorerRegistry};
use crate::model::ModelConfig;
use crate::objectives::{NoiseSpec, ObjectiveRegistry};
use crate::sampler::{MixedStream, MixtureSpec, PairKeying};
use crate::trainer::{
    evaluate, finetune, pretrain, Checkpoint, ObjectiveMap, PretrainOptions, RunManifest,
    TrainConfig,
};
use crate::vocab::Vocab;

/// One pre-training row: an objective and the parallel ratio it runs at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub objective: String,
    pub parallel_ratio: f64,
}

impl RowSpec {
    pub fn label(&self) -> String {
        format!("{}@{}", self.objective, self.parallel_ratio)
    }

    pub fn is_baseline(&self) -> bool {
        self.objective == "mlm" && self.parallel_ratio == 0.0
    }
}

impl fmt::Display for RowSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for RowSpec {
    type Err = HarnessError;
    /// `objective@ratio`, e.g. `nmt@0.1`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (objective, ratio) = s
            .trim()
            .split_once('@')
            .ok_or_else(|| HarnessError::Config(format!("row {s:?} is not objective@ratio")))?;
        let parallel_ratio: f64 = ratio
            .parse()
            .map_err(|_| HarnessError::Config(format!("bad ratio in row {s:?}")))?;
        Ok(RowSpec {
            objective: objective.to_string(),
            parallel_ratio,
        })
    }
}

/// A fine-tuning data regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSpec {
    pub name: String,
    /// Training examples drawn from the pool; `None` uses all of it.
    pub examples: Option<usize>,
    pub steps: u64,
    pub checkpoint_every: u64,
    /// Fine-tune on the first derived language's directions only and
    /// evaluate on every other direction.
    pub zero_shot_analogue: bool,
}

impl RegimeSpec {
    pub fn new(name: &str, examples: Option<usize>, steps: u64, evals: u64) -> Self {
        RegimeSpec {
            name: name.into(),
            examples,
            steps,
            checkpoint_every: (steps / evals).max(1),
            zero_shot_analogue: false,
        }
    }

    pub fn few_shot() -> Self {
        Self::new("few-shot", Some(100), 300, 4)
    }

    pub fn low() -> Self {
        Self::new("low", Some(1000), 600, 4)
    }

    pub fn high() -> Self {
        Self::new("high", Some(20000), 1500, 4)
    }

    pub fn zero_shot_analogue() -> Self {
        RegimeSpec {
            zero_shot_analogue: true,
            ..Self::new("zero-shot-analogue", Some(1000), 600, 4)
        }
    }

    pub fn by_name(name: &str) -> Result<Self, HarnessError> {
        match name {
            "few-shot" => Ok(Self::few_shot()),
            "low" => Ok(Self::low()),
            "high" => Ok(Self::high()),
            "zero-shot-analogue" => Ok(Self::zero_shot_analogue()),
            _ => Err(HarnessError::Config(format!("unknown regime {name:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub rows: Vec<RowSpec>,
    pub alpha: f64,
    pub pair_keying: PairKeying,
    pub noise: NoiseSpec,
    pub sentinel_count: usize,
    /// `vocab_size` is replaced by the corpus vocabulary's size.
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune_batch_tokens: usize,
    pub finetune_learning_rate: f64,
    pub regimes: Vec<RegimeSpec>,
    pub metric: String,
    pub runs: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            rows: vec![
                RowSpec {
                    objective: "mlm".into(),
                    parallel_ratio: 0.0,
                },
                RowSpec {
                    objective: "nmt".into(),
                    parallel_ratio: 0.1,
                },
                RowSpec {
                    objective: "nmt".into(),
                    parallel_ratio: 0.5,
                },
            ],
            alpha: 0.3,
            pair_keying: PairKeying::Pair,
            noise: NoiseSpec::default(),
            sentinel_count: 100,
            model: ModelConfig::desk(0),
            pretrain: TrainConfig {
                batch_tokens: 16384,
                checkpoint_every: 2000,
                ..TrainConfig::pretrain_default()
            },
            finetune_batch_tokens: 1024,
            finetune_learning_rate: 1e-3,
            regimes: vec![
                RegimeSpec::few_shot(),
                RegimeSpec::low(),
                RegimeSpec::high(),
            ],
            metric: "em".into(),
            runs: 5,
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.runs == 0 {
            return Err(HarnessError::Config("runs must be at least 1".into()));
        }
        if self.rows.is_empty() || self.regimes.is_empty() {
            return Err(HarnessError::Config(
                "need at least one row and one regime".into(),
            ));
        }
        if !self.rows.iter().any(RowSpec::is_baseline) {
            return Err(HarnessError::Config(
                "rows must include the mlm@0 baseline".into(),
            ));
        }
        let registry = ObjectiveRegistry::default();
        for row in &self.rows {
            ObjectiveMap::from_name(&registry, &row.objective, row.parallel_ratio)?;
            MixtureSpec {
                alpha: self.alpha,
                parallel_ratio: row.parallel_ratio,
                seed: 0,
                pair_keying: self.pair_keying,
            }
            .validate()?;
        }
        for r in &self.regimes {
            TrainConfig {
                batch_tokens: self.finetune_batch_tokens,
                steps: r.steps,
                checkpoint_every: r.checkpoint_every,
                learning_rate: self.finetune_learning_rate,
                seed: 0,
            }
            .validate()?;
        }
        self.pretrain.validate()?;
        self.noise.validate()?;
        ScorerRegistry::default().get(&self.metric)?;
        Ok(())
    }

    pub fn baseline(&self) -> &RowSpec {
        self.rows
            .iter()
            .find(|r| r.is_baseline())
            .expect("validated")
    }

    pub fn finetune_seed(&self, regime: usize, run: usize) -> u64 {
        self.seed
            .wrapping_mul(1_000_003)
            .wrapping_add(1000 * (regime as u64 + 1) + run as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub score: Option<f64>,
    pub per_lang: BTreeMap<String, f64>,
    pub best_step: Option<u64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub regime: String,
    pub runs: Vec<RunRecord>,
    /// Median over the runs that finished.
    pub median: Option<f64>,
    pub per_lang: BTreeMap<String, f64>,
}

impl CellReport {
    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|r| r.error.is_some()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub steps: u64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub objective_counts: BTreeMap<String, u64>,
    pub manifest: RunManifest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowReport {
    pub label: String,
    pub row: RowSpec,
    pub pretrain: Option<PretrainSummary>,
    pub error: Option<String>,
    pub cells: Vec<CellReport>,
    /// Mean of the regime medians; absent if any is missing.
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub label: String,
    pub cells: Vec<Option<f64>>,
    pub aggregate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub metric: String,
    pub regimes: Vec<String>,
    pub baseline: String,
    pub rows: Vec<RowReport>,
    pub deltas: Vec<DeltaRow>,
    pub config: ExperimentConfig,
}

impl Report {
    pub fn row(&self, label: &str) -> Option<&RowReport> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn delta(&self, label: &str) -> Option<&DeltaRow> {
        self.deltas.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, label: &str, regime: &str) -> Option<f64> {
        let i = self.regimes.iter().position(|r| r == regime)?;
        self.row(label)?.cells.get(i)?.median
    }

    /// Treatment minus baseline, per regime, plus the aggregate.
    pub fn from_rows(config: ExperimentConfig, rows: Vec<RowReport>) -> Report {
        let baseline = config.baseline().label();
        let regimes: Vec<String> = config.regimes.iter().map(|r| r.name.clone()).collect();
        let base = rows.iter().find(|r| r.label == baseline);
        let deltas = rows
            .iter()
            .map(|row| {
                let diff = |a: Option<f64>, b: Option<f64>| Some(a? - b?);
                DeltaRow {
                    label: row.label.clone(),
                    cells: (0..regimes.len())
                        .map(|i| {
                            diff(
                                row.cells.get(i).and_then(|c| c.median),
                                base.and_then(|b| b.cells.get(i)).and_then(|c| c.median),
                            )
                        })
                        .collect(),
                    aggregate: diff(row.aggregate, base.and_then(|b| b.aggregate)),
                }
            })
            .collect();
        Report {
            metric: config.metric.clone(),
            regimes,
            baseline,
            rows,
            deltas,
            config,
        }
    }
}

fn cell_from_runs(regime: &str, runs: Vec<RunRecord>) -> CellReport {
    let scores: Vec<f64> = runs.iter().filter_map(|r| r.score).collect();
    let mut langs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in &runs {
        for (l, s) in &r.per_lang {
            langs.entry(l.clone()).or_default().push(*s);
        }
    }
    CellReport {
        regime: regime.to_string(),
        median: median(&scores),
        per_lang: langs
            .into_iter()
            .filter_map(|(l, v)| Some((l, median(&v)?)))
            .collect(),
        runs,
    }
}

fn row_aggregate(cells: &[CellReport]) -> Option<f64> {
    let medians: Option<Vec<f64>> = cells.iter().map(|c| c.median).collect();
    let medians = medians?;
    Some(medians.iter().sum::<f64>() / medians.len() as f64)
}

/// Training pool and evaluation splits of one regime.
pub fn regime_data<'a>(
    corpus: &'a CipherCorpus,
    regime: &RegimeSpec,
) -> (
    Vec<&'a TaskRecord>,
    Vec<&'a TaskRecord>,
    Vec<&'a TaskRecord>,
) {
    let all = |v: &'a [TaskRecord]| v.iter().collect::<Vec<_>>();
    if !regime.zero_shot_analogue {
        return (
            all(&corpus.task.train),
            all(&corpus.task.valid),
            all(&corpus.task.test),
        );
    }
    let seen = corpus
        .spec
        .derived
        .first()
        .map(|d| d.code.as_str())
        .unwrap_or("");
    let involves = |r: &&TaskRecord| r.src_lang == seen || r.tgt_lang == seen;
    (
        corpus.task.train.iter().filter(involves).collect(),
        corpus.task.valid.iter().filter(involves).collect(),
        corpus.task.test.iter().filter(|r| !involves(r)).collect(),
    )
}

/// Pre-trains one row from the shared initial checkpoint.
pub fn pretrain_row(
    cfg: &ExperimentConfig,
    corpus: &CipherCorpus,
    vocab: &Vocab,
    init: &Checkpoint,
    row: &RowSpec,
) -> Result<(Checkpoint, PretrainSummary), HarnessError> {
    let objectives = ObjectiveMap::from_name(
        &ObjectiveRegistry::default(),
        &row.objective,
        row.parallel_ratio,
    )?;
    let mixture = MixtureSpec {
        alpha: cfg.alpha,
        parallel_ratio: row.parallel_ratio,
        seed: cfg.seed,
        pair_keying: cfg.pair_keying,
    };
    let stream = MixedStream::from_records(corpus.mono.clone(), corpus.parallel.clone(), mixture)?;
    let opts = PretrainOptions {
        keep_checkpoints: false,
        ..PretrainOptions::default()
    };
    let out = pretrain(
        &cfg.pretrain,
        stream,
        &objectives,
        &cfg.noise,
        vocab,
        init,
        &opts,
    )?;
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len().max(1) as f64;
    let k = out.losses.len().min(20);
    let summary = PretrainSummary {
        steps: out.last.step,
        first_loss: window(&out.losses[..k]),
        final_loss: window(&out.losses[out.losses.len() - k..]),
        objective_counts: out.objective_counts.clone(),
        manifest: out.last.run.clone(),
    };
    Ok((out.last, summary))
}

/// Fine-tunes and tests one (row, regime, run) cell.
pub fn run_cell(
    cfg: &ExperimentConfig,
    corpus: &CipherCorpus,
    vocab: &Vocab,
    start: &Checkpoint,
    regime_index: usize,
    run: usize,
) -> Result<RunRecord, HarnessError> {
    let regime = &cfg.regimes[regime_index];
    let seed = cfg.finetune_seed(regime_index, run);
    let (pool, valid, test) = regime_data(corpus, regime);
    let pool: Vec<TaskRecord> = pool.into_iter().cloned().collect();
    let train = match regime.examples {
        Some(k) => few_shot_subsample(&pool, k, &mut crate::seeded_rng(seed))?,
        None => pool,
    };
    let train = task_examples(&train, vocab)?;
    let valid = eval_items(&valid.into_iter().cloned().collect::<Vec<_>>(), vocab)?;
    let test = eval_items(&test.into_iter().cloned().collect::<Vec<_>>(), vocab)?;
    let scorer = ScorerRegistry::default().get(&cfg.metric)?;
    let tc = TrainConfig {
        batch_tokens: cfg.finetune_batch_tokens,
        steps: regime.steps,
        checkpoint_every: regime.checkpoint_every,
        learning_rate: cfg.finetune_learning_rate,
        seed,
    };
    let out = finetune(&tc, &train, &valid, scorer.as_ref(), vocab, start)?;
    let res = evaluate(&out.best.params, &test, scorer.as_ref(), vocab)?;
    Ok(RunRecord {
        run,
        seed,
        score: Some(res.aggregate),
        per_lang: res
            .per_lang
            .into_iter()
            .map(|(l, s)| (l, s.value()))
            .collect(),
        best_step: Some(out.best.step),
        error: None,
    })
}

pub fn corpus_vocab(corpus: &CipherCorpus, sentinel_count: usize) -> Result<Vocab, HarnessError> {
    Ok(Vocab::new(&corpus.spec.languages(), sentinel_count)?)
}

/// Pre-trains every row once, then fine-tunes each regime `runs` times
/// with different subsample and fine-tuning seeds. Failures are recorded in
/// the report rather than aborting it.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    corpus: &CipherCorpus,
) -> Result<Report, HarnessError> {
    cfg.validate()?;
    let vocab = corpus_vocab(corpus, cfg.sentinel_count)?;
    let model = ModelConfig {
        vocab_size: vocab.size(),
        ..cfg.model
    };
    let init = Checkpoint::initial(model, &vocab, cfg.seed)?;
    let mut rows = Vec::with_capacity(cfg.rows.len());
    for row in &cfg.rows {
        log::info!("pre-training row {row}");
        let (start, summary, error) = match pretrain_row(cfg, corpus, &vocab, &init, row) {
            Ok((c, s)) => (Some(c), Some(s), None),
            Err(e) => {
                log::error!("row {row}: pre-training failed: {e}");
                (None, None, Some(e.to_string()))
            }
        };
        let cells = cfg
            .regimes
            .iter()
            .enumerate()
            .map(|(ri, regime)| {
                let runs = (0..cfg.runs)
                    .map(|run| {
                        let seed = cfg.finetune_seed(ri, run);
                        let result = match &start {
                            Some(start) => run_cell(cfg, corpus, &vocab, start, ri, run),
                            None => Err(HarnessError::Config("pre-training failed".into())),
                        };
                        match result {
                            Ok(r) => {
                                log::info!(
                                    "row {row} {} run {run}: {:.1}",
                                    regime.name,
                                    r.score.unwrap_or(f64::NAN)
                                );
                                r
                            }
                            Err(e) => {
                                log::error!("row {row} {} run {run} failed: {e}", regime.name);
                                RunRecord {
                                    run,
                                    seed,
                                    score: None,
                                    per_lang: BTreeMap::new(),
                                    best_step: None,
                                    error: Some(e.to_string()),
                                }
                            }
                        }
                    })
                    .collect();
                cell_from_runs(&regime.name, runs)
            })
            .collect::<Vec<_>>();
        rows.push(RowReport {
            label: row.label(),
            row: row.clone(),
            pretrain: summary,
            error,
            aggregate: row_aggregate(&cells),
            cells,
        });
    }
    Ok(Report::from_rows(cfg.clone(), rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(score: f64, i: usize) -> RunRecord {
        RunRecord {
            run: i,
            seed: i as u64,
            score: Some(score),
            per_lang: BTreeMap::from([("en-xa".into(), score)]),
            best_step: Some(1),
            error: None,
        }
    }

    #[test]
    fn row_spec_parses() {
        let r: RowSpec = "nmt@0.1".parse().unwrap();
        assert_eq!(
            r,
            RowSpec {
                objective: "nmt".into(),
                parallel_ratio: 0.1
            }
        );
        assert_eq!(r.label(), "nmt@0.1");
        assert!("mlm@0".parse::<RowSpec>().unwrap().is_baseline());
        assert!("nmt".parse::<RowSpec>().is_err());
    }

    #[test]
    fn median_over_runs_is_reported() {
        let c = cell_from_runs(
            "few-shot",
            [10.0, 11.0, 12.0, 13.0, 14.0]
                .iter()
                .enumerate()
                .map(|(i, &s)| run(s, i))
                .collect(),
        );
        assert_eq!(c.median, Some(12.0));
        assert_eq!(c.per_lang["en-xa"], 12.0);
    }

    #[test]
    fn baseline_only_has_zero_deltas() {
        let cfg = ExperimentConfig {
            rows: vec!["mlm@0".parse().unwrap()],
            ..ExperimentConfig::default()
        };
        let cells: Vec<CellReport> = cfg
            .regimes
            .iter()
            .map(|r| cell_from_runs(&r.name, vec![run(7.5, 0)]))
            .collect();
        let row = RowReport {
            label: "mlm@0".into(),
            row: cfg.rows[0].clone(),
            pretrain: None,
            error: None,
            aggregate: row_aggregate(&cells),
            cells,
        };
        let rep = Report::from_rows(cfg, vec![row]);
        assert_eq!(rep.deltas.len(), 1);
        assert!(rep.deltas[0].cells.iter().all(|d| *d == Some(0.0)));
        assert_eq!(rep.deltas[0].aggregate, Some(0.0));
    }

    #[test]
    fn failed_runs_are_kept_and_excluded_from_medians() {
        let mut runs = vec![run(4.0, 0), run(6.0, 1)];
        runs.push(RunRecord {
            run: 2,
            seed: 2,
            score: None,
            per_lang: BTreeMap::new(),
            best_step: None,
            error: Some("boom".into()),
        });
        let c = cell_from_runs("low", runs);
        assert_eq!((c.median, c.failures()), (Some(5.0), 1));
        let missing = cell_from_runs(
            "high",
            vec![RunRecord {
                error: Some("x".into()),
                score: None,
                ..run(0.0, 0)
            }],
        );
        assert_eq!(row_aggregate(&[c, missing]), None);
    }

    #[test]
    fn default_config_is_valid_and_rejects_bad_values() {
        ExperimentConfig::default().validate().unwrap();
        let bad = ExperimentConfig {
            runs: 0,
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            rows: vec!["nmt@0.1".parse().unwrap()],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExperimentConfig {
            rows: vec!["mlm@0".parse().unwrap(), "mlm@0.2".parse().unwrap()],
            ..ExperimentConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
