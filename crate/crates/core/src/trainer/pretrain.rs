use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc::sync_channel;
use std::sync::Arc;

use super::batching::{to_batch, BatchStats, Packer};
use super::checkpoint::save_checkpoint;
use super::{Checkpoint, RunManifest, TrainConfig, TrainError};
use crate::model::{adam_step, loss_and_grads, ModelError, OptState};
use crate::objectives::{Example, NoiseSpec, Objective, ObjectiveRegistry, TaskSource};
use crate::sampler::MixedStream;
use crate::vocab::Vocab;

/// Which objective turns each side of the mixture into examples.
#[derive(Clone)]
pub struct ObjectiveMap {
    pub mono: Arc<dyn Objective>,
    pub parallel: Option<Arc<dyn Objective>>,
}

impl std::fmt::Debug for ObjectiveMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObjectiveMap")
            .field("mono", &self.mono.name())
            .field("parallel", &self.parallel.as_ref().map(|o| o.name()))
            .finish()
    }
}

impl ObjectiveMap {
    /// `name` is the parallel objective; `"mlm"` means monolingual-only
    /// training and requires a zero parallel ratio.
    pub fn from_name(
        registry: &ObjectiveRegistry,
        name: &str,
        parallel_ratio: f64,
    ) -> Result<Self, TrainError> {
        let mono = registry.get("mlm")?;
        let chosen = registry.get(name)?;
        match chosen.source() {
            TaskSource::Monolingual if parallel_ratio > 0.0 => Err(TrainError::Config(format!(
                "objective {name:?} has no parallel form; use a parallel ratio of 0"
            ))),
            TaskSource::Monolingual => Ok(ObjectiveMap {
                mono,
                parallel: None,
            }),
            TaskSource::Parallel => Ok(ObjectiveMap {
                mono,
                parallel: Some(chosen),
            }),
        }
    }

    /// Name of the run's distinguishing objective.
    pub fn name(&self) -> &'static str {
        self.parallel
            .as_ref()
            .map_or(self.mono.name(), |p| p.name())
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    /// Continue from `start.step` by replaying and skipping that many batches,
    /// keeping the optimizer state. Otherwise a fresh run starts at step 0.
    pub resume: bool,
    pub checkpoint_dir: Option<PathBuf>,
    pub keep_checkpoints: bool,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            resume: false,
            checkpoint_dir: None,
            keep_checkpoints: true,
            prefetch: 4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub last: Checkpoint,
    /// Loss of each optimizer step taken in this call.
    pub losses: Vec<f64>,
    pub objective_counts: BTreeMap<String, u64>,
    pub batch_stats: BatchStats,
}

impl PretrainOutcome {
    pub fn parallel_fraction(&self) -> f64 {
        let total: u64 = self.objective_counts.values().sum();
        let mono = self.objective_counts.get("mlm").copied().unwrap_or(0);
        (total - mono) as f64 / total.max(1) as f64
    }
}

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("step-{step:06}")
}

type Prepared = Result<Vec<Example>, TrainError>;

fn produce(
    mut stream: MixedStream,
    objectives: &ObjectiveMap,
    noise: &NoiseSpec,
    vocab: &Vocab,
    seed: u64,
    batch_tokens: usize,
    max_len: usize,
    mut send: impl FnMut(Prepared) -> bool,
) -> BatchStats {
    let mut rng = crate::seeded_rng(seed);
    let mut packer = Packer::new(batch_tokens, max_len);
    loop {
        let Some(task) = stream.next() else {
            packer.flush();
            while let Some(b) = packer.pop() {
                if !send(Ok(b)) {
                    break;
                }
            }
            return packer.stats;
        };
        let objective = if task.is_parallel() {
            objectives.parallel.as_ref()
        } else {
            Some(&objectives.mono)
        };
        let Some(objective) = objective else {
            send(Err(TrainError::Config(
                "parallel task drawn but no parallel objective configured".into(),
            )));
            return packer.stats;
        };
        match objective.build(&task, vocab, noise, &mut rng) {
            Ok(Some(ex)) => packer.push(ex),
            Ok(None) => {}
            Err(e) => {
                send(Err(e.into()));
                return packer.stats;
            }
        }
        while let Some(b) = packer.pop() {
            if !send(Ok(b)) {
                return packer.stats;
            }
        }
    }
}

/// Multi-task pre-training over a mixed stream. Monolingual records become
/// `objectives.mono` examples and parallel ones `objectives.parallel`.
/// The stream must be freshly constructed: resuming replays it from the
/// start and skips the batches already trained on.
#[allow(clippy::too_many_arguments)]
pub fn pretrain(
    cfg: &TrainConfig,
    stream: MixedStream,
    objectives: &ObjectiveMap,
    noise: &NoiseSpec,
    vocab: &Vocab,
    start: &Checkpoint,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome, TrainError> {
    cfg.validate()?;
    noise.validate()?;
    let model_cfg = *start.model_config();
    if model_cfg.vocab_size != vocab.size() {
        return Err(TrainError::Config(format!(
            "model vocab_size {} does not match vocabulary size {}",
            model_cfg.vocab_size,
            vocab.size()
        )));
    }
    if stream.spec().parallel_ratio > 0.0 && objectives.parallel.is_none() {
        return Err(TrainError::Config(
            "parallel ratio is positive but no parallel objective is configured".into(),
        ));
    }
    let (first_step, mut opt) = if opts.resume {
        if start.step > cfg.steps {
            return Err(TrainError::Config(format!(
                "checkpoint step {} is past steps {}",
                start.step, cfg.steps
            )));
        }
        (start.step, start.opt.clone())
    } else {
        (0, OptState::new(start.params.layout().clone(), cfg.adam()))
    };
    opt.config.learning_rate = cfg.learning_rate;

    let mut run = RunManifest::new("pretrain", cfg.seed);
    run.init_seed = start.run.init_seed;
    run.objective = Some(objectives.name().to_string());
    run.mixture = Some(*stream.spec());
    run.noise = Some(*noise);
    run.batch_tokens = cfg.batch_tokens;
    run.learning_rate = cfg.learning_rate;
    run.parent = if opts.resume {
        start.run.parent.clone()
    } else {
        Some(format!("{}@{}", start.run.stage, start.step))
    };

    let mut params = start.params.clone();
    let mut last_good = start.clone();
    let mut checkpoints = Vec::new();
    let mut losses = Vec::new();
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    let max_len = model_cfg.max_len;

    let (result, batch_stats) = std::thread::scope(|s| {
        let (tx, rx) = sync_channel::<Prepared>(opts.prefetch.max(1));
        let producer = s.spawn(move || {
            produce(
                stream,
                objectives,
                noise,
                vocab,
                cfg.seed,
                cfg.batch_tokens,
                max_len,
                |b| tx.send(b).is_ok(),
            )
        });

        let result = (|| {
            for _ in 0..first_step {
                rx.recv().map_err(|_| TrainError::StreamExhausted(0))??;
            }
            for step in first_step + 1..=cfg.steps {
                let examples = rx
                    .recv()
                    .map_err(|_| TrainError::StreamExhausted(step - 1))??;
                let batch = to_batch(&examples);
                let (loss, grads) = match loss_and_grads(&params, &batch) {
                    Ok(r) => r,
                    Err(ModelError::NonFinite { tensor }) => {
                        log::error!("non-finite value in {tensor} at step {step}; last good checkpoint is step {}", last_good.step);
                        return Err(TrainError::NonFinite {
                            step,
                            tensor,
                            last_good: Some(Box::new(last_good.clone())),
                        });
                    }
                    Err(e) => return Err(e.into()),
                };
                adam_step(&mut params, &grads, &mut opt)?;
                if let Some(tensor) = params.first_non_finite() {
                    let tensor = tensor.to_string();
                    log::error!("non-finite value in {tensor} after step {step}");
                    return Err(TrainError::NonFinite {
                        step,
                        tensor,
                        last_good: Some(Box::new(last_good.clone())),
                    });
                }
                losses.push(loss as f64);
                for ex in &examples {
                    *counts.entry(ex.objective.name().to_string()).or_default() += 1;
                }
                if step % 100 == 0 {
                    log::info!("pretrain step {step}/{}: loss {loss:.4}", cfg.steps);
                }
                if step % cfg.checkpoint_every == 0 || step == cfg.steps {
                    let ck = Checkpoint {
                        step,
                        params: params.clone(),
                        opt: opt.clone(),
                        vocab: vocab.layout(),
                        run: run.clone(),
                    };
                    if step % cfg.checkpoint_every == 0 {
                        if let Some(dir) = &opts.checkpoint_dir {
                            save_checkpoint(&ck, dir.join(checkpoint_dir_name(step)))?;
                        }
                        if opts.keep_checkpoints {
                            checkpoints.push(ck.clone());
                        }
                    }
                    last_good = ck;
                }
            }
            Ok(())
        })();
        drop(rx);
        let stats = producer.join().expect("batch producer panicked");
        (result, stats)
    });
    result?;

    Ok(PretrainOutcome {
        checkpoints,
        last: last_good,
        losses,
        objective_counts: counts,
        batch_stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, ParallelPair};
    use crate::model::ModelConfig;
    use crate::sampler::MixtureSpec;

    fn corpus() -> (Vec<Document>, Vec<ParallelPair>) {
        let words = [
            "alpha", "beta", "gamma", "delta", "omega", "sigma", "kappa", "theta",
        ];
        let mut docs = Vec::new();
        let mut pairs = Vec::new();
        for i in 0..40 {
            let text: Vec<&str> = (0..4)
                .map(|j| words[(i * 3 + j * 5) % words.len()])
                .collect();
            let text = text.join(" ");
            let upper = text.to_uppercase();
            docs.push(Document::new("en", text.clone()));
            docs.push(Document::new("xx", upper.clone()));
            pairs.push(ParallelPair::new("en", "xx", text, upper));
        }
        (docs, pairs)
    }

    fn setup(ratio: f64, objective: &str) -> (Vocab, MixtureSpec, ObjectiveMap, Checkpoint) {
        let vocab = Vocab::new(&["en", "xx"], 8).unwrap();
        let mixture = MixtureSpec {
            parallel_ratio: ratio,
            seed: 5,
            ..MixtureSpec::default()
        };
        let objectives =
            ObjectiveMap::from_name(&ObjectiveRegistry::default(), objective, ratio).unwrap();
        let cfg = ModelConfig {
            max_len: 48,
            ..ModelConfig::tiny(vocab.size())
        };
        let start = Checkpoint::initial(cfg, &vocab, 11).unwrap();
        (vocab, mixture, objectives, start)
    }

    fn stream(mixture: MixtureSpec) -> MixedStream {
        let (docs, pairs) = corpus();
        MixedStream::from_records(docs, pairs, mixture).unwrap()
    }

    fn small_cfg(steps: u64, every: u64) -> TrainConfig {
        TrainConfig {
            batch_tokens: 256,
            steps,
            checkpoint_every: every,
            learning_rate: 3e-3,
            seed: 9,
        }
    }

    #[test]
    fn mlm_name_rejects_a_parallel_ratio() {
        let reg = ObjectiveRegistry::default();
        assert!(ObjectiveMap::from_name(&reg, "mlm", 0.1).is_err());
        assert!(ObjectiveMap::from_name(&reg, "mlm", 0.0)
            .unwrap()
            .parallel
            .is_none());
        assert_eq!(
            ObjectiveMap::from_name(&reg, "dnmt-lm", 0.5)
                .unwrap()
                .name(),
            "dnmt-lm"
        );
    }

    #[test]
    fn checkpoint_count_and_determinism() {
        let (vocab, mixture, objectives, start) = setup(0.3, "nmt");
        let cfg = small_cfg(25, 10);
        let noise = NoiseSpec::default();
        let opts = PretrainOptions::default();
        let a = pretrain(
            &cfg,
            stream(mixture),
            &objectives,
            &noise,
            &vocab,
            &start,
            &opts,
        )
        .unwrap();
        let b = pretrain(
            &cfg,
            stream(mixture),
            &objectives,
            &noise,
            &vocab,
            &start,
            &opts,
        )
        .unwrap();
        assert_eq!(a.checkpoints.len(), 2);
        assert_eq!(
            a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(),
            [10, 20]
        );
        assert_eq!(a.last.step, 25);
        assert_eq!(a.losses, b.losses);
        assert!(a.last.params.bitwise_eq(&b.last.params));
        assert!(a.objective_counts.contains_key("nmt") && a.objective_counts.contains_key("mlm"));
        assert_eq!(a.last.run.objective.as_deref(), Some("nmt"));
    }

    #[test]
    fn resume_continues_the_trajectory() {
        let (vocab, mixture, objectives, start) = setup(0.5, "tlm");
        let noise = NoiseSpec::default();
        let full = pretrain(
            &small_cfg(30, 10),
            stream(mixture),
            &objectives,
            &noise,
            &vocab,
            &start,
            &PretrainOptions::default(),
        )
        .unwrap();
        let mid = &full.checkpoints[1];
        assert_eq!(mid.step, 20);
        let opts = PretrainOptions {
            resume: true,
            ..PretrainOptions::default()
        };
        let rest = pretrain(
            &small_cfg(30, 10),
            stream(mixture),
            &objectives,
            &noise,
            &vocab,
            mid,
            &opts,
        )
        .unwrap();
        assert_eq!(rest.losses.len(), 10);
        for (a, b) in full.losses[20..].iter().zip(&rest.losses) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
        assert!(rest.last.params.bitwise_eq(&full.last.params));
    }

    #[test]
    fn checkpoints_are_written_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (vocab, mixture, objectives, start) = setup(0.0, "mlm");
        let opts = PretrainOptions {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            keep_checkpoints: false,
            ..PretrainOptions::default()
        };
        let out = pretrain(
            &small_cfg(6, 3),
            stream(mixture),
            &objectives,
            &NoiseSpec::default(),
            &vocab,
            &start,
            &opts,
        )
        .unwrap();
        assert!(out.checkpoints.is_empty());
        assert_eq!(out.parallel_fraction(), 0.0);
        let (back, _) = super::super::load_checkpoint(dir.path().join("step-000006")).unwrap();
        assert!(back.params.bitwise_eq(&out.last.params));
        assert!(dir
            .path()
            .join("step-000003")
            .join("manifest.json")
            .exists());
    }

    #[test]
    fn non_finite_weights_abort_with_last_good() {
        let (vocab, mixture, objectives, mut start) = setup(0.0, "mlm");
        start.params.get_mut("enc.0.ff.w1").unwrap()[3] = f32::NAN;
        match pretrain(
            &small_cfg(5, 5),
            stream(mixture),
            &objectives,
            &NoiseSpec::default(),
            &vocab,
            &start,
            &PretrainOptions::default(),
        ) {
            Err(TrainError::NonFinite {
                step,
                tensor,
                last_good,
            }) => {
                assert_eq!((step, tensor.as_str()), (1, "enc.0.ff.w1"));
                assert_eq!(last_good.unwrap().step, 0);
            }
            other => panic!("{other:?}"),
        }
    }
}
