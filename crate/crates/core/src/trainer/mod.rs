//! Pre-training and fine-tuning loops, token-count batching, checkpoint
//! persistence and validation-based checkpoint selection.

mod batching;
mod checkpoint;
mod finetune;
mod pretrain;

pub use batching::{make_batches, to_batch, BatchStats, MakeBatches, Packer, SeqPair, TaskExample};
pub use checkpoint::{
    load_checkpoint, read_manifest, save_checkpoint, Integrity, Manifest, TensorEntry, DATA_FILE,
    MANIFEST_FILE,
};
pub use finetune::{
    evaluate, finetune, score_predictions, EvalItem, EvalResult, FinetuneOutcome, ValPoint,
};
pub use pretrain::{checkpoint_dir_name, pretrain, ObjectiveMap, PretrainOptions, PretrainOutcome};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::MetricsError;
use crate::model::{init_model, AdamConfig, ModelConfig, ModelError, OptState, Params};
use crate::objectives::{NoiseSpec, ObjectiveError};
use crate::sampler::{MixtureSpec, SamplerError};
use crate::vocab::{Vocab, VocabLayout};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite value in {tensor} at step {step}")]
    NonFinite {
        step: u64,
        tensor: String,
        last_good: Option<Box<Checkpoint>>,
    },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("example stream ended after {0} steps")]
    StreamExhausted(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("tensor {tensor}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_tokens: usize,
    pub steps: u64,
    pub checkpoint_every: u64,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn pretrain_default() -> Self {
        TrainConfig {
            batch_tokens: 4096,
            steps: 2000,
            checkpoint_every: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    pub fn finetune_default() -> Self {
        TrainConfig {
            batch_tokens: 1024,
            steps: 500,
            checkpoint_every: 100,
            learning_rate: 1e-3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_tokens == 0 || self.steps == 0 || self.checkpoint_every == 0 {
            return Err(TrainError::Config(
                "batch_tokens, steps and checkpoint_every must be positive".into(),
            ));
        }
        if self.checkpoint_every > self.steps {
            return Err(TrainError::Config(format!(
                "checkpoint_every {} exceeds steps {}",
                self.checkpoint_every, self.steps
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

/// Provenance recorded with every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub stage: String,
    pub seed: u64,
    pub init_seed: Option<u64>,
    pub objective: Option<String>,
    pub mixture: Option<MixtureSpec>,
    pub noise: Option<NoiseSpec>,
    pub batch_tokens: usize,
    pub learning_rate: f64,
    pub threads: usize,
    pub parent: Option<String>,
}

impl RunManifest {
    pub fn new(stage: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            stage: stage.into(),
            seed,
            init_seed: None,
            objective: None,
            mixture: None,
            noise: None,
            batch_tokens: 0,
            learning_rate: 0.0,
            threads: rayon::current_num_threads(),
            parent: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub params: Params<f32>,
    pub opt: OptState<f32>,
    pub vocab: VocabLayout,
    pub run: RunManifest,
}

impl Checkpoint {
    /// A step-0 checkpoint around freshly initialised weights.
    pub fn initial(config: ModelConfig, vocab: &Vocab, init_seed: u64) -> Result<Self, TrainError> {
        if config.vocab_size != vocab.size() {
            return Err(TrainError::Config(format!(
                "model vocab_size {} does not match vocabulary size {}",
                config.vocab_size,
                vocab.size()
            )));
        }
        let params: Params<f32> = init_model(config, &mut crate::seeded_rng(init_seed))?;
        let opt = OptState::new(params.layout().clone(), AdamConfig::default());
        let mut run = RunManifest::new("init", init_seed);
        run.init_seed = Some(init_seed);
        Ok(Checkpoint {
            step: 0,
            params,
            opt,
            vocab: vocab.layout(),
            run,
        })
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.params.config()
    }

    pub fn vocab(&self) -> Result<Vocab, TrainError> {
        Vocab::from_layout(&self.vocab).map_err(|e| TrainError::Checkpoint(e.to_string()))
    }
}
