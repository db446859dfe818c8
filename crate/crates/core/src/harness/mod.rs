//! Synthetic cipher-language corpora, experiment orchestration and report
//! rendering.

mod cipher;
mod data;
mod experiment;
mod report;
mod settings;

pub use cipher::{
    gen_cipher_corpus, pseudo_words, Cipher, CipherCorpus, CipherSpec, CorpusSizes, DerivedLang,
    OracleTranslator, TaskRecord, TaskSplits, WordOrder,
};
pub use data::{
    eval_items, few_shot_subsample, read_corpus, read_task, task_examples, task_input,
    write_corpus, write_task, CIPHER_FILE, MONO_FILE, PARALLEL_FILE, TASK_TEST_FILE,
    TASK_TRAIN_FILE, TASK_VALID_FILE,
};
pub use experiment::{
    corpus_vocab, pretrain_row, regime_data, run_cell, run_experiment, CellReport, DeltaRow,
    ExperimentConfig, PretrainSummary, RegimeSpec, Report, RowReport, RowSpec, RunRecord,
};
pub use report::{
    fmt1, parse_report_tsv, render_lang_scores, render_report, round1, Rendered, TsvTable,
};
pub use settings::{parse_settings, read_settings_file, Settings, KEYS, REGIME_KEYS};

use std::path::PathBuf;

use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::objectives::ObjectiveError;
use crate::sampler::SamplerError;
use crate::trainer::TrainError;
use crate::vocab::VocabError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    Config(String),
    #[error("requested {requested} distinct sentences but the word list only allows {capacity}")]
    Capacity { requested: u64, capacity: u64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Train(#[from] TrainError),
}
