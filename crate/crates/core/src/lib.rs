//! A desk-scale laboratory for multilingual text-to-text pre-training with
//! parallel data.
//!
//! The crate is organised bottom-up:
//!
//! * [`vocab`]: byte-level tokenizer with sentinel and language-code tokens.
//! * [`corpus`]: monolingual / parallel records and their TSV formats.
//! * [`sampler`]: temperature-based language sampling and the mixed stream.
//! * [`objectives`]: MLM, TLM, NMT, Denoised-NMT and Denoised-NMT+LM.
//! * [`model`]: encoder-decoder transformer with hand-written gradients.
//! * [`trainer`]: token-count batching, pre-training, fine-tuning, checkpoints.
//! * [`metrics`]: EM, token F1, ROUGE-L, entity F1 and score aggregation.
//! * [`harness`]: cipher-language corpora, experiments and reports.

pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod sampler;
pub mod trainer;
pub mod vocab;

use rand::SeedableRng;

/// The generator used everywhere randomness is needed.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
