//! Encoder-decoder transformer with hand-written forward and backward
//! passes, Adam, and greedy decoding.
//!
//! Pre-norm blocks (RMS norm with a `1 + gain` scale), GELU feed-forward,
//! learned absolute positions and a token embedding shared by both stacks
//! and the output projection. No biases, no dropout.

mod adam;
mod batch;
mod decode;
mod float;
mod gradcheck;
mod ops;
mod params;
mod transformer;

pub use adam::{adam_step, AdamConfig, OptState};
pub use batch::Batch;
pub use decode::{greedy_decode, greedy_decode_all};
pub use float::{matmul, Float};
pub use gradcheck::{finite_diff_check, relative_error, GradCheck, REL_ERROR_FLOOR};
pub use params::{init_model, Layout, ModelConfig, Params, TensorSpec};
pub use transformer::{forward, loss_and_grads, ForwardOutput};

use thiserror::Error;

use crate::vocab::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} outside vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: TokenId, vocab_size: usize },
    #[error("{what} sequence of length {len} exceeds max_len {max_len}")]
    SequenceTooLong {
        what: &'static str,
        len: usize,
        max_len: usize,
    },
    #[error("invalid mask: {0}")]
    InvalidMask(String),
    #[error("batch has no target tokens")]
    EmptyBatch,
    #[error("non-finite values in {tensor}")]
    NonFinite { tensor: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Share of real target positions where the argmax prediction is correct.
pub fn token_accuracy<T: Float>(p: &Params<T>, b: &Batch) -> Result<f64, ModelError> {
    let out = forward(p, b)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for r in 0..b.size {
        let mut t = 0;
        while let Some(row) = out.logits_at(r, t) {
            let best = (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best });
            correct += usize::from(best == b.dec_tgt[r * b.dec_width + t] as usize);
            total += 1;
            t += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{EOS, PAD};
    use crate::{seeded_rng, Rng};
    use rand::Rng as _;

    fn random_seq(rng: &mut Rng, len: usize, vocab: usize) -> Vec<TokenId> {
        (0..len)
            .map(|_| rng.gen_range(3..vocab as TokenId))
            .collect()
    }

    fn random_batch(rng: &mut Rng, size: usize, max_len: usize, vocab: usize) -> Batch {
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..size)
            .map(|_| {
                let a = rng.gen_range(1..=max_len);
                let b = rng.gen_range(1..=max_len);
                (random_seq(rng, a, vocab), random_seq(rng, b, vocab))
            })
            .collect();
        Batch::from_pairs(pairs.iter().map(|(a, b)| (&a[..], &b[..])))
    }

    /// Tiny model with non-zero norm gains so their gradients are exercised.
    fn tiny(seed: u64, vocab: usize) -> Params<f64> {
        let mut rng = seeded_rng(seed);
        let mut p: Params<f64> = init_model(ModelConfig::tiny(vocab), &mut rng).unwrap();
        let layout = p.layout().clone();
        for t in layout.tensors().iter().filter(|t| t.shape.len() == 1) {
            for x in p.tensor_mut(layout.index_of(&t.name).unwrap()) {
                *x = rng.gen_range(-0.3..0.3);
            }
        }
        p
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..5 {
            let p = tiny(seed, 23);
            let b = random_batch(&mut seeded_rng(100 + seed), 3, 6, 23);
            let check = finite_diff_check(&p, &b, 1e-5, 256, seed).unwrap();
            assert!(check.coords >= 200);
            assert!(check.max_rel_error < 1e-4, "seed {seed}: {check:?}");
        }
    }

    #[test]
    fn gradient_check_is_reproducible_and_degrades_with_large_eps() {
        let p = tiny(9, 23);
        let b = random_batch(&mut seeded_rng(9), 2, 5, 23);
        let a = finite_diff_check(&p, &b, 1e-5, 200, 4).unwrap();
        let again = finite_diff_check(&p, &b, 1e-5, 200, 4).unwrap();
        assert_eq!(a, again);
        let coarse = finite_diff_check(&p, &b, 1e-1, 200, 4).unwrap();
        assert!(
            coarse.max_rel_error > 10.0 * a.max_rel_error,
            "{coarse:?} vs {a:?}"
        );
    }

    #[test]
    fn unused_position_slots_get_zero_gradient() {
        let p = tiny(1, 23);
        let b = random_batch(&mut seeded_rng(1), 2, 4, 23);
        let (_, g) = loss_and_grads(&p, &b).unwrap();
        let d = p.config().d_model;
        for name in ["enc_pos", "dec_pos"] {
            let t = g.get(name).unwrap();
            assert!(t[4 * d..].iter().all(|&x| x == 0.0), "{name}");
            assert!(t[..d].iter().any(|&x| x != 0.0), "{name}");
        }
    }

    #[test]
    fn initial_loss_is_close_to_uniform() {
        let p: Params<f32> = init_model(ModelConfig::desk(360), &mut seeded_rng(0)).unwrap();
        let b = random_batch(&mut seeded_rng(0), 8, 40, 360);
        let loss = forward(&p, &b).unwrap().loss as f64;
        let uniform = (360f64).ln();
        assert!((5.3..=6.5).contains(&loss), "{loss}");
        assert!((loss - uniform).abs() / uniform < 0.10);
    }

    #[test]
    fn batch_order_and_duplication_do_not_change_losses() {
        let p = tiny(3, 30);
        let mut rng = seeded_rng(3);
        let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..4)
            .map(|i| {
                (
                    random_seq(&mut rng, 3 + i, 30),
                    random_seq(&mut rng, 2 + i, 30),
                )
            })
            .collect();
        let fwd = Batch::from_pairs(pairs.iter().map(|(a, b)| (&a[..], &b[..])));
        let rev = Batch::from_pairs(pairs.iter().rev().map(|(a, b)| (&a[..], &b[..])));
        let (of, or) = (forward(&p, &fwd).unwrap(), forward(&p, &rev).unwrap());
        for i in 0..4 {
            assert!((of.example_losses[i] - or.example_losses[3 - i]).abs() < 1e-12);
        }
        let twice = Batch::from_pairs(pairs.iter().chain(&pairs).map(|(a, b)| (&a[..], &b[..])));
        assert!((forward(&p, &twice).unwrap().loss - of.loss).abs() < 1e-12);
    }

    #[test]
    fn masked_rows_contribute_nothing() {
        let p = tiny(4, 30);
        let a: Vec<TokenId> = vec![5, 6, 7];
        let t: Vec<TokenId> = vec![8, 9];
        let empty: Vec<TokenId> = vec![];
        let one = forward(&p, &Batch::from_pairs([(&a[..], &t[..])])).unwrap();
        let with_empty = forward(
            &p,
            &Batch::from_pairs([(&a[..], &t[..]), (&a[..], &empty[..])]),
        )
        .unwrap();
        assert!((one.loss - with_empty.loss).abs() < 1e-12);
        assert_eq!(with_empty.example_losses[1], 0.0);
        assert!(matches!(
            forward(&p, &Batch::from_pairs([(&a[..], &empty[..])])),
            Err(ModelError::EmptyBatch)
        ));
    }

    #[test]
    fn decoder_is_causal() {
        let p = tiny(5, 30);
        let mut rng = seeded_rng(5);
        let src = random_seq(&mut rng, 5, 30);
        let tgt = random_seq(&mut rng, 7, 30);
        let base = forward(&p, &Batch::from_pairs([(&src[..], &tgt[..])])).unwrap();
        for t in 1..7 {
            let mut b = Batch::from_pairs([(&src[..], &tgt[..])]);
            b.dec_in[t] = (b.dec_in[t] + 1) % 30;
            let out = forward(&p, &b).unwrap();
            for s in 0..t {
                assert_eq!(
                    out.logits_at(0, s),
                    base.logits_at(0, s),
                    "position {s} after change at {t}"
                );
            }
            assert_ne!(out.logits_at(0, t), base.logits_at(0, t));
        }
    }

    #[test]
    fn padding_does_not_change_real_logits() {
        let p: Params<f32> = init_model(ModelConfig::desk(64), &mut seeded_rng(6)).unwrap();
        let b = random_batch(&mut seeded_rng(6), 4, 20, 64);
        let base = forward(&p, &b).unwrap();
        let padded = forward(&p, &b.with_padding(7, 5)).unwrap();
        for r in 0..b.size {
            let mut t = 0;
            while let Some(x) = base.logits_at(r, t) {
                let y = padded.logits_at(r, t).unwrap();
                assert!(x.iter().zip(y).all(|(a, b)| (a - b).abs() <= 1e-6));
                t += 1;
            }
        }
    }

    #[test]
    fn rejects_out_of_range_tokens() {
        let p = tiny(0, 10);
        let a: Vec<TokenId> = vec![3, 12];
        let t: Vec<TokenId> = vec![4];
        assert!(matches!(
            forward(&p, &Batch::from_pairs([(&a[..], &t[..])])),
            Err(ModelError::TokenOutOfRange {
                id: 12,
                vocab_size: 10
            })
        ));
        assert!(greedy_decode(&p, &a, 5).is_err());
    }

    #[test]
    fn non_finite_parameters_are_named() {
        let mut p = tiny(0, 10);
        p.get_mut("dec.0.ff.w1").unwrap()[3] = f64::NAN;
        let a: Vec<TokenId> = vec![3, 4];
        let err = loss_and_grads(&p, &Batch::from_pairs([(&a[..], &a[..])])).unwrap_err();
        assert!(
            matches!(err, ModelError::NonFinite { ref tensor } if tensor == "dec.0.ff.w1"),
            "{err}"
        );
    }

    #[test]
    fn forced_eos_gives_empty_output() {
        let layout = std::sync::Arc::new(Layout::new(ModelConfig::tiny(12)).unwrap());
        let mut p: Params<f32> = Params::zeros(layout);
        let d = p.config().d_model;
        p.get_mut("tok_emb").unwrap()[EOS as usize * d] = 1.0;
        for row in p.get_mut("dec_pos").unwrap().chunks_mut(d) {
            row[0] = 10.0;
        }
        assert_eq!(
            greedy_decode(&p, &[3, 4, 5], 10).unwrap(),
            Vec::<TokenId>::new()
        );
    }

    #[test]
    fn cached_decoding_agrees_with_teacher_forcing() {
        let p: Params<f32> = init_model(ModelConfig::desk(40), &mut seeded_rng(8)).unwrap();
        let src = random_seq(&mut seeded_rng(8), 9, 40);
        let out = greedy_decode(&p, &src, 12).unwrap();
        assert_eq!(out, greedy_decode(&p, &src, 12).unwrap());
        assert!(!out.is_empty());
        let fwd = forward(&p, &Batch::from_pairs([(&src[..], &out[..])])).unwrap();
        for (t, &tok) in out.iter().enumerate() {
            let row = fwd.logits_at(0, t).unwrap();
            assert_eq!(ops::argmax(row), tok as usize, "step {t}");
        }
        let many = greedy_decode_all(&p, &[src.clone(), src[..4].to_vec()], 12).unwrap();
        assert_eq!(many[0], out);
    }

    #[test]
    fn overfits_a_single_pair() {
        let vocab = 50;
        let mut p: Params<f32> = init_model(ModelConfig::desk(vocab), &mut seeded_rng(11)).unwrap();
        let src = random_seq(&mut seeded_rng(11), 10, vocab);
        let mut tgt = random_seq(&mut seeded_rng(12), 8, vocab);
        tgt.push(EOS);
        let b = Batch::from_pairs([(&src[..], &tgt[..])]);
        let mut st = OptState::new(p.layout().clone(), AdamConfig::default());
        let first = forward(&p, &b).unwrap().loss;
        for _ in 0..150 {
            let (_, g) = loss_and_grads(&p, &b).unwrap();
            adam_step(&mut p, &g, &mut st).unwrap();
        }
        assert!(forward(&p, &b).unwrap().loss < 0.5 * first);
        assert_eq!(token_accuracy(&p, &b).unwrap(), 1.0);
        assert_eq!(greedy_decode(&p, &src, 20).unwrap(), tgt[..tgt.len() - 1]);
        assert_ne!(tgt[0], PAD);
    }
}
