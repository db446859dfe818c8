use rayon::prelude::*;

use super::batch::Segment;
use super::float::{matmul, Float};
use super::ops::{argmax, attention, gelu, linear, rms_norm};
use super::params::Params;
use super::transformer::Ctx;
use super::ModelError;
use crate::vocab::{TokenId, TokenSeq, EOS, PAD};

/// Greedy decoding with cached self-attention keys and values. Stops at
/// EOS (not included in the output) or after `max_len` tokens.
pub fn greedy_decode<T: Float>(
    p: &Params<T>,
    input: &[TokenId],
    max_len: usize,
) -> Result<TokenSeq, ModelError> {
    let cfg = *p.config();
    if input.len() > cfg.max_len {
        return Err(ModelError::SequenceTooLong {
            what: "encoder",
            len: input.len(),
            max_len: cfg.max_len,
        });
    }
    let ids = input
        .iter()
        .map(|&t| {
            if (t as usize) < cfg.vocab_size {
                Ok(t as usize)
            } else {
                Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab_size: cfg.vocab_size,
                })
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    let cx = Ctx::new(p);
    let lids = &p.layout().ids;
    let (d, f, vocab) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let n = ids.len();
    let pos: Vec<usize> = (0..n).collect();
    let enc_seg = [Segment { start: 0, len: n }];
    let mem = cx.encode(&ids, &pos, &enc_seg);
    let cross_kv: Vec<(Vec<T>, Vec<T>)> = lids
        .dec
        .iter()
        .map(|l| {
            (
                linear(&mem, p.tensor(l.cross.k), n, d, d),
                linear(&mem, p.tensor(l.cross.v), n, d, d),
            )
        })
        .collect();
    let mut self_kv: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); lids.dec.len()];

    let q_seg = [Segment { start: 0, len: 1 }];
    let mut out = Vec::new();
    let mut prev = PAD as usize;
    let mut logits = vec![T::zero(); vocab];
    for t in 0..max_len.min(cfg.max_len) {
        let mut x = cx.embed(&[prev], &[t], lids.dec_pos);
        for (l, ((sk, sv), (ck, cv))) in lids.dec.iter().zip(self_kv.iter_mut().zip(&cross_kv)) {
            let (n1, _) = rms_norm(&x, p.tensor(l.ln1), d);
            let q = linear(&n1, p.tensor(l.self_attn.q), 1, d, d);
            sk.extend(linear(&n1, p.tensor(l.self_attn.k), 1, d, d));
            sv.extend(linear(&n1, p.tensor(l.self_attn.v), 1, d, d));
            let k_seg = [Segment {
                start: 0,
                len: t + 1,
            }];
            let (ctx, _) = attention(&q, sk, sv, &q_seg, &k_seg, cx.heads, false);
            matmul(
                1,
                d,
                d,
                &ctx,
                false,
                p.tensor(l.self_attn.o),
                false,
                &mut x,
                true,
            );

            let (nc, _) = rms_norm(&x, p.tensor(l.ln_cross), d);
            let cq = linear(&nc, p.tensor(l.cross.q), 1, d, d);
            let (cctx, _) = attention(&cq, ck, cv, &q_seg, &enc_seg, cx.heads, false);
            matmul(
                1,
                d,
                d,
                &cctx,
                false,
                p.tensor(l.cross.o),
                false,
                &mut x,
                true,
            );

            let (n2, _) = rms_norm(&x, p.tensor(l.ln2), d);
            let h: Vec<T> = linear(&n2, p.tensor(l.w1), 1, d, f)
                .into_iter()
                .map(gelu)
                .collect();
            matmul(1, f, d, &h, false, p.tensor(l.w2), false, &mut x, true);
        }
        let (z, _) = rms_norm(&x, p.tensor(lids.dec_final), d);
        matmul(
            1,
            d,
            vocab,
            &z,
            false,
            p.tensor(lids.tok_emb),
            true,
            &mut logits,
            false,
        );
        let next = argmax(&logits);
        if next == EOS as usize {
            break;
        }
        out.push(next as TokenId);
        prev = next;
    }
    Ok(out)
}

/// [`greedy_decode`] over many inputs; results keep input order.
pub fn greedy_decode_all<T: Float>(
    p: &Params<T>,
    inputs: &[TokenSeq],
    max_len: usize,
) -> Result<Vec<TokenSeq>, ModelError> {
    inputs
        .par_iter()
        .map(|x| greedy_decode(p, x, max_len))
        .collect()
}
