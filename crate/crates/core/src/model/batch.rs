use super::params::ModelConfig;
use super::ModelError;
use crate::vocab::{TokenId, PAD};

/// Padded encoder/decoder batch. Row `r` occupies `[r·width, (r+1)·width)`
/// in each id/mask vector; masks are `true` on real positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub size: usize,
    pub enc_width: usize,
    pub dec_width: usize,
    pub enc_ids: Vec<TokenId>,
    pub enc_mask: Vec<bool>,
    /// Target shifted right by one with `PAD` as the start symbol.
    pub dec_in: Vec<TokenId>,
    pub dec_tgt: Vec<TokenId>,
    pub dec_mask: Vec<bool>,
}

impl Batch {
    pub fn from_pairs<'a, I>(pairs: I) -> Batch
    where
        I: IntoIterator<Item = (&'a [TokenId], &'a [TokenId])>,
    {
        let pairs: Vec<_> = pairs.into_iter().collect();
        let size = pairs.len();
        let enc_width = pairs.iter().map(|(i, _)| i.len()).max().unwrap_or(0);
        let dec_width = pairs.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut b = Batch {
            size,
            enc_width,
            dec_width,
            enc_ids: vec![PAD; size * enc_width],
            enc_mask: vec![false; size * enc_width],
            dec_in: vec![PAD; size * dec_width],
            dec_tgt: vec![PAD; size * dec_width],
            dec_mask: vec![false; size * dec_width],
        };
        for (r, (input, target)) in pairs.iter().enumerate() {
            let e = r * enc_width;
            b.enc_ids[e..e + input.len()].copy_from_slice(input);
            b.enc_mask[e..e + input.len()].fill(true);
            let d = r * dec_width;
            b.dec_tgt[d..d + target.len()].copy_from_slice(target);
            b.dec_mask[d..d + target.len()].fill(true);
            for t in 1..target.len() {
                b.dec_in[d + t] = target[t - 1];
            }
        }
        b
    }

    /// Same batch with extra padded columns on both sides.
    pub fn with_padding(&self, extra_enc: usize, extra_dec: usize) -> Batch {
        let widen = |v: &[TokenId], m: &[bool], w: usize, extra: usize| {
            let mut ids = Vec::with_capacity(self.size * (w + extra));
            let mut mask = Vec::with_capacity(self.size * (w + extra));
            for r in 0..self.size {
                ids.extend_from_slice(&v[r * w..(r + 1) * w]);
                ids.extend(std::iter::repeat(PAD).take(extra));
                mask.extend_from_slice(&m[r * w..(r + 1) * w]);
                mask.extend(std::iter::repeat(false).take(extra));
            }
            (ids, mask)
        };
        let (enc_ids, enc_mask) = widen(&self.enc_ids, &self.enc_mask, self.enc_width, extra_enc);
        let (dec_in, dec_mask) = widen(&self.dec_in, &self.dec_mask, self.dec_width, extra_dec);
        let (dec_tgt, _) = widen(&self.dec_tgt, &self.dec_mask, self.dec_width, extra_dec);
        Batch {
            size: self.size,
            enc_width: self.enc_width + extra_enc,
            dec_width: self.dec_width + extra_dec,
            enc_ids,
            enc_mask,
            dec_in,
            dec_tgt,
            dec_mask,
        }
    }

    /// Real (unpadded) input plus target tokens.
    pub fn token_count(&self) -> usize {
        self.enc_mask.iter().filter(|&&m| m).count() + self.dec_mask.iter().filter(|&&m| m).count()
    }

    /// Tokens including padding.
    pub fn padded_tokens(&self) -> usize {
        self.size * (self.enc_width + self.dec_width)
    }

    pub fn target_tokens(&self) -> usize {
        self.dec_mask.iter().filter(|&&m| m).count()
    }
}

/// Contiguous run of rows belonging to one example in a packed buffer.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Padding-free view of a batch: real positions concatenated row by row.
#[derive(Debug, Clone)]
pub(crate) struct Packed {
    pub enc_ids: Vec<usize>,
    pub enc_pos: Vec<usize>,
    pub enc_segs: Vec<Segment>,
    pub dec_ids: Vec<usize>,
    pub dec_pos: Vec<usize>,
    pub dec_tgt: Vec<usize>,
    pub dec_segs: Vec<Segment>,
}

fn prefix_len(mask: &[bool], what: &str, row: usize) -> Result<usize, ModelError> {
    let n = mask.iter().take_while(|&&m| m).count();
    if mask[n..].iter().any(|&m| m) {
        return Err(ModelError::InvalidMask(format!(
            "{what} mask of row {row} is not a prefix"
        )));
    }
    Ok(n)
}

impl Packed {
    pub fn new(b: &Batch, cfg: &ModelConfig) -> Result<Packed, ModelError> {
        let check_shape = |name: &str, len: usize, want: usize| {
            if len != want {
                return Err(ModelError::Shape(format!(
                    "{name} has {len} entries, expected {want}"
                )));
            }
            Ok(())
        };
        check_shape("enc_ids", b.enc_ids.len(), b.size * b.enc_width)?;
        check_shape("enc_mask", b.enc_mask.len(), b.size * b.enc_width)?;
        check_shape("dec_in", b.dec_in.len(), b.size * b.dec_width)?;
        check_shape("dec_tgt", b.dec_tgt.len(), b.size * b.dec_width)?;
        check_shape("dec_mask", b.dec_mask.len(), b.size * b.dec_width)?;

        let id = |t: TokenId| {
            if (t as usize) < cfg.vocab_size {
                Ok(t as usize)
            } else {
                Err(ModelError::TokenOutOfRange {
                    id: t,
                    vocab_size: cfg.vocab_size,
                })
            }
        };
        let mut p = Packed {
            enc_ids: Vec::new(),
            enc_pos: Vec::new(),
            enc_segs: Vec::with_capacity(b.size),
            dec_ids: Vec::new(),
            dec_pos: Vec::new(),
            dec_tgt: Vec::new(),
            dec_segs: Vec::with_capacity(b.size),
        };
        for r in 0..b.size {
            let e = r * b.enc_width..(r + 1) * b.enc_width;
            let ne = prefix_len(&b.enc_mask[e.clone()], "encoder", r)?;
            let d = r * b.dec_width..(r + 1) * b.dec_width;
            let nd = prefix_len(&b.dec_mask[d.clone()], "decoder", r)?;
            for (n, what) in [(ne, "encoder"), (nd, "decoder")] {
                if n > cfg.max_len {
                    return Err(ModelError::SequenceTooLong {
                        what,
                        len: n,
                        max_len: cfg.max_len,
                    });
                }
            }
            p.enc_segs.push(Segment {
                start: p.enc_ids.len(),
                len: ne,
            });
            for (t, &tok) in b.enc_ids[e.start..e.start + ne].iter().enumerate() {
                p.enc_ids.push(id(tok)?);
                p.enc_pos.push(t);
            }
            p.dec_segs.push(Segment {
                start: p.dec_ids.len(),
                len: nd,
            });
            for t in 0..nd {
                p.dec_ids.push(id(b.dec_in[d.start + t])?);
                p.dec_tgt.push(id(b.dec_tgt[d.start + t])?);
                p.dec_pos.push(t);
            }
        }
        if p.dec_ids.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        Ok(p)
    }
}
