use super::batch::{Batch, Packed, Segment};
use super::float::{matmul, Float};
use super::ops::{
    attention, attention_backward, gelu_grad, gelu_tanh, gelu_with_tanh, linear, linear_backward,
    log_sum_exp, rms_norm, rms_norm_backward, Heads,
};
use super::params::{AttnIds, DecLayerIds, EncLayerIds, Params};
use super::ModelError;

/// Forward result over the real (unpadded) decoder positions.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `[target_tokens, vocab_size]`, rows in batch-row then position order.
    pub logits: Vec<T>,
    /// Offset and length of each batch row inside `logits`.
    pub rows: Vec<(usize, usize)>,
    /// Mean token loss of each batch row; zero for rows with no targets.
    pub example_losses: Vec<T>,
    /// Mean token loss over the whole batch.
    pub loss: T,
    pub vocab_size: usize,
}

impl<T: Float> ForwardOutput<T> {
    /// Logits of batch row `row` at decoder position `t`, if that
    /// position is real.
    pub fn logits_at(&self, row: usize, t: usize) -> Option<&[T]> {
        let (start, len) = *self.rows.get(row)?;
        (t < len)
            .then(|| &self.logits[(start + t) * self.vocab_size..(start + t + 1) * self.vocab_size])
    }

    pub fn target_tokens(&self) -> usize {
        self.logits.len() / self.vocab_size
    }
}

struct AttnCache<T> {
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

struct FfCache<T> {
    x: Vec<T>,
    n: Vec<T>,
    inv: Vec<T>,
    u: Vec<T>,
    tanh: Vec<T>,
    h: Vec<T>,
}

struct EncCache<T> {
    x: Vec<T>,
    n1: Vec<T>,
    inv1: Vec<T>,
    att: AttnCache<T>,
    ff: FfCache<T>,
}

struct DecCache<T> {
    x: Vec<T>,
    n1: Vec<T>,
    inv1: Vec<T>,
    att: AttnCache<T>,
    xa: Vec<T>,
    nc: Vec<T>,
    invc: Vec<T>,
    cross: AttnCache<T>,
    ff: FfCache<T>,
}

pub(crate) struct Ctx<'a, T> {
    pub p: &'a Params<T>,
    pub d: usize,
    pub heads: Heads,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(p: &'a Params<T>) -> Self {
        let cfg = p.config();
        Ctx {
            p,
            d: cfg.d_model,
            heads: Heads {
                count: cfg.num_heads,
                dim: cfg.head_dim(),
            },
        }
    }

    pub fn embed(&self, ids: &[usize], pos: &[usize], pos_tensor: usize) -> Vec<T> {
        let d = self.d;
        let emb = self.p.tensor(self.p.layout().ids.tok_emb);
        let pe = self.p.tensor(pos_tensor);
        let mut h = vec![T::zero(); ids.len() * d];
        for (r, (&id, &t)) in ids.iter().zip(pos).enumerate() {
            for j in 0..d {
                h[r * d + j] = emb[id * d + j] + pe[t * d + j];
            }
        }
        h
    }

    /// `x + FF(norm(x))`.
    fn feed_forward(&self, x: Vec<T>, ln: usize, w1: usize, w2: usize) -> (Vec<T>, FfCache<T>) {
        let (d, f) = (self.d, self.p.config().d_ff);
        let rows = x.len() / d;
        let (n, inv) = rms_norm(&x, self.p.tensor(ln), d);
        let u = linear(&n, self.p.tensor(w1), rows, d, f);
        let tanh: Vec<T> = u.iter().map(|&v| gelu_tanh(v)).collect();
        let h: Vec<T> = u
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| gelu_with_tanh(v, t))
            .collect();
        let mut out = x.clone();
        matmul(
            rows,
            f,
            d,
            &h,
            false,
            self.p.tensor(w2),
            false,
            &mut out,
            true,
        );
        (
            out,
            FfCache {
                x,
                n,
                inv,
                u,
                tanh,
                h,
            },
        )
    }

    fn attend(
        &self,
        xq: &[T],
        xkv: &[T],
        ids: AttnIds,
        qsegs: &[Segment],
        ksegs: &[Segment],
        causal: bool,
    ) -> (Vec<T>, AttnCache<T>) {
        let d = self.d;
        let (nq, nk) = (xq.len() / d, xkv.len() / d);
        let q = linear(xq, self.p.tensor(ids.q), nq, d, d);
        let k = linear(xkv, self.p.tensor(ids.k), nk, d, d);
        let v = linear(xkv, self.p.tensor(ids.v), nk, d, d);
        let (ctx, probs) = attention(&q, &k, &v, qsegs, ksegs, self.heads, causal);
        let out = linear(&ctx, self.p.tensor(ids.o), nq, d, d);
        (
            out,
            AttnCache {
                q,
                k,
                v,
                probs,
                ctx,
            },
        )
    }

    fn enc_layer(&self, x: Vec<T>, l: &EncLayerIds, segs: &[Segment]) -> (Vec<T>, EncCache<T>) {
        let (n1, inv1) = rms_norm(&x, self.p.tensor(l.ln1), self.d);
        let (a, att) = self.attend(&n1, &n1, l.attn, segs, segs, false);
        let x2: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (out, ff) = self.feed_forward(x2, l.ln2, l.w1, l.w2);
        (
            out,
            EncCache {
                x,
                n1,
                inv1,
                att,
                ff,
            },
        )
    }

    fn dec_layer(
        &self,
        x: Vec<T>,
        mem: &[T],
        l: &DecLayerIds,
        dsegs: &[Segment],
        esegs: &[Segment],
    ) -> (Vec<T>, DecCache<T>) {
        let (n1, inv1) = rms_norm(&x, self.p.tensor(l.ln1), self.d);
        let (a, att) = self.attend(&n1, &n1, l.self_attn, dsegs, dsegs, true);
        let xa: Vec<T> = x.iter().zip(&a).map(|(&u, &v)| u + v).collect();
        let (nc, invc) = rms_norm(&xa, self.p.tensor(l.ln_cross), self.d);
        let (c, cross) = self.attend(&nc, mem, l.cross, dsegs, esegs, false);
        let xb: Vec<T> = xa.iter().zip(&c).map(|(&u, &v)| u + v).collect();
        let (out, ff) = self.feed_forward(xb, l.ln2, l.w1, l.w2);
        (
            out,
            DecCache {
                x,
                n1,
                inv1,
                att,
                xa,
                nc,
                invc,
                cross,
                ff,
            },
        )
    }

    /// Encoder stack output (after the final norm).
    pub fn encode(&self, ids: &[usize], pos: &[usize], segs: &[Segment]) -> Vec<T> {
        let lids = &self.p.layout().ids;
        let mut h = self.embed(ids, pos, lids.enc_pos);
        for l in &lids.enc {
            h = self.enc_layer(h, l, segs).0;
        }
        rms_norm(&h, self.p.tensor(lids.enc_final), self.d).0
    }
}

struct Grads<'g, T> {
    g: &'g mut Params<T>,
}

impl<T: Float> Grads<'_, T> {
    fn t(&mut self, id: usize) -> &mut [T] {
        self.g.tensor_mut(id)
    }
}

impl<T: Float> Ctx<'_, T> {
    fn feed_forward_backward(
        &self,
        dout: &[T],
        c: &FfCache<T>,
        ln: usize,
        w1: usize,
        w2: usize,
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let (d, f) = (self.d, self.p.config().d_ff);
        let rows = dout.len() / d;
        let mut dx = dout.to_vec();
        let mut dh = vec![T::zero(); rows * f];
        linear_backward(dout, &c.h, self.p.tensor(w2), rows, f, d, &mut dh, g.t(w2));
        let du: Vec<T> = dh
            .iter()
            .zip(c.u.iter().zip(&c.tanh))
            .map(|(&a, (&u, &t))| a * gelu_grad(u, t))
            .collect();
        let mut dn = vec![T::zero(); rows * d];
        linear_backward(&du, &c.n, self.p.tensor(w1), rows, d, f, &mut dn, g.t(w1));
        rms_norm_backward(&dn, &c.x, &c.inv, self.p.tensor(ln), d, &mut dx, g.t(ln));
        dx
    }

    /// Backward of [`Ctx::attend`]: accumulates into `dxq` and `dxkv`.
    #[allow(clippy::too_many_arguments)]
    fn attend_backward(
        &self,
        dout: &[T],
        xq: &[T],
        xkv: &[T],
        c: &AttnCache<T>,
        ids: AttnIds,
        qsegs: &[Segment],
        ksegs: &[Segment],
        dxq: &mut [T],
        dxkv: &mut [T],
        g: &mut Grads<T>,
    ) {
        let d = self.d;
        let (nq, nk) = (xq.len() / d, xkv.len() / d);
        let mut dctx = vec![T::zero(); nq * d];
        linear_backward(
            dout,
            &c.ctx,
            self.p.tensor(ids.o),
            nq,
            d,
            d,
            &mut dctx,
            g.t(ids.o),
        );
        let (dq, dk, dv) =
            attention_backward(&dctx, &c.q, &c.k, &c.v, &c.probs, qsegs, ksegs, self.heads);
        linear_backward(&dq, xq, self.p.tensor(ids.q), nq, d, d, dxq, g.t(ids.q));
        linear_backward(&dk, xkv, self.p.tensor(ids.k), nk, d, d, dxkv, g.t(ids.k));
        linear_backward(&dv, xkv, self.p.tensor(ids.v), nk, d, d, dxkv, g.t(ids.v));
    }

    fn enc_layer_backward(
        &self,
        dout: &[T],
        c: &EncCache<T>,
        l: &EncLayerIds,
        segs: &[Segment],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let d = self.d;
        let dx2 = self.feed_forward_backward(dout, &c.ff, l.ln2, l.w1, l.w2, g);
        let mut dn1 = vec![T::zero(); c.n1.len()];
        let mut dn1_kv = vec![T::zero(); c.n1.len()];
        self.attend_backward(
            &dx2,
            &c.n1,
            &c.n1,
            &c.att,
            l.attn,
            segs,
            segs,
            &mut dn1,
            &mut dn1_kv,
            g,
        );
        dn1.iter_mut().zip(&dn1_kv).for_each(|(a, &b)| *a += b);
        let mut dx = dx2;
        rms_norm_backward(
            &dn1,
            &c.x,
            &c.inv1,
            self.p.tensor(l.ln1),
            d,
            &mut dx,
            g.t(l.ln1),
        );
        dx
    }

    #[allow(clippy::too_many_arguments)]
    fn dec_layer_backward(
        &self,
        dout: &[T],
        c: &DecCache<T>,
        mem: &[T],
        l: &DecLayerIds,
        dsegs: &[Segment],
        esegs: &[Segment],
        dmem: &mut [T],
        g: &mut Grads<T>,
    ) -> Vec<T> {
        let d = self.d;
        let dxb = self.feed_forward_backward(dout, &c.ff, l.ln2, l.w1, l.w2, g);
        let mut dnc = vec![T::zero(); c.nc.len()];
        self.attend_backward(
            &dxb, &c.nc, mem, &c.cross, l.cross, dsegs, esegs, &mut dnc, dmem, g,
        );
        let mut dxa = dxb;
        rms_norm_backward(
            &dnc,
            &c.xa,
            &c.invc,
            self.p.tensor(l.ln_cross),
            d,
            &mut dxa,
            g.t(l.ln_cross),
        );
        let mut dn1 = vec![T::zero(); c.n1.len()];
        let mut dn1_kv = vec![T::zero(); c.n1.len()];
        self.attend_backward(
            &dxa,
            &c.n1,
            &c.n1,
            &c.att,
            l.self_attn,
            dsegs,
            dsegs,
            &mut dn1,
            &mut dn1_kv,
            g,
        );
        dn1.iter_mut().zip(&dn1_kv).for_each(|(a, &b)| *a += b);
        let mut dx = dxa;
        rms_norm_backward(
            &dn1,
            &c.x,
            &c.inv1,
            self.p.tensor(l.ln1),
            d,
            &mut dx,
            g.t(l.ln1),
        );
        dx
    }
}

struct Trace<T> {
    packed: Packed,
    enc_caches: Vec<EncCache<T>>,
    enc_last: Vec<T>,
    enc_inv: Vec<T>,
    mem: Vec<T>,
    dec_caches: Vec<DecCache<T>>,
    dec_last: Vec<T>,
    dec_inv: Vec<T>,
    z: Vec<T>,
    lse: Vec<T>,
}

fn run<T: Float>(
    p: &Params<T>,
    b: &Batch,
    keep: bool,
) -> Result<(ForwardOutput<T>, Option<Trace<T>>), ModelError> {
    let packed = Packed::new(b, p.config())?;
    let cx = Ctx::new(p);
    let ids = &p.layout().ids;
    let (d, vocab) = (cx.d, p.config().vocab_size);

    let mut h = cx.embed(&packed.enc_ids, &packed.enc_pos, ids.enc_pos);
    let mut enc_caches = Vec::new();
    for l in &ids.enc {
        let (out, c) = cx.enc_layer(h, l, &packed.enc_segs);
        h = out;
        if keep {
            enc_caches.push(c);
        }
    }
    let (mem, enc_inv) = rms_norm(&h, p.tensor(ids.enc_final), d);

    let mut x = cx.embed(&packed.dec_ids, &packed.dec_pos, ids.dec_pos);
    let mut dec_caches = Vec::new();
    for l in &ids.dec {
        let (out, c) = cx.dec_layer(x, &mem, l, &packed.dec_segs, &packed.enc_segs);
        x = out;
        if keep {
            dec_caches.push(c);
        }
    }
    let (z, dec_inv) = rms_norm(&x, p.tensor(ids.dec_final), d);
    let n = packed.dec_ids.len();
    let mut logits = vec![T::zero(); n * vocab];
    matmul(
        n,
        d,
        vocab,
        &z,
        false,
        p.tensor(ids.tok_emb),
        true,
        &mut logits,
        false,
    );

    let mut token_loss = vec![T::zero(); n];
    let mut lse = vec![T::zero(); n];
    for i in 0..n {
        let row = &logits[i * vocab..(i + 1) * vocab];
        lse[i] = log_sum_exp(row);
        token_loss[i] = lse[i] - row[packed.dec_tgt[i]];
    }
    let total: T = token_loss.iter().copied().sum();
    let loss = total / T::of(n as f64);
    let example_losses = packed
        .dec_segs
        .iter()
        .map(|s| {
            if s.len == 0 {
                T::zero()
            } else {
                token_loss[s.start..s.start + s.len]
                    .iter()
                    .copied()
                    .sum::<T>()
                    / T::of(s.len as f64)
            }
        })
        .collect();
    let rows = packed.dec_segs.iter().map(|s| (s.start, s.len)).collect();
    let out = ForwardOutput {
        logits,
        rows,
        example_losses,
        loss,
        vocab_size: vocab,
    };
    let trace = keep.then(|| Trace {
        packed,
        enc_caches,
        enc_last: h,
        enc_inv,
        mem,
        dec_caches,
        dec_last: x,
        dec_inv,
        z,
        lse,
    });
    Ok((out, trace))
}

/// Logits and mean token cross-entropy over the unmasked target positions.
pub fn forward<T: Float>(p: &Params<T>, b: &Batch) -> Result<ForwardOutput<T>, ModelError> {
    let (out, _) = run(p, b, false)?;
    if !out.loss.is_finite() {
        return Err(ModelError::NonFinite {
            tensor: p.first_non_finite().unwrap_or("logits").to_string(),
        });
    }
    Ok(out)
}

/// Mean token loss and its gradient with respect to every parameter.
pub fn loss_and_grads<T: Float>(p: &Params<T>, b: &Batch) -> Result<(T, Params<T>), ModelError> {
    let (out, trace) = run(p, b, true)?;
    if !out.loss.is_finite() {
        return Err(ModelError::NonFinite {
            tensor: p.first_non_finite().unwrap_or("logits").to_string(),
        });
    }
    let tr = trace.expect("trace kept");
    let cx = Ctx::new(p);
    let ids = &p.layout().ids;
    let (d, vocab) = (cx.d, p.config().vocab_size);
    let n = tr.packed.dec_ids.len();
    let mut grads = Params::zeros(p.layout().clone());
    let mut g = Grads { g: &mut grads };

    let inv_n = T::one() / T::of(n as f64);
    let mut dlogits = out.logits;
    for i in 0..n {
        let row = &mut dlogits[i * vocab..(i + 1) * vocab];
        let lse = tr.lse[i];
        for v in row.iter_mut() {
            *v = (*v - lse).exp() * inv_n;
        }
        row[tr.packed.dec_tgt[i]] -= inv_n;
    }
    let mut dz = vec![T::zero(); n * d];
    matmul(
        n,
        vocab,
        d,
        &dlogits,
        false,
        p.tensor(ids.tok_emb),
        false,
        &mut dz,
        false,
    );
    matmul(
        vocab,
        n,
        d,
        &dlogits,
        true,
        &tr.z,
        false,
        g.t(ids.tok_emb),
        true,
    );
    drop(dlogits);

    let mut dx = vec![T::zero(); n * d];
    rms_norm_backward(
        &dz,
        &tr.dec_last,
        &tr.dec_inv,
        p.tensor(ids.dec_final),
        d,
        &mut dx,
        g.t(ids.dec_final),
    );
    let mut dmem = vec![T::zero(); tr.mem.len()];
    for (l, c) in ids.dec.iter().zip(&tr.dec_caches).rev() {
        dx = cx.dec_layer_backward(
            &dx,
            c,
            &tr.mem,
            l,
            &tr.packed.dec_segs,
            &tr.packed.enc_segs,
            &mut dmem,
            &mut g,
        );
    }
    scatter_embedding(
        &dx,
        &tr.packed.dec_ids,
        &tr.packed.dec_pos,
        ids.tok_emb,
        ids.dec_pos,
        d,
        &mut g,
    );

    let mut dh = vec![T::zero(); tr.mem.len()];
    rms_norm_backward(
        &dmem,
        &tr.enc_last,
        &tr.enc_inv,
        p.tensor(ids.enc_final),
        d,
        &mut dh,
        g.t(ids.enc_final),
    );
    for (l, c) in ids.enc.iter().zip(&tr.enc_caches).rev() {
        dh = cx.enc_layer_backward(&dh, c, l, &tr.packed.enc_segs, &mut g);
    }
    scatter_embedding(
        &dh,
        &tr.packed.enc_ids,
        &tr.packed.enc_pos,
        ids.tok_emb,
        ids.enc_pos,
        d,
        &mut g,
    );

    if let Some(name) = grads.first_non_finite() {
        return Err(ModelError::NonFinite {
            tensor: name.to_string(),
        });
    }
    Ok((out.loss, grads))
}

fn scatter_embedding<T: Float>(
    dh: &[T],
    ids: &[usize],
    pos: &[usize],
    emb: usize,
    pos_t: usize,
    d: usize,
    g: &mut Grads<T>,
) {
    {
        let ge = g.t(emb);
        for (r, &id) in ids.iter().enumerate() {
            for j in 0..d {
                ge[id * d + j] += dh[r * d + j];
            }
        }
    }
    let gp = g.t(pos_t);
    for (r, &t) in pos.iter().enumerate() {
        for j in 0..d {
            gp[t * d + j] += dh[r * d + j];
        }
    }
}
