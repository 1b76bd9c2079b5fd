//! Pre-norm transformer encoder classifier.
//!
//! `embed → L × [LN → MHSA → +res → LN → MLP(GELU, 4d) → +res] → mean-pool → linear`
//!
//! Per block and per sample the activation workspace holds
//! `11·s·d + 2·h·s² + 2·s` elements: normalized inputs of both layer norms,
//! q/k/v, the attention context, the 4d-wide MLP pre-activation, the block
//! output, attention scores and probabilities, and two per-row reciprocal
//! standard deviations. `forward_loss` streams blocks and keeps at most two
//! consecutive workspaces alive; `backward` retains all of them and reuses
//! them in place for the corresponding gradients.

use crate::error::{Error, Result};
use crate::ledger::{AllocationLedger, Category, TrackedVec};
use crate::model::config::{BlockOffsets, Layout};
use crate::model::kernels::*;
use crate::model::{Batch, ModelConfig};
use crate::scalar::{Dtype, Scalar};

/// Loss and flat gradient from one forward/backward pass.
#[derive(Debug)]
pub struct LossAndGrad<T> {
    pub loss: T,
    pub grad: TrackedVec<T>,
}

#[derive(Debug, Clone)]
pub struct Transformer {
    config: ModelConfig,
    layout: Layout,
}

struct Dims {
    batch: usize,
    seq: usize,
    dim: usize,
    heads: usize,
    head_dim: usize,
    mlp: usize,
    rows: usize,
}

struct BlockActivations<T> {
    xhat1: TrackedVec<T>,
    rstd1: TrackedVec<T>,
    q: TrackedVec<T>,
    k: TrackedVec<T>,
    v: TrackedVec<T>,
    scores: TrackedVec<T>,
    probs: TrackedVec<T>,
    ctx: TrackedVec<T>,
    xhat2: TrackedVec<T>,
    rstd2: TrackedVec<T>,
    hidden: TrackedVec<T>,
    out: TrackedVec<T>,
}

impl<T: Scalar> BlockActivations<T> {
    fn alloc(ledger: &AllocationLedger, dm: &Dims) -> Result<Self> {
        let a = |len: usize| ledger.alloc_zeroed::<T>(Category::Activation, len);
        let nd = dm.rows * dm.dim;
        let att = dm.batch * dm.heads * dm.seq * dm.seq;
        Ok(Self {
            xhat1: a(nd)?,
            rstd1: a(dm.rows)?,
            q: a(nd)?,
            k: a(nd)?,
            v: a(nd)?,
            scores: a(att)?,
            probs: a(att)?,
            ctx: a(nd)?,
            xhat2: a(nd)?,
            rstd2: a(dm.rows)?,
            hidden: a(dm.rows * dm.mlp)?,
            out: a(nd)?,
        })
    }
}

/// Row buffers whose size does not depend on the batch.
struct RowScratch<T> {
    d1: TrackedVec<T>,
    d2: TrackedVec<T>,
    m1: TrackedVec<T>,
    m2: TrackedVec<T>,
}

impl<T: Scalar> RowScratch<T> {
    fn alloc(ledger: &AllocationLedger, dm: &Dims) -> Result<Self> {
        let a = |len: usize| ledger.alloc_zeroed::<T>(Category::Activation, len);
        Ok(Self { d1: a(dm.dim)?, d2: a(dm.dim)?, m1: a(dm.mlp)?, m2: a(dm.mlp)? })
    }
}

impl Transformer {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { layout: config.layout(), config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.param_count()
    }

    /// Elements of one block's activation workspace for `batch_size` samples.
    pub fn block_workspace_elems(&self, batch_size: usize) -> usize {
        let c = &self.config;
        let (s, d, h) = (c.seq_len, c.dim, c.heads);
        batch_size * (11 * s * d + 2 * h * s * s + 2 * s)
    }

    /// Bytes of one block's activation workspace.
    pub fn block_workspace_bytes(&self, batch_size: usize, dtype: Dtype) -> u64 {
        self.block_workspace_elems(batch_size) as u64 * dtype.bytes()
    }

    /// Bytes touched while one block runs: its workspace plus the
    /// batch-independent row scratch.
    pub fn layer_activation_bytes(&self, batch_size: usize, dtype: Dtype) -> u64 {
        let scratch = 2 * self.config.dim + 2 * self.config.mlp_dim();
        (self.block_workspace_elems(batch_size) + scratch) as u64 * dtype.bytes()
    }

    fn dims(&self, batch: &Batch) -> Dims {
        let c = &self.config;
        Dims {
            batch: batch.batch_size(),
            seq: c.seq_len,
            dim: c.dim,
            heads: c.heads,
            head_dim: c.head_dim(),
            mlp: c.mlp_dim(),
            rows: batch.batch_size() * c.seq_len,
        }
    }

    fn check<T: Scalar>(&self, params: &[T], batch: &Batch) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Precondition(format!(
                "{} parameters supplied, model has {}",
                params.len(),
                self.param_count()
            )));
        }
        batch.check_against(&self.config)
    }

    /// Mean cross-entropy over the batch. Block workspaces are streamed: at
    /// most two consecutive blocks' buffers are alive at once.
    pub fn forward_loss<T: Scalar>(&self, params: &[T], batch: &Batch, ledger: &AllocationLedger) -> Result<T> {
        self.check(params, batch)?;
        let dm = self.dims(batch);
        let off = self.layout.offsets();
        let mut scratch = RowScratch::alloc(ledger, &dm)?;
        let mut x0 = Some(self.embed(params, batch, ledger, &dm)?);
        let mut prev: Option<BlockActivations<T>> = None;
        for (l, bo) in off.blocks.iter().enumerate() {
            let mut acts = BlockActivations::alloc(ledger, &dm)?;
            {
                let input: &[T] = match (&prev, &x0) {
                    (Some(p), _) => &p.out,
                    (None, Some(x)) => x,
                    (None, None) => unreachable!("embedding consumed before first block"),
                };
                block_forward(params, bo, input, &mut acts, &mut scratch, &dm, l)?;
            }
            x0 = None;
            prev = Some(acts);
        }
        let last: &[T] = match (&prev, &x0) {
            (Some(p), _) => &p.out,
            (None, Some(x)) => x,
            (None, None) => unreachable!(),
        };
        let (loss, _, _) = self.head_forward(params, last, batch, ledger, &dm)?;
        Ok(loss)
    }

    /// Loss and gradient. All block workspaces are retained for the whole
    /// pass and then overwritten in place with their gradients.
    pub fn backward<T: Scalar>(
        &self,
        params: &[T],
        batch: &Batch,
        ledger: &AllocationLedger,
    ) -> Result<LossAndGrad<T>> {
        self.check(params, batch)?;
        let dm = self.dims(batch);
        let off = self.layout.offsets();
        let mut grad = ledger.alloc_zeroed::<T>(Category::Grads, self.param_count())?;
        let mut scratch = RowScratch::alloc(ledger, &dm)?;
        let mut x0 = self.embed(params, batch, ledger, &dm)?;
        let mut blocks: Vec<BlockActivations<T>> = Vec::with_capacity(off.blocks.len());
        for (l, bo) in off.blocks.iter().enumerate() {
            let mut acts = BlockActivations::alloc(ledger, &dm)?;
            let input: &[T] = blocks.last().map_or(&x0[..], |p| &p.out[..]);
            block_forward(params, bo, input, &mut acts, &mut scratch, &dm, l)?;
            blocks.push(acts);
        }

        let (loss, pooled, logits) = {
            let last: &[T] = blocks.last().map_or(&x0[..], |p| &p.out[..]);
            self.head_forward(params, last, batch, ledger, &dm)?
        };
        {
            let d_last: &mut [T] = match blocks.last_mut() {
                Some(p) => &mut p.out,
                None => &mut x0,
            };
            self.head_backward(params, &mut grad, &pooled, &logits, batch, d_last, &dm);
        }
        drop((pooled, logits));

        for l in (0..blocks.len()).rev() {
            let (before, rest) = blocks.split_at_mut(l);
            let acts = &mut rest[0];
            let dx_in: &mut [T] = match before.last_mut() {
                Some(p) => &mut p.out,
                None => &mut x0,
            };
            block_backward(params, &mut grad, &off.blocks[l], acts, dx_in, &mut scratch, &dm);
        }

        // embedding
        let d = dm.dim;
        for b in 0..dm.batch {
            for (j, &tok) in batch.row(b).iter().enumerate() {
                let r = b * dm.seq + j;
                let dx = &x0[r * d..(r + 1) * d];
                let te = off.tok_emb + tok as usize * d;
                add_assign(&mut grad[te..te + d], dx);
                let pe = off.pos_emb + j * d;
                add_assign(&mut grad[pe..pe + d], dx);
            }
        }
        Ok(LossAndGrad { loss, grad })
    }

    fn embed<T: Scalar>(
        &self,
        params: &[T],
        batch: &Batch,
        ledger: &AllocationLedger,
        dm: &Dims,
    ) -> Result<TrackedVec<T>> {
        let off = self.layout.offsets();
        let d = dm.dim;
        let mut x0 = ledger.alloc_zeroed::<T>(Category::Activation, dm.rows * d)?;
        for b in 0..dm.batch {
            for (j, &tok) in batch.row(b).iter().enumerate() {
                let r = b * dm.seq + j;
                let te = off.tok_emb + tok as usize * d;
                let pe = off.pos_emb + j * d;
                for i in 0..d {
                    x0[r * d + i] = params[te + i] + params[pe + i];
                }
            }
        }
        Ok(x0)
    }

    /// Returns the loss with the pooled features and logits it came from.
    fn head_forward<T: Scalar>(
        &self,
        params: &[T],
        last: &[T],
        batch: &Batch,
        ledger: &AllocationLedger,
        dm: &Dims,
    ) -> Result<(T, TrackedVec<T>, TrackedVec<T>)> {
        let off = self.layout.offsets();
        let (d, c) = (dm.dim, self.config.classes);
        let mut pooled = ledger.alloc_zeroed::<T>(Category::Activation, dm.batch * d)?;
        let mut logits = ledger.alloc_zeroed::<T>(Category::Activation, dm.batch * c)?;
        let inv_s = T::one() / T::from_usize(dm.seq);
        let hw = &params[off.head_w..off.head_w + d * c];
        let hb = &params[off.head_b..off.head_b + c];
        let mut total = T::zero();
        for b in 0..dm.batch {
            let p = &mut pooled[b * d..(b + 1) * d];
            for row in last[b * dm.seq * d..(b + 1) * dm.seq * d].chunks_exact(d) {
                add_assign(p, row);
            }
            p.iter_mut().for_each(|v| *v = *v * inv_s);
            let z = &mut logits[b * c..(b + 1) * c];
            linear_row(p, hw, hb, z);
            let max = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            total = total + lse - z[batch.labels()[b] as usize];
        }
        let loss = total / T::from_usize(dm.batch);
        if !loss.is_finite() {
            return Err(Error::numeric("head"));
        }
        Ok((loss, pooled, logits))
    }

    #[allow(clippy::too_many_arguments)]
    fn head_backward<T: Scalar>(
        &self,
        params: &[T],
        grad: &mut [T],
        pooled: &[T],
        logits: &[T],
        batch: &Batch,
        d_last: &mut [T],
        dm: &Dims,
    ) {
        let off = self.layout.offsets();
        let (d, c) = (dm.dim, self.config.classes);
        let inv_b = T::one() / T::from_usize(dm.batch);
        let inv_s = T::one() / T::from_usize(dm.seq);
        let hw = &params[off.head_w..off.head_w + d * c];
        let mut dlogit = vec![T::zero(); c];
        let mut dpool = vec![T::zero(); d];
        for b in 0..dm.batch {
            dlogit.copy_from_slice(&logits[b * c..(b + 1) * c]);
            softmax_in_place(&mut dlogit);
            dlogit[batch.labels()[b] as usize] = dlogit[batch.labels()[b] as usize] - T::one();
            dlogit.iter_mut().for_each(|v| *v = *v * inv_b);
            let p = &pooled[b * d..(b + 1) * d];
            outer_acc(&mut grad[off.head_w..off.head_w + d * c], p, &dlogit);
            add_assign(&mut grad[off.head_b..off.head_b + c], &dlogit);
            matvec(hw, &dlogit, &mut dpool);
            dpool.iter_mut().for_each(|v| *v = *v * inv_s);
            for row in d_last[b * dm.seq * d..(b + 1) * dm.seq * d].chunks_exact_mut(d) {
                row.copy_from_slice(&dpool);
            }
        }
    }
}

fn block_forward<T: Scalar>(
    params: &[T],
    bo: &BlockOffsets,
    x_in: &[T],
    acts: &mut BlockActivations<T>,
    sc: &mut RowScratch<T>,
    dm: &Dims,
    layer: usize,
) -> Result<()> {
    let (d, m) = (dm.dim, dm.mlp);
    let p = |o: usize, len: usize| &params[o..o + len];
    let (g1, b1n) = (p(bo.ln1_gain, d), p(bo.ln1_bias, d));
    let (g2, b2n) = (p(bo.ln2_gain, d), p(bo.ln2_bias, d));

    layer_norm_rows(x_in, &mut acts.xhat1, &mut acts.rstd1, d);
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        affine(&acts.xhat1[rows.clone()], g1, b1n, &mut sc.d1);
        linear_row(&sc.d1, p(bo.wq, d * d), p(bo.bq, d), &mut acts.q[rows.clone()]);
        linear_row(&sc.d1, p(bo.wk, d * d), p(bo.bk, d), &mut acts.k[rows.clone()]);
        linear_row(&sc.d1, p(bo.wv, d * d), p(bo.bv, d), &mut acts.v[rows]);
    }

    attention_forward(acts, dm);

    let wo = p(bo.wo, d * d);
    let bo_b = p(bo.bo, d);
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        let out = &mut acts.out[rows.clone()];
        for ((o, &x), &b) in out.iter_mut().zip(&x_in[rows.clone()]).zip(bo_b) {
            *o = x + b;
        }
        linear_row_acc(&acts.ctx[rows], wo, out);
    }

    layer_norm_rows(&acts.out, &mut acts.xhat2, &mut acts.rstd2, d);
    let (w1, bb1) = (p(bo.w1, d * m), p(bo.b1, m));
    let (w2, bb2) = (p(bo.w2, m * d), p(bo.b2, d));
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        affine(&acts.xhat2[rows.clone()], g2, b2n, &mut sc.d1);
        let hidden = &mut acts.hidden[r * m..(r + 1) * m];
        linear_row(&sc.d1, w1, bb1, hidden);
        for (g, &u) in sc.m1.iter_mut().zip(hidden.iter()) {
            *g = gelu(u);
        }
        let out = &mut acts.out[rows];
        add_assign(out, bb2);
        linear_row_acc(&sc.m1, w2, out);
    }

    if !all_finite(&acts.out) {
        return Err(Error::numeric(format!("blocks.{layer}")));
    }
    Ok(())
}

fn attention_forward<T: Scalar>(acts: &mut BlockActivations<T>, dm: &Dims) {
    let (s, d, dh) = (dm.seq, dm.dim, dm.head_dim);
    let scale = T::one() / T::from_usize(dh).sqrt();
    for b in 0..dm.batch {
        for h in 0..dm.heads {
            let base = (b * dm.heads + h) * s * s;
            let col = h * dh;
            for i in 0..s {
                let qi = &acts.q[(b * s + i) * d + col..][..dh];
                let srow = &mut acts.scores[base + i * s..base + (i + 1) * s];
                for (j, sv) in srow.iter_mut().enumerate() {
                    let kj = &acts.k[(b * s + j) * d + col..][..dh];
                    *sv = dot(qi, kj) * scale;
                }
                let prow = &mut acts.probs[base + i * s..base + (i + 1) * s];
                prow.copy_from_slice(srow);
                softmax_in_place(prow);
                let ci = &mut acts.ctx[(b * s + i) * d + col..][..dh];
                ci.fill(T::zero());
                for (j, &pij) in prow.iter().enumerate() {
                    let vj = &acts.v[(b * s + j) * d + col..][..dh];
                    for (c, &v) in ci.iter_mut().zip(vj) {
                        *c = *c + pij * v;
                    }
                }
            }
        }
    }
}

/// On entry `acts.out` holds dL/d(block output); on exit `dx_in` holds
/// dL/d(block input). Retained buffers are overwritten with gradients.
fn block_backward<T: Scalar>(
    params: &[T],
    grad: &mut [T],
    bo: &BlockOffsets,
    acts: &mut BlockActivations<T>,
    dx_in: &mut [T],
    sc: &mut RowScratch<T>,
    dm: &Dims,
) {
    let (d, m) = (dm.dim, dm.mlp);
    let p = |o: usize, len: usize| &params[o..o + len];

    // MLP branch; acts.out becomes dL/d(x_mid) row by row.
    let (g2, b2n) = (p(bo.ln2_gain, d), p(bo.ln2_bias, d));
    let (w1, w2) = (p(bo.w1, d * m), p(bo.w2, m * d));
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        let dy = &mut acts.out[rows.clone()];
        let hidden = &mut acts.hidden[r * m..(r + 1) * m];
        for (g, &u) in sc.m1.iter_mut().zip(hidden.iter()) {
            *g = gelu(u);
        }
        add_assign(&mut grad[bo.b2..bo.b2 + d], dy);
        outer_acc(&mut grad[bo.w2..bo.w2 + m * d], &sc.m1, dy);
        matvec(w2, dy, &mut sc.m2);
        for (u, &dg) in hidden.iter_mut().zip(sc.m2.iter()) {
            *u = dg * gelu_grad(*u);
        }
        affine(&acts.xhat2[rows.clone()], g2, b2n, &mut sc.d1);
        add_assign(&mut grad[bo.b1..bo.b1 + m], hidden);
        outer_acc(&mut grad[bo.w1..bo.w1 + d * m], &sc.d1, hidden);
        matvec(w1, hidden, &mut sc.d2);
        let (gg, gb) = split_two(grad, bo.ln2_gain, bo.ln2_bias, d);
        layer_norm_backward_row(&sc.d2, &acts.xhat2[rows], acts.rstd2[r], g2, gg, gb, dy);
    }

    // Output projection; ctx becomes dL/d(ctx).
    let wo = p(bo.wo, d * d);
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        let dmid = &acts.out[rows.clone()];
        add_assign(&mut grad[bo.bo..bo.bo + d], dmid);
        outer_acc(&mut grad[bo.wo..bo.wo + d * d], &acts.ctx[rows.clone()], dmid);
        matvec(wo, dmid, &mut acts.ctx[rows]);
    }

    attention_backward(acts, dm);

    // q/k/v projections: dq lives in ctx, dk in k, dv in v.
    let (g1, b1n) = (p(bo.ln1_gain, d), p(bo.ln1_bias, d));
    let (wq, wk, wv) = (p(bo.wq, d * d), p(bo.wk, d * d), p(bo.wv, d * d));
    for r in 0..dm.rows {
        let rows = r * d..(r + 1) * d;
        affine(&acts.xhat1[rows.clone()], g1, b1n, &mut sc.d1);
        let dq = &acts.ctx[rows.clone()];
        let dk = &acts.k[rows.clone()];
        let dv = &acts.v[rows.clone()];
        add_assign(&mut grad[bo.bq..bo.bq + d], dq);
        add_assign(&mut grad[bo.bk..bo.bk + d], dk);
        add_assign(&mut grad[bo.bv..bo.bv + d], dv);
        outer_acc(&mut grad[bo.wq..bo.wq + d * d], &sc.d1, dq);
        outer_acc(&mut grad[bo.wk..bo.wk + d * d], &sc.d1, dk);
        outer_acc(&mut grad[bo.wv..bo.wv + d * d], &sc.d1, dv);
        matvec(wq, dq, &mut sc.d2);
        matvec_acc(wk, dk, &mut sc.d2);
        matvec_acc(wv, dv, &mut sc.d2);
        let dx = &mut dx_in[rows.clone()];
        dx.copy_from_slice(&acts.out[rows.clone()]);
        let (gg, gb) = split_two(grad, bo.ln1_gain, bo.ln1_bias, d);
        layer_norm_backward_row(&sc.d2, &acts.xhat1[rows], acts.rstd1[r], g1, gg, gb, dx);
    }
}

/// Given dctx in `ctx`, writes dq into `ctx`, dk into `k`, dv into `v`.
fn attention_backward<T: Scalar>(acts: &mut BlockActivations<T>, dm: &Dims) {
    let (s, d, dh) = (dm.seq, dm.dim, dm.head_dim);
    let scale = T::one() / T::from_usize(dh).sqrt();
    for b in 0..dm.batch {
        for h in 0..dm.heads {
            let base = (b * dm.heads + h) * s * s;
            let col = h * dh;
            let at = |i: usize| (b * s + i) * d + col;

            // dprobs into scores
            for i in 0..s {
                for j in 0..s {
                    let v = dot(&acts.ctx[at(i)..at(i) + dh], &acts.v[at(j)..at(j) + dh]);
                    acts.scores[base + i * s + j] = v;
                }
            }
            // dv = probsᵀ · dctx, overwriting v (no longer needed)
            for j in 0..s {
                for t in 0..dh {
                    let mut acc = T::zero();
                    for i in 0..s {
                        acc = acc + acts.probs[base + i * s + j] * acts.ctx[at(i) + t];
                    }
                    acts.v[at(j) + t] = acc;
                }
            }
            // softmax backward, then fold in the 1/sqrt(dh) scale
            for i in 0..s {
                let prow = &acts.probs[base + i * s..base + (i + 1) * s];
                let drow = &mut acts.scores[base + i * s..base + (i + 1) * s];
                let inner = dot(prow, drow);
                for (dv, &pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - inner) * scale;
                }
            }
            // dq = dscores · k into ctx
            for i in 0..s {
                for t in 0..dh {
                    let mut acc = T::zero();
                    for j in 0..s {
                        acc = acc + acts.scores[base + i * s + j] * acts.k[at(j) + t];
                    }
                    acts.ctx[at(i) + t] = acc;
                }
            }
            // dk = dscoresᵀ · q into k
            for j in 0..s {
                for t in 0..dh {
                    let mut acc = T::zero();
                    for i in 0..s {
                        acc = acc + acts.scores[base + i * s + j] * acts.q[at(i) + t];
                    }
                    acts.k[at(j) + t] = acc;
                }
            }
        }
    }
}

/// Disjoint mutable views of two equal-length tensors, `a` before `b`.
fn split_two<T>(grad: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = grad.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}
