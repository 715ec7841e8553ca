//! Attention kernels as differentiable [`Var`] ops over a batch of sequences.
//!
//! Queries are `[batch·tq × heads × d]` and keys/values `[batch·tk × kv_heads × d]`,
//! every sequence sharing the same [`Span`]. Backward passes recompute the
//! probabilities from the saved per-row log denominators, so no `t × t`
//! matrix is kept for either direction.

use std::rc::Rc;

use super::engine::{self, Causal, Dims};
use super::reference::materialized;
use super::sparse::Blocks;
use super::tiled::tiled_forward;
use super::window::Window;
use super::{AttnConfig, BlockScores, Span};
use crate::error::{Error, Result};
use crate::selection::BlockIndexSet;
use crate::tensor::{Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub batch: usize,
    pub span: Span,
}

impl Layout {
    pub fn new(batch: usize, span: Span) -> Self {
        Self { batch, span }
    }
}

/// Which implementation computes the full-attention forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FullKernel {
    #[default]
    Tiled,
    Reference,
}

#[derive(Clone)]
enum Pattern {
    Causal,
    Window { w: usize, key_start: usize },
    Sparse(Rc<Vec<BlockIndexSet>>),
}

impl Pattern {
    fn with<T>(
        &self,
        seq: usize,
        dims: &Dims,
        cfg: &AttnConfig,
        f: impl FnOnce(&dyn engine::KeyRanges) -> Result<T>,
    ) -> Result<T> {
        match self {
            Pattern::Causal => f(&Causal),
            Pattern::Window { w, key_start } => f(&Window { w: *w, key_start: *key_start }),
            Pattern::Sparse(sets) => f(&Blocks::new(&sets[seq], dims, cfg)?),
        }
    }
}

fn batch_dims(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&Var>,
    layout: Layout,
    op: &'static str,
) -> Result<Dims> {
    cfg.validate()?;
    let shape3 = |t: &Tensor| match t.shape()[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(op, format!("expected [rows, heads, d], got {:?}", t.shape()))),
    };
    let [qr, hq, d] = shape3(q)?;
    let [kr, hkv, dk] = shape3(k)?;
    if v.shape() != k.shape() {
        return Err(Error::shape(op, format!("K {:?} vs V {:?}", k.shape(), v.shape())));
    }
    let b = layout.batch;
    if b == 0 || qr % b != 0 || kr % b != 0 {
        return Err(Error::shape(op, format!("rows q={qr} k={kr} not divisible by batch {b}")));
    }
    if let Some(s) = sink {
        if s.shape() != [hq] {
            return Err(Error::shape(op, format!("sink {:?} for {hq} heads", s.shape())));
        }
    }
    let dims = Dims {
        tq: qr / b,
        tk: kr / b,
        hq,
        hkv,
        d,
        query_start: layout.span.query_start,
        key_start: layout.span.key_start,
    };
    dims.check(op, dk, cfg, sink.map(|_| hq))?;
    Ok(dims)
}

struct Saved {
    out: Vec<f64>,
    lse: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn attention_op(
    name: &'static str,
    q: &Var,
    k: &Var,
    v: &Var,
    sink: Option<&Var>,
    cfg: &AttnConfig,
    layout: Layout,
    pattern: Pattern,
    full_kernel: Option<FullKernel>,
) -> Result<(Var, Vec<BlockScores>)> {
    let dims = batch_dims(q.value(), k.value(), v.value(), cfg, sink, layout, name)?;
    let (qs, ks) = (dims.tq * dims.hq * dims.d, dims.tk * dims.hkv * dims.d);
    let sink_vals = sink.map(|s| s.value().data().to_vec());
    let (qd, kd, vd) = (q.value().data(), k.value().data(), v.value().data());

    let mut saved = Saved { out: Vec::with_capacity(qd.len()), lse: Vec::new() };
    let mut scores = Vec::new();
    for b in 0..layout.batch {
        let (qb, kb, vb) = (&qd[b * qs..(b + 1) * qs], &kd[b * ks..(b + 1) * ks], &vd[b * ks..(b + 1) * ks]);
        let sv = sink_vals.as_deref();
        match full_kernel {
            Some(FullKernel::Tiled) => {
                let r = tiled_forward(qb, kb, vb, &dims, cfg, sv)?;
                saved.out.extend(r.out);
                saved.lse.extend(r.lse);
                scores.push(r.scores);
            }
            Some(FullKernel::Reference) => {
                let (out, s, lse) = materialized(qb, kb, vb, &dims, cfg, sv)?;
                saved.out.extend(out);
                saved.lse.extend(lse);
                scores.push(s);
            }
            None => {
                let r = pattern.with(b, &dims, cfg, |ranges| {
                    engine::forward(qb, kb, vb, &dims, cfg.softmax_scale, sv, ranges)
                })?;
                saved.out.extend(r.out);
                saved.lse.extend(r.lse);
            }
        }
    }

    let value = Tensor::new(q.shape(), saved.out.clone())?;
    let mut parents = vec![q.clone(), k.clone(), v.clone()];
    parents.extend(sink.cloned());
    let cfg = cfg.clone();
    let lse = saved.lse;
    let out = Var::from_op(name, value, parents, move |g, inputs, outv| {
        let (qd, kd, vd) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let sv = inputs.get(3).map(|s| s.data());
        let (mut dq, mut dk, mut dv) = (Vec::with_capacity(qd.len()), Vec::with_capacity(kd.len()), Vec::with_capacity(vd.len()));
        let mut dsink = sv.map(|s| vec![0.0; s.len()]);
        let rows = dims.tq * dims.hq;
        for b in 0..layout.batch {
            let grads = pattern.with(b, &dims, &cfg, |ranges| {
                engine::backward(
                    &qd[b * qs..(b + 1) * qs],
                    &kd[b * ks..(b + 1) * ks],
                    &vd[b * ks..(b + 1) * ks],
                    &outv.data()[b * qs..(b + 1) * qs],
                    &g.data()[b * qs..(b + 1) * qs],
                    &lse[b * rows..(b + 1) * rows],
                    &dims,
                    cfg.softmax_scale,
                    sv,
                    ranges,
                )
            })?;
            dq.extend(grads.dq);
            dk.extend(grads.dk);
            dv.extend(grads.dv);
            if let (Some(acc), Some(ds)) = (dsink.as_mut(), grads.dsink) {
                acc.iter_mut().zip(ds).for_each(|(a, d)| *a += d);
            }
        }
        let mut res = vec![
            Some(Tensor::new(inputs[0].shape(), dq)?),
            Some(Tensor::new(inputs[1].shape(), dk)?),
            Some(Tensor::new(inputs[2].shape(), dv)?),
        ];
        if let Some(ds) = dsink {
            res.push(Some(Tensor::new(inputs[3].shape(), ds)?));
        }
        Ok(res)
    })?;
    Ok((out, scores))
}

/// Causal full attention; also returns one [`BlockScores`] per sequence.
pub fn full_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    sink: Option<&Var>,
    cfg: &AttnConfig,
    layout: Layout,
    kernel: FullKernel,
) -> Result<(Var, Vec<BlockScores>)> {
    attention_op("full_attention", q, k, v, sink, cfg, layout, Pattern::Causal, Some(kernel))
}

/// Sliding-window attention. Keys start at `layout.span.key_start`.
pub fn window_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    sink: Option<&Var>,
    cfg: &AttnConfig,
    layout: Layout,
) -> Result<Var> {
    let pattern = Pattern::Window { w: cfg.window, key_start: layout.span.key_start };
    Ok(attention_op("window_attention", q, k, v, sink, cfg, layout, pattern, None)?.0)
}

/// Block-sparse attention with one index set per sequence.
pub fn sparse_attention(
    q: &Var,
    k: &Var,
    v: &Var,
    sink: Option<&Var>,
    cfg: &AttnConfig,
    layout: Layout,
    indices: Vec<BlockIndexSet>,
) -> Result<Var> {
    if indices.len() != layout.batch {
        return Err(Error::shape("sparse_attention", format!("{} index sets for batch {}", indices.len(), layout.batch)));
    }
    let pattern = Pattern::Sparse(Rc::new(indices));
    Ok(attention_op("sparse_attention", q, k, v, sink, cfg, layout, pattern, None)?.0)
}
