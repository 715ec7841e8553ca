use super::{dims_for, AttnConfig, BlockScores, Dims, SinkBias, Span};
use crate::error::{Error, Result};
use crate::tensor::ops::dot;
use crate::tensor::Tensor;

/// Exact causal attention with every probability row materialised.
///
/// `span.key_start` must be zero: full attention always sees the whole prefix.
pub fn reference_full_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
) -> Result<(Tensor, BlockScores)> {
    reference_full_attention_span(q, k, v, cfg, sink, Span::default())
}

pub fn reference_full_attention_span(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
    span: Span,
) -> Result<(Tensor, BlockScores)> {
    let dims = dims_for(q, k, v, cfg, sink, span, "reference_full_attention")?;
    let (out, scores, _) = materialized(
        q.data(),
        k.data(),
        v.data(),
        &dims,
        cfg,
        sink.map(|s| s.logits.as_slice()),
    )?;
    Ok((Tensor::new(q.shape(), out)?, scores))
}

/// Returns output, block scores, and per-(row, head) log denominators.
pub(crate) fn materialized(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &Dims,
    cfg: &AttnConfig,
    sink: Option<&[f64]>,
) -> Result<(Vec<f64>, BlockScores, Vec<f64>)> {
    if dims.key_start != 0 {
        return Err(Error::invalid("full attention", "keys must start at position 0"));
    }
    let (tq, tk, d) = (dims.tq, dims.tk, dims.d);
    let b = cfg.block_size;
    let nblocks = cfg.num_blocks(tk);
    let mut out = vec![0.0; tq * dims.hq * d];
    let mut scores = vec![0.0; dims.hq * tq * nblocks];
    let mut lse = vec![0.0; tq * dims.hq];
    let mut probs = vec![0.0; tk];
    for h in 0..dims.hq {
        let g = h / dims.group();
        for i in 0..tq {
            let position = dims.query_start + i;
            let qv = &q[dims.q_off(i, h)..dims.q_off(i, h) + d];
            // Logits over the whole key range, masked entries at -inf.
            for (j, p) in probs.iter_mut().enumerate() {
                *p = if j <= position {
                    cfg.softmax_scale * dot(qv, &k[dims.k_off(j, g)..dims.k_off(j, g) + d])
                } else {
                    f64::NEG_INFINITY
                };
            }
            let sink_logit = sink.map(|s| s[h]);
            let m = probs.iter().copied().chain(sink_logit).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = sink_logit.map_or(0.0, |s| (s - m).exp());
            for p in probs.iter_mut() {
                *p = (*p - m).exp();
                denom += *p;
            }
            for p in probs.iter_mut() {
                *p /= denom;
            }
            lse[i * dims.hq + h] = m + denom.ln();

            let o = &mut out[dims.q_off(i, h)..dims.q_off(i, h) + d];
            for (j, &p) in probs.iter().enumerate() {
                let vv = &v[dims.k_off(j, g)..dims.k_off(j, g) + d];
                for (oc, vc) in o.iter_mut().zip(vv) {
                    *oc += p * vc;
                }
            }
            let srow = &mut scores[(h * tq + i) * nblocks..(h * tq + i + 1) * nblocks];
            for (blk, s) in srow.iter_mut().enumerate() {
                let end = ((blk + 1) * b).min(tk);
                *s = probs[blk * b..end].iter().copied().fold(0.0, f64::max);
            }
        }
    }
    let scores = BlockScores {
        values: Tensor::new(&[dims.hq, tq, nblocks], scores)?,
        block_size: b,
        query_start: dims.query_start,
    };
    Ok((out, scores, lse))
}
