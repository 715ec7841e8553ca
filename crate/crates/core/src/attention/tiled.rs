use super::{dims_for, AttnConfig, BlockScores, Dims, SinkBias, Span};
use crate::error::{Error, Result};
use crate::tensor::ops::dot;
use crate::tensor::Tensor;

/// Tiled causal attention that also returns per-block max probabilities.
///
/// Keys are consumed in tiles of `cfg.block_size` columns aligned to absolute
/// position 0, queries in tiles of `cfg.tile_rows`. Per row and tile the raw
/// logit maximum is kept; after the last tile it becomes
/// `exp(m_tile - m) / l`, the largest probability in that block.
pub fn tiled_attention_with_scores(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
) -> Result<(Tensor, BlockScores)> {
    tiled_attention_span(q, k, v, cfg, sink, Span::default())
}

/// As [`tiled_attention_with_scores`] for query rows starting at
/// `span.query_start` (keys always start at 0).
pub fn tiled_attention_span(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
    span: Span,
) -> Result<(Tensor, BlockScores)> {
    let dims = dims_for(q, k, v, cfg, sink, span, "tiled_attention")?;
    let res = tiled_forward(q.data(), k.data(), v.data(), &dims, cfg, sink.map(|s| s.logits.as_slice()))?;
    Ok((Tensor::new(q.shape(), res.out)?, res.scores))
}

pub(crate) struct TiledResult {
    pub out: Vec<f64>,
    pub scores: BlockScores,
    pub lse: Vec<f64>,
}

pub(crate) fn tiled_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &Dims,
    cfg: &AttnConfig,
    sink: Option<&[f64]>,
) -> Result<TiledResult> {
    if dims.key_start != 0 {
        return Err(Error::invalid("tiled_attention", "keys must start at position 0"));
    }
    let (tq, tk, d, hq) = (dims.tq, dims.tk, dims.d, dims.hq);
    let bn = cfg.tile_cols();
    let bm = cfg.tile_rows;
    let nblocks = cfg.num_blocks(tk);
    let scale = cfg.softmax_scale;

    let mut out = vec![0.0; tq * hq * d];
    let mut lse = vec![0.0; tq * hq];
    // Raw per-tile row maxima, later rescaled in place.
    let mut tile_max = vec![f64::NEG_INFINITY; hq * tq * nblocks];

    let mut m = vec![0.0; bm];
    let mut l = vec![0.0; bm];
    let mut acc = vec![0.0; bm * d];
    let mut logits = vec![0.0; bn];

    for h in 0..hq {
        let g = h / dims.group();
        let init_m = sink.map_or(f64::NEG_INFINITY, |s| s[h]);
        let init_l = if sink.is_some() { 1.0 } else { 0.0 };
        for r0 in (0..tq).step_by(bm) {
            let r1 = (r0 + bm).min(tq);
            let rows = r1 - r0;
            m[..rows].fill(init_m);
            l[..rows].fill(init_l);
            acc[..rows * d].fill(0.0);
            let last_pos = dims.query_start + r1 - 1;
            let tiles = (last_pos / bn + 1).min(nblocks);
            for j in 0..tiles {
                let c0 = j * bn;
                let c1 = ((j + 1) * bn).min(tk);
                for ri in 0..rows {
                    let i = r0 + ri;
                    let position = dims.query_start + i;
                    if c0 > position {
                        continue;
                    }
                    let cend = c1.min(position + 1);
                    let qv = &q[dims.q_off(i, h)..dims.q_off(i, h) + d];
                    let cols = cend - c0;
                    let mut mt = f64::NEG_INFINITY;
                    for (c, s) in logits[..cols].iter_mut().enumerate() {
                        let ko = dims.k_off(c0 + c, g);
                        *s = scale * dot(qv, &k[ko..ko + d]);
                        mt = mt.max(*s);
                    }
                    tile_max[(h * tq + i) * nblocks + j] = mt;

                    let m_old = m[ri];
                    let m_new = m_old.max(mt);
                    let carry = if m_old == f64::NEG_INFINITY { 0.0 } else { (m_old - m_new).exp() };
                    let a = &mut acc[ri * d..(ri + 1) * d];
                    a.iter_mut().for_each(|x| *x *= carry);
                    let mut lsum = 0.0;
                    for (c, &s) in logits[..cols].iter().enumerate() {
                        let p = (s - m_new).exp();
                        lsum += p;
                        let vo = dims.k_off(c0 + c, g);
                        for (x, vc) in a.iter_mut().zip(&v[vo..vo + d]) {
                            *x += p * vc;
                        }
                    }
                    l[ri] = l[ri] * carry + lsum;
                    m[ri] = m_new;
                }
            }
            // Epilogue: normalise outputs and convert stored maxima to probabilities.
            for ri in 0..rows {
                let i = r0 + ri;
                let o = &mut out[dims.q_off(i, h)..dims.q_off(i, h) + d];
                for (x, a) in o.iter_mut().zip(&acc[ri * d..(ri + 1) * d]) {
                    *x = a / l[ri];
                }
                lse[i * hq + h] = m[ri] + l[ri].ln();
                for s in &mut tile_max[(h * tq + i) * nblocks..(h * tq + i + 1) * nblocks] {
                    *s = if *s == f64::NEG_INFINITY { 0.0 } else { (*s - m[ri]).exp() / l[ri] };
                }
            }
        }
    }
    let scores = BlockScores {
        values: Tensor::new(&[hq, tq, nblocks], tile_max)?,
        block_size: cfg.block_size,
        query_start: dims.query_start,
    };
    Ok(TiledResult { out, scores, lse })
}
