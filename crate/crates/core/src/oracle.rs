//! Brute-force references used by the verification suites.
//!
//! Nothing here shares code with the kernels: every probability row is
//! materialised from an explicit visibility mask and normalised with a
//! plain two-pass softmax.

use crate::attention::SinkBias;
use crate::tensor::Tensor;

/// Probabilities `[heads][rows][keys]` and output `[rows × heads × d]` of
/// attention where query row `r` (at `query_start + r`) may see key `j`
/// (at absolute position `j`) iff `visible(head, position, j)`.
pub fn masked_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    scale: f64,
    sink: Option<&SinkBias>,
    query_start: usize,
    visible: impl Fn(usize, usize, usize) -> bool,
) -> (Vec<Vec<Vec<f64>>>, Tensor) {
    let (tq, hq, d) = (q.dim(0), q.dim(1), q.dim(2));
    let (tk, hkv) = (k.dim(0), k.dim(1));
    let group = hq / hkv;
    let mut probs = vec![vec![vec![0.0; tk]; tq]; hq];
    let mut out = Tensor::zeros(&[tq, hq, d]);
    for (h, head_probs) in probs.iter_mut().enumerate() {
        let g = h / group;
        for (r, row) in head_probs.iter_mut().enumerate() {
            let pos = query_start + r;
            let mut logits: Vec<Option<f64>> = (0..tk)
                .map(|j| {
                    visible(h, pos, j).then(|| {
                        let mut s = 0.0;
                        for c in 0..d {
                            s += q.at(&[r, h, c]) * k.at(&[j, g, c]);
                        }
                        s * scale
                    })
                })
                .collect();
            let sink_logit = sink.map(|s| s.logits[h]);
            let max = logits.iter().flatten().copied().chain(sink_logit).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = sink_logit.map_or(0.0, |s| (s - max).exp());
            for l in logits.iter_mut().flatten() {
                *l = (*l - max).exp();
                total += *l;
            }
            for (p, l) in row.iter_mut().zip(&logits) {
                *p = l.map_or(0.0, |e| e / total);
            }
            for c in 0..d {
                let mut acc = 0.0;
                for (j, p) in row.iter().enumerate() {
                    acc += p * v.at(&[j, g, c]);
                }
                out.set(&[r, h, c], acc);
            }
        }
    }
    (probs, out)
}

/// Per head and row, the maximum probability inside each block of `block_size` keys.
pub fn block_max(probs: &[Vec<Vec<f64>>], block_size: usize) -> Vec<Vec<Vec<f64>>> {
    probs
        .iter()
        .map(|head| {
            head.iter()
                .map(|row| row.chunks(block_size).map(|c| c.iter().copied().fold(0.0, f64::max)).collect())
                .collect()
        })
        .collect()
}

/// Top-k by sorting `(score desc, index asc)` over the first `causal` blocks.
pub fn topk_by_sort(scores: &[f64], causal: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<(f64, usize)> = scores[..causal].iter().copied().zip(0..).collect();
    idx.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores").then(a.1.cmp(&b.1)));
    let mut picked: Vec<usize> = idx.into_iter().take(k).map(|(_, i)| i).collect();
    picked.sort_unstable();
    picked
}

/// Central finite difference of `f` at `x` along one coordinate.
pub fn central_difference(f: &mut dyn FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
