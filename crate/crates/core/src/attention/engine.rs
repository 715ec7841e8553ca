//! Row-wise attention over an explicit list of key ranges per query row,
//! with the matching analytic backward pass. The window and block-sparse
//! kernels are thin range generators on top of this.

use std::ops::Range;

use super::AttnConfig;
use crate::error::{Error, Result};
use crate::tensor::ops::dot;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Dims {
    pub tq: usize,
    pub tk: usize,
    pub hq: usize,
    pub hkv: usize,
    pub d: usize,
    pub query_start: usize,
    pub key_start: usize,
}

impl Dims {
    pub fn check(&self, op: &'static str, key_dim: usize, cfg: &AttnConfig, sink_len: Option<usize>) -> Result<()> {
        if self.d != cfg.head_dim || key_dim != self.d {
            return Err(Error::shape(
                op,
                format!("head dims q={} k={key_dim} config={}", self.d, cfg.head_dim),
            ));
        }
        if self.hkv == 0 || self.hq % self.hkv != 0 {
            return Err(Error::shape(op, format!("{} query heads not divisible by {} kv heads", self.hq, self.hkv)));
        }
        match (cfg.sink_enabled, sink_len) {
            (true, None) => return Err(Error::invalid(op, "sink enabled but no sink bias given")),
            (false, Some(_)) => return Err(Error::invalid(op, "sink bias given but sink disabled")),
            (true, Some(n)) if n != self.hq => {
                return Err(Error::shape(op, format!("{n} sink logits for {} heads", self.hq)))
            }
            _ => {}
        }
        if self.tq > 0 && (self.query_start < self.key_start || self.query_start + self.tq > self.key_start + self.tk) {
            return Err(Error::shape(
                op,
                format!(
                    "queries at {}..{} not covered by keys at {}..{}",
                    self.query_start,
                    self.query_start + self.tq,
                    self.key_start,
                    self.key_start + self.tk
                ),
            ));
        }
        Ok(())
    }

    pub fn group(&self) -> usize {
        self.hq / self.hkv
    }

    #[inline]
    pub fn q_off(&self, row: usize, head: usize) -> usize {
        (row * self.hq + head) * self.d
    }

    #[inline]
    pub fn k_off(&self, key_row: usize, kv_head: usize) -> usize {
        (key_row * self.hkv + kv_head) * self.d
    }
}

/// Absolute key positions visible to one query row.
pub(crate) trait KeyRanges {
    fn ranges(&self, head: usize, row: usize, position: usize, out: &mut Vec<Range<usize>>) -> Result<()>;
}

pub(crate) struct Causal;

impl KeyRanges for Causal {
    fn ranges(&self, _: usize, _: usize, position: usize, out: &mut Vec<Range<usize>>) -> Result<()> {
        out.push(0..position + 1);
        Ok(())
    }
}

pub(crate) struct RowResult {
    pub out: Vec<f64>,
    /// Log of the softmax denominator (sink included) per `(row, head)`.
    pub lse: Vec<f64>,
}

fn key_rows(dims: &Dims, ranges: &[Range<usize>], position: usize) -> Result<Vec<usize>> {
    let mut rows = Vec::new();
    for r in ranges {
        if r.start < dims.key_start || r.end > dims.key_start + dims.tk || r.end > position + 1 {
            return Err(Error::invalid(
                "attention",
                format!(
                    "key range {r:?} for position {position} outside keys {}..{}",
                    dims.key_start,
                    dims.key_start + dims.tk
                ),
            ));
        }
        rows.extend((r.start - dims.key_start)..(r.end - dims.key_start));
    }
    Ok(rows)
}

pub(crate) fn forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    dims: &Dims,
    scale: f64,
    sink: Option<&[f64]>,
    ranges: &dyn KeyRanges,
) -> Result<RowResult> {
    let d = dims.d;
    let mut out = vec![0.0; dims.tq * dims.hq * d];
    let mut lse = vec![0.0; dims.tq * dims.hq];
    let mut spans = Vec::new();
    let mut logits = Vec::new();
    for i in 0..dims.tq {
        let position = dims.query_start + i;
        for h in 0..dims.hq {
            spans.clear();
            ranges.ranges(h, i, position, &mut spans)?;
            let rows = key_rows(dims, &spans, position)?;
            let sink_logit = sink.map(|s| s[h]);
            if rows.is_empty() && sink_logit.is_none() {
                return Err(Error::EmptyRow { position });
            }
            let g = h / dims.group();
            let qv = &q[dims.q_off(i, h)..dims.q_off(i, h) + d];
            logits.clear();
            logits.extend(rows.iter().map(|&j| scale * dot(qv, &k[dims.k_off(j, g)..dims.k_off(j, g) + d])));
            let m = logits.iter().copied().chain(sink_logit).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = sink_logit.map_or(0.0, |s| (s - m).exp());
            let o = &mut out[dims.q_off(i, h)..dims.q_off(i, h) + d];
            for (&j, &a) in rows.iter().zip(&logits) {
                let w = (a - m).exp();
                denom += w;
                let vv = &v[dims.k_off(j, g)..dims.k_off(j, g) + d];
                for (oc, vc) in o.iter_mut().zip(vv) {
                    *oc += w * vc;
                }
            }
            o.iter_mut().for_each(|x| *x /= denom);
            lse[i * dims.hq + h] = m + denom.ln();
        }
    }
    Ok(RowResult { out, lse })
}

pub(crate) struct Grads {
    pub dq: Vec<f64>,
    pub dk: Vec<f64>,
    pub dv: Vec<f64>,
    pub dsink: Option<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &[f64],
    dout: &[f64],
    lse: &[f64],
    dims: &Dims,
    scale: f64,
    sink: Option<&[f64]>,
    ranges: &dyn KeyRanges,
) -> Result<Grads> {
    let d = dims.d;
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut dsink = sink.map(|s| vec![0.0; s.len()]);
    let mut spans = Vec::new();
    for i in 0..dims.tq {
        let position = dims.query_start + i;
        for h in 0..dims.hq {
            spans.clear();
            ranges.ranges(h, i, position, &mut spans)?;
            let rows = key_rows(dims, &spans, position)?;
            let g = h / dims.group();
            let qo = dims.q_off(i, h);
            let qv = &q[qo..qo + d];
            let go = &dout[qo..qo + d];
            let l = lse[i * dims.hq + h];
            let delta = dot(go, &out[qo..qo + d]);
            if let (Some(ds), Some(s)) = (dsink.as_mut(), sink) {
                ds[h] -= (s[h] - l).exp() * delta;
            }
            for &j in &rows {
                let ko = dims.k_off(j, g);
                let p = (scale * dot(qv, &k[ko..ko + d]) - l).exp();
                let dp = dot(go, &v[ko..ko + d]);
                let ds = p * (dp - delta) * scale;
                for c in 0..d {
                    dv[ko + c] += p * go[c];
                    dq[qo + c] += ds * k[ko + c];
                    dk[ko + c] += ds * qv[c];
                }
            }
        }
    }
    Ok(Grads { dq, dk, dv, dsink })
}
