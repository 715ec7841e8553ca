use std::ops::Range;

use super::engine::{self, KeyRanges};
use super::{dims_for, AttnConfig, SinkBias, Span};
use crate::error::Result;
use crate::tensor::Tensor;

/// Keys `[max(key_start, p - w + 1), p]` for the query at position `p`.
pub(crate) struct Window {
    pub w: usize,
    pub key_start: usize,
}

impl KeyRanges for Window {
    fn ranges(&self, _: usize, _: usize, position: usize, out: &mut Vec<Range<usize>>) -> Result<()> {
        let lo = (position + 1).saturating_sub(self.w).max(self.key_start);
        out.push(lo..position + 1);
        Ok(())
    }
}

/// Causal attention restricted to each row's last `cfg.window` positions.
pub fn sliding_window_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
) -> Result<Tensor> {
    sliding_window_attention_span(q, k, v, cfg, sink, Span::default())
}

/// As [`sliding_window_attention`], with keys possibly starting mid-sequence
/// (a ring buffer holding only the recent past).
pub fn sliding_window_attention_span(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
    span: Span,
) -> Result<Tensor> {
    let dims = dims_for(q, k, v, cfg, sink, span, "sliding_window_attention")?;
    let ranges = Window { w: cfg.window, key_start: span.key_start };
    let res = engine::forward(
        q.data(),
        k.data(),
        v.data(),
        &dims,
        cfg.softmax_scale,
        sink.map(|s| s.logits.as_slice()),
        &ranges,
    )?;
    Tensor::new(q.shape(), res.out)
}
