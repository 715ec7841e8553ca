//! Causal attention kernels over `[t × heads × d]` tensors.
//!
//! Four kernels share one numerical contract:
//!
//! * [`reference_full_attention`] materialises every softmax row and is the
//!   yardstick for the others.
//! * [`tiled_attention_with_scores`] walks `tile_rows × block_size` tiles with
//!   an online softmax. Alongside the output it keeps each tile's raw row
//!   maximum and converts it to probability scale in the epilogue, giving the
//!   per-block maximum attention probability ([`BlockScores`]) without ever
//!   holding a `t × t` matrix.
//! * [`sliding_window_attention`] restricts each row to its last `window`
//!   positions.
//! * [`block_sparse_attention`] restricts each row to the key blocks named by
//!   a [`BlockIndexSet`](crate::selection::BlockIndexSet).
//!
//! Query head `h` reads key/value head `h / (heads / kv_heads)` (grouped-query
//! attention). When a [`SinkBias`] is supplied, `exp(sink[h] - m)` joins the
//! softmax denominator as a key with no value, so real tokens share a mass
//! strictly below one.
//!
//! Query rows and keys carry absolute positions: row `i` sits at
//! `query_start + i` and key row `j` at `key_start + j` (see [`Span`]). This
//! lets a decode step run the same kernel over one query row and the cached
//! prefix, so a decoded row reproduces the prefill row bit for bit.

mod engine;
pub mod grad;
mod reference;
mod sparse;
mod tiled;
mod window;

pub use grad::{FullKernel, Layout};
pub use reference::{reference_full_attention, reference_full_attention_span};
pub use sparse::block_sparse_attention;
pub use tiled::{tiled_attention_span, tiled_attention_with_scores};
pub use window::{sliding_window_attention, sliding_window_attention_span};

pub(crate) use engine::Dims;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnConfig {
    pub head_dim: usize,
    pub softmax_scale: f64,
    /// Key block size for scores and sparse selection; also the key tile width.
    pub block_size: usize,
    /// Query tile height of the tiled kernel.
    pub tile_rows: usize,
    pub window: usize,
    pub sink_enabled: bool,
}

impl AttnConfig {
    pub fn new(head_dim: usize, block_size: usize, window: usize) -> Result<Self> {
        let cfg = Self {
            head_dim,
            softmax_scale: 1.0 / (head_dim as f64).sqrt(),
            block_size,
            tile_rows: block_size,
            window,
            sink_enabled: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_tile_rows(mut self, tile_rows: usize) -> Result<Self> {
        self.tile_rows = tile_rows;
        self.validate()?;
        Ok(self)
    }

    pub fn with_sink(mut self, enabled: bool) -> Self {
        self.sink_enabled = enabled;
        self
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.softmax_scale = scale;
        self
    }

    /// Key tile width. Always equal to the block size.
    pub fn tile_cols(&self) -> usize {
        self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("head_dim", self.head_dim),
            ("block_size", self.block_size),
            ("tile_rows", self.tile_rows),
            ("window", self.window),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.head_dim % 2 != 0 {
            return Err(Error::Config(format!("head_dim {} must be even", self.head_dim)));
        }
        if !self.softmax_scale.is_finite() || self.softmax_scale <= 0.0 {
            return Err(Error::Config(format!("softmax_scale {} must be positive", self.softmax_scale)));
        }
        Ok(())
    }

    pub fn num_blocks(&self, keys: usize) -> usize {
        keys.div_ceil(self.block_size)
    }
}

/// Learnable per-query-head sink logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinkBias {
    pub logits: Vec<f64>,
}

impl SinkBias {
    pub fn new(logits: Vec<f64>) -> Self {
        Self { logits }
    }

    pub fn zeros(heads: usize) -> Self {
        Self { logits: vec![0.0; heads] }
    }
}

/// Absolute positions of the first query row and first key row.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Span {
    pub query_start: usize,
    pub key_start: usize,
}

impl Span {
    pub fn queries_from(query_start: usize) -> Self {
        Self { query_start, key_start: 0 }
    }
}

/// Per-head, per-query-row maximum softmax probability within each key block.
///
/// `values` has shape `[heads × rows × blocks]`; row `r` is the query at
/// absolute position `query_start + r`. Blocks that start after a row's
/// position hold exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockScores {
    pub values: Tensor,
    pub block_size: usize,
    pub query_start: usize,
}

impl BlockScores {
    pub fn heads(&self) -> usize {
        self.values.dim(0)
    }

    pub fn rows(&self) -> usize {
        self.values.dim(1)
    }

    pub fn blocks(&self) -> usize {
        self.values.dim(2)
    }

    pub fn row(&self, head: usize, row: usize) -> &[f64] {
        let n = self.blocks();
        let off = (head * self.rows() + row) * n;
        &self.values.data()[off..off + n]
    }

    pub fn get(&self, head: usize, row: usize, block: usize) -> f64 {
        self.values.at(&[head, row, block])
    }

    /// Number of blocks visible to the query at `row` (those starting at or
    /// before its position).
    pub fn causal_blocks(&self, row: usize) -> usize {
        ((self.query_start + row) / self.block_size + 1).min(self.blocks())
    }
}

/// Shape bookkeeping shared by the public single-sequence entry points.
pub(crate) fn dims_for(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
    span: Span,
    op: &'static str,
) -> Result<Dims> {
    cfg.validate()?;
    let [tq, hq, d] = three_dims(q, op)?;
    let [tk, hkv, dk] = three_dims(k, op)?;
    if v.shape() != k.shape() {
        return Err(Error::shape(op, format!("K {:?} vs V {:?}", k.shape(), v.shape())));
    }
    let dims = Dims { tq, tk, hq, hkv, d, query_start: span.query_start, key_start: span.key_start };
    dims.check(op, dk, cfg, sink.map(|s| s.logits.len()))?;
    Ok(dims)
}

fn three_dims(t: &Tensor, op: &'static str) -> Result<[usize; 3]> {
    match t.shape()[..] {
        [a, b, c] => Ok([a, b, c]),
        _ => Err(Error::shape(op, format!("expected [t, heads, d], got {:?}", t.shape()))),
    }
}
