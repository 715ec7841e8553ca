use std::ops::Range;

use super::engine::{self, Dims, KeyRanges};
use super::{dims_for, AttnConfig, SinkBias, Span};
use crate::error::{Error, Result};
use crate::selection::BlockIndexSet;
use crate::tensor::Tensor;

/// Key ranges of the selected blocks, truncated at the query position.
pub(crate) struct Blocks<'a> {
    pub indices: &'a BlockIndexSet,
    pub group_size: usize,
    pub keys_end: usize,
}

impl<'a> Blocks<'a> {
    pub fn new(indices: &'a BlockIndexSet, dims: &Dims, cfg: &AttnConfig) -> Result<Self> {
        if indices.block_size != cfg.block_size {
            return Err(Error::invalid(
                "block_sparse_attention",
                format!("indices use block size {}, config {}", indices.block_size, cfg.block_size),
            ));
        }
        if indices.len() != dims.tq || indices.query_start != dims.query_start {
            return Err(Error::shape(
                "block_sparse_attention",
                format!(
                    "indices cover rows {}..{}, queries are {}..{}",
                    indices.query_start,
                    indices.query_start + indices.len(),
                    dims.query_start,
                    dims.query_start + dims.tq
                ),
            ));
        }
        if indices.groups != dims.hkv {
            return Err(Error::shape(
                "block_sparse_attention",
                format!("indices for {} groups, {} kv heads", indices.groups, dims.hkv),
            ));
        }
        if dims.key_start != 0 {
            return Err(Error::invalid("block_sparse_attention", "shared keys must start at position 0"));
        }
        Ok(Self { indices, group_size: dims.group(), keys_end: dims.tk })
    }
}

impl KeyRanges for Blocks<'_> {
    fn ranges(&self, head: usize, row: usize, position: usize, out: &mut Vec<Range<usize>>) -> Result<()> {
        let b = self.indices.block_size;
        let blocks = self.keys_end.div_ceil(b);
        for &j in self.indices.blocks(row, head / self.group_size) {
            if j >= blocks {
                return Err(Error::BlockOutOfRange { block: j, blocks });
            }
            if j * b > position {
                return Err(Error::NonCausalBlock { block: j, position });
            }
            out.push(j * b..((j + 1) * b).min(position + 1));
        }
        Ok(())
    }
}

/// Attention over only the selected key blocks of a shared K/V store.
pub fn block_sparse_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    indices: &BlockIndexSet,
    cfg: &AttnConfig,
    sink: Option<&SinkBias>,
) -> Result<Tensor> {
    let span = Span::queries_from(indices.query_start);
    let dims = dims_for(q, k, v, cfg, sink, span, "block_sparse_attention")?;
    let ranges = Blocks::new(indices, &dims, cfg)?;
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
