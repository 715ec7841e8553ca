//! Block selection: per-head block scores to per-group top-k index sets.

use serde::{Deserialize, Serialize};

use crate::attention::BlockScores;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Selected key blocks per query row and GQA group.
///
/// `rows[r][g]` is the ascending block list for the query at absolute
/// position `query_start + r` in group `g`. Every query head of a group reads
/// the same list.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockIndexSet {
    pub k_blocks: usize,
    pub block_size: usize,
    pub query_start: usize,
    pub groups: usize,
    pub rows: Vec<Vec<Vec<usize>>>,
}

impl BlockIndexSet {
    /// Every causal block for every row: the degenerate selection that turns
    /// sparse attention back into full attention.
    pub fn full_cover(rows: usize, groups: usize, block_size: usize, query_start: usize) -> Self {
        let rows = (0..rows)
            .map(|r| {
                let n = (query_start + r) / block_size + 1;
                vec![(0..n).collect(); groups]
            })
            .collect::<Vec<_>>();
        let k_blocks = rows.last().and_then(|r: &Vec<Vec<usize>>| r.first()).map_or(0, Vec::len);
        Self { k_blocks, block_size, query_start, groups, rows }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn blocks(&self, row: usize, group: usize) -> &[usize] {
        &self.rows[row][group]
    }

    /// Row `row` as a standalone set (as a decode step would produce it).
    pub fn row_set(&self, row: usize) -> Self {
        Self {
            k_blocks: self.k_blocks,
            block_size: self.block_size,
            query_start: self.query_start + row,
            groups: self.groups,
            rows: vec![self.rows[row].clone()],
        }
    }

    /// Debug dump: `{"rows": {"<position>": {"<group>": [blocks]}}, ...}`.
    pub fn to_debug_json(&self) -> serde_json::Value {
        let rows: serde_json::Map<String, serde_json::Value> = self
            .rows
            .iter()
            .enumerate()
            .map(|(r, groups)| {
                let inner: serde_json::Map<String, serde_json::Value> =
                    groups.iter().enumerate().map(|(g, b)| (g.to_string(), serde_json::json!(b))).collect();
                ((self.query_start + r).to_string(), serde_json::Value::Object(inner))
            })
            .collect();
        serde_json::json!({
            "block_size": self.block_size,
            "k_blocks": self.k_blocks,
            "rows": rows,
        })
    }

    /// Checks the structural invariants: ascending, causal, at most `k_blocks`.
    pub fn validate(&self) -> Result<()> {
        for (r, groups) in self.rows.iter().enumerate() {
            let position = self.query_start + r;
            if groups.len() != self.groups {
                return Err(Error::invalid("BlockIndexSet", format!("row {position} has {} groups", groups.len())));
            }
            for blocks in groups {
                if blocks.len() > self.k_blocks {
                    return Err(Error::invalid("BlockIndexSet", format!("row {position} holds {} blocks", blocks.len())));
                }
                if blocks.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::invalid("BlockIndexSet", format!("row {position} not strictly ascending")));
                }
                if let Some(&b) = blocks.iter().find(|&&b| b * self.block_size > position) {
                    return Err(Error::NonCausalBlock { block: b, position });
                }
            }
        }
        Ok(())
    }
}

/// Group-wise maximum over consecutive runs of `heads_per_group` heads.
pub fn group_aggregate(scores: &BlockScores, heads_per_group: usize) -> Result<BlockScores> {
    let heads = scores.heads();
    if heads_per_group == 0 || heads % heads_per_group != 0 {
        return Err(Error::shape("group_aggregate", format!("{heads} heads in groups of {heads_per_group}")));
    }
    let groups = heads / heads_per_group;
    let (rows, blocks) = (scores.rows(), scores.blocks());
    let plane = rows * blocks;
    let src = scores.values.data();
    let mut out = vec![f64::NEG_INFINITY; groups * plane];
    for h in 0..heads {
        let g = h / heads_per_group;
        for (o, &s) in out[g * plane..(g + 1) * plane].iter_mut().zip(&src[h * plane..(h + 1) * plane]) {
            *o = o.max(s);
        }
    }
    Ok(BlockScores {
        values: Tensor::new(&[groups, rows, blocks], out)?,
        block_size: scores.block_size,
        query_start: scores.query_start,
    })
}

/// Highest-scoring causal blocks per (group, row); ties go to the lower
/// block index. Rows with at most `k_blocks` causal blocks select them all.
pub fn topk_blocks(grouped: &BlockScores, k_blocks: usize) -> Result<BlockIndexSet> {
    if k_blocks == 0 {
        return Err(Error::Config("k_blocks must be at least 1".into()));
    }
    let (groups, rows) = (grouped.heads(), grouped.rows());
    let mut out = vec![vec![Vec::new(); groups]; rows];
    let mut order = Vec::new();
    for (r, row_sets) in out.iter_mut().enumerate() {
        let causal = grouped.causal_blocks(r);
        for (g, set) in row_sets.iter_mut().enumerate() {
            order.clear();
            order.extend(0..causal);
            if causal > k_blocks {
                let s = grouped.row(g, r);
                order.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
                order.truncate(k_blocks);
                order.sort_unstable();
            }
            set.extend_from_slice(&order);
        }
    }
    Ok(BlockIndexSet {
        k_blocks,
        block_size: grouped.block_size,
        query_start: grouped.query_start,
        groups,
        rows: out,
    })
}

/// Aggregates per-head scores and selects in one go.
pub fn select(scores: &BlockScores, heads_per_group: usize, k_blocks: usize) -> Result<BlockIndexSet> {
    topk_blocks(&group_aggregate(scores, heads_per_group)?, k_blocks)
}

/// Fraction of `oracle` present in `candidate`. An empty oracle gives 1.
pub fn selection_recall(oracle: &[usize], candidate: &[usize]) -> f64 {
    if oracle.is_empty() {
        return 1.0;
    }
    let hit = oracle.iter().filter(|b| candidate.contains(b)).count();
    hit as f64 / oracle.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(rows: &[&[f64]], block_size: usize, query_start: usize) -> BlockScores {
        let n = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        BlockScores { values: Tensor::new(&[1, rows.len(), n], data).unwrap(), block_size, query_start }
    }

    #[test]
    fn topk_hand_cases() {
        let s = scores(&[&[0.1, 0.5, 0.2, 0.7]], 1, 3);
        assert_eq!(topk_blocks(&s, 2).unwrap().blocks(0, 0), &[1, 3]);
        let s = scores(&[&[0.5, 0.5, 0.1]], 1, 2);
        assert_eq!(topk_blocks(&s, 1).unwrap().blocks(0, 0), &[0]);
    }

    #[test]
    fn early_rows_take_every_causal_block() {
        let s = scores(&[&[0.9, 0.0, 0.0], &[0.2, 0.8, 0.0]], 4, 3);
        let set = topk_blocks(&s, 2).unwrap();
        assert_eq!(set.blocks(0, 0), &[0]);
        assert_eq!(set.blocks(1, 0), &[0, 1]);
        set.validate().unwrap();
    }

    #[test]
    fn group_max_is_elementwise() {
        let values = Tensor::new(&[2, 1, 2], vec![0.1, 0.9, 0.8, 0.2]).unwrap();
        let s = BlockScores { values, block_size: 1, query_start: 1 };
        let g = group_aggregate(&s, 2).unwrap();
        assert_eq!(g.row(0, 0), &[0.8, 0.9]);
        assert_eq!(group_aggregate(&s, 1).unwrap(), s);
        assert!(group_aggregate(&s, 3).is_err());
    }

    #[test]
    fn recall_cases() {
        assert_eq!(selection_recall(&[1, 3], &[1, 3]), 1.0);
        assert_eq!(selection_recall(&[1, 3], &[2, 4]), 0.0);
        assert_eq!(selection_recall(&[1, 3], &[3, 5]), 0.5);
        assert_eq!(selection_recall(&[], &[3]), 1.0);
    }

    #[test]
    fn debug_json_nests_position_then_group() {
        let set = BlockIndexSet::full_cover(2, 2, 4, 4);
        let v = set.to_debug_json();
        assert_eq!(v["rows"]["5"]["1"], serde_json::json!([0, 1]));
    }
}
