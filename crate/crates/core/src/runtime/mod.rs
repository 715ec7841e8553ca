//! Prefill, incremental decode, toy training, and regime comparison.

mod compare;
mod task;
mod train;

pub use compare::{compare_regimes, ComparisonReport, Regime, RegimeResult};
pub use task::{Sample, SyntheticTask, TaskKind};
pub use train::{evaluate, heldout, train, CurvePoint, Optimizer, TrainConfig, TrainReport};

use crate::error::Result;
use crate::kvcache::KvArena;
use crate::model::{forward, Model};
use crate::selection::BlockIndexSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Prefill {
    /// `[t × vocab]` next-token logits.
    pub logits: Tensor,
    pub arena: KvArena,
    /// Per full layer, the index sets for every prefilled row.
    pub selections: Vec<BlockIndexSet>,
}

/// Runs a whole prompt through a fresh arena.
pub fn prefill(model: &Model, tokens: &[usize]) -> Result<Prefill> {
    let mut arenas = vec![model.new_arena()];
    let vars = model.params.vars(false);
    let out = forward(model, &vars, &[tokens], &mut arenas)?;
    Ok(Prefill {
        logits: out.logits.value().clone(),
        arena: arenas.pop().expect("one arena"),
        selections: out.selections.into_iter().map(|mut s| s.remove(0)).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct DecodeStep {
    /// `[1 × vocab]`.
    pub logits: Tensor,
    /// Per full layer, the index set of the new row.
    pub selections: Vec<BlockIndexSet>,
}

/// Appends one token to an existing arena (which may be empty).
pub fn decode_step(model: &Model, arena: &mut KvArena, token: usize) -> Result<DecodeStep> {
    let vars = model.params.vars(false);
    let out = forward(model, &vars, &[&[token]], std::slice::from_mut(arena))?;
    Ok(DecodeStep {
        logits: out.logits.value().clone(),
        selections: out.selections.into_iter().map(|mut s| s.remove(0)).collect(),
    })
}

/// Decodes `tokens` one at a time from an empty arena and stacks the logits.
pub fn decode_all(model: &Model, tokens: &[usize]) -> Result<(Tensor, KvArena, Vec<Vec<BlockIndexSet>>)> {
    let mut arena = model.new_arena();
    let mut rows = Vec::with_capacity(tokens.len() * model.cfg.vocab);
    let mut selections = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let step = decode_step(model, &mut arena, t)?;
        rows.extend_from_slice(step.logits.data());
        selections.push(step.selections);
    }
    let logits = Tensor::new(&[tokens.len(), model.cfg.vocab], rows)?;
    Ok((logits, arena, selections))
}

/// Row-wise argmax.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    t.rows()
        .map(|r| r.iter().enumerate().fold(0, |best, (i, &v)| if v > r[best] { i } else { best }))
        .collect()
}
