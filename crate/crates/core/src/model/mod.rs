//! Layers, hybrid stack, and the batched forward pass.
//!
//! Every layer is pre-norm residual: `x + attn(norm(x))`, then
//! `x + ffn(norm(x))` with a bias-free SwiGLU FFN. A full layer runs causal
//! attention with the tiled kernel, appends its post-RoPE K/V to the block's
//! shared store, and selects key blocks from its scores. A sparse layer
//! projects its own `q', k', v'`, attends over its window cache and over the
//! selected blocks of the shared store, and mixes the two with per-head
//! sigmoid gates.

mod config;
pub mod io;
mod params;

pub use config::{build_hybrid_stack, HybridStack, LayerRole, ModelConfig};
pub use params::{layer_name, ParamVars, Params};

use crate::attention::grad::{full_attention, sparse_attention, window_attention};
use crate::attention::{AttnConfig, BlockScores, FullKernel, Layout, Span};
use crate::error::{Error, Result};
use crate::kvcache::{KvArena, KvHandle};
use crate::selection::{select, BlockIndexSet};
use crate::tensor::{ops, Tensor, Var};

/// Added to the mean square inside RMS normalisation.
pub const RMS_EPS: f64 = 1e-24;

/// Where a sparse layer's block-sparse branch reads K/V from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SharedKvSource {
    /// The block's full layer (the architecture proper).
    #[default]
    FullLayer,
    /// The sparse layer's own `k', v'`. A test harness for degenerate-config
    /// oracles; needs a window cache that still holds the whole history.
    OwnProjection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForwardOptions {
    pub kernel: FullKernel,
    pub shared_kv: SharedKvSource,
    /// When false, sparse layers run only their window branch.
    pub sparse_branch: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self { kernel: FullKernel::Tiled, shared_kv: SharedKvSource::FullLayer, sparse_branch: true }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub stack: HybridStack,
    pub params: Params,
    pub options: ForwardOptions,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let stack = cfg.stack()?;
        let params = Params::init(&cfg, &stack, seed)?;
        Ok(Self { cfg, stack, params, options: ForwardOptions::default() })
    }

    pub fn with_options(mut self, options: ForwardOptions) -> Self {
        self.options = options;
        self
    }

    pub fn new_arena(&self) -> KvArena {
        KvArena::new(&self.cfg, &self.stack)
    }
}

/// What a full layer hands to the sparse layers of its block.
#[derive(Clone, Debug)]
pub struct BlockContext {
    pub k: Var,
    pub v: Var,
    pub handles: Vec<KvHandle>,
    pub indices: Vec<BlockIndexSet>,
}

/// Shared per-pass state.
pub struct Pass<'a> {
    pub model: &'a Model,
    pub vars: &'a ParamVars,
    pub attn: AttnConfig,
    pub batch: usize,
    pub rows: usize,
    pub start: usize,
    positions: Vec<usize>,
}

impl<'a> Pass<'a> {
    pub fn new(model: &'a Model, vars: &'a ParamVars, batch: usize, rows: usize, start: usize) -> Result<Self> {
        let positions = (0..batch).flat_map(|_| start..start + rows).collect();
        Ok(Self { model, vars, attn: model.cfg.attn()?, batch, rows, start, positions })
    }

    fn p(&self, layer: usize, name: &str) -> Result<&Var> {
        self.vars.layer(layer, name)
    }

    fn sink(&self, layer: usize, name: &str) -> Result<Option<&Var>> {
        if self.model.cfg.sink_enabled {
            Ok(Some(self.p(layer, name)?))
        } else {
            Ok(None)
        }
    }

    fn project(&self, h: &Var, w: &Var, heads: usize, rope: bool) -> Result<Var> {
        let cfg = &self.model.cfg;
        let x = ops::reshape(&ops::matmul(h, w)?, &[self.batch * self.rows, heads, cfg.head_dim])?;
        if rope {
            ops::rope(&x, &self.positions, cfg.rope_base)
        } else {
            Ok(x)
        }
    }

    fn merge_heads(&self, o: &Var) -> Result<Var> {
        let cfg = &self.model.cfg;
        ops::reshape(o, &[self.batch * self.rows, cfg.n_q_heads * cfg.head_dim])
    }

    fn gate(&self, layer: usize, h: &Var, which: &str) -> Result<Var> {
        let w = self.p(layer, &format!("gate_{which}_w"))?;
        let b = self.p(layer, &format!("gate_{which}_b"))?;
        ops::sigmoid(&ops::add_row_bias(&ops::matmul(h, w)?, b)?)
    }

    fn new_rows(&self, t: &Tensor, seq: usize) -> Result<Tensor> {
        let width = t.numel() / t.dim(0);
        let data = t.data()[seq * self.rows * width..(seq + 1) * self.rows * width].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = self.rows;
        Tensor::new(&shape, data)
    }
}

/// Full-attention layer: returns the residual output and the context its
/// block's sparse layers consume.
pub fn full_layer_forward(
    pass: &Pass,
    layer: usize,
    x: &Var,
    arenas: &mut [KvArena],
) -> Result<(Var, BlockContext, Vec<BlockScores>)> {
    let cfg = &pass.model.cfg;
    let h = ops::rmsnorm(x, pass.p(layer, "attn_norm")?, RMS_EPS)?;
    let q = pass.project(&h, pass.p(layer, "wq")?, cfg.n_q_heads, true)?;
    let k = pass.project(&h, pass.p(layer, "wk")?, cfg.n_kv_heads, true)?;
    let v = pass.project(&h, pass.p(layer, "wv")?, cfg.n_kv_heads, false)?;

    let mut past_k = Vec::with_capacity(pass.batch);
    let mut past_v = Vec::with_capacity(pass.batch);
    for arena in arenas.iter() {
        let (pk, pv) = arena.shared_kv(arena.handle_for(layer)?)?;
        if pk.dim(0) != pass.start {
            return Err(Error::invalid("full_layer_forward", format!("cache holds {} rows, pass starts at {}", pk.dim(0), pass.start)));
        }
        past_k.push(pk);
        past_v.push(pv);
    }
    let keys = ops::prepend_rows(&past_k, &k, pass.rows)?;
    let values = ops::prepend_rows(&past_v, &v, pass.rows)?;
    let layout = Layout::new(pass.batch, Span::queries_from(pass.start));
    let (o, scores) =
        full_attention(&q, &keys, &values, pass.sink(layer, "sink")?, &pass.attn, layout, pass.model.options.kernel)?;

    let mut handles = Vec::with_capacity(pass.batch);
    for (b, arena) in arenas.iter_mut().enumerate() {
        let block = arena.handle_for(layer)?.block;
        handles.push(arena.append_full(layer, block, &pass.new_rows(k.value(), b)?, &pass.new_rows(v.value(), b)?)?);
    }
    let indices = scores
        .iter()
        .map(|s| select(s, cfg.group_size(), cfg.k_blocks()))
        .collect::<Result<Vec<_>>>()?;

    let y = ops::add(x, &ops::matmul(&pass.merge_heads(&o)?, pass.p(layer, "wo")?)?)?;
    Ok((y, BlockContext { k: keys, v: values, handles, indices }, scores))
}

/// Two-branch sparse layer over its window cache and the block context.
pub fn sparse_layer_forward(
    pass: &Pass,
    layer: usize,
    x: &Var,
    ctx: Option<&BlockContext>,
    arenas: &mut [KvArena],
) -> Result<Var> {
    let cfg = &pass.model.cfg;
    let options = pass.model.options;
    let h = ops::rmsnorm(x, pass.p(layer, "attn_norm")?, RMS_EPS)?;
    let q = pass.project(&h, pass.p(layer, "wq")?, cfg.n_q_heads, true)?;
    let k = pass.project(&h, pass.p(layer, "wk")?, cfg.n_kv_heads, true)?;
    let v = pass.project(&h, pass.p(layer, "wv")?, cfg.n_kv_heads, false)?;

    let mut past_k = Vec::with_capacity(pass.batch);
    let mut past_v = Vec::with_capacity(pass.batch);
    let mut key_start = None;
    for arena in arenas.iter() {
        let (pk, pv, s) = arena.window_kv(layer)?;
        if s + pk.dim(0) != pass.start || key_start.is_some_and(|k| k != s) {
            return Err(Error::invalid("sparse_layer_forward", "window caches out of step with the pass"));
        }
        key_start = Some(s);
        past_k.push(pk);
        past_v.push(pv);
    }
    let key_start = key_start.unwrap_or(pass.start);
    let wk = ops::prepend_rows(&past_k, &k, pass.rows)?;
    let wv = ops::prepend_rows(&past_v, &v, pass.rows)?;
    let window_layout = Layout::new(pass.batch, Span { query_start: pass.start, key_start });
    let o_window = window_attention(&q, &wk, &wv, pass.sink(layer, "sink_window")?, &pass.attn, window_layout)?;
    let mut mixed = ops::head_gate(&o_window, &pass.gate(layer, &h, "window")?)?;

    if options.sparse_branch {
        let ctx = ctx.ok_or_else(|| Error::invalid("sparse_layer_forward", format!("layer {layer} has no block context")))?;
        for (arena, &handle) in arenas.iter().zip(&ctx.handles) {
            arena.check_reader(layer, handle)?;
        }
        let (sk, sv) = match options.shared_kv {
            SharedKvSource::FullLayer => (&ctx.k, &ctx.v),
            SharedKvSource::OwnProjection if key_start == 0 => (&wk, &wv),
            SharedKvSource::OwnProjection => {
                return Err(Error::invalid("sparse_layer_forward", "own-projection keys need the full history in the window"))
            }
        };
        let layout = Layout::new(pass.batch, Span::queries_from(pass.start));
        let o_sparse =
            sparse_attention(&q, sk, sv, pass.sink(layer, "sink_sparse")?, &pass.attn, layout, ctx.indices.clone())?;
        let g_sparse = pass.gate(layer, &h, "sparse")?;
        mixed = ops::add(&ops::head_gate(&o_sparse, &g_sparse)?, &mixed)?;
    }

    for (b, arena) in arenas.iter_mut().enumerate() {
        arena.window_append(layer, layer, &pass.new_rows(k.value(), b)?, &pass.new_rows(v.value(), b)?)?;
    }
    ops::add(x, &ops::matmul(&pass.merge_heads(&mixed)?, pass.p(layer, "wo")?)?)
}

pub fn rmsnorm(x: &Var, gain: &Var) -> Result<Var> {
    ops::rmsnorm(x, gain, RMS_EPS)
}

/// Bias-free SwiGLU: `(silu(x W_gate) ⊙ x W_up) W_down`.
pub fn ffn_forward(x: &Var, w_gate: &Var, w_up: &Var, w_down: &Var) -> Result<Var> {
    let a = ops::silu(&ops::matmul(x, w_gate)?)?;
    ops::matmul(&ops::mul(&a, &ops::matmul(x, w_up)?)?, w_down)
}

fn ffn_block(pass: &Pass, layer: usize, x: &Var) -> Result<Var> {
    let h = rmsnorm(x, pass.p(layer, "ffn_norm")?)?;
    let f = ffn_forward(&h, pass.p(layer, "w_gate")?, pass.p(layer, "w_up")?, pass.p(layer, "w_down")?)?;
    ops::add(x, &f)
}

pub fn embed(vars: &ParamVars, tokens: &[usize]) -> Result<Var> {
    ops::embedding(vars.get("embed")?, tokens)
}

pub fn unembed(vars: &ParamVars, x: &Var) -> Result<Var> {
    ops::matmul(&rmsnorm(x, vars.get("final_norm")?)?, vars.get("unembed")?)
}

/// Everything a forward pass produced.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[batch·t × vocab]`, sequence-major.
    pub logits: Var,
    /// Per full layer (stack order), per sequence.
    pub scores: Vec<Vec<BlockScores>>,
    pub selections: Vec<Vec<BlockIndexSet>>,
}

/// Runs `tokens` (equal-length sequences) through the stack, extending one
/// arena per sequence. All arenas must hold the same number of tokens.
pub fn forward(model: &Model, vars: &ParamVars, tokens: &[&[usize]], arenas: &mut [KvArena]) -> Result<ForwardOutput> {
    let batch = tokens.len();
    let rows = tokens.first().map_or(0, |t| t.len());
    if batch == 0 || rows == 0 {
        return Err(Error::invalid("forward", "empty batch or sequence"));
    }
    if tokens.iter().any(|t| t.len() != rows) || arenas.len() != batch {
        return Err(Error::shape("forward", format!("{batch} sequences, {} arenas, ragged lengths", arenas.len())));
    }
    let start = arenas[0].len();
    if arenas.iter().any(|a| a.len() != start) {
        return Err(Error::invalid("forward", "arenas hold different lengths"));
    }
    let pass = Pass::new(model, vars, batch, rows, start)?;
    let flat: Vec<usize> = tokens.iter().flat_map(|t| t.iter().copied()).collect();
    let mut x = embed(vars, &flat)?;
    let mut ctx: Option<BlockContext> = None;
    let mut scores = Vec::new();
    let mut selections = Vec::new();
    for (layer, role) in model.stack.roles.iter().enumerate() {
        x = match role {
            LayerRole::Full => {
                let (y, c, s) = full_layer_forward(&pass, layer, &x, arenas)?;
                selections.push(c.indices.clone());
                scores.push(s);
                ctx = Some(c);
                y
            }
            LayerRole::Sparse { .. } => sparse_layer_forward(&pass, layer, &x, ctx.as_ref(), arenas)?,
        };
        x = ffn_block(&pass, layer, &x)?;
    }
    Ok(ForwardOutput { logits: unembed(vars, &x)?, scores, selections })
}
