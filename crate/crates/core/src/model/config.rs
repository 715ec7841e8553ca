use serde::{Deserialize, Serialize};

use crate::attention::AttnConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub ffn_hidden: usize,
    /// Sparse layers per full layer. Zero gives an all-full stack.
    pub hybrid_ratio: usize,
    pub window: usize,
    pub block_size: usize,
    pub topk_tokens: usize,
    pub rope_base: f64,
    pub vocab: usize,
    pub sink_enabled: bool,
}

impl ModelConfig {
    /// A small configuration suitable for tests and toy training.
    pub fn tiny() -> Self {
        Self {
            n_layers: 4,
            n_q_heads: 4,
            n_kv_heads: 2,
            head_dim: 8,
            hidden: 32,
            ffn_hidden: 64,
            hybrid_ratio: 2,
            window: 8,
            block_size: 4,
            topk_tokens: 8,
            rope_base: 10_000.0,
            vocab: 16,
            sink_enabled: true,
        }
    }

    /// The toy training model: two hybrid blocks, hidden 64, w 8, B 4, two
    /// selected blocks.
    pub fn toy(vocab: usize) -> Self {
        Self { hidden: 64, ffn_hidden: 128, head_dim: 16, vocab, ..Self::tiny() }
    }

    /// The larger geometry: 49 layers at 1:11, 64 query / 4 KV heads of 128.
    pub fn geometry_80b() -> Self {
        Self {
            n_layers: 49,
            n_q_heads: 64,
            n_kv_heads: 4,
            head_dim: 128,
            hidden: 2048,
            ffn_hidden: 5632,
            hybrid_ratio: 11,
            window: 128,
            block_size: 64,
            topk_tokens: 1024,
            rope_base: 640_000.0,
            vocab: 151_936,
            sink_enabled: true,
        }
    }

    /// The smaller geometry: 36 layers at 1:3, 32 query / 8 KV heads of 128.
    pub fn geometry_7b() -> Self {
        Self {
            n_layers: 36,
            n_q_heads: 32,
            n_kv_heads: 8,
            head_dim: 128,
            hidden: 4096,
            ffn_hidden: 11008,
            hybrid_ratio: 3,
            ..Self::geometry_80b()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_q_heads", self.n_q_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("hidden", self.hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab", self.vocab),
            ("topk_tokens", self.topk_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.n_layers < 2 {
            return Err(Error::Config(format!("n_layers {} must be at least 2", self.n_layers)));
        }
        if self.n_q_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_q_heads, self.n_kv_heads
            )));
        }
        self.attn()?;
        if self.topk_tokens % self.block_size != 0 {
            return Err(Error::Config(format!(
                "topk_tokens {} not a multiple of block_size {}",
                self.topk_tokens, self.block_size
            )));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(Error::Config(format!("rope_base {} must exceed 1", self.rope_base)));
        }
        Ok(())
    }

    pub fn attn(&self) -> Result<AttnConfig> {
        Ok(AttnConfig::new(self.head_dim, self.block_size, self.window)?.with_sink(self.sink_enabled))
    }

    pub fn k_blocks(&self) -> usize {
        self.topk_tokens / self.block_size
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn stack(&self) -> Result<HybridStack> {
        build_hybrid_stack(self.n_layers, self.hybrid_ratio)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerRole {
    Full,
    /// Reads the scores and KV of the full layer at index `full_layer`.
    Sparse { full_layer: usize },
}

impl LayerRole {
    pub fn is_full(&self) -> bool {
        matches!(self, LayerRole::Full)
    }

    pub fn letter(&self) -> char {
        match self {
            LayerRole::Full => 'F',
            LayerRole::Sparse { .. } => 'S',
        }
    }
}

/// Ordered layer roles plus the hybrid block each layer belongs to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridStack {
    pub roles: Vec<LayerRole>,
    pub ratio: usize,
}

/// Repeats `[Full, Sparse × ratio]` and forces the last layer to be full.
pub fn build_hybrid_stack(n_layers: usize, ratio: usize) -> Result<HybridStack> {
    if n_layers < 2 {
        return Err(Error::Config(format!("n_layers {n_layers} must be at least 2")));
    }
    let mut roles = Vec::with_capacity(n_layers);
    let mut owner = 0;
    for i in 0..n_layers {
        if i % (ratio + 1) == 0 || i == n_layers - 1 {
            owner = i;
            roles.push(LayerRole::Full);
        } else {
            roles.push(LayerRole::Sparse { full_layer: owner });
        }
    }
    let stack = HybridStack { roles, ratio };
    stack.validate()?;
    Ok(stack)
}

impl HybridStack {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn full_layers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.roles[i].is_full()).collect()
    }

    pub fn sparse_layers(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.roles[i].is_full()).collect()
    }

    /// Hybrid block index of `layer` (the rank of its full layer).
    pub fn block_of(&self, layer: usize) -> usize {
        let owner = match self.roles[layer] {
            LayerRole::Full => layer,
            LayerRole::Sparse { full_layer } => full_layer,
        };
        self.roles[..owner].iter().filter(|r| r.is_full()).count()
    }

    pub fn num_blocks(&self) -> usize {
        self.full_layers().len()
    }

    /// Layout as a string of `F` and `S`.
    pub fn pattern(&self) -> String {
        self.roles.iter().map(LayerRole::letter).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("illegal layout {}: {msg}", self.pattern())));
        match (self.roles.first(), self.roles.last()) {
            (Some(LayerRole::Full), Some(LayerRole::Full)) => {}
            _ => return bad("first and last layers must be full".into()),
        }
        let mut last_full = 0;
        for (i, role) in self.roles.iter().enumerate() {
            match *role {
                LayerRole::Full => last_full = i,
                LayerRole::Sparse { full_layer } if full_layer != last_full => {
                    return bad(format!("layer {i} points at {full_layer}, nearest full layer is {last_full}"));
                }
                LayerRole::Sparse { .. } => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchored_layouts() {
        let s = build_hybrid_stack(49, 11).unwrap();
        assert_eq!(s.full_layers(), vec![0, 12, 24, 36, 48]);
        assert_eq!(build_hybrid_stack(4, 3).unwrap().pattern(), "FSSF");
        assert_eq!(build_hybrid_stack(2, 3).unwrap().pattern(), "FF");
        assert_eq!(build_hybrid_stack(5, 0).unwrap().pattern(), "FFFFF");
        assert_eq!(build_hybrid_stack(36, 3).unwrap().full_layers().len(), 10);
    }

    #[test]
    fn block_membership() {
        let s = build_hybrid_stack(7, 2).unwrap();
        assert_eq!(s.pattern(), "FSSFSSF");
        let blocks: Vec<usize> = (0..7).map(|i| s.block_of(i)).collect();
        assert_eq!(blocks, vec![0, 0, 0, 1, 1, 1, 2]);
    }

    #[test]
    fn presets_validate() {
        ModelConfig::tiny().validate().unwrap();
        ModelConfig::geometry_80b().validate().unwrap();
        ModelConfig::geometry_7b().validate().unwrap();
        assert_eq!(ModelConfig::geometry_80b().k_blocks(), 16);
    }
}
