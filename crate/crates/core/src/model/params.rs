use std::collections::BTreeMap;

use super::{HybridStack, LayerRole, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor, Var};

/// Named weights of a model, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    tensors: BTreeMap<String, Tensor>,
}

/// How a parameter is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

pub fn layer_name(layer: usize, param: &str) -> String {
    format!("layers.{layer:02}.{param}")
}

/// Every parameter of the model with its shape and initialiser, in
/// creation order.
pub(crate) fn param_specs(cfg: &ModelConfig, stack: &HybridStack) -> Vec<(String, Vec<usize>, Init)> {
    let (h, hq, hkv, d, f) = (cfg.hidden, cfg.n_q_heads, cfg.n_kv_heads, cfg.head_dim, cfg.ffn_hidden);
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut specs = vec![("embed".to_string(), vec![cfg.vocab, h], Init::Normal(1.0))];
    for (i, role) in stack.roles.iter().enumerate() {
        let mut add = |name: &str, shape: Vec<usize>, init: Init| specs.push((layer_name(i, name), shape, init));
        add("attn_norm", vec![h], Init::Ones);
        add("wq", vec![h, hq * d], fan(h));
        add("wk", vec![h, hkv * d], fan(h));
        add("wv", vec![h, hkv * d], fan(h));
        add("wo", vec![hq * d, h], fan(hq * d));
        match role {
            LayerRole::Full => {
                if cfg.sink_enabled {
                    add("sink", vec![hq], Init::Zeros);
                }
            }
            LayerRole::Sparse { .. } => {
                add("gate_sparse_w", vec![h, hq], fan(h));
                add("gate_sparse_b", vec![hq], Init::Zeros);
                add("gate_window_w", vec![h, hq], fan(h));
                add("gate_window_b", vec![hq], Init::Zeros);
                if cfg.sink_enabled {
                    add("sink_sparse", vec![hq], Init::Zeros);
                    add("sink_window", vec![hq], Init::Zeros);
                }
            }
        }
        add("ffn_norm", vec![h], Init::Ones);
        add("w_gate", vec![h, f], fan(h));
        add("w_up", vec![h, f], fan(h));
        add("w_down", vec![f, h], fan(f));
    }
    specs.push(("final_norm".to_string(), vec![h], Init::Ones));
    specs.push(("unembed".to_string(), vec![h, cfg.vocab], fan(h)));
    specs
}

impl Params {
    /// Seeded initialisation: normal weights with std `1/sqrt(fan_in)`,
    /// unit-std embeddings, unit norm gains, zero gate biases and sinks.
    pub fn init(cfg: &ModelConfig, stack: &HybridStack, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = param_specs(cfg, stack)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Normal(std) => Tensor::randn(&shape, std, &mut rng),
                    Init::Ones => Tensor::ones(&shape),
                    Init::Zeros => Tensor::zeros(&shape),
                };
                (name, t)
            })
            .collect();
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::invalid("params", format!("no parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::invalid("params", format!("no parameter {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Wraps every tensor as a fresh leaf: tracked when `trainable`.
    pub fn vars(&self, trainable: bool) -> ParamVars {
        let vars = self.tensors.iter().map(|(k, t)| (k.clone(), Var::leaf(t.clone(), trainable))).collect();
        ParamVars { vars }
    }

    /// Checks names and shapes against what `cfg` requires.
    pub fn check_against(&self, cfg: &ModelConfig, stack: &HybridStack) -> Result<()> {
        let specs = param_specs(cfg, stack);
        if specs.len() != self.tensors.len() {
            return Err(Error::Format(format!("{} tensors, config needs {}", self.tensors.len(), specs.len())));
        }
        for (name, shape, _) in specs {
            let t = self.tensors.get(&name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(Error::Format(format!("{name} has shape {:?}, config needs {shape:?}", t.shape())));
            }
        }
        Ok(())
    }
}

/// Parameters wrapped for one forward pass.
#[derive(Clone, Debug)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::invalid("params", format!("no parameter {name}")))
    }

    pub fn layer(&self, layer: usize, param: &str) -> Result<&Var> {
        self.get(&layer_name(layer, param))
    }

    /// Accumulated gradients by name; parameters the loss never reached get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape()))))
            .collect()
    }
}
