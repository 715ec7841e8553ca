use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::task::{Sample, SyntheticTask};
use super::argmax_rows;
use crate::error::{Error, Result};
use crate::model::{forward, Model};
use crate::tensor::{ops, Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip.
    pub grad_clip: Option<f64>,
    /// Cosine decay to this fraction of `lr` by the last step; 1 keeps it flat.
    pub final_lr_frac: f64,
    pub seed: u64,
    pub eval_samples: usize,
    /// Training rows are logged every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 8,
            lr: 3e-4,
            optimizer: Optimizer::Adam,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-10,
            grad_clip: Some(1.0),
            final_lr_frac: 1.0,
            seed: 0,
            eval_samples: 256,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 || self.final_lr_frac == 1.0 {
            return self.lr;
        }
        let t = step as f64 / (self.steps - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        self.lr * (self.final_lr_frac + (1.0 - self.final_lr_frac) * cos)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// `train` (the step's batch) or `heldout`.
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<CurvePoint>,
    pub heldout_loss: f64,
    pub heldout_accuracy: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,split,loss,accuracy\n");
        for p in &self.curve {
            s.push_str(&format!("{},{},{:?},{:?}\n", p.step, p.split, p.loss, p.accuracy));
        }
        s
    }
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

/// Loss and target-row accuracy of `model` on `samples`, in chunks.
pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<(f64, f64)> {
    let vars = model.params.vars(false);
    let (mut loss_sum, mut rows, mut correct) = (0.0, 0usize, 0usize);
    for chunk in samples.chunks(32) {
        let (logits, targets) = run_batch(model, &vars, chunk)?;
        let n = targets.iter().flatten().count();
        loss_sum += ops::cross_entropy(&logits, &targets)?.value().item() * n as f64;
        rows += n;
        correct += count_correct(logits.value(), &targets);
    }
    if rows == 0 {
        return Err(Error::invalid("evaluate", "no target rows"));
    }
    Ok((loss_sum / rows as f64, correct as f64 / rows as f64))
}

fn run_batch(
    model: &Model,
    vars: &crate::model::ParamVars,
    samples: &[Sample],
) -> Result<(crate::tensor::Var, Vec<Option<usize>>)> {
    let tokens: Vec<&[usize]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
    let mut arenas: Vec<_> = samples.iter().map(|_| model.new_arena()).collect();
    let out = forward(model, vars, &tokens, &mut arenas)?;
    let targets = samples.iter().flat_map(|s| s.targets.iter().copied()).collect();
    Ok((out.logits, targets))
}

fn count_correct(logits: &Tensor, targets: &[Option<usize>]) -> usize {
    argmax_rows(logits).into_iter().zip(targets).filter(|(p, t)| Some(*p) == **t).count()
}

/// Held-out samples for a seed: a stream separate from the training data.
pub fn heldout(task: &SyntheticTask, seed: u64, n: usize) -> Result<Vec<Sample>> {
    task.batch(&mut Rng::new(seed).fork(2), n)
}

/// Trains `model` in place on fresh batches from `task`.
pub fn train(model: &mut Model, task: &SyntheticTask, cfg: &TrainConfig) -> Result<TrainReport> {
    task.validate()?;
    if task.vocab > model.cfg.vocab {
        return Err(Error::Config(format!("task vocab {} exceeds model vocab {}", task.vocab, model.cfg.vocab)));
    }
    if cfg.batch_size == 0 || cfg.log_every == 0 {
        return Err(Error::Config("batch_size and log_every must be at least 1".into()));
    }
    let mut data_rng = Rng::new(cfg.seed).fork(1);
    let eval_set = heldout(task, cfg.seed, cfg.eval_samples)?;
    let mut adam = Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 };
    let mut curve = Vec::new();

    for step in 0..cfg.steps {
        let batch = task.train_batch(&mut data_rng, cfg.batch_size)?;
        let vars = model.params.vars(true);
        let (logits, targets) = run_batch(model, &vars, &batch).map_err(|e| diverged(e, step))?;
        let loss = ops::cross_entropy(&logits, &targets).map_err(|e| diverged(e, step))?;
        let loss_value = loss.value().item();
        if !loss_value.is_finite() {
            return Err(Error::Diverged { step, loss: loss_value });
        }
        loss.backward()?;
        let mut grads = vars.grads();
        if let Some(max_norm) = cfg.grad_clip {
            let norm = grads.values().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Diverged { step, loss: norm });
            }
            if norm > max_norm {
                grads.values_mut().for_each(|g| *g = g.scale(max_norm / norm));
            }
        }
        apply_update(model, &grads, cfg, &mut adam, cfg.lr_at(step))?;

        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            let n = targets.iter().flatten().count();
            curve.push(CurvePoint {
                step,
                split: "train".into(),
                loss: loss_value,
                accuracy: count_correct(logits.value(), &targets) as f64 / n as f64,
            });
        }
    }
    let (heldout_loss, heldout_accuracy) = evaluate(model, &eval_set)?;
    curve.push(CurvePoint { step: cfg.steps, split: "heldout".into(), loss: heldout_loss, accuracy: heldout_accuracy });
    Ok(TrainReport { curve, heldout_loss, heldout_accuracy })
}

fn diverged(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { step, loss: f64::NAN },
        other => other,
    }
}

fn apply_update(
    model: &mut Model,
    grads: &BTreeMap<String, Tensor>,
    cfg: &TrainConfig,
    adam: &mut Adam,
    lr: f64,
) -> Result<()> {
    adam.t += 1;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(adam.t);
    let c2 = 1.0 - b2.powi(adam.t);
    for (name, p) in model.params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| Error::invalid("train", format!("no gradient for {name}")))?;
        match cfg.optimizer {
            Optimizer::Sgd => {
                for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                    *w -= lr * d;
                }
            }
            Optimizer::Adam => {
                let m = adam.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                let v = adam.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.numel()]);
                for (((w, &d), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *m = b1 * *m + (1.0 - b1) * d;
                    *v = b2 * *v + (1.0 - b2) * d * d;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
                }
            }
        }
    }
    Ok(())
}
