use hysparse::attention::SinkBias;
use hysparse::kvcache::{memory_report, STORAGE_BYTES};
use hysparse::model::{layer_name, ForwardOptions, LayerRole, Model, ModelConfig, SharedKvSource, RMS_EPS};
use hysparse::oracle::masked_attention;
use hysparse::runtime::{
    compare_regimes, decode_all, decode_step, evaluate, heldout, prefill, train, Regime, SyntheticTask, TrainConfig,
};
use hysparse::tensor::{apply_rope, Rng, Tensor};

fn tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab)).collect()
}

#[test]
fn prefill_of_one_token() {
    let model = Model::new(ModelConfig::tiny(), 0).unwrap();
    let p = prefill(&model, &[3]).unwrap();
    assert_eq!(p.logits.shape(), &[1, model.cfg.vocab]);
    for layer in 0..model.stack.len() {
        assert_eq!(p.arena.cached_tokens(layer).unwrap(), 1);
    }
}

#[test]
fn prefill_is_deterministic() {
    let cfg = ModelConfig { n_layers: 4, hybrid_ratio: 2, ..ModelConfig::tiny() };
    let x = tokens(64, cfg.vocab, 1);
    let a = prefill(&Model::new(cfg.clone(), 11).unwrap(), &x).unwrap();
    let b = prefill(&Model::new(cfg, 11).unwrap(), &x).unwrap();
    assert_eq!(a.logits.data(), b.logits.data());
}

#[test]
fn decode_from_empty_matches_prefill_of_one() {
    let model = Model::new(ModelConfig::tiny(), 2).unwrap();
    let mut arena = model.new_arena();
    let step = decode_step(&model, &mut arena, 5).unwrap();
    assert_eq!(step.logits.data(), prefill(&model, &[5]).unwrap().logits.data());
}

#[test]
fn decode_advances_every_cache_by_one() {
    let model = Model::new(ModelConfig::tiny(), 3).unwrap();
    let mut p = prefill(&model, &[1, 2]).unwrap();
    for (i, t) in tokens(50, model.cfg.vocab, 4).into_iter().enumerate() {
        let appended = |a: &hysparse::kvcache::KvArena, l: usize| match model.stack.roles[l] {
            LayerRole::Full => a.cached_tokens(l).unwrap(),
            LayerRole::Sparse { .. } => a.ring(l).unwrap().total(),
        };
        let before: Vec<usize> = (0..model.stack.len()).map(|l| appended(&p.arena, l)).collect();
        decode_step(&model, &mut p.arena, t).unwrap();
        for (l, role) in model.stack.roles.iter().enumerate() {
            let total = i + 3;
            let expect = if role.is_full() { total } else { total.min(model.cfg.window) };
            assert_eq!(p.arena.cached_tokens(l).unwrap(), expect);
            assert_eq!(appended(&p.arena, l), before[l] + 1);
        }
    }
}

#[test]
fn parity_straddles_block_and_window_edges() {
    let cfg = ModelConfig { window: 6, block_size: 4, topk_tokens: 8, ..ModelConfig::tiny() };
    for regime in Regime::ALL {
        let model = regime.build(&cfg, 9).unwrap();
        for t in [3, 4, 5, 6, 7, 8, 9, 13] {
            let x = tokens(t, cfg.vocab, t as u64);
            let (decoded, _, _) = decode_all(&model, &x).unwrap();
            assert!(prefill(&model, &x).unwrap().logits.max_abs_diff(&decoded) < 1e-10, "{regime:?} t={t}");
        }
    }
}

fn rms(x: &Tensor, g: &Tensor) -> Tensor {
    let n = x.dim(1);
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(n) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
        let s = 1.0 / (ms + RMS_EPS).sqrt();
        for (v, gi) in row.iter_mut().zip(g.data()) {
            *v *= s * gi;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A stack where every sparse layer is two full-attention heads over its
/// own keys, gated and summed: what a sparse layer reduces to when it
/// selects every block, sees the whole history in its window, and reads
/// its own projections.
fn degenerate_oracle(model: &Model, x_tokens: &[usize]) -> Tensor {
    let cfg = &model.cfg;
    let p = |name: &str| model.params.get(name).unwrap().clone();
    let t = x_tokens.len();
    let positions: Vec<usize> = (0..t).collect();
    let emb = p("embed");
    let mut x = Tensor::new(
        &[t, cfg.hidden],
        x_tokens.iter().flat_map(|&tok| emb.data()[tok * cfg.hidden..(tok + 1) * cfg.hidden].to_vec()).collect(),
    )
    .unwrap();
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    let sink = |l: usize, name: &str| cfg.sink_enabled.then(|| SinkBias::new(p(&layer_name(l, name)).into_data()));
    for (l, role) in model.stack.roles.iter().enumerate() {
        let w = |name: &str| p(&layer_name(l, name));
        let h = rms(&x, &w("attn_norm"));
        let heads = |m: Tensor, n: usize| m.reshape(&[t, n, cfg.head_dim]).unwrap();
        let q = apply_rope(&heads(h.matmul(&w("wq")).unwrap(), cfg.n_q_heads), &positions, cfg.rope_base).unwrap();
        let k = apply_rope(&heads(h.matmul(&w("wk")).unwrap(), cfg.n_kv_heads), &positions, cfg.rope_base).unwrap();
        let v = heads(h.matmul(&w("wv")).unwrap(), cfg.n_kv_heads);
        let causal = |_: usize, p: usize, j: usize| j <= p;
        let o = match role {
            LayerRole::Full => masked_attention(&q, &k, &v, scale, sink(l, "sink").as_ref(), 0, causal).1,
            LayerRole::Sparse { .. } => {
                let (_, os) = masked_attention(&q, &k, &v, scale, sink(l, "sink_sparse").as_ref(), 0, causal);
                let (_, ow) = masked_attention(&q, &k, &v, scale, sink(l, "sink_window").as_ref(), 0, causal);
                let gs = h.matmul(&w("gate_sparse_w")).unwrap();
                let gw = h.matmul(&w("gate_window_w")).unwrap();
                let (bs, bw) = (w("gate_sparse_b"), w("gate_window_b"));
                let mut o = Tensor::zeros(&[t, cfg.n_q_heads, cfg.head_dim]);
                for r in 0..t {
                    for hd in 0..cfg.n_q_heads {
                        let a = sigmoid(gs.at(&[r, hd]) + bs.data()[hd]);
                        let b = sigmoid(gw.at(&[r, hd]) + bw.data()[hd]);
                        for c in 0..cfg.head_dim {
                            o.set(&[r, hd, c], a * os.at(&[r, hd, c]) + b * ow.at(&[r, hd, c]));
                        }
                    }
                }
                o
            }
        };
        let o = o.reshape(&[t, cfg.n_q_heads * cfg.head_dim]).unwrap();
        x = x.add(&o.matmul(&w("wo")).unwrap()).unwrap();
        let h = rms(&x, &w("ffn_norm"));
        let a = h.matmul(&w("w_gate")).unwrap().map(|z| z * sigmoid(z));
        let f = a.mul(&h.matmul(&w("w_up")).unwrap()).unwrap().matmul(&w("w_down")).unwrap();
        x = x.add(&f).unwrap();
    }
    rms(&x, &p("final_norm")).matmul(&p("unembed")).unwrap()
}

#[test]
fn degenerate_config_matches_equivalent_architecture() {
    let t = 22;
    let cfg = ModelConfig { n_layers: 5, hybrid_ratio: 3, window: t, block_size: 4, topk_tokens: 24, ..ModelConfig::tiny() };
    let options = ForwardOptions { shared_kv: SharedKvSource::OwnProjection, ..ForwardOptions::default() };
    let mut model = Model::new(cfg.clone(), 21).unwrap().with_options(options);
    // Non-zero gate biases and sinks so every term matters.
    let mut rng = Rng::new(5);
    for name in model.params.names().map(String::from).collect::<Vec<_>>() {
        if name.ends_with("_b") || name.contains("sink") {
            *model.params.get_mut(&name).unwrap() = Tensor::randn(&[cfg.n_q_heads], 1.0, &mut rng);
        }
    }
    let x = tokens(t, cfg.vocab, 6);
    let got = prefill(&model, &x).unwrap().logits;
    let want = degenerate_oracle(&model, &x);
    assert!(got.max_abs_diff(&want) < 1e-8, "{}", got.max_abs_diff(&want));
}

#[test]
fn zero_steps_gives_chance_accuracy() {
    let task = SyntheticTask::copy(32, 16);
    let mut model = Model::new(ModelConfig::toy(16), 0).unwrap();
    let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
    let r = train(&mut model, &task, &cfg).unwrap();
    assert!((r.heldout_accuracy - 1.0 / 16.0).abs() < 0.04, "{}", r.heldout_accuracy);
    assert_eq!(r.curve.len(), 1);
}

#[test]
fn sink_gradient_matches_finite_difference() {
    let task = SyntheticTask::copy(16, 16);
    let model = Model::new(ModelConfig::tiny(), 8).unwrap();
    let batch = heldout(&task, 1, 4).unwrap();
    let loss = |m: &Model| evaluate(m, &batch).unwrap().0;
    for name in [layer_name(0, "sink"), layer_name(1, "sink_sparse"), layer_name(2, "sink_window")] {
        let grads = {
            use hysparse::model::forward;
            use hysparse::tensor::ops;
            let vars = model.params.vars(true);
            let toks: Vec<&[usize]> = batch.iter().map(|s| s.tokens.as_slice()).collect();
            let mut arenas: Vec<_> = batch.iter().map(|_| model.new_arena()).collect();
            let out = forward(&model, &vars, &toks, &mut arenas).unwrap();
            let targets: Vec<_> = batch.iter().flat_map(|s| s.targets.iter().copied()).collect();
            ops::cross_entropy(&out.logits, &targets).unwrap().backward().unwrap();
            vars.grads()
        };
        for e in 0..model.cfg.n_q_heads {
            let mut m = model.clone();
            let h = 1e-5;
            m.params.get_mut(&name).unwrap().data_mut()[e] += h;
            let up = loss(&m);
            m.params.get_mut(&name).unwrap().data_mut()[e] -= 2.0 * h;
            let down = loss(&m);
            let fd = (up - down) / (2.0 * h);
            let a = grads[&name].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-5, "{name}[{e}]: analytic {a} fd {fd}");
        }
    }
}

#[test]
fn compare_report_memory_matches_kvcache() {
    let task = SyntheticTask::needle(12, 4, 8);
    let base = ModelConfig { vocab: task.vocab, ..ModelConfig::tiny() };
    let cfg = TrainConfig { steps: 2, batch_size: 2, eval_samples: 4, ..TrainConfig::default() };
    let report = compare_regimes(&task, &base, &cfg, &Regime::ALL).unwrap();
    for r in &report.results {
        let m = memory_report(&r.regime.model_config(&base), task.seq_len, STORAGE_BYTES).unwrap();
        assert_eq!(r.memory, m);
    }
    assert_eq!(report.result(Regime::FullAttn).unwrap().memory.reduction_ratio, 1.0);
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn training_keeps_loss_finite() {
    let task = SyntheticTask::copy(24, 16);
    let mut model = Model::new(ModelConfig::tiny(), 1).unwrap();
    let cfg = TrainConfig { steps: 30, batch_size: 4, lr: 3e-3, eval_samples: 16, log_every: 1, ..TrainConfig::default() };
    let r = train(&mut model, &task, &cfg).unwrap();
    assert!(r.curve.iter().all(|p| p.loss.is_finite()));
    assert!(r.curve.first().unwrap().loss > r.curve[r.curve.len() - 2].loss);
}
