use proptest::prelude::*;

use hysparse::attention::{reference_full_attention, tiled_attention_with_scores, AttnConfig, BlockScores, SinkBias};
use hysparse::kvcache::{memory_report, KvArena, STORAGE_BYTES};
use hysparse::model::{build_hybrid_stack, Model, ModelConfig};
use hysparse::oracle::topk_by_sort;
use hysparse::runtime::prefill;
use hysparse::selection::topk_blocks;
use hysparse::tensor::{Rng, Tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tiled_matches_reference(
        t in 1usize..48,
        group in prop::sample::select(vec![1usize, 2, 4]),
        block in 1usize..9,
        tile in 1usize..9,
        sink in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let d = 4;
        let q = Tensor::randn(&[t, 2 * group, d], 1.5, &mut rng);
        let k = Tensor::randn(&[t, 2, d], 1.5, &mut rng);
        let v = Tensor::randn(&[t, 2, d], 1.0, &mut rng);
        let cfg = AttnConfig::new(d, block, t).unwrap().with_tile_rows(tile).unwrap().with_sink(sink);
        let s = sink.then(|| SinkBias::new((0..2 * group).map(|_| rng.normal()).collect()));
        let (o_ref, s_ref) = reference_full_attention(&q, &k, &v, &cfg, s.as_ref()).unwrap();
        let (o, sc) = tiled_attention_with_scores(&q, &k, &v, &cfg, s.as_ref()).unwrap();
        prop_assert!(o.max_abs_diff(&o_ref) < 1e-10);
        prop_assert!(sc.values.max_abs_diff(&s_ref.values) < 1e-10);
    }

    #[test]
    fn topk_matches_sort(
        rows in 1usize..12,
        query_start in 0usize..20,
        block in 1usize..6,
        k in 1usize..6,
        levels in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = Rng::new(seed);
        let blocks = (query_start + rows - 1) / block + 1;
        let mut values = Tensor::zeros(&[1, rows, blocks]);
        for x in values.data_mut() {
            *x = rng.below(levels) as f64;
        }
        let scores = BlockScores { values, block_size: block, query_start };
        let set = topk_blocks(&scores, k).unwrap();
        for r in 0..rows {
            let picked = set.blocks(r, 0);
            let expect = topk_by_sort(scores.row(0, r), scores.causal_blocks(r), k);
            prop_assert_eq!(picked, expect.as_slice());
            prop_assert!(picked.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(picked.iter().all(|&b| b * block <= query_start + r));
        }
    }

    #[test]
    fn layout_rule(n in 2usize..80, ratio in 0usize..16) {
        let stack = build_hybrid_stack(n, ratio).unwrap();
        prop_assert!(stack.roles[0].is_full());
        prop_assert!(stack.roles[n - 1].is_full());
        for (i, role) in stack.roles.iter().enumerate() {
            prop_assert_eq!(role.is_full(), i % (ratio + 1) == 0 || i == n - 1);
        }
    }

    #[test]
    fn accounting_matches_arena(
        layers in 2usize..7,
        ratio in 0usize..4,
        window in 1usize..10,
        t in 1usize..25,
        seed in any::<u64>(),
    ) {
        let cfg = ModelConfig { n_layers: layers, hybrid_ratio: ratio, window, ..ModelConfig::tiny() };
        let model = Model::new(cfg.clone(), seed).unwrap();
        let x: Vec<usize> = (0..t).map(|i| (i * 7 + 3) % cfg.vocab).collect();
        let p = prefill(&model, &x).unwrap();
        prop_assert_eq!(p.arena.resident_bytes(), memory_report(&cfg, t, STORAGE_BYTES).unwrap().hybrid_bytes);
    }

    #[test]
    fn gather_is_sorted_union(t in 1usize..30, mask in any::<u32>()) {
        let cfg = ModelConfig { n_kv_heads: 1, head_dim: 1, block_size: 4, ..ModelConfig::tiny() };
        let stack = cfg.stack().unwrap();
        let mut arena = KvArena::new(&cfg, &stack);
        let rows = Tensor::new(&[t, 1, 1], (0..t).map(|i| i as f64).collect()).unwrap();
        let h = arena.append_full(0, 0, &rows, &rows).unwrap();
        let blocks: Vec<usize> = (0..t.div_ceil(4)).filter(|b| mask >> b & 1 == 1).collect();
        let g = arena.gather_blocks(h, &blocks).unwrap();
        let expect: Vec<usize> = (0..t).filter(|i| blocks.contains(&(i / 4))).collect();
        prop_assert_eq!(&g.positions, &expect);
        let values: Vec<f64> = expect.iter().map(|&i| i as f64).collect();
        prop_assert_eq!(g.k.data(), values.as_slice());
    }

    #[test]
    fn cross_owner_writes_fail(writer in 0usize..4, target in 0usize..4) {
        let cfg = ModelConfig { n_kv_heads: 1, head_dim: 1, ..ModelConfig::tiny() };
        let stack = cfg.stack().unwrap();
        let mut arena = KvArena::new(&cfg, &stack);
        let row = Tensor::zeros(&[1, 1, 1]);
        let block = stack.block_of(target);
        let full_ok = stack.roles[writer].is_full() && stack.block_of(writer) == block;
        prop_assert_eq!(arena.append_full(writer, block, &row, &row).is_ok(), full_ok);
        let ring_ok = writer == target && !stack.roles[target].is_full();
        prop_assert_eq!(arena.window_append(writer, target, &row, &row).is_ok(), ring_ok);
    }
}
