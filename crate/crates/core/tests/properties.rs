use lightinfer_core::attention::{multi_head_attention, AttentionMode, AttentionWeights};
use lightinfer_core::kvcache::memory_estimate;
use lightinfer_core::numerics::{matmul, row_softmax};
use lightinfer_core::oracle::{naive_column_sums, naive_matmul};
use lightinfer_core::{
    build_input, decode_step, init_model, plan_keep_counts, prefill, CompressionConfig, Matrix, ModelConfig,
    PipelineConfig,
};
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(-1.0f32..1.0, rows * cols).prop_map(move |v| Matrix::new(rows, cols, v).unwrap())
}

fn small_model(n_layers: usize, seed: u64) -> lightinfer_core::Model {
    init_model(&ModelConfig {
        n_layers,
        n_heads: 2,
        dim: 16,
        vocab: 32,
        seed,
    })
    .unwrap()
}

#[test]
fn frozen_keep_counts() {
    assert_eq!(plan_keep_counts(1000, 0.03, 3).unwrap(), vec![311, 97, 30]);
    assert_eq!(plan_keep_counts(1476, 0.35, 3).unwrap(), vec![1040, 733, 517]);
    assert_eq!(plan_keep_counts(10, 1.0, 2).unwrap(), vec![10, 10]);
}

#[test]
fn causal_column_sums_total_the_row_count() {
    let m = small_model(1, 3);
    let x = build_input(2, 30, 2, 0.5, 1, 16).unwrap().embeddings;
    let out = multi_head_attention(&x, &m.blocks[0].attention, AttentionMode::Full).unwrap();
    for (head, probs) in out.full_scores.unwrap().iter().enumerate() {
        let naive = naive_column_sums(probs);
        let total: f32 = naive.iter().sum();
        assert!((total - 34.0).abs() < 1e-3);
        for (a, b) in naive.iter().zip(&out.cum_scores[head]) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive((a, b) in (1usize..9, 1usize..40, 1usize..9)
        .prop_flat_map(|(n, k, m)| (matrix(n, k), matrix(k, m))))
    {
        let fast = matmul(&a, &b).unwrap();
        let slow = naive_matmul(&a, &b).unwrap();
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            prop_assert!((x - y).abs() <= 1e-5);
        }
    }

    #[test]
    fn causal_softmax_rows_are_distributions(a in (1usize..20).prop_flat_map(|n| matrix(n, n))) {
        let p = row_softmax(&a, true);
        for i in 0..p.rows() {
            let row = p.row(i);
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn attention_modes_agree(
        n in 1usize..70,
        heads in prop::sample::select(vec![1usize, 2, 4]),
        width in 2usize..9,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let dim = heads * width;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.random_range(-0.5f32..0.5));
        let x = draw(n, dim);
        let w = AttentionWeights { wq: draw(dim, dim), wk: draw(dim, dim), wv: draw(dim, dim), wo: draw(dim, dim), n_heads: heads };
        let full = multi_head_attention(&x, &w, AttentionMode::Full).unwrap();
        let fast = multi_head_attention(&x, &w, AttentionMode::CumulativeOnly).unwrap();
        for (a, b) in full.context.as_slice().iter().zip(fast.context.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
        for (a, b) in full.avg_cum_scores.iter().zip(&fast.avg_cum_scores) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn keep_counts_shrink_monotonically(n in 1usize..5000, ratio in 0.001f64..=1.0, stages in 1usize..6) {
        let counts = plan_keep_counts(n, ratio, stages).unwrap();
        prop_assert_eq!(counts.len(), stages);
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(counts.iter().all(|&c| c >= 1 && c <= n));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_ledger_is_consistent(
        seed in any::<u64>(),
        n_image in 4usize..60,
        keep in 0.05f64..1.0,
        beta in 0.3f64..=1.0,
    ) {
        let m = small_model(6, seed);
        let input = build_input(2, n_image, 3, 0.7, seed, 16).unwrap();
        let p = PipelineConfig {
            merge_layers: vec![1, 3],
            keep_ratio: keep,
            compression: CompressionConfig { beta, start_layer: 2 },
            ..PipelineConfig::default()
        };
        let mut out = prefill(&m, &input, &p).unwrap();
        let text = out.metrics.text_tokens_per_layer();
        prop_assert!(text.iter().all(|&t| t == 5));
        prop_assert!(out.metrics.image_tokens_per_layer.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(out.metrics.memory_bytes, memory_estimate(&out.cache).total);
        // every layer keeps every text entry for both heads
        for layer in &out.cache.layers {
            for head in &layer.heads {
                prop_assert!(head.len() - head.image_count() >= 5);
                prop_assert!(head.positions().windows(2).all(|w| w[0] <= w[1]));
            }
        }
        let before = out.cache.entries_per_layer();
        decode_step(&m, &mut out.cache, 1).unwrap();
        for (a, b) in out.cache.entries_per_layer().iter().zip(&before) {
            prop_assert_eq!(a - b, 2);
        }
    }
}
