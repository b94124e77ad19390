mod support;

use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tagunet::diffcore::{Matrix, Tape};
use tagunet::evaluation::{classify_threshold, median, r2_score, Histogram, HIST_BINS};
use tagunet::hierarchy::{build_clusters, build_hierarchy, centroids, knn_edges, pool_mean, unpool_copy};
use tagunet::layers::Mode;
use tagunet::meshgraph::{disjoint_union, graph_from_bytes, graph_to_bytes, symmetrize, MeshGraph, Target};
use tagunet::model::{build_model, count_params, prepare, ConvKind, Model, ModelConfig, ModelKind, PreparedGraph};
use tagunet::synthgen::{gen_shape, SynthSpec};
use tagunet::training::{adam_step, mse_loss, standardize_targets, AdamState, TrainConfig, Trainer};

use support::*;

fn random_graph(seed: u64, n: usize, dim: usize, with_target: bool) -> MeshGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = random_coords(&mut rng, n, dim);
    let k = 3.min(n.saturating_sub(1));
    let edges = if k == 0 { Vec::new() } else { brute_knn(&coords, dim, k) };
    let sdf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
    let target = with_target.then(|| Target {
        name: "stress".into(),
        values: (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect(),
    });
    MeshGraph {
        name: format!("g{seed}"),
        dim,
        coords,
        edges: symmetrize(edges),
        features: BTreeMap::from([("sdf".to_string(), sdf)]),
        target,
    }
}

fn small_config(kind: ModelKind, conv: ConvKind, depth: usize) -> ModelConfig {
    let mut c = ModelConfig::uniform(kind, conv, 2, depth, &[6, 6], 5, &[7], &["sdf"]);
    c.knn_k = 4;
    c
}

fn kinds() -> impl Strategy<Value = (ModelKind, ConvKind)> {
    prop_oneof![
        Just((ModelKind::TagUnet, ConvKind::EdgeConv)),
        Just((ModelKind::TagUnet, ConvKind::GcnConv)),
        Just((ModelKind::PlainGnn, ConvKind::EdgeConv)),
        Just((ModelKind::PlainGnn, ConvKind::GcnConv)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mgf_bytes_round_trip_exactly(seed in any::<u64>(), n in 1usize..60, dim in 2usize..=3, t in any::<bool>()) {
        let g = random_graph(seed, n, dim, t);
        let bytes = graph_to_bytes(&g).unwrap();
        let back = graph_from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &g);
        prop_assert_eq!(graph_to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn union_slices_recover_members(seeds in prop::collection::vec((any::<u64>(), 1usize..40), 1..5)) {
        let graphs: Vec<MeshGraph> = seeds.iter().map(|&(s, n)| random_graph(s, n, 2, true)).collect();
        let refs: Vec<&MeshGraph> = graphs.iter().collect();
        let batch = disjoint_union(&refs).unwrap();
        prop_assert_eq!(batch.num_graphs(), graphs.len());
        prop_assert_eq!(batch.graph.num_nodes(), graphs.iter().map(|g| g.num_nodes()).sum::<usize>());
        for (k, g) in graphs.iter().enumerate() {
            prop_assert_eq!(&batch.slice(k, &g.name), g);
            for i in batch.node_range(k) {
                prop_assert_eq!(batch.graph_id[i], k);
            }
        }
        // No edge crosses between members.
        for &(i, j) in &batch.graph.edges {
            prop_assert_eq!(batch.graph_id[i], batch.graph_id[j]);
        }
    }

    #[test]
    fn clusters_match_oracle_and_bounds(seed in any::<u64>(), n in 1usize..700, dim in 2usize..=3, c in 2usize..12, ties in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coords = random_coords(&mut rng, n, dim);
        if ties {
            coords.iter_mut().for_each(|v| *v = (*v * 4.0).round() / 4.0);
        }
        let a = build_clusters(&coords, dim, c).unwrap();
        prop_assert_eq!(&a.cluster_of, &oracle_clusters(&coords, dim, c));
        let sizes = a.sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().all(|&s| s >= 1 && s <= c));
        if n >= c {
            prop_assert!(sizes.iter().all(|&s| s >= c / 2));
        }
        let got = centroids(&coords, dim, &a);
        let want = brute_centroids(&coords, dim, &a.cluster_of, a.num_clusters);
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs().max(1e-300));
        }
    }

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), n in 2usize..200, dim in 2usize..=3, k in 1usize..14) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_coords(&mut rng, n, dim);
        prop_assert_eq!(knn_edges(&coords, dim, k).unwrap(), brute_knn(&coords, dim, k));
    }

    #[test]
    fn pooling_then_unpooling_is_cluster_mean(seed in any::<u64>(), n in 1usize..300, c in 2usize..9, f in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = random_coords(&mut rng, n, 2);
        let a = build_clusters(&coords, 2, c).unwrap();
        let x = Matrix::from_fn(n, f, |_, _| rng.gen_range(-1.0..1.0));
        let pooled = pool_mean(&x, &a).unwrap();
        prop_assert_eq!(pooled.shape(), (a.num_clusters, f));
        let back = unpool_copy(&pooled, &a).unwrap();
        for i in 0..n {
            prop_assert_eq!(back.row(i), pooled.row(a.cluster_of[i]));
        }
        // Column sums are preserved when weighted by cluster size.
        let sizes = a.sizes();
        for j in 0..f {
            let fine: f64 = (0..n).map(|i| x.row(i)[j]).sum();
            let coarse: f64 = (0..a.num_clusters).map(|k| pooled.row(k)[j] * sizes[k] as f64).sum();
            prop_assert!((fine - coarse).abs() < 1e-9);
        }
    }

    #[test]
    fn hierarchy_levels_chain(seed in any::<u64>(), n in 2usize..400, depth in 1usize..5) {
        let g = random_graph(seed, n, 2, false);
        let h = build_hierarchy(&g, depth, 4, 6).unwrap();
        let mut expect = n;
        for level in &h.levels {
            prop_assert_eq!(level.assignment.num_nodes(), expect);
            expect = level.assignment.num_clusters;
            prop_assert_eq!(level.coarse_coords.len(), expect * 2);
        }
        let padded = h.padded(depth);
        prop_assert_eq!(padded.levels.len(), depth);
    }

    #[test]
    fn r2_invariant_under_shared_affine_maps(seed in any::<u64>(), n in 2usize..80, a in 0.1f64..10.0, b in -5.0f64..5.0, flip in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = y.iter().map(|v| v + rng.gen_range(-0.3..0.3)).collect();
        let a = if flip { -a } else { a };
        let base = r2_score(&y, &f).unwrap().unwrap();
        let ya: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let fa: Vec<f64> = f.iter().map(|v| a * v + b).collect();
        let mapped = r2_score(&ya, &fa).unwrap().unwrap();
        prop_assert!((base - mapped).abs() < 1e-9);
        prop_assert!((base - r2_oracle(&y, &f)).abs() < 1e-12);
        prop_assert_eq!(r2_score(&y, &y).unwrap(), Some(1.0));
    }

    #[test]
    fn classification_counts_partition_nodes(seed in any::<u64>(), n in 1usize..100, tau in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let c = classify_threshold(&y, &f, tau).unwrap();
        prop_assert_eq!(c.tp + c.fp + c.fn_ + c.tn, n);
        prop_assert!((0.0..=1.0).contains(&c.accuracy) && (0.0..=1.0).contains(&c.f1));
        prop_assert!((c.accuracy - (c.tp + c.tn) as f64 / n as f64).abs() < 1e-15);
        let perfect = classify_threshold(&y, &y, tau).unwrap();
        prop_assert_eq!(perfect.accuracy, 1.0);
        prop_assert_eq!(perfect.f1, 1.0);
    }

    #[test]
    fn histogram_integrates_to_one(scores in prop::collection::vec(-6.0f64..1.0, 1..200)) {
        let h = Histogram::of_scores(&scores);
        prop_assert_eq!(h.edges.len(), HIST_BINS + 1);
        let area: f64 = h.density.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
        prop_assert!((area - 1.0).abs() < 1e-9);
        prop_assert!(h.edges[0] <= -1.0 && *h.edges.last().unwrap() == 1.0);
    }

    #[test]
    fn median_matches_sorting_oracle(values in prop::collection::vec(-1e6f64..1e6, 1..101)) {
        prop_assert_eq!(median(&values), Some(median_oracle(&values)));
    }

    #[test]
    fn synthetic_shapes_are_valid(seed in 0u64..1000, index in 0usize..4, nodes in 120usize..400, three in any::<bool>()) {
        let spec = if three {
            SynthSpec::default_3d(4, nodes, seed)
        } else {
            SynthSpec::default_2d(4, nodes, seed)
        };
        let g = gen_shape(&spec, index).unwrap();
        prop_assert!(g.validate().is_empty());
        let m = g.num_nodes() as f64;
        prop_assert!((m - nodes as f64).abs() <= 0.1 * nodes as f64);
        prop_assert!(g.coords.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(g.features["sdf"].iter().all(|&s| s > 0.0));
        prop_assert!(g.target_values().unwrap().iter().all(|v| v.is_finite()));
        prop_assert_eq!(&gen_shape(&spec, index).unwrap(), &g);
    }

    #[test]
    fn analytic_param_count_matches_built_model((kind, conv) in kinds(), depth in 1usize..4, ch in 1usize..9, h in 1usize..9) {
        let mut cfg = ModelConfig::uniform(kind, conv, 2, depth, &[h, h + 1], ch, &[h + 2], &["sdf"]);
        cfg.lift_width = Some(h + 3);
        let model = build_model(&cfg, 0).unwrap();
        prop_assert_eq!(count_params(&cfg), model.num_params());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn union_forward_matches_members((kind, conv) in kinds(), seeds in prop::collection::vec((any::<u64>(), 2usize..40), 2..5)) {
        let cfg = small_config(kind, conv, 2);
        let model = build_model(&cfg, 3).unwrap();
        let graphs: Vec<MeshGraph> = seeds.iter().map(|&(s, n)| random_graph(s, n, 2, false)).collect();
        let prepared: Vec<PreparedGraph> = graphs.iter().map(|g| prepare(g, &cfg, None).unwrap()).collect();
        let refs: Vec<&PreparedGraph> = prepared.iter().collect();
        let joint = model.predict::<f64>(&PreparedGraph::union(&refs).unwrap()).unwrap();
        let parts: Vec<f64> = prepared.iter().flat_map(|p| model.predict::<f64>(p).unwrap()).collect();
        prop_assert_eq!(joint.len(), parts.len());
        for (a, b) in joint.iter().zip(&parts) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_exact((kind, conv) in kinds(), seed in any::<u64>()) {
        let model = build_model(&small_config(kind, conv, 2), seed).unwrap();
        let bytes = model.to_checkpoint_bytes().unwrap();
        let back = Model::from_checkpoint_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_checkpoint_bytes().unwrap(), bytes);
        let g = random_graph(seed, 25, 2, false);
        let p = prepare(&g, &model.config, None).unwrap();
        prop_assert_eq!(model.predict::<f64>(&p).unwrap(), back.predict::<f64>(&p).unwrap());
    }

    #[test]
    fn adam_first_step_moves_by_lr(seed in any::<u64>(), lr in 1e-4f64..1e-1) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = build_model(&small_config(ModelKind::TagUnet, ConvKind::EdgeConv, 1), seed).unwrap();
        let mut params = model.params.values().to_vec();
        let before = params.clone();
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|m| (0..m.data().len()).map(|_| rng.gen_range(0.01..1.0) * if rng.gen() { 1.0 } else { -1.0 }).collect())
            .collect();
        let mut state = AdamState::new(&model.params);
        adam_step(&mut params, &grads, &mut state, lr, 0.9, 0.999, 1e-8).unwrap();
        for ((p, b), g) in params.iter().zip(&before).zip(&grads) {
            for ((x, x0), gi) in p.data().iter().zip(b.data()).zip(g) {
                // Bias correction makes the first step lr · g / (|g| + ε).
                let expect = x0 - lr * gi / (gi.abs() + 1e-8);
                prop_assert!((x - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn first_batch_loss_is_untrained_mse() {
    let g = random_graph(5, 40, 2, true);
    let cfg = small_config(ModelKind::TagUnet, ConvKind::EdgeConv, 2);
    let input = prepare(&g, &cfg, None).unwrap();
    let mut model = build_model(&cfg, 1).unwrap();
    model.target_norm = standardize_targets([g.target_values().unwrap()]).unwrap();

    let mut tape = Tape::<f32>::new();
    let p = model.params.bind(&mut tape, false);
    let out = model.forward(&mut tape, &p, &input, Mode::Train).unwrap();
    let pred: Vec<f64> = tape.value(out.prediction).data().iter().map(|&v| v as f64).collect();
    let z: Vec<f64> = g.target_values().unwrap().iter().map(|&v| model.target_norm.normalize(v)).collect();
    let expect = mse_loss(&z, &pred).unwrap();

    let mut trainer = Trainer::new(model, TrainConfig::default()).unwrap();
    let loss = trainer.step(&input).unwrap();
    assert!((loss - expect).abs() <= 1e-5 * expect.max(1.0), "{loss} vs {expect}");
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let g = random_graph(8, 30, 2, true);
    let cfg = small_config(ModelKind::TagUnet, ConvKind::GcnConv, 2);
    let input = prepare(&g, &cfg, None).unwrap();
    let mut model = build_model(&cfg, 2).unwrap();
    model.target_norm = standardize_targets([g.target_values().unwrap()]).unwrap();
    let before = model.params.values().to_vec();
    let mut trainer = Trainer::new(model, TrainConfig { lr: 0.0, ..Default::default() }).unwrap();
    trainer.step(&input).unwrap();
    assert_eq!(trainer.model.params.values(), &before[..]);
}

#[test]
fn eval_forward_is_pure_and_skips_matter() {
    let g = random_graph(13, 60, 2, false);
    let cfg = small_config(ModelKind::TagUnet, ConvKind::EdgeConv, 2);
    let model = build_model(&cfg, 4).unwrap();
    let input = prepare(&g, &cfg, None).unwrap();
    let a = model.predict::<f64>(&input).unwrap();
    assert_eq!(a, model.predict::<f64>(&input).unwrap());
    let opts = tagunet::model::ForwardOptions { zero_skips: true };
    let b = model.predict_with::<f64>(&input, opts).unwrap();
    let diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0);
}

#[test]
fn backward_is_bitwise_deterministic() {
    let g = random_graph(21, 50, 2, true);
    let cfg = small_config(ModelKind::TagUnet, ConvKind::EdgeConv, 2);
    let model = build_model(&cfg, 6).unwrap();
    let input = prepare(&g, &cfg, None).unwrap();
    let run = || {
        let mut tape = Tape::<f64>::new();
        let p = model.params.bind(&mut tape, true);
        let out = model.forward(&mut tape, &p, &input, Mode::Train).unwrap();
        let loss = tagunet::training::mse_loss_var(&mut tape, out.prediction, g.target_values().unwrap()).unwrap();
        let grads = tape.backward(loss);
        p.iter().map(|&v| grads.get_or_zeros(v, &tape)).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn size_study_counts_are_pinned() {
    let counts: Vec<usize> = ModelConfig::size_study().iter().map(count_params).collect();
    assert_eq!(counts, [32_657, 107_681, 388_481, 732_289]);
}
