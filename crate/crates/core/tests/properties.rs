mod common;

use proptest::prelude::*;
use subcond_core::data::{gen_synthetic, SyntheticSpec};
use subcond_core::harness::silhouette;
use subcond_core::layers::{cosine_similarity_matrix, LinearShape, LowRank, SubjectConditionedLinear, SubjectId};
use subcond_core::rng;
use subcond_core::tensor::{Activation, Graph, Tensor};

fn layer_with_adapters(n: usize, m: usize, rank: usize, alpha: f64, subjects: usize, seed: u64) -> SubjectConditionedLinear {
    let shape = LinearShape {
        in_features: n,
        out_features: m,
        bias: true,
        activation: Activation::Elu,
    };
    let mut layer = SubjectConditionedLinear::new("p", shape, LowRank { rank, alpha }, subjects, seed).unwrap();
    let mut r = rng::stream(seed, "prop.b");
    for s in 0..subjects {
        let b = &mut layer.adapter_mut(SubjectId(s as u32)).unwrap().b;
        let len = b.value.len();
        b.value.data_mut().copy_from_slice(&rng::normal_vec(&mut r, len, 1.0));
    }
    layer
}

fn parts(layer: &SubjectConditionedLinear, x: &Tensor, ids: &[Option<SubjectId>]) -> (Tensor, Tensor, Tensor) {
    let mut g = Graph::new();
    let xv = g.constant(x.clone()).unwrap();
    let (general, adapter) = layer.forward_parts(&mut g, xv, ids).unwrap();
    let pre = layer.pre_activation(&mut g, xv, ids).unwrap();
    (g.value(general).clone(), g.value(adapter).clone(), g.value(pre).clone())
}

fn ids_from(raw: &[u8], subjects: usize) -> Vec<Option<SubjectId>> {
    raw.iter()
        .map(|&v| ((v as usize) < subjects).then_some(SubjectId(v as u32)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adapter_path_is_linear_in_alpha(
        n in 1usize..6, m in 1usize..6, subjects in 1usize..5, seed in any::<u64>(),
        alpha in 0.1f64..4.0, k in 0.0f64..3.0, raw in proptest::collection::vec(0u8..6, 1..10),
    ) {
        let rank = 1.max(n.min(m) / 2);
        let ids = ids_from(&raw, subjects);
        let x = common::random_tensor(&mut rng::stream(seed, "prop.x"), &[ids.len(), n]);
        let (g1, a1, _) = parts(&layer_with_adapters(n, m, rank, alpha, subjects, seed), &x, &ids);
        let (g2, a2, _) = parts(&layer_with_adapters(n, m, rank, k * alpha, subjects, seed), &x, &ids);
        prop_assert_eq!(g1, g2);
        for (u, v) in a1.data().iter().zip(a2.data()) {
            prop_assert!((k * u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn pre_activation_is_general_plus_adapter(
        n in 1usize..6, m in 1usize..6, subjects in 1usize..5, seed in any::<u64>(),
        raw in proptest::collection::vec(0u8..6, 1..10),
    ) {
        let ids = ids_from(&raw, subjects);
        let x = common::random_tensor(&mut rng::stream(seed, "prop.x"), &[ids.len(), n]);
        let layer = layer_with_adapters(n, m, 1, 1.0, subjects, seed);
        let (g, a, pre) = parts(&layer, &x, &ids);
        for i in 0..pre.len() {
            prop_assert!((g.data()[i] + a.data()[i] - pre.data()[i]).abs() < 1e-12);
        }
        for (i, id) in ids.iter().enumerate() {
            if id.is_none() {
                prop_assert!(a.row(i).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn silhouette_is_bounded(
        points in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 3), 2..30),
        seed in any::<u64>(),
    ) {
        let labels: Vec<usize> = (0..points.len()).map(|i| (i + seed as usize) % 3).collect();
        if let Ok(s) = silhouette(&points, &labels) {
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn cosine_matrix_symmetric_with_unit_diagonal(seed in any::<u64>(), count in 1usize..6) {
        let mut r = rng::stream(seed, "prop.cos");
        let items: Vec<Tensor> = (0..count).map(|_| common::random_tensor(&mut r, &[3, 2])).collect();
        let sim = cosine_similarity_matrix(&items);
        for i in 0..count {
            prop_assert!((sim[i][i] - 1.0).abs() < 1e-12);
            for j in 0..count {
                prop_assert_eq!(sim[i][j], sim[j][i]);
                prop_assert!((-1.0..=1.0).contains(&sim[i][j]));
            }
        }
    }

    #[test]
    fn generated_cells_are_balanced(
        subjects in 1usize..4, classes in 1usize..5, train in 1usize..23, seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec { subjects, classes, train_trials: train, test_trials: 3, seed, ..SyntheticSpec::default() };
        let (tr, te) = gen_synthetic(&spec).unwrap();
        for (d, per) in [(&tr, train), (&te, 3)] {
            let exact = per as f64 / classes as f64;
            for s in 0..subjects {
                for k in 0..classes {
                    let c = d.trials.iter().filter(|t| t.subject.index() == s && t.label == k).count() as f64;
                    prop_assert!((c - exact).abs() <= 1.0);
                }
            }
        }
    }

    #[test]
    fn held_out_split_is_a_partition(subjects in 2usize..5, held in 0usize..5, seed in any::<u64>()) {
        let held = held % subjects;
        let spec = SyntheticSpec { subjects, train_trials: 4, test_trials: 1, seed, ..SyntheticSpec::default() };
        let (tr, _) = gen_synthetic(&spec).unwrap();
        let (seen, out) = tr.split_by_subject(SubjectId(held as u32)).unwrap();
        prop_assert_eq!(seen.len() + out.len(), tr.len());
        prop_assert!(out.trials.iter().all(|t| t.subject.index() == held));
        prop_assert!(seen.trials.iter().all(|t| t.subject.index() != held));
    }
}
