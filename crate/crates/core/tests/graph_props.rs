mod common;

use biasnet::graph::{consensus_factor, is_bipartite, laplacian_matrices, weighted_incidence, Segment};
use biasnet::{EdgeIndexing, GraphSchedule, WeightedAdjacency};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph() -> impl Strategy<Value = WeightedAdjacency> {
    (3usize..=6, any::<u64>(), 0.0f64..0.8).prop_map(|(n, seed, extra)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        common::random_connected(&mut rng, n, extra)
    })
}

proptest! {
    #[test]
    fn factor_reproduces_shifted_laplacian(adj in graph()) {
        let n = adj.n();
        let l = laplacian_matrices(&adj).laplacian;
        let nn = consensus_factor(&adj).unwrap();
        let target = l + DMatrix::from_element(n, n, 1.0 / n as f64);
        prop_assert!((target - &nn * nn.transpose()).amax() <= 1e-10);
    }

    #[test]
    fn incidence_factors_laplacian(adj in graph()) {
        let h = weighted_incidence(&adj, &EdgeIndexing::new(adj.n())).unwrap();
        let l = laplacian_matrices(&adj).laplacian;
        prop_assert!((&h * h.transpose() - l).amax() <= 1e-12);
    }

    #[test]
    fn laplacian_plus_signless_is_twice_degree(adj in graph()) {
        let g = laplacian_matrices(&adj);
        let d = common::degree(&adj);
        prop_assert!((&g.laplacian + &g.signless - d * 2.0).amax() <= 1e-12);
        prop_assert!((&g.laplacian * nalgebra::DVector::from_element(adj.n(), 1.0)).amax() <= 1e-12);
    }

    #[test]
    fn bipartiteness_matches_spectrum(adj in graph()) {
        let combinatorial = is_bipartite(&adj).bipartite;
        prop_assert_eq!(combinatorial, !common::has_odd_cycle(&adj));
        let q = laplacian_matrices(&adj).signless;
        let ev = common::eigenvalues(&q);
        let spectral = ev[0].abs() <= 1e-9;
        prop_assert_eq!(combinatorial, spectral);
        if combinatorial {
            prop_assert!(ev[1] > 1e-6, "{:?}", ev);
        }
    }

    #[test]
    fn partition_is_consistent(adj in graph()) {
        let b = is_bipartite(&adj);
        if let Some((plus, minus)) = b.partition {
            prop_assert_eq!(plus.len() + minus.len(), adj.n());
            for (i, j, _) in adj.edges() {
                prop_assert!(plus.contains(&i) != plus.contains(&j));
            }
        }
    }

    #[test]
    fn union_graph_is_additive(
        a in graph(),
        seed in any::<u64>(),
        d1 in 0.1f64..3.0,
        d2 in 0.1f64..3.0,
        split in 0.0f64..1.0,
    ) {
        let n = a.n();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = common::random_connected(&mut rng, n, 0.5);
        let sched = GraphSchedule::new(
            vec![
                Segment { start: 0.0, end: d1, adjacency: a.clone() },
                Segment { start: d1, end: d1 + d2, adjacency: b.clone() },
            ],
            d1 + d2,
        ).unwrap();
        let mid = split * (d1 + d2);
        let whole = sched.union_graph(0.0, d1 + d2).unwrap();
        let left = sched.union_graph(0.0, mid).unwrap();
        let right = sched.union_graph(mid, d1 + d2).unwrap();
        prop_assert!((whole.matrix() - left.matrix() - right.matrix()).amax() <= 1e-12);
        let direct = a.matrix() * d1 + b.matrix() * d2;
        prop_assert!((whole.matrix() - direct).amax() <= 1e-12);
    }
}

#[test]
fn hundred_seeded_graphs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut bipartite = 0;
    for k in 0..100 {
        let n = 3 + k % 4;
        let adj = common::random_connected(&mut rng, n, if k % 2 == 0 { 0.0 } else { 0.4 });
        let l = laplacian_matrices(&adj).laplacian;
        let nn = consensus_factor(&adj).unwrap();
        let target = l + DMatrix::from_element(n, n, 1.0 / n as f64);
        assert!((target - &nn * nn.transpose()).amax() <= 1e-10);
        let ev = common::eigenvalues(&laplacian_matrices(&adj).signless);
        let spectral = ev[0].abs() <= 1e-9;
        assert_eq!(is_bipartite(&adj).bipartite, spectral);
        if spectral {
            bipartite += 1;
            assert!(ev[1] > 1e-6);
        }
    }
    // Trees alone guarantee both verdicts are exercised.
    assert!((50..100).contains(&bipartite), "{bipartite}");
}

// Nearly equal weights cluster the nonzero spectrum.
#[test]
fn near_uniform_triangle_factors_exactly() {
    let adj = WeightedAdjacency::from_edges(3, &[(0, 1, 1.41387), (0, 2, 1.40169), (1, 2, 1.40907)]).unwrap();
    let nn = consensus_factor(&adj).unwrap();
    let target = laplacian_matrices(&adj).laplacian + DMatrix::from_element(3, 3, 1.0 / 3.0);
    assert!((target - &nn * nn.transpose()).amax() <= 1e-12);
}
