//! Randomized invariants across module boundaries.

use ndarray::Array1;
use proptest::prelude::*;

use sheaf_dmfl::graph::{self, ClientGraph, MixingMatrix};
use sheaf_dmfl::metrics::fmt_f64;
use sheaf_dmfl::rng::rng_for;
use sheaf_dmfl::sheaf::{self, InitScheme, SheafParams, SheafState};
use sheaf_dmfl::verify::random_connected_edges;

fn connected(n: usize, seed: u64) -> Vec<(usize, usize)> {
    random_connected_edges(n, 0.3, &mut rng_for(seed, &[1]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_is_doubly_stochastic(n in 1usize..12, seed in any::<u64>()) {
        let edges = connected(n, seed);
        let members: Vec<usize> = (0..n).collect();
        let w = MixingMatrix::metropolis(&members, &edges);
        prop_assert!(w.is_symmetric());
        prop_assert!(w.stochasticity_error() <= 1e-12);
        prop_assert!(w.weights.iter().all(|&x| x >= 0.0));
        let gap = graph::spectral_gap(&w).unwrap();
        prop_assert!(gap > 0.0 && gap <= 1.0 + 1e-12);
    }

    #[test]
    fn gossip_step_preserves_mean(n in 2usize..10, seed in any::<u64>(), xs in proptest::collection::vec(-10.0f64..10.0, 10)) {
        let edges = connected(n, seed);
        let members: Vec<usize> = (0..n).collect();
        let w = MixingMatrix::metropolis(&members, &edges);
        let x = Array1::from_iter(xs.into_iter().take(n));
        let y = w.weights.dot(&x);
        prop_assert!((x.sum() - y.sum()).abs() <= 1e-12 * (1.0 + x.sum().abs()));
    }

    #[test]
    fn quadratic_nonnegative_and_matches_laplacian(
        n in 2usize..6,
        seed in any::<u64>(),
        gamma in 0.05f64..=1.0,
        random_init in any::<bool>(),
    ) {
        let edges = connected(n, seed);
        let g = ClientGraph::new(n, &edges, &vec![vec![0]; n]).unwrap();
        let dims: Vec<usize> = (0..n).map(|i| 1 + (seed as usize + 3 * i) % 8).collect();
        let params = SheafParams {
            gamma,
            lambda: 1.0,
            eta: 0.0,
            init: if random_init { InitScheme::Random } else { InitScheme::Identity },
            sigma2: 1.0,
            seed,
        };
        let sh = SheafState::init(&g, &dims, &params).unwrap();
        let omega: Vec<Array1<f64>> = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| Array1::from_iter((0..d).map(|j| ((i * 7 + j * 3) as f64).sin())))
            .collect();
        let q = sh.quadratic(&omega).unwrap();
        let w = sheaf::stack_heads(&omega);
        let q2 = w.dot(&sh.laplacian().dot(&w));
        prop_assert!(q >= 0.0);
        prop_assert!((q - q2).abs() <= 1e-10 * q.max(1.0));
        for (e, &(i, j)) in sh.edges().iter().enumerate() {
            let expect = ((gamma * (dims[i] + dims[j]) as f64 / 2.0).floor() as usize).max(1);
            prop_assert_eq!(sh.edge_dims()[e], expect);
        }
    }

    #[test]
    fn csv_floats_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
        let s = fmt_f64(x);
        prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
    }
}

#[test]
fn disconnected_modality_rejected() {
    let g =
        ClientGraph::with_modalities(4, &[(0, 1), (1, 2), (2, 3)], &[vec![0], vec![1], vec![1], vec![0]], 2).unwrap();
    let err = graph::modality_mixing(&g).unwrap_err();
    assert!(matches!(err, sheaf_dmfl::Error::DisconnectedSubgraph { modality: 0, .. }), "{err}");
}
