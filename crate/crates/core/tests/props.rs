use ooda::datasets::{generate, SplitConfig};
use ooda::graph::{validate, validate_discrete, DenseGraph};
use ooda::io::{read_dataset_from, write_dataset_to};
use ooda::sde::{masked_noise, DiffusionSde, TensorRole};
use ooda::tensor::Matrix;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn is_symmetric(a: &Matrix, n: usize) -> bool {
    (0..n).all(|i| (0..n).all(|j| a.row(i * n + j) == a.row(j * n + i)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn vp_marginal_is_variance_preserving(
        bmin in 0.01f64..1.0, extra in 0.0f64..20.0, t in 0.0f64..=1.0,
    ) {
        let sde = DiffusionSde::vp(bmin, bmin + extra, 1000);
        let (m, s) = sde.marginal_params(t).unwrap();
        prop_assert!((m * m + s * s - 1.0).abs() < 1e-12);
        let (m2, s2) = sde.marginal_params((t + 0.05).min(1.0)).unwrap();
        prop_assert!(m2 <= m && s2 >= s);
    }

    #[test]
    fn ve_marginal_keeps_the_mean(
        smin in 0.01f64..1.0, ratio in 1.0f64..100.0, t in 0.0f64..=1.0,
    ) {
        let sde = DiffusionSde::ve(smin, smin * ratio, 1000);
        let (m, s) = sde.marginal_params(t).unwrap();
        prop_assert_eq!(m, 1.0);
        prop_assert!(s >= 0.0 && s.is_finite());
        let (_, s2) = sde.marginal_params((t + 0.05).min(1.0)).unwrap();
        prop_assert!(s2 >= s);
    }

    #[test]
    fn perturbation_keeps_graph_structure(seed in any::<u64>(), n in 1usize..7, t in 0.01f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_max = 7;
        let mask: Vec<bool> = (0..n_max).map(|i| i < n).collect();
        let sde = DiffusionSde::vp(0.1, 1.0, 1000);
        let clean = Matrix::zeros(n_max * n_max, 2);
        let (a, z) = sde.perturb(&clean, TensorRole::Adjacency, &mask, t, &mut rng).unwrap();
        prop_assert!(is_symmetric(&a, n_max) && is_symmetric(&z, n_max));
        let x = masked_noise(n_max, 3, TensorRole::Nodes, &mask, &mut rng);
        let g = DenseGraph::from_parts(x, a, mask, None).unwrap();
        prop_assert!(validate(&g).is_empty());
    }

    #[test]
    fn permutation_round_trips(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let splits = generate(&SplitConfig {
            sizes: [3, 0, 0],
            base_size_range: (4, 8),
            seed,
            ..Default::default()
        }).unwrap();
        for g in &splits.train.graphs {
            prop_assert!(validate_discrete(g).is_empty());
            prop_assert!(g.is_connected());
            let mut perm: Vec<usize> = (0..g.n_max()).collect();
            perm.shuffle(&mut rng);
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let moved = g.permuted(&perm).unwrap();
            prop_assert!(validate(&moved).is_empty());
            prop_assert_eq!(moved.num_edges(), g.num_edges());
            prop_assert_eq!(&moved.permuted(&inv).unwrap(), g);
        }
    }

    #[test]
    fn dataset_round_trip_is_byte_exact(seed in any::<u64>()) {
        let splits = generate(&SplitConfig {
            sizes: [4, 2, 2],
            base_size_range: (4, 7),
            seed,
            ..Default::default()
        }).unwrap();
        for ds in [&splits.train, &splits.val, &splits.test] {
            let mut first = Vec::new();
            write_dataset_to(ds, &mut first).unwrap();
            let back = read_dataset_from(first.as_slice()).unwrap();
            prop_assert_eq!(&back, ds);
            let mut second = Vec::new();
            write_dataset_to(&back, &mut second).unwrap();
            prop_assert_eq!(first, second);
        }
    }

    #[test]
    fn continuous_round_trip_survives_f32_values(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let splits = generate(&SplitConfig {
            sizes: [2, 0, 0],
            base_size_range: (4, 5),
            seed,
            ..Default::default()
        }).unwrap();
        let mut ds = splits.train.clone();
        for g in ds.graphs.iter_mut() {
            let mask = g.node_mask().to_vec();
            let noise = masked_noise(g.n_max(), g.node_dim(), TensorRole::Nodes, &mask, &mut rng)
                .map(|v| v as f32 as f64);
            g.node_features_mut().add_assign(&noise);
            let x = g.node_features().map(|v| v as f32 as f64);
            *g.node_features_mut() = x;
        }
        let mut bytes = Vec::new();
        write_dataset_to(&ds, &mut bytes).unwrap();
        prop_assert_eq!(read_dataset_from(bytes.as_slice()).unwrap(), ds);
    }
}
