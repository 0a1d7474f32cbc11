use proptest::prelude::*;
use tabprobe::adapter::{LayerSelection, ProbeableModel};
use tabprobe::lens::convergence_layer;
use tabprobe::metrics;
use tabprobe::probekit::split_rows;
use tabprobe::synthgen::{gen_switch, random_switch_table, Split};
use tabprobe::toymodel::{ModelConfig, ToyModel};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_partition(m in 2usize..400, seed in any::<u64>()) {
        let (train, test) = split_rows(m, seed);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..m).collect::<Vec<_>>());
        prop_assert_eq!((train.clone(), test.clone()), split_rows(m, seed));
    }

    #[test]
    fn r2_ignores_affine_maps(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
        a in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
        b in -20.0f64..20.0,
    ) {
        let truth: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let pred: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let base = metrics::r2(&truth, &pred);
        prop_assume!(base.is_finite() && base > -1e6);
        let t2: Vec<f64> = truth.iter().map(|v| a * v + b).collect();
        let p2: Vec<f64> = pred.iter().map(|v| a * v + b).collect();
        prop_assert!((base - metrics::r2(&t2, &p2)).abs() < 1e-8 * (1.0 + base.abs()));
    }

    #[test]
    fn convergence_layer_is_the_start_of_the_tail(
        mse in prop::collection::vec(0.0f64..5.0, 1..20),
        tau in 1.0f64..2.0,
    ) {
        let c = convergence_layer(&mse, tau).unwrap();
        let bound = tau * mse[mse.len() - 1];
        prop_assert!(mse[c..].iter().all(|m| *m <= bound));
        if c > 0 {
            prop_assert!(mse[c - 1] > bound);
        }
    }

    #[test]
    fn switch_rows_share_their_coefficients(
        pairs in 2usize..8,
        per in 2usize..10,
        seed in any::<u64>(),
    ) {
        let table = random_switch_table(pairs, (-2.0, 2.0), seed);
        let (_, ds) = gen_switch(&table, per, 1, seed, None).unwrap();
        let u = ds.switch_column().unwrap();
        for i in 0..ds.n_rows() {
            let row = ds.row(i);
            let id = row[u] as usize;
            let inputs: Vec<f64> = (0..ds.n_features()).filter(|&j| j != u).map(|j| row[j]).collect();
            let (alpha, beta) = table[id];
            prop_assert!((alpha * inputs[0] + beta * inputs[1] - ds.z[i]).abs() < 1e-12);
        }
        prop_assert_eq!(ds.rows_in(Split::Train).len(), pairs * per);
    }

    #[test]
    fn layer_selection_roundtrips(layers in prop::collection::vec(0usize..32, 0..8)) {
        let sel = LayerSelection::Layers(layers);
        let json = serde_json::to_string(&sel).unwrap();
        prop_assert_eq!(serde_json::from_str::<LayerSelection>(&json).unwrap(), sel);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Test rows never see each other, so dropping some leaves the rest alone.
    #[test]
    fn test_rows_are_independent(seed in 0u64..1000, keep in prop::collection::vec(any::<bool>(), 6)) {
        let toy = ToyModel::new(ModelConfig { n_layers: 2, embed_dim: 16, n_heads: 2, seed, ..Default::default() }).unwrap();
        let model = ProbeableModel::from_toy(toy, "memory").unwrap();
        let table = random_switch_table(2, (-2.0, 2.0), seed);
        let (_, ds) = gen_switch(&table, 8, 3, seed, None).unwrap();
        let handle = model.fit_context(&ds).unwrap();
        let test = ds.rows_in(Split::Test);
        let full = model.predict(&handle, None).unwrap();
        let subset: Vec<usize> = test.iter().zip(&keep).filter(|(_, k)| **k).map(|(r, _)| *r).collect();
        prop_assume!(!subset.is_empty());
        let part = model.predict(&handle, Some(&subset)).unwrap();
        for (r, p) in subset.iter().zip(&part) {
            let i = test.iter().position(|t| t == r).unwrap();
            prop_assert!((full[i] - p).abs() <= 1e-5 * (1.0 + p.abs()), "row {}: {} vs {}", r, full[i], p);
        }
    }
}
