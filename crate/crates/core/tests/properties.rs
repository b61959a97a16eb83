//! Invariants checked over random inputs.

use proptest::prelude::*;

use modalcompose::diffusion::forward_noise;
use modalcompose::experts::Embedding;
use modalcompose::harness::Checkpoint;
use modalcompose::numcore::{ParamSet, Tensor};
use modalcompose::rng::seeded;
use modalcompose::router::{apply_strategy, router_weights, RouterConfig};
use modalcompose::{
    generate_dataset, make_schedule, ConsensusWeights, Dataset, EnvSpec, Router, RoutingStrategy,
};

fn weights() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.001f64..10.0, 1..7).prop_map(|raw| {
        let s: f64 = raw.iter().sum();
        raw.iter().map(|x| x / s).collect()
    })
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

proptest! {
    #[test]
    fn strategies_stay_on_the_simplex(w in weights()) {
        let cw = ConsensusWeights::new(w.clone()).unwrap();
        for s in [RoutingStrategy::Soft, RoutingStrategy::Hard, RoutingStrategy::Top2] {
            let out = apply_strategy(&cw, s);
            prop_assert!((sum(out.values()) - 1.0).abs() < 1e-12);
            prop_assert!(out.values().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        prop_assert_eq!(apply_strategy(&cw, RoutingStrategy::Soft).values().to_vec(), w);
        let hard = apply_strategy(&cw, RoutingStrategy::Hard);
        prop_assert_eq!(hard.values().iter().filter(|&&x| x == 1.0).count(), 1);
        prop_assert_eq!(hard.argmax(), cw.argmax());
        let top2 = apply_strategy(&cw, RoutingStrategy::Top2);
        prop_assert!(top2.values().iter().filter(|&&x| x > 0.0).count() <= 2);
        prop_assert_eq!(top2.argmax(), cw.argmax());
        prop_assert_eq!(apply_strategy(&top2, RoutingStrategy::Top2).values().to_vec(), top2.values().to_vec());
    }

    #[test]
    fn router_outputs_are_distributions(seed in any::<u64>(), n in 1usize..5, dim in 1usize..6, scale in 0.1f64..50.0) {
        let mods: Vec<(String, usize)> = (0..n).map(|i| (format!("m{i}"), dim)).collect();
        let cfg = RouterConfig { hidden: vec![8], ..RouterConfig::default() };
        let router = Router::init(&mods, &cfg, &mut seeded(seed)).unwrap();
        let emb: Vec<Embedding> = (0..n)
            .map(|i| Embedding { modality: format!("m{i}"), values: (0..dim).map(|j| scale * ((i * 7 + j) as f64).sin()).collect() })
            .collect();
        let w = router_weights(&router, &emb).unwrap();
        prop_assert_eq!(w.len(), n);
        prop_assert!((sum(w.values()) - 1.0).abs() < 1e-12);
        prop_assert!(w.values().iter().all(|&x| x >= 0.0 && x.is_finite()));
    }

    #[test]
    fn checkpoint_round_trips(
        tensors in prop::collection::btree_map("[a-z][a-z0-9._]{0,12}", prop::collection::vec(-1e6f64..1e6, 1..20), 0..6),
        meta in prop::collection::btree_map("[a-z_]{1,10}", "[A-Za-z0-9:,._-]{0,16}", 0..6),
    ) {
        let mut params = ParamSet::new();
        for (name, data) in &tensors {
            params.insert(name.clone(), Tensor::new(vec![data.len()], data.clone()).unwrap()).unwrap();
        }
        let ckpt = Checkpoint { metadata: meta, params };
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ckpt);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_round_trips(seed in any::<u64>(), n in 1usize..4, horizon in 1usize..4, phase in any::<bool>()) {
        let spec = if phase { EnvSpec::phase_reach() } else { EnvSpec::occluded_reach() };
        let ds = generate_dataset(&spec, n, horizon, seed).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.episodes.len(), n);
    }
}

#[test]
fn forward_noise_moments() {
    let sched = make_schedule(50, 1e-4, 0.02).unwrap();
    let a0 = [0.6, -0.3];
    let mut rng = seeded(5);
    for k in [1, 10, 50] {
        let draws = 100_000;
        let (mut s, mut ss) = ([0.0; 2], [0.0; 2]);
        for _ in 0..draws {
            let (ak, _) = forward_noise(&a0, k, &sched, &mut rng).unwrap();
            for c in 0..2 {
                s[c] += ak[c];
                ss[c] += ak[c] * ak[c];
            }
        }
        let ab = sched.alpha_bar(k);
        for c in 0..2 {
            let mean = s[c] / draws as f64;
            let var = ss[c] / draws as f64 - mean * mean;
            assert!(
                (var / (1.0 - ab) - 1.0).abs() < 0.02,
                "k={k} var {var} vs {}",
                1.0 - ab
            );
            assert!((mean - ab.sqrt() * a0[c]).abs() < 4.0 * ((1.0 - ab) / draws as f64).sqrt());
        }
    }
}
