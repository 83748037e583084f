use std::collections::HashSet;
use std::sync::Arc;

use poolal::classifier::TrainConfig;
use poolal::dataset::{generate_synthetic, Dataset, InstanceId, SyntheticSpec};
use poolal::engine::{
    baseline_noisy_pool, baseline_seed_only, baseline_supervised, export_curve, read_curve,
    run_loop, simulated_oracle, ActiveLearner, LoopConfig, Outcome, Strategy,
};

fn dataset(seed: u64, irrelevant: usize, separation: f64) -> Arc<Dataset> {
    Arc::new(
        generate_synthetic(&SyntheticSpec {
            num_classes: 4,
            dim: 3,
            seed_per_class: 5,
            pool_per_class: 15,
            irrelevant_count: irrelevant,
            test_per_class: 20,
            cluster_separation: separation,
            rng_seed: seed,
        })
        .unwrap(),
    )
}

fn config(strategy: Strategy, iterations: usize, seed: u64) -> LoopConfig {
    let mut checkpoints = vec![1, 5, 10, iterations];
    checkpoints.retain(|&c| c <= iterations);
    checkpoints.dedup();
    LoopConfig {
        strategy,
        max_iterations: iterations,
        checkpoint_iterations: checkpoints,
        classifier: TrainConfig { max_epochs: 60, learning_rate: 1.0, ..TrainConfig::default() },
        rng_seed: seed,
        ..LoopConfig::default()
    }
}

#[test]
fn invariants_hold_at_every_iteration() {
    let ds = dataset(3, 12, 2.0);
    let test_ids: HashSet<&InstanceId> = ds.test_set().iter().map(|e| &e.id).collect();
    let initial = ds.seed_set().len() + ds.pool().len();
    for strategy in Strategy::ALL {
        for batch in [1, 3] {
            let cfg = LoopConfig { batch_size: batch, ..config(strategy, 30, 1) };
            let oracle = simulated_oracle(&ds);
            let mut learner = ActiveLearner::new(ds.clone(), cfg).unwrap();
            let mut queried = HashSet::new();
            let mut last_labeled = learner.state().labeled_size();
            while !learner.is_complete() {
                let picks = learner.propose().unwrap();
                assert_eq!(picks.len(), batch.min(learner.state().pool.len()));
                let mut labels = 0;
                let decisions: Vec<(InstanceId, Outcome)> = picks
                    .into_iter()
                    .map(|c| {
                        assert!(queried.insert(c.id.clone()), "{} queried twice", c.id);
                        let outcome = oracle.answer(&c.id).unwrap().outcome;
                        labels += usize::from(matches!(outcome, Outcome::Label(_)));
                        (c.id, outcome)
                    })
                    .collect();
                learner.apply(&decisions).unwrap();

                let st = learner.state();
                assert_eq!(st.labeled.len() + st.pool.len() + st.discarded.len(), initial);
                assert_eq!(st.labeled_size(), last_labeled + labels);
                last_labeled = st.labeled_size();
                assert!(st.iteration <= learner.config().max_iterations);
                let labeled: HashSet<&InstanceId> = st.labeled.iter().map(|l| &l.id).collect();
                assert!(learner.pool_ids().all(|id| !labeled.contains(id)));
                assert!(labeled.iter().all(|id| !test_ids.contains(id)));
            }
            let curve = &learner.state().curve;
            assert!(curve.points.windows(2).all(|w| w[0].iteration < w[1].iteration));
            assert!(curve.points.iter().all(|p| (0.0..=1.0).contains(&p.accuracy)));
            let reached = learner.state().iteration;
            let expected: Vec<usize> =
                learner.config().checkpoint_iterations.iter().copied().filter(|&c| c <= reached).collect();
            let got: Vec<usize> = curve.points.iter().map(|p| p.iteration).collect();
            assert_eq!(got, expected, "{strategy}");
        }
    }
}

#[test]
fn runs_are_deterministic() {
    let ds = dataset(8, 10, 2.0);
    for strategy in Strategy::ALL {
        let run = || run_loop(ds.clone(), config(strategy, 25, 4), &mut simulated_oracle(&ds)).unwrap();
        let (c1, s1) = run();
        let (c2, s2) = run();
        assert_eq!(c1, c2, "{strategy}");
        assert_eq!(s1.digest(), s2.digest(), "{strategy}");
    }
}

#[test]
fn random_strategy_depends_on_seed() {
    let ds = dataset(8, 10, 2.0);
    let picks = |seed| {
        let (_, st) = run_loop(ds.clone(), config(Strategy::Random, 10, seed), &mut simulated_oracle(&ds)).unwrap();
        st.labeled.iter().map(|l| l.id.clone()).collect::<Vec<_>>()
    };
    assert_eq!(picks(1), picks(1));
    assert_ne!(picks(1), picks(2));
}

#[test]
fn exhaustive_querying_rejects_exactly_the_irrelevant_items() {
    let ds = dataset(5, 17, 2.0);
    let pool = ds.pool().len();
    let cfg = LoopConfig {
        checkpoint_iterations: vec![1],
        ..config(Strategy::Uncertainty(poolal::UncertaintyKind::LeastConfidence), pool + 10, 0)
    };
    let (_, st) = run_loop(ds.clone(), cfg, &mut simulated_oracle(&ds)).unwrap();
    assert_eq!(st.iteration, pool);
    assert_eq!(st.discarded.len(), 17);
    assert_eq!(st.discarded.len() as f64 / pool as f64, 17.0 / pool as f64);
}

#[test]
fn full_budget_curve_has_default_checkpoints() {
    let ds = Arc::new(generate_synthetic(&SyntheticSpec::default()).unwrap());
    let cfg = LoopConfig {
        strategy: Strategy::Uncertainty(poolal::UncertaintyKind::LeastConfidence),
        retrain_every: 250,
        classifier: TrainConfig { max_epochs: 50, learning_rate: 2.0, ..TrainConfig::default() },
        ..LoopConfig::default()
    };
    let (curve, st) = run_loop(ds.clone(), cfg, &mut simulated_oracle(&ds)).unwrap();
    let iterations: Vec<usize> = curve.points.iter().map(|p| p.iteration).collect();
    assert_eq!(iterations, vec![1, 250, 500, 750, 1000, 1250, 1500, 2000]);
    assert_eq!(curve.points[0].labeled_size, 160);
    assert_eq!(st.iteration, 2000);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("curve.csv");
    export_curve(&curve, &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 9);
    assert_eq!(read_curve(&path).unwrap(), curve);
}

#[test]
fn supervised_baseline_dominates_on_clean_separable_data() {
    let tc = TrainConfig { max_epochs: 300, learning_rate: 2.0, ..TrainConfig::default() };
    for seed in 0..10 {
        let ds = dataset(100 + seed, 0, 8.0);
        let reference = baseline_supervised(&ds, &tc).unwrap();
        assert_eq!(reference, baseline_noisy_pool(&ds, &tc).unwrap());
        for strategy in Strategy::ALL {
            let cfg = LoopConfig { classifier: tc.clone(), ..config(strategy, 20, seed) };
            let (curve, _) = run_loop(ds.clone(), cfg, &mut simulated_oracle(&ds)).unwrap();
            for p in &curve.points {
                assert!(reference >= p.accuracy, "{strategy} seed {seed}: {} > {reference}", p.accuracy);
            }
        }
    }
}

#[test]
fn noise_pulls_the_pool_baseline_down() {
    let tc = TrainConfig { max_epochs: 300, learning_rate: 2.0, ..TrainConfig::default() };
    let (mut sup, mut noisy) = (0.0, 0.0);
    for seed in 0..10 {
        let ds = generate_synthetic(&SyntheticSpec { rng_seed: seed, ..SyntheticSpec::default() }).unwrap();
        sup += baseline_supervised(&ds, &tc).unwrap();
        noisy += baseline_noisy_pool(&ds, &tc).unwrap();
    }
    assert!(noisy < sup, "noisy {noisy} vs supervised {sup}");
}

#[test]
fn all_noise_pool_is_no_better_than_the_seed() {
    let tc = TrainConfig { max_epochs: 300, learning_rate: 2.0, ..TrainConfig::default() };
    let (mut seed_only, mut noisy) = (0.0, 0.0);
    for seed in 0..5 {
        let ds = generate_synthetic(&SyntheticSpec {
            pool_per_class: 0,
            irrelevant_count: 1600,
            rng_seed: seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        seed_only += baseline_seed_only(&ds, &tc).unwrap() / 5.0;
        noisy += baseline_noisy_pool(&ds, &tc).unwrap() / 5.0;
    }
    assert!(noisy <= seed_only + 0.02, "noisy {noisy} vs seed-only {seed_only}");
}
