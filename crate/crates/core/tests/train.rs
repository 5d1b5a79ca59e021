use std::collections::BTreeMap;

use kmeta_core::data::{generate, split_dataset, Family, GeneratorSpec, VanDerPolSpec};
use kmeta_core::train::{episode_loss_value, sample_episode, train, train_method, validate};
use kmeta_core::{
    AdamConfig, Dataset, Episode, Graph, Method, ModelParams, Objective, SplitRole, Tensor, TimeSeries,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> TrainConfig {
    TrainConfig {
        support_len: 8,
        query_len: 4,
        max_epochs: 30,
        episodes_per_epoch: 2,
        lr: 1e-3,
        dropout: 0.1,
        valid_every: 5,
        patience: 3,
        valid_episodes: 6,
        seed: 3,
        koopman_dim: 2,
        lstm_hidden: 4,
        mlp_hidden: 8,
        mlp_layers: 3,
        ..Default::default()
    }
}

fn small_dataset() -> Dataset {
    let spec = GeneratorSpec::new(Family::VanDerPol(VanDerPolSpec {
        a_count: 3,
        b_count: 3,
        ..Default::default()
    }))
    .with_length(40)
    .with_seed(1);
    split_dataset(&generate(&spec).unwrap(), (0.6, 0.2, 0.2), 0).unwrap()
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

#[test]
fn episode_offsets_are_uniform() {
    let s = TimeSeries {
        id: "u".into(),
        params: BTreeMap::new(),
        dt: 1.0,
        values: Tensor::zeros(&[30, 1]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = [0usize; 21];
    let draws = 100_000;
    for _ in 0..draws {
        counts[sample_episode(&[&s], 5, 5, &mut rng).unwrap().start] += 1;
    }
    let expected = draws as f64 / 21.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 20 degrees of freedom.
    assert!(chi2 < 45.31, "chi2 = {chi2}");
}

#[test]
fn episode_windows_are_contiguous() {
    let ds = small_dataset();
    let train = ds.view(SplitRole::Train).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let ep = sample_episode(&train, 8, 4, &mut rng).unwrap();
        let s = ds.get(&ep.series).unwrap();
        assert_eq!(ep.support, s.window(ep.start, 8));
        assert_eq!(ep.query, s.window(ep.start + 8, 4));
    }
}

fn params(seed: u64) -> ModelParams {
    let mut hyper = small_config().hyper(2, Method::Ours);
    hyper.dropout = 0.0;
    ModelParams::init(hyper, seed).unwrap()
}

fn episode(support: Tensor, query: Tensor) -> Episode {
    Episode {
        support,
        query,
        series: "x".into(),
        start: 0,
    }
}

#[test]
fn loss_is_zero_on_own_prediction() {
    let p = params(1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let support = random(8, 2, &mut rng);
    let pred = p.predict(&support, 4).unwrap();
    assert_eq!(episode_loss_value(&p, &episode(support, pred)).unwrap(), 0.0);
}

#[test]
fn single_step_loss_is_squared_offset() {
    let p = params(2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let support = random(8, 2, &mut rng);
        let e = random(1, 2, &mut rng);
        let query = p.predict(&support, 1).unwrap().add(&e).unwrap();
        let loss = episode_loss_value(&p, &episode(support, query)).unwrap();
        let norm2 = e.data().iter().map(|v| v * v).sum::<f64>();
        assert!((loss - norm2).abs() < 1e-12 * norm2.max(1.0));
    }
}

#[test]
fn loss_matches_explicit_sum() {
    let p = params(3);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let support = random(8, 2, &mut rng);
        let query = random(5, 2, &mut rng);
        let pred = p.predict(&support, 5).unwrap();
        let mut sum = 0.0;
        for t in 0..5 {
            for j in 0..2 {
                sum += (pred.get(t, j) - query.get(t, j)).powi(2);
            }
        }
        let loss = episode_loss_value(&p, &episode(support, query)).unwrap();
        assert!((loss - sum / 5.0).abs() < 1e-12);
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        lr: 0.0,
        max_epochs: 5,
        ..small_config()
    };
    let init = ModelParams::init(cfg.hyper(2, Method::Ours), cfg.seed).unwrap();
    let (out, log) = train(init.clone(), &ds, &cfg, Objective::Episodic).unwrap();
    assert_eq!(out.store.tensors(), init.store.tensors());
    assert_eq!(log.train_loss.len(), 5);
}

#[test]
fn training_is_deterministic() {
    let ds = small_dataset();
    let cfg = small_config();
    let (a, mut la) = train_method(Method::Ours, &ds, &cfg).unwrap();
    let (b, mut lb) = train_method(Method::Ours, &ds, &cfg).unwrap();
    la.wall_time_secs = 0.0;
    lb.wall_time_secs = 0.0;
    assert_eq!(la, lb);
    assert_eq!(a.store.tensors(), b.store.tensors());
}

#[test]
fn test_split_never_reaches_training() {
    let clean = small_dataset();
    let mut poisoned = clean.clone();
    let test_ids = clean.split().unwrap().test.clone();
    assert!(!test_ids.is_empty());
    for s in &mut poisoned.series {
        if test_ids.contains(&s.id) {
            s.values.data_mut().fill(f64::NAN);
        }
    }
    let cfg = small_config();
    let (a, mut la) = train_method(Method::Ours, &clean, &cfg).unwrap();
    let (b, mut lb) = train_method(Method::Ours, &poisoned, &cfg).unwrap();
    la.wall_time_secs = 0.0;
    lb.wall_time_secs = 0.0;
    assert_eq!(la, lb);
    assert_eq!(a.store.tensors(), b.store.tensors());
    assert!(b.store.tensors().values().all(Tensor::is_finite));
}

#[test]
fn small_steps_descend() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let cfg = AdamConfig::with_lr(1e-5);
    let mut decreased = 0;
    for trial in 0..20 {
        let mut p = params(100 + trial);
        let ep = episode(random(8, 2, &mut rng), random(4, 2, &mut rng));
        let before = episode_loss_value(&p, &ep).unwrap();
        let mut g = Graph::new();
        let loss = p
            .episode_loss(&mut g, &ep.support, &ep.query, &mut kmeta_core::model::Mode::Eval)
            .unwrap();
        let grads = g.param_grads(&g.backward(loss).unwrap());
        p.store.adam_step(&grads, &cfg).unwrap();
        if episode_loss_value(&p, &ep).unwrap() < before {
            decreased += 1;
        }
    }
    assert!(decreased >= 19, "{decreased}/20");
}

#[test]
fn returned_parameters_reproduce_best_validation() {
    let ds = small_dataset();
    let cfg = small_config();
    let (p, log) = train_method(Method::Ours, &ds, &cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let valid = ds.view(SplitRole::Valid).unwrap();
    let eps: Vec<_> = (0..cfg.valid_episodes)
        .map(|_| sample_episode(&valid, cfg.support_len, cfg.query_len, &mut rng).unwrap())
        .collect();
    assert_eq!(validate(&p, &eps).unwrap(), log.best_valid);
    assert!(log.valid_loss.iter().all(|&(_, v)| v >= log.best_valid));
}

#[test]
fn self_prediction_methods_train() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        max_epochs: 10,
        ..small_config()
    };
    for method in [Method::OursT, Method::OursN, Method::Ndmd] {
        let (p, log) = train_method(method, &ds, &cfg).unwrap();
        assert_eq!(p.hyper.use_representation, method.uses_representation());
        assert!(log.train_loss.iter().all(|v| v.is_finite()));
    }
    assert!(train_method(Method::Dmd, &ds, &cfg).is_err());
}

#[test]
fn short_series_are_rejected() {
    let ds = small_dataset();
    let cfg = TrainConfig {
        support_len: 30,
        query_len: 20,
        ..small_config()
    };
    assert!(matches!(
        train_method(Method::Ours, &ds, &cfg),
        Err(kmeta_core::Error::Config(_))
    ));
}
