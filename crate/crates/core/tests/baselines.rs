use kmeta_core::baselines::{dmd_fit_predict, dmd_matrix, finetune, support_loss, Predictor};
use kmeta_core::eval::eigenvalue_error;
use kmeta_core::{eig_dense, Hyper, Method, ModelParams, Tensor, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn linear_series(a: &Tensor, y0: &[f64], len: usize) -> Tensor {
    let mut rows = vec![y0.to_vec()];
    for _ in 1..len {
        let prev = Tensor::col_vector(rows.last().unwrap().clone());
        rows.push(a.matmul(&prev).unwrap().into_data());
    }
    Tensor::from_rows(&rows).unwrap()
}

fn small(method: Method) -> Hyper {
    let cfg = TrainConfig {
        lstm_hidden: 4,
        mlp_hidden: 8,
        mlp_layers: 3,
        ..Default::default()
    };
    cfg.hyper(2, method.trained_as())
}

proptest! {
    #![proptest_config(proptest::test_runner::Config::with_cases(64))]

    #[test]
    fn dmd_recovers_random_stable_systems(seed in any::<u64>(), m in 2usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(m, m, &mut rng);
        let rho = eig_dense(&a).unwrap().values.iter().map(|l| l.norm()).fold(0.0, f64::max);
        let a = a.scale(rng.random_range(0.5..0.95) / rho);
        let y0: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = linear_series(&a, &y0, 20);
        let y1 = y.row_range(0, 19).transpose();
        prop_assume!(kmeta_core::linalg::svd(&y1).unwrap().s[m - 1] > 1e-6);
        let r = dmd_fit_predict(&y, 3, 1.0).unwrap();
        prop_assert!(r.koopman.sub(&a).unwrap().frobenius_norm() < 1e-6);
        let truth = eig_dense(&a).unwrap().values;
        prop_assert!(eigenvalue_error(&r.spectrum.eigenvalues, &truth).unwrap() < 1e-6);
    }
}

#[test]
fn dmd_needs_two_steps() {
    assert!(dmd_matrix(&Tensor::zeros(&[1, 2])).is_err());
}

#[test]
fn parameter_layouts_per_method() {
    let ours = ModelParams::init(small(Method::Ours), 0).unwrap();
    let ours_t = ModelParams::init(small(Method::OursT), 0).unwrap();
    let ours_n = ModelParams::init(small(Method::OursN), 0).unwrap();
    let ndmd = ModelParams::init(small(Method::Ndmd), 0).unwrap();
    assert!(ours_n.store.names().all(|n| !n.starts_with("lstm")));
    assert!(ours.store.names().any(|n| n.starts_with("lstm")));
    let shapes = |p: &ModelParams| {
        p.store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shapes(&ours), shapes(&ours_t));
    assert_eq!(shapes(&ours_n), shapes(&ndmd));
}

#[test]
fn finetune_with_zero_rate_is_a_copy() {
    let base = ModelParams::init(small(Method::Ndmd), 1).unwrap();
    let snapshot = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let support = random(10, 2, &mut rng);
    let tuned = finetune(&base, &support, 5, 0.0, 0).unwrap();
    assert_eq!(tuned.params.store.tensors(), base.store.tensors());
    assert_eq!(tuned.loss_before, tuned.loss_after);
    let moved = finetune(&base, &support, 5, 1e-2, 0).unwrap();
    assert_ne!(moved.params.store.tensors(), base.store.tensors());
    assert_eq!(base.store.tensors(), snapshot.store.tensors());
}

#[test]
fn finetune_usually_reduces_support_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut hyper = small(Method::Ndmd);
    hyper.dropout = 0.0;
    let trials = 40;
    let mut improved = 0;
    for trial in 0..trials {
        let base = ModelParams::init(hyper.clone(), 10 + trial).unwrap();
        let support = random(10, 2, &mut rng);
        let tuned = finetune(&base, &support, 20, 1e-3, trial).unwrap();
        assert_eq!(tuned.loss_before, support_loss(&base, &support).unwrap());
        if tuned.loss_after <= tuned.loss_before {
            improved += 1;
        }
    }
    assert!(improved * 100 >= trials * 95, "{improved}/{trials}");
}

#[test]
fn ndmd_fits_one_linear_series() {
    let th = 0.4f64;
    let a = Tensor::from_rows(&[vec![0.97 * th.cos(), -0.97 * th.sin()], vec![0.97 * th.sin(), 0.97 * th.cos()]])
        .unwrap();
    let y = linear_series(&a, &[1.0, 0.0], 12);
    let mut hyper = small(Method::Ndmd);
    hyper.dropout = 0.0;
    let base = ModelParams::init(hyper, 4).unwrap();
    let tuned = finetune(&base, &y, 400, 1e-2, 0).unwrap();
    assert!(tuned.aborted_at.is_none());
    assert!(tuned.loss_after < 0.1 * tuned.loss_before, "{} -> {}", tuned.loss_before, tuned.loss_after);
}

#[test]
fn predictors_report_their_method() {
    let base = ModelParams::init(small(Method::Ours), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let support = random(10, 2, &mut rng);
    let predictors = [
        Predictor::Dmd,
        Predictor::Neural {
            method: Method::Ours,
            params: base.clone(),
        },
        Predictor::Finetune {
            base: ModelParams::init(small(Method::Finetune), 5).unwrap(),
            steps: 3,
            lr: 1e-3,
            seed: 0,
        },
    ];
    for (p, m) in predictors.iter().zip([Method::Dmd, Method::Ours, Method::Finetune]) {
        assert_eq!(p.method(), m);
        let f = p.forecast(&support, 4).unwrap();
        assert_eq!(f.prediction.shape(), &[4, 2]);
        assert!(f.prediction.is_finite());
    }
    let neural = predictors[1].forecast(&support, 4).unwrap();
    assert_eq!(neural.prediction, base.predict(&support, 4).unwrap());
}
