//! End-to-end acceptance checks. Each test prints one PASS/FAIL line.
//!
//! The experiment checks train for up to 2000 epochs over 5 repetitions and
//! take tens of minutes on one core.

use std::fs;
use std::process::Command;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use kmeta_core::baselines::dmd_fit_predict;
use kmeta_core::data::{generate, normalize, Family, GeneratorSpec, LinearSpec, Split, SyntheticSpec, VanDerPolSpec};
use kmeta_core::eval::{eigenvalue_error, mean_se, spearman, sweep, ExperimentConfig, ExperimentResult, SweepAxis};
use kmeta_core::train::train_method;
use kmeta_core::{eig_dense, gradcheck, ComplexScalar, Dataset, Hyper, Method, ModelParams, Tensor, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Runs the checks one at a time so wall-clock limits are not shared.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(id: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    println!("[{verdict}] {id:>2} {name}: {detail}");
}

fn experiment(methods: Vec<Method>) -> ExperimentConfig {
    ExperimentConfig {
        repetitions: 5,
        methods,
        seed: 0,
        train: TrainConfig {
            max_epochs: 2000,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn rmse(r: &kmeta_core::eval::MetricsRecord) -> Option<f64> {
    r.rmse
}

fn eig_err(r: &kmeta_core::eval::MetricsRecord) -> Option<f64> {
    r.eigenvalue_error
}

fn fmt(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

#[test]
fn a01_model_gradients_match_finite_differences() {
    let _serial = serial();
    let clock = Instant::now();
    let hyper = Hyper {
        lstm_hidden: 4,
        koopman_dim: 2,
        dropout: 0.0,
        ..Hyper::new(3)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut sample = |rows: usize| {
        Tensor::matrix(rows, 3, (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect())
    };
    let (support, query) = (sample(5), sample(3));
    let params = ModelParams::init(hyper, 2).unwrap();
    let check = gradcheck::episode_gradients(&params, &support, &query, 1e-5, 1e-6).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let pass = check.worst_rel_err < 1e-4 && check.checked == params.hyper.num_params() && secs < 60.0;
    report(
        1,
        "gradient check",
        pass,
        &format!(
            "{} scalars, worst relative error {:.2e} at {}, {secs:.1}s",
            check.checked, check.worst_rel_err, check.worst_param
        ),
    );
    assert!(pass);
}

#[test]
fn a02_dmd_recovers_linear_systems() {
    let _serial = serial();
    let clock = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_k, mut worst_eig) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let m = if i % 2 == 0 { 2 } else { 3 };
        let raw = Tensor::matrix(m, m, (0..m * m).map(|_| rng.random_range(-1.0..1.0)).collect());
        let rho = eig_dense(&raw).unwrap().values.iter().map(|l| l.norm()).fold(0.0, f64::max);
        let a = raw.scale(rng.random_range(0.3..0.99) / rho);
        let mut rows = vec![(0..m).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>()];
        for _ in 1..20 {
            let prev = Tensor::col_vector(rows.last().unwrap().clone());
            rows.push(a.matmul(&prev).unwrap().into_data());
        }
        let y = Tensor::from_rows(&rows).unwrap();
        let fit = dmd_fit_predict(&y, 1, 1.0).unwrap();
        worst_k = worst_k.max(fit.koopman.sub(&a).unwrap().frobenius_norm());
        let truth = eig_dense(&a).unwrap().values;
        worst_eig = worst_eig.max(eigenvalue_error(&fit.spectrum.eigenvalues, &truth).unwrap());
    }
    let secs = clock.elapsed().as_secs_f64();
    let pass = worst_k < 1e-6 && worst_eig < 1e-6 && secs < 60.0;
    report(
        2,
        "dmd exactness",
        pass,
        &format!("worst |K-A|_F {worst_k:.2e}, worst eigenvalue error {worst_eig:.2e}, {secs:.2}s"),
    );
    assert!(pass);
}

#[test]
fn a03_eigenvalue_error_examples() {
    let _serial = serial();
    let c = |re: f64| ComplexScalar::new(re, 0.0);
    let same = eigenvalue_error(&[c(0.5), c(-0.2)], &[c(0.5), c(-0.2)]).unwrap();
    let unit = eigenvalue_error(&[c(1.0)], &[c(0.0)]).unwrap();
    let quarter = eigenvalue_error(&[c(1.0), c(0.0)], &[c(1.0)]).unwrap();
    let pass = same == 0.0 && unit == 1.0 && quarter == 0.25;
    report(3, "eigenvalue error examples", pass, &format!("{same}, {unit}, {quarter}"));
    assert!(pass);
}

/// Synthetic sweep over support lengths, shared by the eigenvalue and
/// support-length checks.
fn synthetic_sweep() -> &'static ExperimentResult {
    static RESULT: OnceLock<ExperimentResult> = OnceLock::new();
    RESULT.get_or_init(|| {
        let spec = GeneratorSpec::new(Family::SyntheticKoopman(SyntheticSpec {
            count: 30,
            ..Default::default()
        }))
        .with_length(150)
        .with_seed(4);
        let ds = generate(&spec).unwrap();
        let cfg = experiment(vec![Method::Ours, Method::Dmd]);
        sweep(&ds, &cfg, SweepAxis::SupportLength, &[5, 10, 20, 40]).unwrap()
    })
}

#[test]
fn a04_synthetic_eigenvalues_beat_dmd() {
    let _serial = serial();
    let result = synthetic_sweep();
    let train_size = result.records[0].train_size;
    let ours = result.repetition_means(Method::Ours, 20, train_size, eig_err);
    let dmd = result.repetition_means(Method::Dmd, 20, train_size, eig_err);
    let ratios: Vec<f64> = dmd.iter().zip(&ours).map(|(d, o)| d / o).collect();
    let wins = ratios.iter().filter(|&&r| r >= 5.0).count();
    let pass = ours.len() == 5 && wins >= 4;
    report(
        4,
        "synthetic eigenvalue error, ours at least 5x below dmd",
        pass,
        &format!("ours {} dmd {} ratio {} ({wins}/5)", fmt(&ours), fmt(&dmd), fmt(&ratios)),
    );
    assert!(pass);
}

#[test]
fn a05_van_der_pol_prediction_ordering() {
    let _serial = serial();
    let spec = GeneratorSpec::new(Family::VanDerPol(VanDerPolSpec {
        a_count: 6,
        b_count: 5,
        ..Default::default()
    }))
    .with_seed(5);
    let ds = generate(&spec).unwrap();
    let cfg = experiment(vec![Method::Ours, Method::Ndmd, Method::Dmd]);
    let result = sweep(&ds, &cfg, SweepAxis::SupportLength, &[20]).unwrap();
    let size = result.records[0].train_size;
    let ours = result.repetition_means(Method::Ours, 20, size, rmse);
    let ndmd = result.repetition_means(Method::Ndmd, 20, size, rmse);
    let dmd = result.repetition_means(Method::Dmd, 20, size, rmse);
    let ordered = (0..ours.len()).filter(|&i| ours[i] < ndmd[i] && ndmd[i] < dmd[i]).count();
    let pass = ours.len() == 5 && ordered >= 4;
    report(
        5,
        "van der pol rmse ours < ndmd < dmd",
        pass,
        &format!("ours {} ndmd {} dmd {} ({ordered}/5)", fmt(&ours), fmt(&ndmd), fmt(&dmd)),
    );
    assert!(pass);
}

#[test]
fn a06_representation_helps_on_two_regimes() {
    let _serial = serial();
    let spec = GeneratorSpec::new(Family::SyntheticKoopman(SyntheticSpec {
        count: 30,
        regimes: Some(2),
        ..Default::default()
    }))
    .with_length(150)
    .with_seed(6);
    let ds = generate(&spec).unwrap();
    let cfg = experiment(vec![Method::Ours, Method::OursN]);
    let result = sweep(&ds, &cfg, SweepAxis::SupportLength, &[20]).unwrap();
    let size = result.records[0].train_size;
    let ours = result.repetition_means(Method::Ours, 20, size, rmse);
    let ours_n = result.repetition_means(Method::OursN, 20, size, rmse);
    let (m_ours, _) = mean_se(&ours);
    let (m_n, _) = mean_se(&ours_n);
    let pass = ours.len() == 5 && m_ours < m_n;
    report(
        6,
        "two-regime rmse ours < ours-n",
        pass,
        &format!("ours {} (mean {m_ours:.3}) ours-n {} (mean {m_n:.3})", fmt(&ours), fmt(&ours_n)),
    );
    assert!(pass);
}

#[test]
fn a07_longer_support_lowers_error() {
    let _serial = serial();
    let result = synthetic_sweep();
    let size = result.records[0].train_size;
    let lens = [5.0, 10.0, 20.0, 40.0];
    let means: Vec<f64> = lens
        .iter()
        .map(|&t| mean_se(&result.repetition_means(Method::Ours, t as usize, size, rmse)).0)
        .collect();
    let rho = spearman(&lens, &means).unwrap();
    let pass = rho < 0.0;
    report(
        7,
        "support length trend",
        pass,
        &format!("mean rmse at T=5,10,20,40 {}, spearman {rho:.3}", fmt(&means)),
    );
    assert!(pass);
}

#[test]
fn a08_more_training_series_lower_error() {
    let _serial = serial();
    let spec = GeneratorSpec::new(Family::VanDerPol(VanDerPolSpec {
        a_count: 7,
        b_count: 7,
        ..Default::default()
    }))
    .with_seed(8);
    let ds = generate(&spec).unwrap();
    let cfg = experiment(vec![Method::Ours]);
    let sizes = [5, 15, 30];
    let result = sweep(&ds, &cfg, SweepAxis::TrainSize, &sizes).unwrap();
    let stats: Vec<(f64, f64)> = sizes
        .iter()
        .map(|&n| mean_se(&result.repetition_means(Method::Ours, 20, n, rmse)))
        .collect();
    let pass = stats
        .windows(2)
        .all(|w| w[1].0 <= w[0].0 + w[0].1.max(w[1].1));
    let detail: Vec<String> = sizes
        .iter()
        .zip(&stats)
        .map(|(n, (m, se))| format!("{n}: {m:.3} ± {se:.3}"))
        .collect();
    report(8, "training size trend", pass, &detail.join(", "));
    assert!(pass);
}

#[test]
fn a09_cli_reruns_are_byte_identical() {
    let _serial = serial();
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.json"),
        r#"{"schema_version": 1, "series_length": 40, "family": {"kind": "linear", "count": 10}}"#,
    )
    .unwrap();
    let train = r#"{"schema_version": 1, "support_len": 10, "query_len": 10, "max_epochs": 30,
        "valid_every": 10, "lstm_hidden": 8, "mlp_hidden": 16}"#;
    fs::write(d.join("train.json"), train).unwrap();
    fs::write(
        d.join("exp.json"),
        format!(r#"{{"schema_version": 1, "repetitions": 2, "methods": ["ours", "finetune", "dmd"], "train": {train}}}"#),
    )
    .unwrap();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let kmeta = |args: Vec<String>| {
        let out = Command::new(env!("CARGO_BIN_EXE_kmeta")).args(&args).output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    for run in ["a", "b"] {
        let q = |name: &str| p(&format!("{run}-{name}"));
        kmeta(s(&["generate", "--spec", &p("spec.json"), "--out", &q("data.json"), "--seed", "7"]));
        kmeta(s(&[
            "train", "--config", &p("train.json"), "--data", &q("data.json"), "--out", &q("model.json"),
            "--log", &q("log.csv"), "--seed", "7",
        ]));
        kmeta(s(&[
            "predict", "--data", &q("data.json"), "--series", "lin-0001", "--model", &q("model.json"),
            "--support-len", "10", "--horizon", "10", "--out", &q("pred.csv"),
        ]));
        kmeta(s(&[
            "spectrum", "--data", &q("data.json"), "--series", "lin-0001", "--model", &q("model.json"),
            "--support-len", "10", "--out", &q("spectrum.csv"),
        ]));
        kmeta(s(&[
            "evaluate", "--config", &p("exp.json"), "--data", &q("data.json"), "--out-dir", &q("eval"),
            "--seed", "7",
        ]));
    }
    let files = ["log.csv", "pred.csv", "spectrum.csv", "eval/records.csv", "eval/summary.csv"];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| fs::read(d.join(format!("a-{f}"))).unwrap() != fs::read(d.join(format!("b-{f}"))).unwrap())
        .collect();
    let pass = differing.is_empty();
    report(
        9,
        "cli determinism",
        pass,
        &format!("{} CSV outputs compared, differing: {differing:?}", files.len()),
    );
    assert!(pass);
}

#[test]
fn a10_overfits_one_linear_series() {
    let _serial = serial();
    let clock = Instant::now();
    let spec = GeneratorSpec::new(Family::Linear(LinearSpec {
        count: 1,
        dim: 2,
        min_spectral_radius: 0.99,
        max_spectral_radius: 0.99,
    }))
    .with_length(100)
    .with_seed(10);
    let mut raw: Dataset = generate(&spec).unwrap();
    raw.meta.split = Some(Split {
        train: vec![raw.series[0].id.clone()],
        ..Default::default()
    });
    let (ds, _) = normalize(&raw).unwrap();
    let values = &ds.series[0].values;
    let n = values.rows() as f64;
    let variance: f64 = (0..values.cols())
        .map(|j| {
            let col: Vec<f64> = (0..values.rows()).map(|i| values.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / n;
            col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
        })
        .sum();
    let cfg = TrainConfig {
        max_epochs: 2000,
        ..Default::default()
    };
    let (_, log) = train_method(Method::Ours, &ds, &cfg).unwrap();
    let secs = clock.elapsed().as_secs_f64();
    let ratio = log.best_valid / variance;
    let pass = ratio < 0.01 && secs < 300.0;
    report(
        10,
        "overfit one linear series",
        pass,
        &format!(
            "validation loss {:.3e} = {:.3}% of variance {variance:.3e} (epoch {}), {secs:.0}s",
            log.best_valid,
            100.0 * ratio,
            log.best_epoch
        ),
    );
    assert!(pass);
}
