//! Metrics, repeated experiments, sweeps and their CSV records.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::Predictor;
use crate::data::{normalize, split_dataset, true_eigenvalues, Dataset, Normalization, Split, SplitRole};
use crate::eig::{self, ComplexScalar};
use crate::error::{Error, Result};
use crate::method::Method;
use crate::model::ModelParams;
use crate::tensor::Tensor;
use crate::train::{train_method, TrainConfig, TrainLog};

/// Symmetric mean nearest-neighbour distance between two eigenvalue sets.
pub fn eigenvalue_error(estimated: &[ComplexScalar], truth: &[ComplexScalar]) -> Result<f64> {
    if estimated.is_empty() || truth.is_empty() {
        return Err(Error::invalid("eigenvalue_error", "empty eigenvalue list"));
    }
    let nearest = |from: &[ComplexScalar], to: &[ComplexScalar]| {
        from.iter()
            .map(|a| to.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    Ok(0.5 * (nearest(estimated, truth) + nearest(truth, estimated)))
}

pub fn rmse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("rmse", pred.shape(), truth.shape()));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("rmse", "empty input"));
    }
    let se: f64 = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((se / pred.numel() as f64).sqrt())
}

/// Mean and standard error (sample standard deviation over `√n`).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::invalid("spearman", "need two equal-length samples of size >= 2"));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub repetitions: usize,
    pub methods: Vec<Method>,
    /// Train, validation and test fractions.
    pub fractions: [f64; 3],
    pub normalize: bool,
    pub seed: u64,
    /// Evaluation support length; defaults to the training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_support_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_query_len: Option<usize>,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema_version: 1,
            repetitions: 5,
            methods: vec![Method::Ours, Method::Ndmd, Method::Dmd],
            fractions: [0.7, 0.1, 0.2],
            normalize: true,
            seed: 0,
            eval_support_len: None,
            eval_query_len: None,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// First 16 hex digits of the SHA-256 of the config's JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn support_len(&self) -> usize {
        self.eval_support_len.unwrap_or(self.train.support_len)
    }

    pub fn query_len(&self) -> usize {
        self.eval_query_len.unwrap_or(self.train.query_len)
    }

    /// Seed of repetition `rep`, independent across repetitions.
    pub fn repetition_seed(&self, rep: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(rep as u64);
        rng.next_u64()
    }

    pub fn validate_for(&self, ds: &Dataset, support_lens: &[usize]) -> Result<()> {
        if self.repetitions == 0 || self.methods.is_empty() {
            return Err(Error::Config("need at least one repetition and one method".into()));
        }
        self.train.validate()?;
        let shortest = ds.series.iter().map(|s| s.len()).min().unwrap_or(0);
        let train_need = self.train.support_len + self.train.query_len;
        for &t in support_lens {
            if t < 2 {
                return Err(Error::Config(format!("support length {t} is below 2")));
            }
            if t + self.query_len() > shortest || train_need > shortest {
                return Err(Error::Config(format!(
                    "support length {t} plus query length {} exceeds the shortest series ({shortest} steps)",
                    self.query_len()
                )));
            }
        }
        Ok(())
    }
}

/// One evaluated (method, repetition, test series) triple.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub method: Method,
    pub dataset: String,
    pub repetition: usize,
    pub series: String,
    pub seed: u64,
    pub support_len: usize,
    pub train_size: usize,
    pub rmse: Option<f64>,
    pub eigenvalue_error: Option<f64>,
    pub config_hash: String,
    pub error: Option<String>,
}

impl MetricsRecord {
    fn sort_key(&self) -> (Method, usize, usize, usize, &str) {
        (
            self.method,
            self.support_len,
            self.train_size,
            self.repetition,
            &self.series,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub support_len: usize,
    pub train_size: usize,
    pub n: usize,
    pub failures: usize,
    pub rmse_mean: Option<f64>,
    pub rmse_se: Option<f64>,
    pub eigenvalue_error_mean: Option<f64>,
    pub eigenvalue_error_se: Option<f64>,
}

/// Mean and standard error per (method, support length, train size).
pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups
            .entry((r.method, r.support_len, r.train_size))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((method, support_len, train_size), rs)| {
            let stat = |vals: Vec<f64>| {
                if vals.is_empty() {
                    (None, None)
                } else {
                    let (m, se) = mean_se(&vals);
                    (Some(m), Some(se))
                }
            };
            let (rmse_mean, rmse_se) = stat(rs.iter().filter_map(|r| r.rmse).collect());
            let (eig_mean, eig_se) = stat(rs.iter().filter_map(|r| r.eigenvalue_error).collect());
            SummaryRow {
                method,
                support_len,
                train_size,
                n: rs.iter().filter(|r| r.error.is_none()).count(),
                failures: rs.iter().filter(|r| r.error.is_some()).count(),
                rmse_mean,
                rmse_se,
                eigenvalue_error_mean: eig_mean,
                eigenvalue_error_se: eig_se,
            }
        })
        .collect()
}

pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned, R: Read>(input: R) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentResult {
    pub records: Vec<MetricsRecord>,
    pub summary: Vec<SummaryRow>,
    /// Training logs keyed by (repetition, train size, method).
    pub logs: BTreeMap<(usize, usize, Method), TrainLog>,
}

impl ExperimentResult {
    fn finish(mut records: Vec<MetricsRecord>, logs: BTreeMap<(usize, usize, Method), TrainLog>) -> Self {
        records.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        let summary = summarize(&records);
        ExperimentResult {
            records,
            summary,
            logs,
        }
    }

    pub fn failures(&self) -> usize {
        self.records.iter().filter(|r| r.error.is_some()).count()
    }

    /// Per-repetition mean of a metric for one method and sweep point.
    pub fn repetition_means(
        &self,
        method: Method,
        support_len: usize,
        train_size: usize,
        metric: fn(&MetricsRecord) -> Option<f64>,
    ) -> Vec<f64> {
        let mut by_rep: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            if r.method == method && r.support_len == support_len && r.train_size == train_size {
                if let Some(v) = metric(r) {
                    by_rep.entry(r.repetition).or_default().push(v);
                }
            }
        }
        by_rep
            .values()
            .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            .collect()
    }
}

/// Split (and optionally normalized) data for one repetition.
struct Prepared {
    raw: Dataset,
    model_ds: Dataset,
    norm: Normalization,
}

fn prepare(ds: &Dataset, cfg: &ExperimentConfig, seed: u64) -> Result<Prepared> {
    let [a, b, c] = cfg.fractions;
    let raw = split_dataset(ds, (a, b, c), seed)?;
    restrict(raw, cfg)
}

fn restrict(raw: Dataset, cfg: &ExperimentConfig) -> Result<Prepared> {
    let (model_ds, norm) = if cfg.normalize {
        normalize(&raw)?
    } else {
        let dim = raw.measurement_dim();
        (raw.clone(), Normalization::identity(dim))
    };
    Ok(Prepared {
        raw,
        model_ds,
        norm,
    })
}

/// Trains the networks `methods` need; DMD needs nothing.
fn build_predictors(
    methods: &[Method],
    prepared: &Prepared,
    train_cfg: &TrainConfig,
    logs: &mut BTreeMap<Method, TrainLog>,
) -> Vec<(Method, Result<Predictor>)> {
    let mut trained: BTreeMap<Method, std::result::Result<ModelParams, String>> = BTreeMap::new();
    methods
        .iter()
        .map(|&method| {
            if method == Method::Dmd {
                return (method, Ok(Predictor::Dmd));
            }
            let base = method.trained_as();
            let params = trained
                .entry(base)
                .or_insert_with(|| {
                    log::info!("training {base}");
                    train_method(base, &prepared.model_ds, train_cfg)
                        .map(|(p, log)| {
                            logs.insert(base, log);
                            p
                        })
                        .map_err(|e| e.to_string())
                })
                .clone();
            let predictor = params.map_err(Error::Config).map(|params| match method {
                Method::Finetune => Predictor::Finetune {
                    base: params,
                    steps: train_cfg.finetune_steps,
                    lr: train_cfg.finetune_lr,
                    seed: train_cfg.seed,
                },
                m => Predictor::Neural { method: m, params },
            });
            (method, predictor)
        })
        .collect()
}

struct EvalContext<'a> {
    cfg: &'a ExperimentConfig,
    dataset: &'a str,
    hash: &'a str,
    repetition: usize,
    seed: u64,
    train_size: usize,
}

impl EvalContext<'_> {
    fn record(&self, method: Method, series: &str, support_len: usize) -> MetricsRecord {
        MetricsRecord {
            method,
            dataset: self.dataset.to_string(),
            repetition: self.repetition,
            series: series.to_string(),
            seed: self.seed,
            support_len,
            train_size: self.train_size,
            rmse: None,
            eigenvalue_error: None,
            config_hash: self.hash.to_string(),
            error: None,
        }
    }

    /// Evaluates every test series at each support length.
    fn evaluate(
        &self,
        prepared: &Prepared,
        predictors: &[(Method, Result<Predictor>)],
        support_lens: &[usize],
    ) -> Result<Vec<MetricsRecord>> {
        let tq = self.cfg.query_len();
        let test_raw = prepared.raw.view(SplitRole::Test)?;
        let test_model = prepared.model_ds.view(SplitRole::Test)?;
        let mut out = Vec::new();
        for (method, predictor) in predictors {
            for &t in support_lens {
                for (index, (raw, model)) in test_raw.iter().zip(&test_model).enumerate() {
                    let mut rec = self.record(*method, &raw.id, t);
                    let outcome = predictor.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                        let p = match p {
                            Predictor::Finetune { base, steps, lr, seed } => Predictor::Finetune {
                                base: base.clone(),
                                steps: *steps,
                                lr: *lr,
                                seed: seed.wrapping_add(index as u64),
                            },
                            other => other.clone(),
                        };
                        evaluate_series(&p, raw, model, &prepared.norm, t, tq).map_err(|e| e.to_string())
                    });
                    match outcome {
                        Ok((r, e)) => {
                            rec.rmse = Some(r);
                            rec.eigenvalue_error = e;
                        }
                        Err(msg) => rec.error = Some(msg),
                    }
                    out.push(rec);
                }
            }
        }
        Ok(out)
    }
}

/// RMSE in original units and, when ground truth exists, the eigenvalue
/// error of the estimated Koopman matrix.
fn evaluate_series(
    predictor: &Predictor,
    raw: &crate::data::TimeSeries,
    model: &crate::data::TimeSeries,
    norm: &Normalization,
    support_len: usize,
    query_len: usize,
) -> Result<(f64, Option<f64>)> {
    let truth = raw.window(support_len, query_len);
    let forecast = if predictor.method() == Method::Dmd {
        predictor.forecast(&raw.window(0, support_len), query_len)?
    } else {
        let mut f = predictor.forecast(&model.window(0, support_len), query_len)?;
        f.prediction = norm.invert(&f.prediction)?;
        f
    };
    let err = rmse(&forecast.prediction, &truth)?;
    if !err.is_finite() {
        return Err(Error::NonFinite("prediction"));
    }
    let eig_err = match true_eigenvalues(raw) {
        Some(truth) => Some(eigenvalue_error(&eig::eigenvalues(&forecast.koopman)?, &truth)?),
        None => None,
    };
    Ok((err, eig_err))
}

fn train_cfg_for(cfg: &ExperimentConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        ..cfg.train.clone()
    }
}

/// Repeated resplit, train and evaluate for every configured method.
pub fn run_experiment(ds: &Dataset, cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    sweep(ds, cfg, SweepAxis::SupportLength, &[cfg.support_len()])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    SupportLength,
    TrainSize,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "support_length" | "support-length" => Ok(SweepAxis::SupportLength),
            "train_size" | "train-size" => Ok(SweepAxis::TrainSize),
            _ => Err(Error::Config(format!("unknown sweep axis {s:?}"))),
        }
    }
}

fn split_counts(n: usize, fractions: [f64; 3]) -> usize {
    let n_train = ((n as f64 * fractions[0]).round() as usize).max(1);
    let n_valid = ((n as f64 * fractions[1]).round() as usize).max(1);
    if n_train + n_valid >= n {
        n - n_valid - 1
    } else {
        n_train
    }
}

/// Support-length sweeps train once per repetition and vary the evaluation
/// support; train-size sweeps retrain on nested prefixes of a shuffled
/// training split.
pub fn sweep(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[usize],
) -> Result<ExperimentResult> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let hash = cfg.hash();
    let mut records = Vec::new();
    let mut logs = BTreeMap::new();
    match axis {
        SweepAxis::SupportLength => {
            cfg.validate_for(ds, values)?;
            for rep in 0..cfg.repetitions {
                let seed = cfg.repetition_seed(rep);
                let prepared = prepare(ds, cfg, seed)?;
                let train_size = prepared.raw.split().map_or(0, |s| s.train.len());
                let mut rep_logs = BTreeMap::new();
                let predictors =
                    build_predictors(&cfg.methods, &prepared, &train_cfg_for(cfg, seed), &mut rep_logs);
                let ctx = EvalContext {
                    cfg,
                    dataset: &ds.meta.name,
                    hash: &hash,
                    repetition: rep,
                    seed,
                    train_size,
                };
                records.extend(ctx.evaluate(&prepared, &predictors, values)?);
                logs.extend(rep_logs.into_iter().map(|(m, l)| ((rep, train_size, m), l)));
            }
        }
        SweepAxis::TrainSize => {
            cfg.validate_for(ds, &[cfg.support_len()])?;
            let available = split_counts(ds.series.len(), cfg.fractions);
            if let Some(&bad) = values.iter().find(|&&v| v == 0 || v > available) {
                return Err(Error::Config(format!(
                    "train size {bad} outside 1..={available} training series"
                )));
            }
            let mut sizes = values.to_vec();
            sizes.sort_unstable();
            sizes.dedup();
            for rep in 0..cfg.repetitions {
                let seed = cfg.repetition_seed(rep);
                let (full, subsets) = nested_train_subsets(ds, cfg, rep, &sizes)?;
                let split = full.split().cloned().expect("just split");
                for (&size, train) in sizes.iter().zip(&subsets) {
                    let subset = nested_subset(&full, &split, train)?;
                    let prepared = restrict(subset, cfg)?;
                    let mut rep_logs = BTreeMap::new();
                    let predictors =
                        build_predictors(&cfg.methods, &prepared, &train_cfg_for(cfg, seed), &mut rep_logs);
                    let ctx = EvalContext {
                        cfg,
                        dataset: &ds.meta.name,
                        hash: &hash,
                        repetition: rep,
                        seed,
                        train_size: size,
                    };
                    records.extend(ctx.evaluate(&prepared, &predictors, &[cfg.support_len()])?);
                    logs.extend(rep_logs.into_iter().map(|(m, l)| ((rep, size, m), l)));
                }
            }
        }
    }
    Ok(ExperimentResult::finish(records, logs))
}

/// The split of repetition `rep` and, for each size, the training ids used.
/// Every subset is a prefix of one shuffled training split, so smaller
/// subsets are contained in larger ones.
pub fn nested_train_subsets(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    rep: usize,
    sizes: &[usize],
) -> Result<(Dataset, Vec<Vec<String>>)> {
    let seed = cfg.repetition_seed(rep);
    let [a, b, c] = cfg.fractions;
    let full = split_dataset(ds, (a, b, c), seed)?;
    let mut order = full.split().expect("just split").train.clone();
    if let Some(&bad) = sizes.iter().find(|&&v| v == 0 || v > order.len()) {
        return Err(Error::Config(format!(
            "train size {bad} outside 1..={} training series",
            order.len()
        )));
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00));
    let subsets = sizes.iter().map(|&n| order[..n].to_vec()).collect();
    Ok((full, subsets))
}

/// Dataset holding `train` plus the original validation and test series.
fn nested_subset(full: &Dataset, split: &Split, train: &[String]) -> Result<Dataset> {
    let ids: Vec<String> = train
        .iter()
        .chain(&split.valid)
        .chain(&split.test)
        .cloned()
        .collect();
    let mut out = full.subset(&ids)?;
    out.meta.split = Some(Split {
        train: train.to_vec(),
        valid: split.valid.clone(),
        test: split.test.clone(),
    });
    Ok(out)
}
