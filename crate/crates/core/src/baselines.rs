//! Comparison methods: DMD on raw measurements, support-finetuned NDMD,
//! and a common forecasting interface over every method.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::linalg::{self, DEFAULT_RCOND};
use crate::method::Method;
use crate::model::{Mode, ModelParams, SpectralResult};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DmdResult {
    /// `M × M` transition matrix in measurement space.
    pub koopman: Tensor,
    /// `horizon × M`.
    pub predictions: Tensor,
    pub spectrum: SpectralResult,
}

/// `K = Y₂ Y₁†` on the measurements themselves, rolled out from `y_T`.
pub fn dmd_fit_predict(support: &Tensor, horizon: usize, dt: f64) -> Result<DmdResult> {
    let koopman = dmd_matrix(support)?;
    let predictions = linear_rollout(&koopman, support.row(support.rows() - 1), horizon)?;
    let spectrum = SpectralResult::from_matrix(&koopman, dt)?;
    Ok(DmdResult {
        koopman,
        predictions,
        spectrum,
    })
}

pub fn dmd_matrix(support: &Tensor) -> Result<Tensor> {
    let t = support.rows();
    if t < 2 {
        return Err(Error::invalid("dmd", "support needs at least two steps"));
    }
    let y1 = support.row_range(0, t - 1).transpose();
    let y2 = support.row_range(1, t - 1).transpose();
    y2.matmul(&linalg::pinv_detailed(&y1, DEFAULT_RCOND)?.pinv)
}

/// Rows `K^j y` for `j = 1..=horizon`.
pub fn linear_rollout(k: &Tensor, start: &[f64], horizon: usize) -> Result<Tensor> {
    if horizon == 0 {
        return Err(Error::invalid("rollout", "horizon must be at least 1"));
    }
    let kt = k.transpose();
    let mut cur = Tensor::row_vector(start.to_vec());
    let mut data = Vec::with_capacity(horizon * start.len());
    for _ in 0..horizon {
        cur = cur.matmul(&kt)?;
        data.extend_from_slice(cur.data());
    }
    Ok(Tensor::matrix(horizon, start.len(), data))
}

/// Support self-prediction loss with dropout off.
pub fn support_loss(params: &ModelParams, support: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let loss = params.self_loss(&mut g, support, &mut Mode::Eval)?;
    Ok(g.value(loss).data()[0])
}

#[derive(Clone, Debug)]
pub struct Finetuned {
    pub params: ModelParams,
    pub loss_before: f64,
    pub loss_after: f64,
    /// Set when a non-finite step stopped adaptation early.
    pub aborted_at: Option<usize>,
}

/// Adam on the self-prediction loss of one support series, starting from a
/// copy of `base`. A non-finite step stops early and keeps the last good
/// parameters.
pub fn finetune(
    base: &ModelParams,
    support: &Tensor,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Finetuned> {
    if steps == 0 {
        return Err(Error::Config("finetune steps must be at least 1".into()));
    }
    let mut params = base.clone();
    params.store.reset_optimizer();
    let loss_before = support_loss(&params, support)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = AdamConfig::with_lr(lr);
    let mut aborted_at = None;
    for step in 0..steps {
        let mut g = Graph::new();
        let attempt = params
            .self_loss(&mut g, support, &mut Mode::Train(&mut rng))
            .and_then(|loss| g.backward(loss));
        let grads = match attempt {
            Ok(grads) => g.param_grads(&grads),
            Err(Error::NonFinite(_)) => {
                aborted_at = Some(step);
                break;
            }
            Err(e) => return Err(e),
        };
        let last_good = params.store.clone();
        if params.store.adam_step(&grads, &cfg).is_err()
            || params.store.tensors().values().any(|t| !t.is_finite())
        {
            params.store = last_good;
            aborted_at = Some(step);
            break;
        }
    }
    if let Some(step) = aborted_at {
        log::warn!("finetuning stopped at step {step} on a non-finite value");
    }
    let loss_after = support_loss(&params, support)?;
    params.store.reset_optimizer();
    Ok(Finetuned {
        params,
        loss_before,
        loss_after,
        aborted_at,
    })
}

/// Prediction and estimated Koopman matrix for one support series.
#[derive(Clone, Debug)]
pub struct Forecast {
    pub prediction: Tensor,
    pub koopman: Tensor,
}

/// A ready-to-use forecaster for any [`Method`].
#[derive(Clone, Debug)]
pub enum Predictor {
    Dmd,
    Neural {
        method: Method,
        params: ModelParams,
    },
    Finetune {
        base: ModelParams,
        steps: usize,
        lr: f64,
        seed: u64,
    },
}

impl Predictor {
    pub fn method(&self) -> Method {
        match self {
            Predictor::Dmd => Method::Dmd,
            Predictor::Neural { method, .. } => *method,
            Predictor::Finetune { .. } => Method::Finetune,
        }
    }

    pub fn forecast(&self, support: &Tensor, horizon: usize) -> Result<Forecast> {
        match self {
            Predictor::Dmd => {
                let koopman = dmd_matrix(support)?;
                let prediction = linear_rollout(&koopman, support.row(support.rows() - 1), horizon)?;
                Ok(Forecast {
                    prediction,
                    koopman,
                })
            }
            Predictor::Neural { params, .. } => neural_forecast(params, support, horizon),
            Predictor::Finetune {
                base,
                steps,
                lr,
                seed,
            } => {
                let tuned = finetune(base, support, *steps, *lr, *seed)?;
                neural_forecast(&tuned.params, support, horizon)
            }
        }
    }
}

fn neural_forecast(params: &ModelParams, support: &Tensor, horizon: usize) -> Result<Forecast> {
    let mut g = Graph::new();
    let fwd = params.forward(&mut g, support, horizon, &mut Mode::Eval)?;
    Ok(Forecast {
        prediction: g.value(fwd.prediction).clone(),
        koopman: g.value(fwd.koopman).clone(),
    })
}
