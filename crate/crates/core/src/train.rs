//! Episodic training: sample support/query windows from the training split,
//! minimize the prediction loss with Adam, and keep the parameters with the
//! best validation loss.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, Grads};
use crate::data::{Dataset, SplitRole, TimeSeries};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::method::{Method, Objective};
use crate::model::{Hyper, Mode, ModelParams};
use crate::tensor::Tensor;

fn default_schema_version() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    /// Support length `T`.
    pub support_len: usize,
    /// Query length `T_Q`.
    pub query_len: usize,
    pub max_epochs: usize,
    /// Episodes averaged into each optimizer step.
    pub episodes_per_epoch: usize,
    pub lr: f64,
    pub dropout: f64,
    /// Validation runs every this many epochs.
    pub valid_every: usize,
    /// Validation checks without improvement before stopping.
    pub patience: usize,
    pub valid_episodes: usize,
    pub seed: u64,
    pub koopman_dim: usize,
    pub lstm_hidden: usize,
    pub mlp_hidden: usize,
    pub mlp_layers: usize,
    /// Rescales the averaged gradient to at most this global norm.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    pub finetune_steps: usize,
    pub finetune_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: 1,
            support_len: 20,
            query_len: 20,
            max_epochs: 10_000,
            episodes_per_epoch: 8,
            lr: 1e-3,
            dropout: 0.1,
            valid_every: 50,
            patience: 20,
            valid_episodes: 64,
            seed: 0,
            koopman_dim: 2,
            lstm_hidden: 32,
            mlp_hidden: 128,
            mlp_layers: 4,
            grad_clip: None,
            finetune_steps: 1000,
            finetune_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn hyper(&self, measurement_dim: usize, method: Method) -> Hyper {
        Hyper {
            measurement_dim,
            lstm_hidden: self.lstm_hidden,
            koopman_dim: self.koopman_dim,
            mlp_hidden: self.mlp_hidden,
            mlp_layers: self.mlp_layers,
            dropout: self.dropout,
            use_representation: method.uses_representation(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.support_len < 2 {
            return Err(Error::Config("support_len must be at least 2".into()));
        }
        if self.query_len < 1 {
            return Err(Error::Config("query_len must be at least 1".into()));
        }
        if self.episodes_per_epoch == 0 || self.valid_every == 0 || self.valid_episodes == 0 {
            return Err(Error::Config(
                "episodes_per_epoch, valid_every and valid_episodes must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0) || !(self.finetune_lr >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }

    /// Checks the config alone and against every train/valid series length.
    pub fn validate_for(&self, ds: &Dataset) -> Result<()> {
        self.validate()?;
        let need = self.support_len + self.query_len;
        for role in [SplitRole::Train, SplitRole::Valid] {
            for s in ds.view(role)? {
                if s.len() < need {
                    return Err(Error::Config(format!(
                        "series {} has {} steps, fewer than support_len + query_len = {need}",
                        s.id,
                        s.len()
                    )));
                }
            }
        }
        if ds.view(SplitRole::Train)?.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        Ok(())
    }
}

/// A support window and the query window that immediately follows it.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Tensor,
    pub query: Tensor,
    pub series: String,
    /// Zero-based index of the first support step.
    pub start: usize,
}

impl Episode {
    pub fn at(series: &TimeSeries, start: usize, support_len: usize, query_len: usize) -> Result<Self> {
        if start + support_len + query_len > series.len() {
            return Err(Error::invalid(
                "episode",
                format!("window at {start} exceeds series {} of length {}", series.id, series.len()),
            ));
        }
        Ok(Episode {
            support: series.window(start, support_len),
            query: series.window(start + support_len, query_len),
            series: series.id.clone(),
            start,
        })
    }
}

/// Uniform series, then uniform start among all windows that fit.
pub fn sample_episode<R: Rng + ?Sized>(
    series: &[&TimeSeries],
    support_len: usize,
    query_len: usize,
    rng: &mut R,
) -> Result<Episode> {
    if series.is_empty() {
        return Err(Error::invalid("sample_episode", "no series to sample from"));
    }
    let s = series[rng.random_range(0..series.len())];
    let need = support_len + query_len;
    if s.len() < need {
        return Err(Error::invalid(
            "sample_episode",
            format!("series {} is shorter than {need}", s.id),
        ));
    }
    let start = rng.random_range(0..=s.len() - need);
    Episode::at(s, start, support_len, query_len)
}

/// Builds the loss of `objective` for one episode on `g`.
pub fn objective_loss(
    params: &ModelParams,
    g: &mut Graph,
    ep: &Episode,
    objective: Objective,
    mode: &mut Mode<'_>,
) -> Result<crate::graph::NodeId> {
    match objective {
        Objective::Episodic => params.episode_loss(g, &ep.support, &ep.query, mode),
        Objective::SelfPrediction => params.self_loss(g, &ep.support, mode),
    }
}

/// Value of the episodic query loss with dropout off.
pub fn episode_loss_value(params: &ModelParams, ep: &Episode) -> Result<f64> {
    let mut g = Graph::new();
    let loss = params.episode_loss(&mut g, &ep.support, &ep.query, &mut Mode::Eval)?;
    Ok(g.value(loss).data()[0])
}

/// Mean dropout-off query loss over a fixed episode list.
pub fn validate(params: &ModelParams, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::invalid("validate", "no validation episodes"));
    }
    let mut total = 0.0;
    for ep in episodes {
        total += episode_loss_value(params, ep)?;
    }
    Ok(total / episodes.len() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss of each epoch, starting at epoch 1.
    pub train_loss: Vec<f64>,
    /// `(epoch, loss)`; epoch 0 is the initialization.
    pub valid_loss: Vec<(usize, f64)>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

impl TrainLog {
    /// `epoch,train_loss,valid_loss` with empty cells where nothing was
    /// recorded. Wall time is left out so reruns are byte-identical.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_loss", "valid_loss"])?;
        let last = self.train_loss.len();
        let mut valid = self.valid_loss.iter().peekable();
        for epoch in 0..=last {
            let train = if epoch == 0 {
                String::new()
            } else {
                self.train_loss[epoch - 1].to_string()
            };
            let v = match valid.peek() {
                Some(&&(e, v)) if e == epoch => {
                    valid.next();
                    v.to_string()
                }
                _ => String::new(),
            };
            if epoch == 0 && v.is_empty() {
                continue;
            }
            w.write_record([epoch.to_string(), train, v])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn grad_norm(grads: &Grads) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Splits the seed into independent streams for sampling, dropout and
/// validation episodes.
fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Trains `params` on the training split. Returns the parameters with the
/// lowest validation loss seen (possibly the initial ones).
pub fn train(
    params: ModelParams,
    ds: &Dataset,
    cfg: &TrainConfig,
    objective: Objective,
) -> Result<(ModelParams, TrainLog)> {
    cfg.validate_for(ds)?;
    let clock = Instant::now();
    let train_series = ds.view(SplitRole::Train)?;
    let mut valid_series = ds.view(SplitRole::Valid)?;
    if valid_series.is_empty() {
        log::warn!("validation split is empty; validating on training series");
        valid_series = train_series.clone();
    }
    let (t, tq) = (cfg.support_len, cfg.query_len);

    let mut valid_rng = stream(cfg.seed, 1);
    let valid_eps = (0..cfg.valid_episodes)
        .map(|_| sample_episode(&valid_series, t, tq, &mut valid_rng))
        .collect::<Result<Vec<_>>>()?;

    let mut sample_rng = stream(cfg.seed, 0);
    let mut dropout_rng = stream(cfg.seed, 2);
    let adam = AdamConfig::with_lr(cfg.lr);

    let mut params = params;
    params.store.reset_optimizer();
    let mut log = TrainLog::default();
    let initial = validate(&params, &valid_eps)?;
    log.valid_loss.push((0, initial));
    log.best_valid = initial;
    let mut best = params.clone();
    let mut bad_checks = 0;

    for epoch in 1..=cfg.max_epochs {
        let mut acc = params.store.zero_grads();
        let mut total = 0.0;
        for _ in 0..cfg.episodes_per_epoch {
            let ep = sample_episode(&train_series, t, tq, &mut sample_rng)?;
            let diverged = || Error::Diverged {
                epoch,
                series: ep.series.clone(),
                offset: ep.start,
            };
            let mut g = Graph::new();
            let loss = objective_loss(&params, &mut g, &ep, objective, &mut Mode::Train(&mut dropout_rng))
                .map_err(|e| match e {
                    Error::NonFinite(_) => diverged(),
                    e => e,
                })?;
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            let grads = g.param_grads(&grads);
            if !value.is_finite() || grads.values().any(|t| !t.is_finite()) {
                return Err(diverged());
            }
            total += value;
            for (name, grad) in &grads {
                acc.get_mut(name).expect("same keys").add_assign(grad);
            }
        }
        let n = cfg.episodes_per_epoch as f64;
        let mut scale = 1.0 / n;
        if let Some(clip) = cfg.grad_clip {
            let norm = grad_norm(&acc) / n;
            if norm > clip {
                scale *= clip / norm;
            }
        }
        for grad in acc.values_mut() {
            *grad = grad.scale(scale);
        }
        params.store.adam_step(&acc, &adam)?;
        log.train_loss.push(total / n);

        if epoch % cfg.valid_every == 0 || epoch == cfg.max_epochs {
            let v = validate(&params, &valid_eps)?;
            log.valid_loss.push((epoch, v));
            log::debug!("epoch {epoch}: train {:.6} valid {v:.6}", total / n);
            if v < log.best_valid {
                log.best_valid = v;
                log.best_epoch = epoch;
                best = params.clone();
                bad_checks = 0;
            } else {
                bad_checks += 1;
                if bad_checks >= cfg.patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    log.wall_time_secs = clock.elapsed().as_secs_f64();
    best.store.reset_optimizer();
    Ok((best, log))
}

/// Initializes and trains the network of `method`.
pub fn train_method(
    method: Method,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    let objective = method
        .objective()
        .ok_or_else(|| Error::Config(format!("{method} has no trainable network")))?;
    let hyper = cfg.hyper(ds.measurement_dim(), method.trained_as());
    let params = ModelParams::init(hyper, cfg.seed)?;
    train(params, ds, cfg, objective)
}
