//! Train/valid/test splitting and per-dimension standardization.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Split, SplitRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random permutation of the series, then `round(n·f)` series each for
/// train and valid (valid gets at least one) and the remainder for test.
pub fn split_dataset(ds: &Dataset, fractions: (f64, f64, f64), seed: u64) -> Result<Dataset> {
    let (ft, fv, fs) = fractions;
    if [ft, fv, fs].iter().any(|f| !(*f >= 0.0)) || ((ft + fv + fs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = ds.series.len();
    if n < 3 {
        return Err(Error::Dataset(format!("cannot split {n} series three ways")));
    }
    let mut n_train = ((n as f64 * ft).round() as usize).max(1);
    let n_valid = ((n as f64 * fv).round() as usize).max(1);
    if n_train + n_valid >= n {
        n_train = n - n_valid - 1;
    }

    let mut ids: Vec<String> = ds.series.iter().map(|s| s.id.clone()).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);

    let mut out = ds.clone();
    out.meta.split = Some(Split {
        train: ids,
        valid,
        test,
    });
    Ok(out)
}

/// Per-dimension affine map `z = (y − mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.cols() != self.dim() {
            return Err(Error::shape("normalization", &[t.rows(), self.dim()], t.shape()));
        }
        Ok(())
    }

    pub fn apply(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let m = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % m]) / self.scale[i % m];
        }
        Ok(out)
    }

    pub fn invert(&self, t: &Tensor) -> Result<Tensor> {
        self.check(t)?;
        let mut out = t.clone();
        let m = self.dim();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.scale[i % m] + self.mean[i % m];
        }
        Ok(out)
    }
}

/// Standardizes every series with statistics of the training split only.
/// The transform is also stored in the returned dataset's meta.
pub fn normalize(ds: &Dataset) -> Result<(Dataset, Normalization)> {
    let train = ds.view(SplitRole::Train)?;
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let m = ds.measurement_dim();
    let mut mean = vec![0.0; m];
    let mut count = 0usize;
    for s in &train {
        for t in 0..s.len() {
            for (acc, v) in mean.iter_mut().zip(s.values.row(t)) {
                *acc += v;
            }
        }
        count += s.len();
    }
    mean.iter_mut().for_each(|v| *v /= count as f64);
    let mut var = vec![0.0; m];
    for s in &train {
        for t in 0..s.len() {
            for (j, v) in s.values.row(t).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
    }
    let scale = var
        .iter()
        .enumerate()
        .map(|(j, v)| {
            let std = (v / count as f64).sqrt();
            if std > 1e-12 * mean[j].abs().max(1.0) {
                std
            } else {
                log::warn!("measurement dimension {j} has zero variance; leaving it unscaled");
                1.0
            }
        })
        .collect();
    let norm = Normalization { mean, scale };

    let mut out = ds.clone();
    for s in &mut out.series {
        s.values = norm.apply(&s.values)?;
    }
    out.meta.normalization = Some(norm.clone());
    Ok((out, norm))
}
