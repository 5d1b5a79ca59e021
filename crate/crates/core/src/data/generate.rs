//! Dataset generators: Synthetic Koopman, linear toy systems, Van der Pol
//! and Lorenz.
//!
//! Every series draws from its own ChaCha stream derived from the dataset
//! seed and the series index, so generation order never changes the data.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::ode::{integrate_rk4, lorenz, van_der_pol};
use super::{Dataset, DatasetMeta, TimeSeries};
use crate::eig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn default_schema_version() -> u32 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Observed time steps per series.
    #[serde(default = "GeneratorSpec::default_length")]
    pub series_length: usize,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive Gaussian observation noise.
    #[serde(default)]
    pub noise_std: f64,
    pub family: Family,
}

impl GeneratorSpec {
    fn default_length() -> usize {
        200
    }

    pub fn new(family: Family) -> Self {
        GeneratorSpec {
            schema_version: 1,
            name: None,
            series_length: Self::default_length(),
            seed: 0,
            noise_std: 0.0,
            family,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_length(mut self, len: usize) -> Self {
        self.series_length = len;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.series_length < 1 {
            return Err(Error::Config("series_length must be positive".into()));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        match &self.family {
            Family::VanDerPol(s) => {
                check_grid("a", s.a_min, s.a_max, s.a_count)?;
                check_grid("b", s.b_min, s.b_max, s.b_count)?;
                check_step(s.dt, s.subsample)
            }
            Family::Lorenz(s) => {
                check_grid("rho", s.rho_min, s.rho_max, s.rho_count)?;
                check_grid("beta", s.beta_min, s.beta_max, s.beta_count)?;
                check_step(s.dt, s.subsample)
            }
            Family::SyntheticKoopman(s) => {
                if s.count == 0 || s.koopman_dim == 0 || s.measurement_dim == 0 || s.hidden == 0 {
                    return Err(Error::Config("synthetic sizes must be positive".into()));
                }
                if !(s.max_spectral_radius > 0.0) || !(s.entry_std > 0.0) || !(s.weight_std > 0.0) {
                    return Err(Error::Config("synthetic scales must be positive".into()));
                }
                if s.regimes == Some(0) {
                    return Err(Error::Config("regimes must be positive".into()));
                }
                Ok(())
            }
            Family::Linear(s) => {
                if s.count == 0 || s.dim == 0 {
                    return Err(Error::Config("linear sizes must be positive".into()));
                }
                if !(s.min_spectral_radius > 0.0 && s.min_spectral_radius <= s.max_spectral_radius) {
                    return Err(Error::Config("linear spectral radii need 0 < min <= max".into()));
                }
                Ok(())
            }
            Family::Import { .. } => Ok(()),
        }
    }
}

fn check_grid(name: &str, lo: f64, hi: f64, count: usize) -> Result<()> {
    if count == 0 || !(lo <= hi) || !(lo > 0.0) {
        return Err(Error::Config(format!(
            "{name} grid needs 0 < min <= max and count >= 1"
        )));
    }
    Ok(())
}

fn check_step(dt: f64, subsample: usize) -> Result<()> {
    if !(dt > 0.0) || subsample == 0 {
        return Err(Error::Config("dt must be positive and subsample >= 1".into()));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Family {
    SyntheticKoopman(SyntheticSpec),
    /// `y_{t+1} = A y_t` measured directly.
    Linear(LinearSpec),
    VanDerPol(VanDerPolSpec),
    Lorenz(LorenzSpec),
    /// Reads an existing dataset file, e.g. externally simulated
    /// cylinder-wake measurements.
    Import { path: String },
}

impl Family {
    fn default_name(&self) -> &'static str {
        match self {
            Family::SyntheticKoopman(_) => "synthetic",
            Family::Linear(_) => "linear",
            Family::VanDerPol(_) => "van-der-pol",
            Family::Lorenz(_) => "lorenz",
            Family::Import { .. } => "import",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VanDerPolSpec {
    pub a_min: f64,
    pub a_max: f64,
    pub a_count: usize,
    pub b_min: f64,
    pub b_max: f64,
    pub b_count: usize,
    pub dt: f64,
    pub subsample: usize,
    /// Initial states are uniform in `[init_low, init_high]²`.
    pub init_low: f64,
    pub init_high: f64,
}

impl Default for VanDerPolSpec {
    fn default() -> Self {
        VanDerPolSpec {
            a_min: 0.1,
            a_max: 2.0,
            a_count: 10,
            b_min: 0.1,
            b_max: 2.0,
            b_count: 10,
            dt: 0.05,
            subsample: 1,
            init_low: -2.0,
            init_high: 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LorenzSpec {
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_count: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_count: usize,
    pub sigma: f64,
    pub dt: f64,
    pub subsample: usize,
    /// Integration steps discarded before the first observation.
    pub burn_in: usize,
}

impl Default for LorenzSpec {
    fn default() -> Self {
        LorenzSpec {
            rho_min: 20.0,
            rho_max: 80.0,
            rho_count: 30,
            beta_min: 2.0,
            beta_max: 5.0,
            beta_count: 30,
            sigma: 10.0,
            dt: 0.01,
            subsample: 2,
            burn_in: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub count: usize,
    pub koopman_dim: usize,
    pub measurement_dim: usize,
    pub representation_dim: usize,
    /// Width of the two tanh hidden layers of the measurement network.
    pub hidden: usize,
    /// Transition matrices are rescaled so their spectral radius is at most this.
    pub max_spectral_radius: f64,
    /// Standard deviation of the i.i.d. normal transition-matrix entries.
    pub entry_std: f64,
    /// Standard deviation of the i.i.d. normal measurement network weights.
    pub weight_std: f64,
    /// When set, representations are drawn from this many fixed, well
    /// separated vectors instead of independently per series.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub regimes: Option<usize>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            count: 81,
            koopman_dim: 2,
            measurement_dim: 10,
            representation_dim: 2,
            hidden: 32,
            max_spectral_radius: 1.05,
            entry_std: 1.0,
            weight_std: 1.0,
            regimes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearSpec {
    pub count: usize,
    pub dim: usize,
    /// Each transition matrix is rescaled to a spectral radius drawn
    /// uniformly from `[min_spectral_radius, max_spectral_radius]`.
    pub min_spectral_radius: f64,
    pub max_spectral_radius: f64,
}

impl Default for LinearSpec {
    fn default() -> Self {
        LinearSpec {
            count: 30,
            dim: 2,
            min_spectral_radius: 0.9,
            max_spectral_radius: 1.0,
        }
    }
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

fn series_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut series = match &spec.family {
        Family::VanDerPol(s) => gen_van_der_pol(spec, s)?,
        Family::Lorenz(s) => gen_lorenz(spec, s)?,
        Family::SyntheticKoopman(s) => gen_synthetic(spec, s)?,
        Family::Linear(s) => gen_linear(spec, s)?,
        Family::Import { path } => {
            let mut ds = Dataset::load(path)?;
            ds.meta.generator = Some(spec.clone());
            return Ok(ds);
        }
    };
    if spec.noise_std > 0.0 {
        let normal = Normal::new(0.0, spec.noise_std).expect("validated");
        for (i, s) in series.iter_mut().enumerate() {
            let mut rng = series_rng(spec.seed ^ 0x6e6f_6973_6500_0000, i as u64);
            for v in s.values.data_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    let name = spec
        .name
        .clone()
        .unwrap_or_else(|| spec.family.default_name().to_string());
    Ok(Dataset {
        meta: DatasetMeta {
            name,
            seed: Some(spec.seed),
            generator: Some(spec.clone()),
            ..Default::default()
        },
        series,
    })
}

/// Integrates and subsamples one trajectory; row 0 is `y0`.
fn observe<F>(field: F, y0: &[f64], dt: f64, subsample: usize, len: usize) -> Result<Tensor>
where
    F: Fn(&[f64], &mut [f64]),
{
    let dim = y0.len();
    let mut data = y0.to_vec();
    if len > 1 {
        let traj = integrate_rk4(field, y0, dt, (len - 1) * subsample)?;
        for k in 1..len {
            data.extend_from_slice(traj.row(k * subsample - 1));
        }
    }
    Ok(Tensor::matrix(len, dim, data))
}

fn gen_van_der_pol(spec: &GeneratorSpec, s: &VanDerPolSpec) -> Result<Vec<TimeSeries>> {
    let a_grid = linspace(s.a_min, s.a_max, s.a_count);
    let b_grid = linspace(s.b_min, s.b_max, s.b_count);
    let mut out = Vec::with_capacity(a_grid.len() * b_grid.len());
    for (i, &a) in a_grid.iter().enumerate() {
        for (j, &b) in b_grid.iter().enumerate() {
            let index = i * b_grid.len() + j;
            let mut rng = series_rng(spec.seed, index as u64);
            let y0 = [
                rng.random_range(s.init_low..=s.init_high),
                rng.random_range(s.init_low..=s.init_high),
            ];
            let values = observe(van_der_pol(a, b), &y0, s.dt, s.subsample, spec.series_length)?;
            let params = BTreeMap::from([
                ("a".to_string(), json!(a)),
                ("b".to_string(), json!(b)),
                ("y0".to_string(), json!(y0)),
            ]);
            out.push(TimeSeries {
                id: format!("vdp-{index:04}"),
                params,
                dt: s.dt * s.subsample as f64,
                values,
            });
        }
    }
    Ok(out)
}

fn gen_lorenz(spec: &GeneratorSpec, s: &LorenzSpec) -> Result<Vec<TimeSeries>> {
    let rho_grid = linspace(s.rho_min, s.rho_max, s.rho_count);
    let beta_grid = linspace(s.beta_min, s.beta_max, s.beta_count);
    let mut out = Vec::with_capacity(rho_grid.len() * beta_grid.len());
    for (i, &rho) in rho_grid.iter().enumerate() {
        for (j, &beta) in beta_grid.iter().enumerate() {
            let index = i * beta_grid.len() + j;
            let mut rng = series_rng(spec.seed, index as u64);
            let init = [
                rng.random_range(-15.0..=15.0),
                rng.random_range(-15.0..=15.0),
                rng.random_range(5.0..=45.0),
            ];
            let field = lorenz(s.sigma, rho, beta);
            let y0 = if s.burn_in > 0 {
                let burn = integrate_rk4(&field, &init, s.dt, s.burn_in)?;
                burn.row(s.burn_in - 1).to_vec()
            } else {
                init.to_vec()
            };
            let values = observe(&field, &y0, s.dt, s.subsample, spec.series_length)?;
            let params = BTreeMap::from([
                ("rho".to_string(), json!(rho)),
                ("beta".to_string(), json!(beta)),
                ("sigma".to_string(), json!(s.sigma)),
                ("initial_state".to_string(), json!(init)),
            ]);
            out.push(TimeSeries {
                id: format!("lorenz-{index:04}"),
                params,
                dt: s.dt * s.subsample as f64,
                values,
            });
        }
    }
    Ok(out)
}

/// Fixed random measurement network `y = W₃ tanh(W₂ tanh(W₁ [g, c] + b₁) + b₂) + b₃`
/// shared by every series of a Synthetic dataset.
struct MeasurementNet {
    layers: Vec<(Tensor, Tensor)>,
}

impl MeasurementNet {
    fn sample(s: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Self {
        let dims = [
            s.koopman_dim + s.representation_dim,
            s.hidden,
            s.hidden,
            s.measurement_dim,
        ];
        let layers = dims
            .windows(2)
            .map(|w| {
                let std = s.weight_std;
                let weight = Tensor::matrix(
                    w[0],
                    w[1],
                    (0..w[0] * w[1])
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                );
                let bias = Tensor::matrix(
                    1,
                    w[1],
                    (0..w[1]).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect(),
                );
                (weight, bias)
            })
            .collect();
        MeasurementNet { layers }
    }

    fn forward(&self, input: &[f64]) -> Vec<f64> {
        let mut x = Tensor::row_vector(input.to_vec());
        let last = self.layers.len() - 1;
        for (i, (w, b)) in self.layers.iter().enumerate() {
            x = x.matmul(w).and_then(|h| h.add(b)).expect("layer shapes");
            if i < last {
                x = x.map(f64::tanh);
            }
        }
        x.into_data()
    }
}

fn spectral_radius(a: &Tensor) -> Result<f64> {
    Ok(eig::eigenvalues(a)?
        .iter()
        .map(|l| l.norm())
        .fold(0.0, f64::max))
}

fn gen_synthetic(spec: &GeneratorSpec, s: &SyntheticSpec) -> Result<Vec<TimeSeries>> {
    let d = s.koopman_dim;
    let net = MeasurementNet::sample(s, &mut series_rng(spec.seed, u64::MAX));
    let regime_vectors: Option<Vec<Vec<f64>>> = s.regimes.map(|count| {
        let mut rng = series_rng(spec.seed, u64::MAX - 1);
        let offset = rng.random_range(0.0..2.0 * PI);
        (0..count)
            .map(|k| {
                let angle = offset + 2.0 * PI * k as f64 / count as f64;
                let mut v = vec![0.0; s.representation_dim];
                if let Some(x) = v.get_mut(0) {
                    *x = 2.0 * angle.cos();
                }
                if let Some(y) = v.get_mut(1) {
                    *y = 2.0 * angle.sin();
                }
                v
            })
            .collect()
    });

    let mut out = Vec::with_capacity(s.count);
    for index in 0..s.count {
        let mut rng = series_rng(spec.seed, index as u64);
        let mut a = Tensor::matrix(
            d,
            d,
            (0..d * d)
                .map(|_| s.entry_std * rng.sample::<f64, _>(StandardNormal))
                .collect(),
        );
        let rho = spectral_radius(&a)?;
        if rho > s.max_spectral_radius {
            a = a.scale(s.max_spectral_radius / rho);
        }
        let regime = regime_vectors.as_ref().map(|r| index % r.len());
        let c: Vec<f64> = match (&regime_vectors, regime) {
            (Some(vs), Some(k)) => vs[k].clone(),
            _ => (0..s.representation_dim)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let g0: Vec<f64> = {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm).collect()
        };

        let embeddings = roll_embeddings(&a, &g0, spec.series_length);
        let mut data = Vec::with_capacity(spec.series_length * s.measurement_dim);
        for t in 0..spec.series_length {
            let mut input = embeddings.row(t).to_vec();
            input.extend_from_slice(&c);
            data.extend(net.forward(&input));
        }
        let values = Tensor::matrix(spec.series_length, s.measurement_dim, data);
        if !values.is_finite() {
            return Err(Error::Dataset(format!("synthetic series {index} is not finite")));
        }

        let eigenvalues: Vec<[f64; 2]> = eig::eig_dense(&a)?
            .values
            .iter()
            .map(|l| [l.re, l.im])
            .collect();
        let mut params = BTreeMap::from([
            ("transition".to_string(), json!(a.to_rows())),
            ("representation".to_string(), json!(c)),
            ("initial_embedding".to_string(), json!(g0)),
            ("eigenvalues".to_string(), json!(eigenvalues)),
        ]);
        if let Some(k) = regime {
            params.insert("regime".to_string(), json!(k));
        }
        out.push(TimeSeries {
            id: format!("syn-{index:04}"),
            params,
            dt: 1.0,
            values,
        });
    }
    Ok(out)
}

fn gen_linear(spec: &GeneratorSpec, s: &LinearSpec) -> Result<Vec<TimeSeries>> {
    let d = s.dim;
    let mut out = Vec::with_capacity(s.count);
    for index in 0..s.count {
        let mut rng = series_rng(spec.seed, index as u64);
        let raw = Tensor::matrix(d, d, (0..d * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
        let target = rng.random_range(s.min_spectral_radius..=s.max_spectral_radius);
        let a = raw.scale(target / spectral_radius(&raw)?.max(1e-12));
        let y0: Vec<f64> = {
            let raw: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            raw.iter().map(|v| v / norm).collect()
        };
        let values = roll_embeddings(&a, &y0, spec.series_length);
        let eigenvalues: Vec<[f64; 2]> = eig::eig_dense(&a)?
            .values
            .iter()
            .map(|l| [l.re, l.im])
            .collect();
        let params = BTreeMap::from([
            ("transition".to_string(), json!(a.to_rows())),
            ("initial_embedding".to_string(), json!(y0)),
            ("eigenvalues".to_string(), json!(eigenvalues)),
        ]);
        out.push(TimeSeries {
            id: format!("lin-{index:04}"),
            params,
            dt: 1.0,
            values,
        });
    }
    Ok(out)
}

fn roll_embeddings(a: &Tensor, g0: &[f64], len: usize) -> Tensor {
    let d = g0.len();
    let mut data = Vec::with_capacity(len * d);
    let mut g = Tensor::col_vector(g0.to_vec());
    for _ in 0..len {
        data.extend_from_slice(g.data());
        g = a.matmul(&g).expect("square transition");
    }
    Tensor::matrix(len, d, data)
}

fn param_matrix(series: &TimeSeries, key: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = series
        .params
        .get(key)
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .ok_or_else(|| Error::Dataset(format!("series {} has no {key}", series.id)))?;
    Tensor::from_rows(&rows)
}

fn param_vec(series: &TimeSeries, key: &str) -> Result<Vec<f64>> {
    series
        .params
        .get(key)
        .cloned()
        .map(serde_json::from_value::<Vec<f64>>)
        .transpose()?
        .ok_or_else(|| Error::Dataset(format!("series {} has no {key}", series.id)))
}

/// Ground-truth Koopman embeddings (`T × D`) of a Synthetic series,
/// rebuilt from its stored transition matrix and initial embedding.
pub fn synthetic_embeddings(series: &TimeSeries) -> Result<Tensor> {
    let a = param_matrix(series, "transition")?;
    let g0 = param_vec(series, "initial_embedding")?;
    if a.rows() != g0.len() || a.cols() != g0.len() {
        return Err(Error::Dataset(format!("series {} has inconsistent params", series.id)));
    }
    Ok(roll_embeddings(&a, &g0, series.len()))
}

/// Ground-truth eigenvalues stored by the Synthetic generator, if present.
pub fn true_eigenvalues(series: &TimeSeries) -> Option<Vec<eig::ComplexScalar>> {
    let v: &Value = series.params.get("eigenvalues")?;
    let pairs: Vec<[f64; 2]> = serde_json::from_value(v.clone()).ok()?;
    Some(
        pairs
            .into_iter()
            .map(|[re, im]| eig::ComplexScalar::new(re, im))
            .collect(),
    )
}
