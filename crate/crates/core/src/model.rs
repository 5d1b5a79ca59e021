//! Koopman forecasting network: a bidirectional LSTM summarizes the support
//! series, conditioned feed-forward networks map between measurement and
//! Koopman space, and a closed-form Koopman matrix advances the embedding.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::ParamStore;
use crate::data::Normalization;
use crate::eig::{self, ComplexScalar};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::linalg::DEFAULT_RCOND;
use crate::method::Method;
use crate::tensor::Tensor;

/// Below this smallest-to-largest retained singular value ratio the Koopman
/// estimate switches to the ridge-regularized normal equations.
pub const RIDGE_THRESHOLD: f64 = 1e-8;
pub const RIDGE_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub measurement_dim: usize,
    pub lstm_hidden: usize,
    pub koopman_dim: usize,
    pub mlp_hidden: usize,
    /// Linear layers per feed-forward network; all but the last use ReLU.
    pub mlp_layers: usize,
    pub dropout: f64,
    pub use_representation: bool,
}

impl Hyper {
    pub fn new(measurement_dim: usize) -> Self {
        Hyper {
            measurement_dim,
            lstm_hidden: 32,
            koopman_dim: 2,
            mlp_hidden: 128,
            mlp_layers: 4,
            dropout: 0.1,
            use_representation: true,
        }
    }

    /// Width of the series representation, `2K`, or zero without one.
    pub fn repr_dim(&self) -> usize {
        if self.use_representation {
            2 * self.lstm_hidden
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.measurement_dim == 0 || self.koopman_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.mlp_layers == 0 {
            return Err(Error::Config("mlp_layers must be at least 1".into()));
        }
        if self.use_representation && self.lstm_hidden == 0 {
            return Err(Error::Config("lstm_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn mlp_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.mlp_hidden, self.mlp_layers - 1));
        dims.push(output);
        dims
    }

    /// Name and shape of every parameter tensor.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let mut shapes = BTreeMap::new();
        if self.use_representation {
            let (m, k) = (self.measurement_dim, self.lstm_hidden);
            for dir in ["lstm_fwd", "lstm_bwd"] {
                shapes.insert(format!("{dir}.w_ih"), vec![m, 4 * k]);
                shapes.insert(format!("{dir}.w_hh"), vec![k, 4 * k]);
                shapes.insert(format!("{dir}.b"), vec![1, 4 * k]);
            }
        }
        let r = self.repr_dim();
        let nets = [
            ("phi", self.mlp_dims(self.measurement_dim + r, self.koopman_dim)),
            ("psi", self.mlp_dims(self.koopman_dim + r, self.measurement_dim)),
        ];
        for (net, dims) in nets {
            for (i, w) in dims.windows(2).enumerate() {
                shapes.insert(format!("{net}.{i}.w"), vec![w[0], w[1]]);
                shapes.insert(format!("{net}.{i}.b"), vec![1, w[1]]);
            }
        }
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.param_shapes()
            .values()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }
}

/// Whether dropout is active, with the generator that draws its masks.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

/// Nodes produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub representation: Option<NodeId>,
    /// `T × D` support embeddings.
    pub embeddings: NodeId,
    pub koopman: NodeId,
    /// `H × M` predictions.
    pub prediction: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub hyper: Hyper,
    pub store: ParamStore,
}

impl ModelParams {
    /// Random initialization: weights uniform in `±1/√fan_in`, LSTM forget
    /// gate bias 1.
    pub fn init(hyper: Hyper, seed: u64) -> Result<Self> {
        hyper.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = hyper.lstm_hidden;
        for (name, shape) in hyper.param_shapes() {
            let fan_in = if name.starts_with("lstm") {
                if name.ends_with("w_ih") {
                    shape[0]
                } else {
                    k
                }
            } else if name.ends_with(".b") {
                hyper.param_shapes()[&name.replace(".b", ".w")][0]
            } else {
                shape[0]
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let mut data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
            if name.starts_with("lstm") && name.ends_with(".b") {
                data[k..2 * k].fill(1.0);
            }
            store.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams { hyper, store })
    }

    fn param(&self, g: &mut Graph, name: &str) -> Result<NodeId> {
        g.param(&self.store, name)
    }

    /// Mean hidden state of one LSTM direction over the series.
    fn lstm(&self, g: &mut Graph, x: NodeId, dir: &str, reverse: bool) -> Result<NodeId> {
        let k = self.hyper.lstm_hidden;
        let t_len = g.shape(x)[0];
        let w_ih = self.param(g, &format!("{dir}.w_ih"))?;
        let w_hh = self.param(g, &format!("{dir}.w_hh"))?;
        let b = self.param(g, &format!("{dir}.b"))?;
        let proj = g.matmul(x, w_ih)?;
        let proj = g.add_row(proj, b)?;

        let mut state: Option<(NodeId, NodeId)> = None;
        let mut hidden = Vec::with_capacity(t_len);
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let mut z = g.slice(proj, 0, t, 1)?;
            if let Some((h, _)) = state {
                let rec = g.matmul(h, w_hh)?;
                z = g.add(z, rec)?;
            }
            // Gate layout: input, forget, output (sigmoid), then candidate (tanh).
            let sig = g.slice(z, 1, 0, 3 * k)?;
            let sig = g.sigmoid(sig)?;
            let cand = g.slice(z, 1, 3 * k, k)?;
            let cand = g.tanh(cand)?;
            let i = g.slice(sig, 1, 0, k)?;
            let o = g.slice(sig, 1, 2 * k, k)?;
            let mut c = g.mul(i, cand)?;
            if let Some((_, c_prev)) = state {
                let f = g.slice(sig, 1, k, k)?;
                let kept = g.mul(f, c_prev)?;
                c = g.add(c, kept)?;
            }
            let tc = g.tanh(c)?;
            let h = g.mul(o, tc)?;
            hidden.push(h);
            state = Some((h, c));
        }
        let all = g.concat(&hidden, 0)?;
        g.mean(all, 0)
    }

    /// `1 × 2K` representation: time-averaged forward and backward hidden states.
    pub fn encode_series(&self, g: &mut Graph, support: NodeId) -> Result<NodeId> {
        if !self.hyper.use_representation {
            return Err(Error::invalid("encode_series", "model has no representation"));
        }
        self.check_input("encode_series", g, support, self.hyper.measurement_dim)?;
        let fwd = self.lstm(g, support, "lstm_fwd", false)?;
        let bwd = self.lstm(g, support, "lstm_bwd", true)?;
        g.concat(&[fwd, bwd], 1)
    }

    fn check_input(&self, op: &'static str, g: &Graph, x: NodeId, cols: usize) -> Result<()> {
        let shape = g.shape(x);
        if shape.len() != 2 || shape[1] != cols || shape[0] == 0 {
            return Err(Error::shape(op, &[shape.first().copied().unwrap_or(0), cols], shape));
        }
        Ok(())
    }

    fn mlp(&self, g: &mut Graph, net: &str, mut x: NodeId, mode: &mut Mode<'_>) -> Result<NodeId> {
        let layers = self.hyper.mlp_layers;
        for i in 0..layers {
            let w = self.param(g, &format!("{net}.{i}.w"))?;
            let b = self.param(g, &format!("{net}.{i}.b"))?;
            x = g.matmul(x, w)?;
            x = g.add_row(x, b)?;
            if i + 1 < layers {
                x = g.relu(x)?;
                if let Mode::Train(rng) = mode {
                    if self.hyper.dropout > 0.0 {
                        x = g.dropout(x, self.hyper.dropout, &mut **rng)?;
                    }
                }
            }
        }
        Ok(x)
    }

    /// Appends the representation to every row of `x`.
    fn condition(&self, g: &mut Graph, x: NodeId, r: Option<NodeId>) -> Result<NodeId> {
        match (self.hyper.use_representation, r) {
            (true, Some(r)) => {
                let rows = g.shape(x)[0];
                let ones = g.constant(Tensor::full(&[rows, 1], 1.0))?;
                let tiled = g.matmul(ones, r)?;
                g.concat(&[x, tiled], 1)
            }
            (false, None) => Ok(x),
            (true, None) => Err(Error::invalid("model", "representation required")),
            (false, Some(_)) => Err(Error::invalid("model", "model takes no representation")),
        }
    }

    /// Row-wise `g_t = φ([y_t, r])`: `T × M → T × D`.
    pub fn embed(
        &self,
        g: &mut Graph,
        y: NodeId,
        r: Option<NodeId>,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        self.check_input("embed", g, y, self.hyper.measurement_dim)?;
        let input = self.condition(g, y, r)?;
        self.mlp(g, "phi", input, mode)
    }

    /// Row-wise `ŷ = ψ([ĝ, r])`: `H × D → H × M`.
    pub fn decode(
        &self,
        g: &mut Graph,
        g_hat: NodeId,
        r: Option<NodeId>,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        self.check_input("decode", g, g_hat, self.hyper.koopman_dim)?;
        let input = self.condition(g, g_hat, r)?;
        self.mlp(g, "psi", input, mode)
    }

    /// Encodes, embeds and fits the Koopman matrix of a support series.
    fn fit(&self, g: &mut Graph, support: &Tensor, mode: &mut Mode<'_>) -> Result<(Option<NodeId>, NodeId, NodeId)> {
        if support.rows() < 2 {
            return Err(Error::invalid("model", "support needs at least two steps"));
        }
        let y = g.constant(support.clone())?;
        let r = if self.hyper.use_representation {
            Some(self.encode_series(g, y)?)
        } else {
            None
        };
        let emb = self.embed(g, y, r, mode)?;
        let k = estimate_koopman(g, emb)?;
        Ok((r, emb, k))
    }

    /// Predicts the `horizon` steps following the support.
    pub fn forward(
        &self,
        g: &mut Graph,
        support: &Tensor,
        horizon: usize,
        mode: &mut Mode<'_>,
    ) -> Result<Forward> {
        let (r, emb, k) = self.fit(g, support, mode)?;
        let last = g.slice(emb, 0, support.rows() - 1, 1)?;
        let g_hat = rollout(g, k, last, horizon)?;
        let prediction = self.decode(g, g_hat, r, mode)?;
        Ok(Forward {
            representation: r,
            embeddings: emb,
            koopman: k,
            prediction,
        })
    }

    /// Reconstructs the support from its own fit: `ŷ_τ = ψ(K^{τ−1} g_1)`.
    pub fn forward_self(&self, g: &mut Graph, support: &Tensor, mode: &mut Mode<'_>) -> Result<Forward> {
        let (r, emb, k) = self.fit(g, support, mode)?;
        let first = g.slice(emb, 0, 0, 1)?;
        let later = rollout(g, k, first, support.rows() - 1)?;
        let g_hat = g.concat(&[first, later], 0)?;
        let prediction = self.decode(g, g_hat, r, mode)?;
        Ok(Forward {
            representation: r,
            embeddings: emb,
            koopman: k,
            prediction,
        })
    }

    /// Mean squared query error `(1/T_Q) Σ ‖ŷ − y‖²` as a scalar node.
    pub fn episode_loss(
        &self,
        g: &mut Graph,
        support: &Tensor,
        query: &Tensor,
        mode: &mut Mode<'_>,
    ) -> Result<NodeId> {
        let fwd = self.forward(g, support, query.rows(), mode)?;
        let target = g.constant(query.clone())?;
        let se = g.squared_error(fwd.prediction, target)?;
        g.scale(se, 1.0 / query.rows() as f64)
    }

    /// Mean squared self-prediction error over the support.
    pub fn self_loss(&self, g: &mut Graph, support: &Tensor, mode: &mut Mode<'_>) -> Result<NodeId> {
        let fwd = self.forward_self(g, support, mode)?;
        let target = g.constant(support.clone())?;
        let se = g.squared_error(fwd.prediction, target)?;
        g.scale(se, 1.0 / support.rows() as f64)
    }

    pub fn predict(&self, support: &Tensor, horizon: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, support, horizon, &mut Mode::Eval)?;
        Ok(g.value(fwd.prediction).clone())
    }

    pub fn koopman_matrix(&self, support: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (_, _, k) = self.fit(&mut g, support, &mut Mode::Eval)?;
        Ok(g.value(k).clone())
    }

    pub fn spectrum(&self, support: &Tensor, dt: f64) -> Result<SpectralResult> {
        SpectralResult::from_matrix(&self.koopman_matrix(support)?, dt)
    }

    pub fn to_checkpoint(&self, kind: Method, normalization: Option<Normalization>) -> Checkpoint {
        Checkpoint {
            kind,
            hyper: self.hyper.clone(),
            tensors: self.store.tensors().clone(),
            normalization,
        }
    }
}

/// `K = G₂ G₁†` from `T × D` embeddings, where `G₁` holds steps `1..T−1`
/// and `G₂` steps `2..T` as columns.
pub fn estimate_koopman(g: &mut Graph, embeddings: NodeId) -> Result<NodeId> {
    let (t, d) = (g.shape(embeddings)[0], g.shape(embeddings)[1]);
    if t < 2 {
        return Err(Error::invalid("estimate_koopman", "need at least two embeddings"));
    }
    let first = g.slice(embeddings, 0, 0, t - 1)?;
    let g1 = g.transpose(first)?;
    let second = g.slice(embeddings, 0, 1, t - 1)?;
    let g2 = g.transpose(second)?;
    let (p, info) = g.pinv_with(g1, DEFAULT_RCOND)?;
    if info.retained_ratio() >= RIDGE_THRESHOLD {
        return g.matmul(g2, p);
    }
    log::debug!("ill-conditioned embeddings, using ridge Koopman estimate");
    let g1t = g.transpose(g1)?;
    let gram = g.matmul(g1, g1t)?;
    let ridge = g.constant(Tensor::eye(d).scale(RIDGE_EPS))?;
    let gram = g.add(gram, ridge)?;
    let inv = g.pinv(gram)?;
    let cross = g.matmul(g2, g1t)?;
    g.matmul(cross, inv)
}

/// Rows `j = 1..=horizon` hold `K^j g`, with `g` given as a `1 × D` row.
pub fn rollout(g: &mut Graph, k: NodeId, start: NodeId, horizon: usize) -> Result<NodeId> {
    if horizon == 0 {
        return Err(Error::invalid("rollout", "horizon must be at least 1"));
    }
    let kt = g.transpose(k)?;
    let mut cur = start;
    let mut rows = Vec::with_capacity(horizon);
    for _ in 0..horizon {
        cur = g.matmul(cur, kt)?;
        rows.push(cur);
    }
    g.concat(&rows, 0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralResult {
    pub eigenvalues: Vec<ComplexScalar>,
    /// Unit-norm eigenvectors of the Koopman matrix.
    pub modes: Vec<Vec<ComplexScalar>>,
    /// `arg(λ) / dt`.
    pub frequency: Vec<f64>,
    /// `ln|λ| / dt`.
    pub growth_rate: Vec<f64>,
}

impl SpectralResult {
    pub fn from_matrix(k: &Tensor, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid("spectrum", format!("dt {dt}")));
        }
        let e = eig::eig_dense(k)?;
        Ok(SpectralResult {
            frequency: e.values.iter().map(|l| l.arg() / dt).collect(),
            growth_rate: e.values.iter().map(|l| l.norm().ln() / dt).collect(),
            eigenvalues: e.values,
            modes: e.vectors,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub kind: Method,
    pub hyper: Hyper,
    pub tensors: BTreeMap<String, Tensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Rebuilds the parameters, checking every tensor against the hyper.
    pub fn params(&self) -> Result<ModelParams> {
        if self.kind == Method::Dmd {
            return Err(Error::Checkpoint("dmd has no trained parameters".into()));
        }
        self.hyper
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let shapes = self.hyper.param_shapes();
        if shapes.len() != self.tensors.len() || shapes.keys().ne(self.tensors.keys()) {
            return Err(Error::Checkpoint("tensor names do not match hyper".into()));
        }
        for (name, shape) in &shapes {
            if self.tensors[name].shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    self.tensors[name].shape()
                )));
            }
        }
        Ok(ModelParams {
            hyper: self.hyper.clone(),
            store: ParamStore::from_tensors(self.tensors.clone()),
        })
    }

    /// Like [`Checkpoint::params`] but also requires a specific hyper.
    pub fn params_for(&self, expected: &Hyper) -> Result<ModelParams> {
        if &self.hyper != expected {
            return Err(Error::Checkpoint(format!(
                "hyper mismatch: file has {:?}, model expects {expected:?}",
                self.hyper
            )));
        }
        self.params()
    }
}
