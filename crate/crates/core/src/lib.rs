//! Meta-learned Koopman spectral analysis for short time-series.
#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod adam;
pub mod baselines;
pub mod data;
pub mod eig;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod linalg;
pub mod method;
pub mod model;
pub mod tensor;
pub mod train;

pub use adam::{AdamConfig, Grads, ParamStore};
pub use data::{Dataset, SplitRole, TimeSeries};
pub use eig::{eig_dense, ComplexScalar, Eigen};
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, NodeId};
pub use method::{Method, Objective};
pub use model::{Checkpoint, Hyper, ModelParams, SpectralResult};
pub use tensor::Tensor;
pub use train::{Episode, TrainConfig, TrainLog};
