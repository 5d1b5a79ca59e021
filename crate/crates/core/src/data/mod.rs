//! Time-series datasets: generation, splitting, normalization and the JSON
//! dataset file format.

mod generate;
mod ode;
mod prep;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use generate::{
    generate, synthetic_embeddings, true_eigenvalues, Family, GeneratorSpec, LinearSpec, LorenzSpec,
    SyntheticSpec, VanDerPolSpec,
};
pub use ode::{integrate_rk4, lorenz, van_der_pol};
pub use prep::{normalize, split_dataset, Normalization};

/// One measurement sequence. `values` is `T × M`, one row per time step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub id: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    pub dt: f64,
    #[serde(with = "rows")]
    pub values: Tensor,
}

impl TimeSeries {
    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.cols()
    }

    /// Rows `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Tensor {
        self.values.row_range(start, len)
    }
}

mod rows {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tensor::Tensor;

    pub fn serialize<S: Serializer>(t: &Tensor, s: S) -> Result<S::Ok, S::Error> {
        t.to_rows().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Tensor, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        if rows.is_empty() {
            return Err(serde::de::Error::custom("series has no rows"));
        }
        Tensor::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitRole {
    Train,
    Valid,
    Test,
}

/// Series ids assigned to each role.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl Split {
    pub fn ids(&self, role: SplitRole) -> &[String] {
        match role {
            SplitRole::Train => &self.train,
            SplitRole::Valid => &self.valid,
            SplitRole::Test => &self.test,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(default)]
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    /// Anything else an external producer put in `meta`; kept verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub series: Vec<TimeSeries>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, series: Vec<TimeSeries>) -> Result<Self> {
        let ds = Dataset {
            meta: DatasetMeta {
                name: name.into(),
                ..Default::default()
            },
            series,
        };
        ds.check_shapes()?;
        Ok(ds)
    }

    pub fn measurement_dim(&self) -> usize {
        self.series.first().map_or(0, TimeSeries::dim)
    }

    pub fn get(&self, id: &str) -> Option<&TimeSeries> {
        self.series.iter().find(|s| s.id == id)
    }

    pub fn split(&self) -> Option<&Split> {
        self.meta.split.as_ref()
    }

    /// Series in one split role, in the order listed by the split.
    ///
    /// This is the only accessor training code uses, so nothing outside the
    /// requested role can leak into it.
    pub fn view(&self, role: SplitRole) -> Result<Vec<&TimeSeries>> {
        let split = self
            .split()
            .ok_or_else(|| Error::Dataset("dataset has no train/valid/test split".into()))?;
        split
            .ids(role)
            .iter()
            .map(|id| {
                self.get(id)
                    .ok_or_else(|| Error::Dataset(format!("split references unknown series {id}")))
            })
            .collect()
    }

    /// Copy restricted to the listed ids (split metadata is dropped).
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let series = ids
            .iter()
            .map(|id| {
                self.get(id)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("unknown series {id}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            meta: DatasetMeta {
                split: None,
                ..self.meta.clone()
            },
            series,
        })
    }

    fn check_shapes(&self) -> Result<()> {
        let m = self.measurement_dim();
        let mut seen = BTreeSet::new();
        for s in &self.series {
            if s.is_empty() {
                return Err(Error::Dataset(format!("series {} is empty", s.id)));
            }
            if s.dim() != m {
                return Err(Error::Dataset(format!(
                    "series {} has dimension {}, expected {m}",
                    s.id,
                    s.dim()
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate series id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Full structural validation applied to files read from disk.
    pub fn validate(&self) -> Result<()> {
        if self.series.is_empty() {
            return Err(Error::Dataset("dataset has no series".into()));
        }
        self.check_shapes()?;
        for s in &self.series {
            if !s.values.is_finite() {
                return Err(Error::Dataset(format!("series {} has non-finite values", s.id)));
            }
            if !(s.dt > 0.0) {
                return Err(Error::Dataset(format!("series {} has non-positive dt", s.id)));
            }
        }
        if let Some(split) = self.split() {
            let mut all = BTreeSet::new();
            for id in split.train.iter().chain(&split.valid).chain(&split.test) {
                if self.get(id).is_none() {
                    return Err(Error::Dataset(format!("split references unknown series {id}")));
                }
                if !all.insert(id) {
                    return Err(Error::Dataset(format!("series {id} is in more than one split")));
                }
            }
            if all.len() != self.series.len() {
                return Err(Error::Dataset("split does not cover every series".into()));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Reads a dataset file. External data (for example cylinder-wake
    /// measurements) uses the same format.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
