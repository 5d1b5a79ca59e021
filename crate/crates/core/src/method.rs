use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Every forecasting method the toolkit can train and evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Representation-conditioned model trained episodically.
    Ours,
    /// Same model trained on support self-prediction.
    OursT,
    /// No representation, trained episodically.
    OursN,
    Dmd,
    Ndmd,
    /// NDMD adapted to each target's support before predicting.
    Finetune,
}

/// What the trainer minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Query prediction error given the support.
    Episodic,
    /// Error of reconstructing the support from its own Koopman fit.
    SelfPrediction,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Ours,
        Method::OursT,
        Method::OursN,
        Method::Dmd,
        Method::Ndmd,
        Method::Finetune,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::OursT => "ours-t",
            Method::OursN => "ours-n",
            Method::Dmd => "dmd",
            Method::Ndmd => "ndmd",
            Method::Finetune => "finetune",
        }
    }

    pub fn uses_representation(self) -> bool {
        matches!(self, Method::Ours | Method::OursT)
    }

    /// `None` for DMD, which has nothing to train.
    pub fn objective(self) -> Option<Objective> {
        match self {
            Method::Ours | Method::OursN => Some(Objective::Episodic),
            Method::OursT | Method::Ndmd | Method::Finetune => Some(Objective::SelfPrediction),
            Method::Dmd => None,
        }
    }

    /// The method whose trained network this one starts from.
    pub fn trained_as(self) -> Method {
        match self {
            Method::Finetune => Method::Ndmd,
            m => m,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.as_str()));
        }
        assert!("maml".parse::<Method>().is_err());
    }
}
