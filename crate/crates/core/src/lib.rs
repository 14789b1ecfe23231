//! Robust supervised learning as a single staged objective.
//!
//! A mini-batch passes through reference enrichment ([`enrich`]), input
//! perturbation ([`perturb_x`]), credal label losses ([`perturb_y`]) and
//! sample-level aggregation ([`aggregate`]). Each stage has a pessimistic,
//! neutral or optimistic stance, so the classic robustness recipes (VRM,
//! Mixup, label smoothing, label relaxation, Wasserstein and KL DRO and their
//! favorable counterparts) are settings of one [`RobustSpec`].
//!
//! [`closedform`] holds exact linear-model identities used as test oracles,
//! [`hpo`] searches the joint space and [`shapley`] attributes gains to
//! individual components.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub mod aggregate;
pub mod closedform;
pub mod data;
pub mod enrich;
pub mod error;
pub mod hpo;
pub mod metrics;
pub mod numgrad;
pub mod perturb_x;
pub mod perturb_y;
pub mod pipeline;
pub mod rng;
pub mod shapley;
pub mod verify;

pub use aggregate::{agg, AggSpec};
pub use data::{Dataset, Labels, Split};
pub use enrich::{EnrichMode, EnrichSpec};
pub use error::{Error, Result};
pub use hpo::{Preset, SearchSpace, TrialRecord};
pub use metrics::{EvalReport, Metric};
pub use numgrad::{Batch, Head, LossSpec, Model, OptState, Targets};
pub use perturb_x::{InputPerturbSpec, Norm};
pub use perturb_y::CredalTarget;
pub use pipeline::{LabelSpec, RobustSpec, Selection, StageFlags, TrainSettings};
pub use shapley::{CoalitionGame, Player};

/// How a stage resolves its ambiguity set: worst case, plain expectation or
/// best case.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stance {
    Pessimistic,
    #[default]
    Neutral,
    Optimistic,
}

impl Stance {
    pub const ALL: [Stance; 3] = [Stance::Pessimistic, Stance::Neutral, Stance::Optimistic];

    pub fn as_str(&self) -> &'static str {
        match self {
            Stance::Pessimistic => "pessimistic",
            Stance::Neutral => "neutral",
            Stance::Optimistic => "optimistic",
        }
    }
}

impl fmt::Display for Stance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pessimistic" | "pess" => Ok(Stance::Pessimistic),
            "neutral" => Ok(Stance::Neutral),
            "optimistic" | "opt" => Ok(Stance::Optimistic),
            _ => Err(Error::InvalidArgument(format!("unknown stance '{s}'"))),
        }
    }
}
