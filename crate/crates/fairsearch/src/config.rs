//! Run configuration: the single source of truth for an experiment, with a
//! content hash embedded in every artifact the run writes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{AugmentConfig, ImbalanceProfile};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::optim::OptimConfig;
use crate::search_space::{DiscretizeRule, Gating};
use crate::supernet::SupernetConfig;

/// Search mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Softmax gating, supervised search loss.
    Darts,
    /// Sigmoid gating, supervised search loss plus the zero-one term.
    Fairdarts,
    /// Sigmoid gating, label-free redundancy-reduction search loss plus the
    /// zero-one term.
    Ssf,
}

impl Mode {
    pub fn gating(self) -> Gating {
        match self {
            Mode::Darts => Gating::Softmax,
            Mode::Fairdarts | Mode::Ssf => Gating::Sigmoid,
        }
    }

    pub fn default_discretize(self) -> DiscretizeRule {
        match self {
            Mode::Darts => DiscretizeRule::SoftmaxArgmax,
            Mode::Fairdarts | Mode::Ssf => DiscretizeRule::SigmoidThreshold(0.5),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Mode::Darts => "darts",
            Mode::Fairdarts => "fairdarts",
            Mode::Ssf => "ssf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "darts" => Ok(Mode::Darts),
            "fairdarts" => Ok(Mode::Fairdarts),
            "ssf" => Ok(Mode::Ssf),
            other => Err(Error::InvalidArg(format!(
                "unknown mode `{other}` (expected darts|fairdarts|ssf)"
            ))),
        }
    }
}

/// Storage precision for training runs. Correctness tests always use f64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

fn default_split_fraction() -> f64 {
    0.5
}

/// Everything a run needs. Serializes to/from JSON; CLI flags override file
/// values. The output directory is carried for convenience but excluded from
/// the config hash (artifacts relocate without changing identity).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub precision: Precision,
    pub seed: u64,
    /// Weight-stream share of the bilevel split.
    #[serde(default = "default_split_fraction")]
    pub split_fraction: f64,
    pub supernet: SupernetConfig,
    pub optim: OptimConfig,
    pub loss: LossConfig,
    pub profile: ImbalanceProfile,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Darts,
            precision: Precision::F64,
            seed: 0,
            split_fraction: 0.5,
            supernet: SupernetConfig::default(),
            optim: OptimConfig::default(),
            loss: LossConfig::default(),
            profile: ImbalanceProfile::balance(5000, 10),
            augment: AugmentConfig::default(),
            out: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.supernet.validate()?;
        self.optim.validate()?;
        self.loss.validate()?;
        self.profile.validate()?;
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidArg(format!(
                "split fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.profile.num_classes != self.supernet.num_classes {
            return Err(Error::ConfigMismatch(format!(
                "profile has {} classes but the network is configured for {}",
                self.profile.num_classes, self.supernet.num_classes
            )));
        }
        Ok(())
    }

    /// Content hash over everything except the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse(format!("config: {e}")))?;
        Ok(cfg)
    }
}
