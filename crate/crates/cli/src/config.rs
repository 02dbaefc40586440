//! Run configuration: built-in defaults, overlaid by an optional JSON file,
//! overlaid by explicit command-line flags.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use shapeseg::losses::LossWeights;
use shapeseg::metrics::DEFAULT_TOLERANCE;
use shapeseg::model::{NetConfig, TrainConfig};
use shapeseg::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub net: NetConfig,
    pub train: TrainConfig,
    /// Surface dice tolerance in millimeters.
    pub tolerance: f64,
    /// Iso level for reconstruction; `None` picks 0.5 for masks and 0 for SDFs.
    pub iso: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            train: TrainConfig::default(),
            tolerance: DEFAULT_TOLERANCE,
            iso: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.train.validate()?;
        if self.tolerance.is_nan() || self.tolerance < 0.0 {
            return Err(Error::Config(format!("tolerance must be >= 0, got {}", self.tolerance)));
        }
        if self.iso.is_some_and(|v| !v.is_finite()) {
            return Err(Error::Config("iso level must be finite".into()));
        }
        Ok(())
    }
}

/// Loss-weight presets of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablation {
    /// Segmentation losses only.
    A,
    /// Segmentation plus L1 on the distance head.
    C,
    /// Segmentation, L1 and Laplacian.
    D,
}

impl Ablation {
    pub fn weights(self) -> LossWeights {
        match self {
            Ablation::A => LossWeights::new(1.0, 1.0, 0.0, 0.0),
            Ablation::C => LossWeights::new(1.0, 1.0, 1.0, 0.0),
            Ablation::D => LossWeights::new(1.0, 1.0, 1.0, 1.0),
        }
    }
}
