//! Run configuration: one TOML document with a section per component.
//!
//! ```toml
//! seed = 7
//!
//! [network]
//! hidden = 128
//! transform = "tps"
//! [network.conv]
//! input_size = 64
//!
//! [trainer]
//! lr_head = 3e-4
//! clip_norm = 300.0
//! [trainer.augment]
//! flip_probability = 0.5
//!
//! [tps]
//! grid_size = 10
//! gamma = 1.0
//! varphi = 0.4
//! psi = 0.4
//!
//! [dataset]
//! train_count = 800
//!
//! [eval]
//! alphas = [0.05, 0.1]
//! ```
//!
//! Every key is optional and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::SyntheticSpec;
use crate::error::{DdnError, Result};
use crate::network::NetworkConfig;
use crate::shape::DEFAULT_ENERGY_FRACTION;
use crate::tps::{ControlGrid, TpsLossWeights, DEFAULT_GAMMA, DEFAULT_GRID_SIZE, DEFAULT_PSI, DEFAULT_VARPHI};
use crate::trainer::TrainerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TpsConfig {
    /// Control points per side of the square grid.
    pub grid_size: usize,
    pub gamma: f64,
    pub varphi: f64,
    pub psi: f64,
}

impl Default for TpsConfig {
    fn default() -> Self {
        TpsConfig {
            grid_size: DEFAULT_GRID_SIZE,
            gamma: DEFAULT_GAMMA,
            varphi: DEFAULT_VARPHI,
            psi: DEFAULT_PSI,
        }
    }
}

impl TpsConfig {
    pub fn weights(&self) -> TpsLossWeights {
        TpsLossWeights {
            gamma: self.gamma,
            varphi: self.varphi,
            psi: self.psi,
        }
    }

    /// Control grid covering a square frame of `size` pixels.
    pub fn grid(&self, size: usize) -> Result<ControlGrid> {
        ControlGrid::covering_frame(self.grid_size, self.grid_size, size as f64, size as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeConfig {
    pub energy_fraction: f64,
}

impl Default for ShapeConfig {
    fn default() -> Self {
        ShapeConfig {
            energy_fraction: DEFAULT_ENERGY_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub alphas: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { alphas: vec![0.05, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of initialization and training; the dataset has its own.
    pub seed: u64,
    pub network: NetworkConfig,
    pub trainer: TrainerConfig,
    pub tps: TpsConfig,
    pub shape: ShapeConfig,
    pub dataset: SyntheticSpec,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            network: NetworkConfig::default(),
            trainer: TrainerConfig::default(),
            tps: TpsConfig::default(),
            shape: ShapeConfig::default(),
            dataset: SyntheticSpec::default(),
            eval: EvalConfig::default(),
        }
        .resolved()
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg = toml::from_str::<RunConfig>(text).map_err(|e| DdnError::Config(e.to_string()))?.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills settings that default to another section's value.
    fn resolved(mut self) -> Self {
        if self.trainer.augment.mirror.is_empty() {
            self.trainer.augment.mirror = self.dataset.mirror.clone();
        }
        self
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DdnError::io(path, e))?;
        Self::from_toml(&text)
    }

    /// The fully resolved document, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the resolved document, hex encoded.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.conv.shapes()?;
        if self.network.hidden == 0 {
            return Err(DdnError::Config("network.hidden must be positive".into()));
        }
        if self.network.conv.input_size != self.dataset.image_size {
            return Err(DdnError::Config(format!(
                "network input size {} differs from dataset image size {}",
                self.network.conv.input_size, self.dataset.image_size
            )));
        }
        self.trainer.validate()?;
        self.trainer.augment.validate(self.dataset.landmark_count())?;
        self.tps.weights().validate()?;
        if self.tps.grid_size < 2 {
            return Err(DdnError::Config("tps.grid_size must be at least 2".into()));
        }
        if !(self.shape.energy_fraction > 0.0 && self.shape.energy_fraction <= 1.0) {
            return Err(DdnError::Config("shape.energy_fraction must lie in (0, 1]".into()));
        }
        if self.eval.alphas.is_empty() || self.eval.alphas.iter().any(|a| !(*a >= 0.0 && a.is_finite())) {
            return Err(DdnError::Config("eval.alphas must be non-empty, finite and non-negative".into()));
        }
        self.dataset.validate()
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.tps.grid_size, 10);
        assert_eq!((cfg.tps.gamma, cfg.tps.varphi, cfg.tps.psi), (1.0, 0.4, 0.4));
        assert_eq!((cfg.trainer.momentum, cfg.trainer.weight_decay), (0.9, 0.004));
        assert_eq!(cfg.trainer.lambda, 0.1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3"), Err(DdnError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[tps]\nbeta = 1.0"), Err(DdnError::Config(_))));
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(matches!(RunConfig::from_toml("[dataset]\ntrain_count = 0"), Err(DdnError::Config(_))));
    }

    #[test]
    fn resolved_document_round_trips() {
        let cfg = RunConfig::from_toml("seed = 3\n[trainer]\nbatch_size = 4\n").unwrap();
        let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }
}
