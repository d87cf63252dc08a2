use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::PlateauConfig;
use crate::arch::{Preset, DEFAULT_KEEP_PROB};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_THETA;

/// Loss the plateau scheduler watches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub task: Task,
    pub preset: Preset,
    /// First-stage width (f0 or g0); `None` keeps the preset default.
    pub width: Option<usize>,
    pub keep_prob: f64,
    /// Augmented images per training subject and epoch.
    pub tau: usize,
    /// Batch size.
    pub eta: usize,
    /// Reference learning rate, tuned for batch size `eta0`.
    pub lr0: f64,
    pub eta0: usize,
    pub max_epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub plateau_min_delta: f64,
    pub lr_min: f64,
    pub monitor: Monitor,
    pub rho: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub theta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            task: Task::AdNc,
            preset: Preset::Proposed4Roi,
            width: None,
            keep_prob: DEFAULT_KEEP_PROB,
            tau: 5,
            eta: 15,
            lr0: 1e-3,
            eta0: 15,
            max_epochs: 40,
            plateau_factor: 0.5,
            plateau_patience: 5,
            plateau_min_delta: 1e-4,
            lr_min: 1e-6,
            monitor: Monitor::Validation,
            rho: 0.9,
            epsilon: 1e-7,
            seed: 0,
            theta: DEFAULT_THETA,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.tau >= 1, "tau must be at least 1"),
            (self.eta >= 1, "eta must be at least 1"),
            (self.eta0 >= 1, "eta0 must be at least 1"),
            (self.lr0 >= 0.0 && self.lr0.is_finite(), "lr0 must be finite and non-negative"),
            (self.plateau_factor > 0.0 && self.plateau_factor < 1.0, "plateau_factor must lie in (0, 1)"),
            (self.plateau_min_delta >= 0.0, "plateau_min_delta must be non-negative"),
            (self.lr_min >= 0.0, "lr_min must be non-negative"),
            ((0.0..1.0).contains(&self.rho), "rho must lie in [0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.keep_prob > 0.0 && self.keep_prob <= 1.0, "keep_prob must lie in (0, 1]"),
            (self.theta > 0.0, "theta must be positive"),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(Error::config(*msg)),
            None => Ok(()),
        }
    }

    pub fn plateau(&self) -> PlateauConfig {
        PlateauConfig {
            factor: self.plateau_factor,
            patience: self.plateau_patience,
            min_delta: self.plateau_min_delta,
            lr_min: self.lr_min,
        }
    }

    /// SHA-256 of the canonical JSON encoding. Ignores `max_epochs`, so a
    /// finished run can be resumed with a larger budget.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(&TrainConfig { max_epochs: 0, ..self.clone() }).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults_and_unknown_keys_fail() {
        let c: TrainConfig = serde_json::from_str(r#"{"task":"AD_MCI","preset":"alexnet-4roi","seed":3}"#).unwrap();
        assert_eq!(c.task, Task::AdMci);
        assert_eq!(c.preset, Preset::Alexnet4Roi);
        assert_eq!(c.tau, 5);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"tua":5}"#).is_err());
    }

    #[test]
    fn invariants() {
        TrainConfig::default().validate().unwrap();
        for bad in [
            TrainConfig { tau: 0, ..Default::default() },
            TrainConfig { plateau_factor: 1.0, ..Default::default() },
            TrainConfig { eta: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 1, ..Default::default() };
        assert_eq!(a.digest(), TrainConfig::default().digest());
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let longer = TrainConfig { max_epochs: 80, ..Default::default() };
        assert_eq!(a.digest(), longer.digest());
    }
}
