use serde::{Deserialize, Serialize};

use super::PerturbConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::roi::{CenterWeighting, DEFAULT_AREA_MIN_FRAC, DEFAULT_SEGMENT_THRESHOLD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// EMA coefficient.
    pub alpha: f64,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one pass over the larger pool.
    pub steps_per_epoch: usize,
    pub lr0: f64,
    pub seed: u64,
    pub runs: usize,
    pub perturb: PerturbConfig,
    /// `reference`, `resnet34` or `plain:w1,w2,...`.
    pub architecture: String,
    pub roi_area_min_frac: f64,
    pub roi_threshold: f32,
    pub roi_weighting: CenterWeighting,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// Small CNN, batch 64 with 16 labeled.
    pub fn desk() -> Self {
        TrainConfig {
            alpha: 0.994,
            weights: LossWeights::default(),
            batch_size: 64,
            labeled_per_batch: 16,
            epochs: 60,
            steps_per_epoch: 0,
            lr0: 5e-3,
            seed: 0,
            runs: 5,
            perturb: PerturbConfig::default(),
            architecture: "reference".into(),
            roi_area_min_frac: DEFAULT_AREA_MIN_FRAC,
            roi_threshold: DEFAULT_SEGMENT_THRESHOLD,
            roi_weighting: CenterWeighting::Normalized,
        }
    }

    /// ResNet-34 topology, batch 384 with 96 labeled.
    pub fn paper() -> Self {
        TrainConfig {
            batch_size: 384,
            labeled_per_batch: 96,
            architecture: "resnet34".into(),
            ..Self::desk()
        }
    }

    /// Two short epochs with a narrow network, for smoke runs.
    pub fn tiny() -> Self {
        TrainConfig {
            batch_size: 16,
            labeled_per_batch: 4,
            epochs: 2,
            steps_per_epoch: 4,
            runs: 1,
            architecture: "plain:4,8".into(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk, paper or tiny)"
            ))),
        }
    }

    /// Same settings with the unsupervised terms switched off.
    pub fn supervised(&self) -> Self {
        TrainConfig {
            weights: LossWeights {
                lambda: 0.0,
                beta: 0.0,
                gamma: 0.0,
                ..self.weights
            },
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return Err(Error::Config(format!(
                "labeled_per_batch must be in 1..={} (got {})",
                self.batch_size, self.labeled_per_batch
            )));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be > 0 (got {})", self.lr0)));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.roi_area_min_frac) {
            return Err(Error::Config("roi_area_min_frac outside [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.roi_threshold) {
            return Err(Error::Config("roi_threshold outside [0, 1]".into()));
        }
        self.weights.validate()?;
        self.perturb.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in ["desk", "paper", "tiny"] {
            TrainConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(TrainConfig::preset("huge").is_err());
        let p = TrainConfig::paper();
        assert_eq!((p.batch_size, p.labeled_per_batch), (384, 96));
    }

    #[test]
    fn invariants_enforced() {
        let base = TrainConfig::desk();
        let bad = [
            TrainConfig { alpha: 1.5, ..base.clone() },
            TrainConfig { labeled_per_batch: 0, ..base.clone() },
            TrainConfig { labeled_per_batch: 65, ..base.clone() },
            TrainConfig { lr0: 0.0, ..base.clone() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
    }

    #[test]
    fn supervised_zeroes_weights() {
        let s = TrainConfig::desk().supervised();
        assert!(s.weights.is_supervised());
        assert_eq!(s.weights.ramp_horizon, 5);
    }
}
