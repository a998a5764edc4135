//! Flat key-value run configuration (TOML syntax).
//!
//! Every key is optional; unset keys fall back to the selected preset
//! (`desk` unless `preset` is given). Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::SynthConfig;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::roi::CenterWeighting;
use crate::trainer::{PerturbConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub preset: Option<String>,

    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub ramp_horizon: Option<usize>,
    pub batch_size: Option<usize>,
    pub labeled_per_batch: Option<usize>,
    pub epochs: Option<usize>,
    pub steps_per_epoch: Option<usize>,
    pub lr0: Option<f64>,
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub flip_prob: Option<f64>,
    pub max_shift_frac: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub architecture: Option<String>,

    pub roi_area_min_frac: Option<f64>,
    pub roi_threshold: Option<f32>,
    pub roi_weighting: Option<CenterWeighting>,

    pub n_stacks: Option<usize>,
    pub slices_per_stack: Option<usize>,
    pub label_fractions: Option<[f64; 3]>,
    pub corruption_strength: Option<f64>,
    pub image_size: Option<usize>,
    /// Stacks held out for validation by `gen-data`.
    pub val_stacks: Option<usize>,
    /// Stacks held out for testing by `gen-data`.
    pub test_stacks: Option<usize>,
    /// Labeled training slices kept by `gen-data`; the rest are written
    /// as unlabeled.
    pub n_labeled: Option<usize>,

    /// Reacquisition proportions.
    pub q: Option<Vec<f64>>,
    /// Random-baseline draws per stack.
    pub trials: Option<usize>,
}

macro_rules! merge_fields {
    ($base:expr, $over:expr, $($f:ident),*) => {
        FileConfig { $($f: $over.$f.or($base.$f)),* }
    };
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Keys set in `over` win.
    pub fn merged(self, over: FileConfig) -> FileConfig {
        merge_fields!(
            self, over, preset, alpha, lambda, beta, gamma, ramp_horizon, batch_size,
            labeled_per_batch, epochs, steps_per_epoch, lr0, seed, runs, flip_prob,
            max_shift_frac, noise_sigma, architecture, roi_area_min_frac, roi_threshold,
            roi_weighting, n_stacks, slices_per_stack, label_fractions, corruption_strength,
            image_size, val_stacks, test_stacks, n_labeled, q, trials
        )
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let base = TrainConfig::preset(self.preset.as_deref().unwrap_or("desk"))?;
        let cfg = TrainConfig {
            alpha: self.alpha.unwrap_or(base.alpha),
            weights: LossWeights {
                lambda: self.lambda.unwrap_or(base.weights.lambda),
                beta: self.beta.unwrap_or(base.weights.beta),
                gamma: self.gamma.unwrap_or(base.weights.gamma),
                ramp_horizon: self.ramp_horizon.unwrap_or(base.weights.ramp_horizon),
            },
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            labeled_per_batch: self.labeled_per_batch.unwrap_or(base.labeled_per_batch),
            epochs: self.epochs.unwrap_or(base.epochs),
            steps_per_epoch: self.steps_per_epoch.unwrap_or(base.steps_per_epoch),
            lr0: self.lr0.unwrap_or(base.lr0),
            seed: self.seed.unwrap_or(base.seed),
            runs: self.runs.unwrap_or(base.runs),
            perturb: PerturbConfig {
                flip_prob: self.flip_prob.unwrap_or(base.perturb.flip_prob),
                max_shift_frac: self.max_shift_frac.unwrap_or(base.perturb.max_shift_frac),
                noise_sigma: self.noise_sigma.unwrap_or(base.perturb.noise_sigma),
            },
            architecture: self.architecture.clone().unwrap_or(base.architecture),
            roi_area_min_frac: self.roi_area_min_frac.unwrap_or(base.roi_area_min_frac),
            roi_threshold: self.roi_threshold.unwrap_or(base.roi_threshold),
            roi_weighting: self.roi_weighting.unwrap_or(base.roi_weighting),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let base = SynthConfig::default();
        let cfg = SynthConfig {
            n_stacks: self.n_stacks.unwrap_or(base.n_stacks),
            slices_per_stack: self.slices_per_stack.unwrap_or(base.slices_per_stack),
            label_fractions: self.label_fractions.unwrap_or(base.label_fractions),
            corruption_strength: self.corruption_strength.unwrap_or(base.corruption_strength),
            seed: self.seed.unwrap_or(base.seed),
            image_size: self.image_size.unwrap_or(base.image_size),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every training key filled in.
    pub fn resolved_train(cfg: &TrainConfig) -> FileConfig {
        FileConfig {
            alpha: Some(cfg.alpha),
            lambda: Some(cfg.weights.lambda),
            beta: Some(cfg.weights.beta),
            gamma: Some(cfg.weights.gamma),
            ramp_horizon: Some(cfg.weights.ramp_horizon),
            batch_size: Some(cfg.batch_size),
            labeled_per_batch: Some(cfg.labeled_per_batch),
            epochs: Some(cfg.epochs),
            steps_per_epoch: Some(cfg.steps_per_epoch),
            lr0: Some(cfg.lr0),
            seed: Some(cfg.seed),
            runs: Some(cfg.runs),
            flip_prob: Some(cfg.perturb.flip_prob),
            max_shift_frac: Some(cfg.perturb.max_shift_frac),
            noise_sigma: Some(cfg.perturb.noise_sigma),
            architecture: Some(cfg.architecture.clone()),
            roi_area_min_frac: Some(cfg.roi_area_min_frac),
            roi_threshold: Some(cfg.roi_threshold),
            roi_weighting: Some(cfg.roi_weighting),
            ..FileConfig::default()
        }
    }

    /// Every synthetic-data key filled in.
    pub fn resolved_synth(cfg: &SynthConfig) -> FileConfig {
        FileConfig {
            seed: Some(cfg.seed),
            n_stacks: Some(cfg.n_stacks),
            slices_per_stack: Some(cfg.slices_per_stack),
            label_fractions: Some(cfg.label_fractions),
            corruption_strength: Some(cfg.corruption_strength),
            image_size: Some(cfg.image_size),
            ..FileConfig::default()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
