//! Declarative experiment configuration (TOML) with desk and paper presets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel::ChannelConfig;
use crate::dynamics::{CartPoleParams, IntegratorConfig, NoiseSpec};
use crate::error::{Error, Result};
use crate::koopman::{ActuatorLatent, Architecture, ScheduleMode};
use crate::neural::AdamConfig;
use crate::protocol::TrainingConfig;

use super::dataset::{DataPolicy, DatasetConfig};

pub const CONFIG_FORMAT: &str = "split-koopman/experiment";
pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
}

/// Evaluation settings shared by the prediction and control experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Prediction horizon `M_p` for NRMSE.
    pub predict_horizon: usize,
    /// Samples observed before prediction starts (`M_s`).
    pub predict_start: usize,
    /// Closed-loop horizon in loops.
    pub control_horizon: usize,
    /// Initial state of the far-from-equilibrium stabilization run.
    pub far_x0: Vec<f64>,
    /// Initial state of the packet-loss runs.
    pub loss_x0: Vec<f64>,
    /// Loss-run lengths swept by the packet-loss experiment.
    pub loss_bursts: Vec<usize>,
    /// Mean SNR of the packet-loss experiment, dB.
    pub loss_snr_db: f64,
    /// Latent dimension of the stabilization and packet-loss models.
    pub control_latent_dim: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predict_horizon: 200,
            predict_start: 100,
            control_horizon: 1000,
            far_x0: vec![2.5; 4],
            loss_x0: vec![0.3; 4],
            loss_bursts: vec![1, 5, 10, 15, 20],
            loss_snr_db: 0.0,
            control_latent_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub format: String,
    pub version: u32,
    pub name: String,
    pub preset: Preset,
    pub seeds: Vec<u64>,
    pub plant: CartPoleParams,
    pub integrator: IntegratorConfig,
    pub process_noise: NoiseSpec,
    pub channel: ChannelConfig,
    /// Target mean SNRs, dB.
    pub snr_db: Vec<f64>,
    /// Latent dimensions `d`.
    pub latent_dims: Vec<usize>,
    /// Training-trajectory counts swept; empty uses the dataset value.
    pub trajectory_counts: Vec<usize>,
    pub architecture: Architecture,
    pub dataset: DatasetConfig,
    pub sensing: TrainingConfig,
    pub controlling: TrainingConfig,
    pub actuator_latent: ActuatorLatent,
    /// Closed-loop runs recorded for controlling-model training.
    pub controlling_runs: usize,
    pub controlling_steps: usize,
    /// `M_d` for both models in sweep cells; `None` keeps the training
    /// configs. The NRMSE tables are reported for one-step training.
    pub sweep_depth: Option<usize>,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let sensing = TrainingConfig {
            depth: 30,
            schedule: ScheduleMode::SpecialCase,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            batch_size: 64,
            max_epochs: 60,
            windows_per_epoch: Some(4096),
            val_windows: Some(2048),
            patience: 10,
            min_delta: 1e-4,
            ..TrainingConfig::default()
        };
        let controlling = TrainingConfig {
            max_epochs: 30,
            ..sensing.clone()
        };
        Self {
            format: CONFIG_FORMAT.into(),
            version: CONFIG_VERSION,
            name: "desk".into(),
            preset: Preset::Desk,
            seeds: vec![1, 2, 3],
            plant: CartPoleParams::default(),
            integrator: IntegratorConfig::default(),
            process_noise: NoiseSpec::default(),
            channel: ChannelConfig::default(),
            snr_db: vec![-10.0, 0.0, 10.0, 20.0],
            latent_dims: vec![4],
            trajectory_counts: Vec::new(),
            architecture: Architecture::default(),
            dataset: DatasetConfig {
                exploration_std: 3.0,
                ..DatasetConfig::desk()
            },
            sensing,
            controlling,
            actuator_latent: ActuatorLatent::Advance,
            controlling_runs: 10,
            controlling_steps: 1000,
            sweep_depth: Some(1),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper() -> Self {
        let desk = Self::desk();
        Self {
            name: "paper".into(),
            preset: Preset::Paper,
            seeds: vec![1, 2, 3],
            latent_dims: vec![2, 4, 8, 16],
            dataset: DatasetConfig::paper(),
            sensing: TrainingConfig {
                max_epochs: 500,
                windows_per_epoch: None,
                val_windows: None,
                adam: AdamConfig::default(),
                ..desk.sensing.clone()
            },
            controlling: TrainingConfig {
                max_epochs: 500,
                windows_per_epoch: None,
                val_windows: None,
                adam: AdamConfig::default(),
                ..desk.controlling.clone()
            },
            controlling_runs: 70,
            controlling_steps: 25_000,
            ..desk
        }
    }

    pub fn preset(preset: Preset) -> Self {
        match preset {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format != CONFIG_FORMAT || self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("unsupported config {} v{}", self.format, self.version)));
        }
        if self.seeds.is_empty() || self.snr_db.is_empty() || self.latent_dims.is_empty() {
            return Err(Error::Config("seeds, snr_db and latent_dims must be non-empty".into()));
        }
        if self.latent_dims.contains(&0) || self.eval.control_latent_dim == 0 {
            return Err(Error::Config("latent dimension d must be >= 1".into()));
        }
        if self.eval.far_x0.len() != 4 || self.eval.loss_x0.len() != 4 {
            return Err(Error::Config("initial states must have 4 entries".into()));
        }
        if self.sweep_depth == Some(0) {
            return Err(Error::Config("sweep_depth must be >= 1".into()));
        }
        if self.eval.predict_horizon == 0 || self.eval.control_horizon == 0 {
            return Err(Error::Config("evaluation horizons must be >= 1".into()));
        }
        if self.dataset.policy == DataPolicy::OpenLoop && self.dataset.exploration_std == 0.0 {
            return Err(Error::Config("open-loop data needs exploration noise".into()));
        }
        self.plant.validate()?;
        self.integrator.validate()?;
        self.process_noise.validate()?;
        self.channel.validate()?;
        self.dataset.validate()?;
        self.sensing.validate()?;
        self.controlling.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn q_x(&self) -> DMatrix<f64> {
        self.sensing.q_x_matrix()
    }

    pub fn r(&self) -> DMatrix<f64> {
        self.sensing.r_matrix()
    }

    pub fn far_x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.eval.far_x0)
    }

    pub fn loss_x0(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.eval.loss_x0)
    }
}
