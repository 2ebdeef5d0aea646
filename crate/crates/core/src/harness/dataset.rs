//! Closed-loop trajectory datasets.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::control::JacobianController;
use crate::dynamics::{step_plant, ActionVector, CartPoleParams, IntegratorConfig, NoiseSpec, StateVector};
use crate::error::{Error, Result};
use crate::neural::{matrix_from_rows, matrix_to_rows};

pub const DATASET_FORMAT: &str = "split-koopman/dataset";
pub const DATASET_VERSION: u32 = 1;

/// `states[:, m]` is `x_m`; `actions[:, m]` is the command applied at `x_m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub actions: DMatrix<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn state(&self, m: usize) -> DVector<f64> {
        self.states.column(m).clone_owned()
    }

    pub fn action(&self, m: usize) -> DVector<f64> {
        self.actions.column(m).clone_owned()
    }
}

/// Excitation used while recording.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataPolicy {
    /// Jacobian-baseline LQR plus exploration noise.
    #[default]
    JacobianLqr,
    /// Exploration noise only.
    OpenLoop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Control periods per trajectory.
    pub steps: usize,
    /// Initial conditions are uniform in `[-ic_range, ic_range]` per entry.
    pub ic_range: f64,
    pub policy: DataPolicy,
    /// Standard deviation of the additive exploration force, N.
    pub exploration_std: f64,
    /// A trajectory leaving this box is discarded and redrawn.
    pub divergence_bound: f64,
    pub max_retries: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DatasetConfig {
    /// 70 / 20 / 10 trajectories of 250 s.
    pub fn paper() -> Self {
        Self {
            train: 70,
            val: 20,
            test: 10,
            steps: 25_000,
            ic_range: 0.5,
            policy: DataPolicy::JacobianLqr,
            exploration_std: 0.1,
            divergence_bound: 1e3,
            max_retries: 20,
        }
    }

    /// 20 / 5 / 5 trajectories of 25 s.
    pub fn desk() -> Self {
        Self {
            train: 20,
            val: 5,
            test: 5,
            steps: 2_500,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.steps < 2 {
            return Err(Error::Config("dataset needs at least one training trajectory of >= 2 steps".into()));
        }
        if !(self.ic_range >= 0.0 && self.exploration_std >= 0.0 && self.divergence_bound > 0.0) {
            return Err(Error::Config("dataset ranges must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub train: Vec<Trajectory>,
    pub val: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub config: DatasetConfig,
    pub seed: u64,
}

/// Roll one trajectory from `x0`; `None` if it leaves the divergence box.
pub fn record_trajectory<R: Rng + ?Sized>(
    x0: &DVector<f64>,
    cfg: &DatasetConfig,
    controller: Option<&JacobianController>,
    plant: &CartPoleParams,
    integrator: &IntegratorConfig,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<Option<Trajectory>> {
    let explore = Normal::new(0.0, cfg.exploration_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut states = DMatrix::zeros(x0.len(), cfg.steps);
    let mut actions = DMatrix::zeros(1, cfg.steps);
    let mut x = StateVector(x0.clone());
    for m in 0..cfg.steps {
        let base = match controller {
            Some(c) => c.control(&x.0)?.0[0],
            None => 0.0,
        };
        let u = base + explore.sample(rng);
        states.set_column(m, &x.0);
        actions[(0, m)] = u;
        if m + 1 == cfg.steps {
            break;
        }
        x = match step_plant(&x, &ActionVector::scalar(u), plant, integrator, noise, rng) {
            Ok(next) => next,
            Err(Error::IntegrationDiverged { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        if x.0.amax() > cfg.divergence_bound {
            return Ok(None);
        }
    }
    Ok(Some(Trajectory { states, actions }))
}

pub fn generate_dataset(
    cfg: &DatasetConfig,
    plant: &CartPoleParams,
    integrator: &IntegratorConfig,
    noise: &NoiseSpec,
    q_x: &DMatrix<f64>,
    r: &DMatrix<f64>,
    seed: u64,
) -> Result<TrajectoryDataset> {
    cfg.validate()?;
    let controller = match cfg.policy {
        DataPolicy::JacobianLqr => Some(JacobianController::build(plant, integrator.tau_o, q_x, r)?),
        DataPolicy::OpenLoop => None,
    };
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |count: usize| -> Result<Vec<Trajectory>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let mut done = None;
            for _ in 0..=cfg.max_retries {
                let x0 = DVector::from_fn(4, |_, _| rng.random_range(-cfg.ic_range..=cfg.ic_range));
                if let Some(t) = record_trajectory(&x0, cfg, controller.as_ref(), plant, integrator, noise, &mut rng)? {
                    done = Some(t);
                    break;
                }
            }
            out.push(done.ok_or(Error::IntegrationDiverged { time: 0.0 })?);
        }
        Ok(out)
    };
    let train = draw(cfg.train)?;
    let val = draw(cfg.val)?;
    let test = draw(cfg.test)?;
    Ok(TrajectoryDataset {
        train,
        val,
        test,
        config: *cfg,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    steps: usize,
    states: Vec<f64>,
    actions: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    format: String,
    version: u32,
    seed: u64,
    config: DatasetConfig,
    p: usize,
    q: usize,
    train: Vec<TrajectoryRecord>,
    val: Vec<TrajectoryRecord>,
    test: Vec<TrajectoryRecord>,
}

impl TrajectoryDataset {
    pub fn to_json(&self) -> Result<String> {
        let enc = |ts: &[Trajectory]| {
            ts.iter()
                .map(|t| TrajectoryRecord {
                    steps: t.len(),
                    states: matrix_to_rows(&t.states),
                    actions: matrix_to_rows(&t.actions),
                })
                .collect()
        };
        let rec = DatasetRecord {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            seed: self.seed,
            config: self.config,
            p: self.train.first().map_or(4, |t| t.states.nrows()),
            q: self.train.first().map_or(1, |t| t.actions.nrows()),
            train: enc(&self.train),
            val: enc(&self.val),
            test: enc(&self.test),
        };
        Ok(serde_json::to_string(&rec)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: DatasetRecord = serde_json::from_str(text)?;
        if rec.format != DATASET_FORMAT || rec.version != DATASET_VERSION {
            return Err(Error::Serialization(format!("unsupported dataset {} v{}", rec.format, rec.version)));
        }
        let dec = |ts: &[TrajectoryRecord]| -> Result<Vec<Trajectory>> {
            ts.iter()
                .map(|t| {
                    Ok(Trajectory {
                        states: matrix_from_rows(rec.p, t.steps, &t.states)?,
                        actions: matrix_from_rows(rec.q, t.steps, &t.actions)?,
                    })
                })
                .collect()
        };
        Ok(Self {
            train: dec(&rec.train)?,
            val: dec(&rec.val)?,
            test: dec(&rec.test)?,
            config: rec.config,
            seed: rec.seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 3,
            val: 2,
            test: 1,
            steps: 50,
            ..DatasetConfig::desk()
        }
    }

    fn gen(cfg: &DatasetConfig, seed: u64) -> TrajectoryDataset {
        let eye = DMatrix::identity(4, 4);
        generate_dataset(cfg, &CartPoleParams::default(), &IntegratorConfig::default(), &NoiseSpec::default(), &eye, &DMatrix::identity(1, 1), seed).unwrap()
    }

    #[test]
    fn split_counts() {
        let ds = gen(&small(), 1);
        assert_eq!((ds.train.len(), ds.val.len(), ds.test.len()), (3, 2, 1));
        let paper = DatasetConfig::paper();
        assert_eq!((paper.train, paper.val, paper.test), (70, 20, 10));
    }

    #[test]
    fn initial_conditions_inside_box() {
        let cfg = small();
        let ds = gen(&cfg, 2);
        for t in ds.train.iter().chain(&ds.val).chain(&ds.test) {
            assert!(t.state(0).amax() <= cfg.ic_range);
            assert_eq!(t.len(), cfg.steps);
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(gen(&small(), 5).to_json().unwrap(), gen(&small(), 5).to_json().unwrap());
        assert_ne!(gen(&small(), 5).to_json().unwrap(), gen(&small(), 6).to_json().unwrap());
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let ds = gen(&small(), 3);
        assert_eq!(TrajectoryDataset::from_json(&ds.to_json().unwrap()).unwrap(), ds);
    }
}
