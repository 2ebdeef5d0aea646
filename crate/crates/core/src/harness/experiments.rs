//! Training and evaluation runs behind the tables and figures.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Link, LinkStatus};
use crate::control::KoopmanController;
use crate::error::{Error, Result};
use crate::koopman::{ActuatorLatent, AugmentedLatent, ControllingModel, KoopmanDims, SensingModel};
use crate::protocol::{
    run_phase2_loop, ControlMode, ControllingTrainer, ForcedLosses, Phase2Config, Phase2Run, RemoteSystem, SensingTrainer,
    SplitLinks, TrainingReport,
};

use super::config::ExperimentConfig;
use super::dataset::{generate_dataset, DatasetConfig, Trajectory, TrajectoryDataset};
use super::metrics::{msce, nrmse};

/// Independent sub-seed for one role within a run.
pub fn sub_seed(seed: u64, role: u64) -> u64 {
    let mut z = seed ^ role.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const ROLE_DATA: u64 = 1;
const ROLE_SENSING_INIT: u64 = 2;
const ROLE_SENSING_SHUFFLE: u64 = 3;
const ROLE_UPLINK: u64 = 4;
const ROLE_DOWNLINK: u64 = 5;
const ROLE_CONTROLLING_DATA: u64 = 6;
const ROLE_CONTROLLING_INIT: u64 = 7;
const ROLE_CONTROLLING_SHUFFLE: u64 = 8;
const ROLE_EVAL: u64 = 9;

pub fn dataset_for(cfg: &ExperimentConfig, trajectories: Option<usize>, seed: u64) -> Result<TrajectoryDataset> {
    let ds = DatasetConfig {
        train: trajectories.unwrap_or(cfg.dataset.train),
        ..cfg.dataset
    };
    generate_dataset(
        &ds,
        &cfg.plant,
        &cfg.integrator,
        &cfg.process_noise,
        &cfg.q_x(),
        &cfg.r(),
        sub_seed(seed, ROLE_DATA),
    )
}

/// Uplink and downlink at a target mean SNR; `None` gives ideal links.
pub fn links_for(cfg: &ExperimentConfig, snr_db: Option<f64>, seed: u64) -> Result<SplitLinks> {
    Ok(match snr_db {
        Some(snr) => {
            let ch = cfg.channel.with_mean_snr_db(snr);
            SplitLinks {
                uplink: Link::new(ch, sub_seed(seed, ROLE_UPLINK))?,
                downlink: Link::new(ch, sub_seed(seed, ROLE_DOWNLINK))?,
            }
        }
        None => SplitLinks {
            uplink: Link::ideal(cfg.channel),
            downlink: Link::ideal(cfg.channel),
        },
    })
}

pub fn train_sensing(
    cfg: &ExperimentConfig,
    d: usize,
    snr_db: Option<f64>,
    data: &TrajectoryDataset,
    seed: u64,
) -> Result<(SensingModel, TrainingReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ROLE_SENSING_INIT));
    let model = SensingModel::new(KoopmanDims::cartpole(d), &cfg.architecture, &mut rng)?;
    let mut trainer = SensingTrainer::split(model, cfg.sensing.clone(), sub_seed(seed, ROLE_SENSING_SHUFFLE))?;
    let mut links = links_for(cfg, snr_db, seed)?;
    let report = trainer.train(&data.train, &data.val, Some(&mut links))?;
    Ok((trainer.model, report))
}

fn system(cfg: &ExperimentConfig, sensing: SensingModel, controlling: Option<ControllingModel>) -> Result<RemoteSystem> {
    RemoteSystem::new(
        cfg.plant,
        cfg.integrator,
        cfg.process_noise,
        sensing,
        controlling,
        &cfg.q_x(),
        &cfg.r(),
    )
}

/// Closed-loop Koopman-LQR runs over the link, cut into stretches of
/// delivered commands: the data the actuator can learn from.
pub fn collect_controlling_data(
    cfg: &ExperimentConfig,
    sensing: &SensingModel,
    snr_db: Option<f64>,
    runs: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    let sys = system(cfg, sensing.clone(), None)?;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ROLE_CONTROLLING_DATA));
    let p2 = Phase2Config {
        horizon: cfg.controlling_steps,
        mode: ControlMode::HoldLast,
        ..Phase2Config::default()
    };
    let mut out = Vec::new();
    for i in 0..runs {
        let x0 = DVector::from_fn(4, |_, _| rng.random_range(-cfg.dataset.ic_range..=cfg.dataset.ic_range));
        let mut links = links_for(cfg, snr_db, sub_seed(seed, 1000 + i as u64))?;
        let run = match run_phase2_loop(&sys, &x0, &p2, &mut links.uplink, &mut links.downlink, &mut rng) {
            Ok(r) => r,
            Err(Error::PlantDiverged { .. }) => continue,
            Err(e) => return Err(e),
        };
        let mut start = None;
        for m in 0..=run.records.len() {
            let delivered = m < run.records.len() && run.records[m].downlink.status == LinkStatus::Delivered;
            match (delivered, start) {
                (true, None) => start = Some(m),
                (false, Some(s)) => {
                    if m - s >= 2 {
                        out.push(Trajectory {
                            states: run.states.columns(s, m - s).into_owned(),
                            actions: run.applied.columns(s, m - s).into_owned(),
                        });
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    if out.is_empty() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            detail: "no usable closed-loop data for the controlling model".into(),
        });
    }
    Ok(out)
}

pub fn train_controlling(
    cfg: &ExperimentConfig,
    sensing: &SensingModel,
    train: &[Trajectory],
    val: &[Trajectory],
    seed: u64,
) -> Result<(ControllingModel, TrainingReport)> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ROLE_CONTROLLING_INIT));
    let mut model = ControllingModel::new(sensing.dims, &cfg.architecture, sensing.encoder.clone(), cfg.actuator_latent, &mut rng)?;
    if cfg.actuator_latent == ActuatorLatent::Advance {
        model.sensing_blocks = Some((sensing.k11.clone(), sensing.k12.clone()));
    }
    // At low SNR the actuator rarely sees depth + 1 deliveries in a row;
    // train on the longest runs it did see.
    let longest = |t: &[Trajectory]| t.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0);
    let mut tc = cfg.controlling.clone();
    tc.depth = tc.depth.min(longest(train)).min(longest(val)).max(1);
    let mut trainer = ControllingTrainer::new(model, tc, sub_seed(seed, ROLE_CONTROLLING_SHUFFLE))?;
    let report = trainer.train(train, val)?;
    Ok((trainer.model, report))
}

#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub sensing: SensingModel,
    pub controlling: ControllingModel,
    pub sensing_report: TrainingReport,
    pub controlling_report: TrainingReport,
    pub seconds: f64,
}

impl TrainedSystem {
    pub fn remote(&self, cfg: &ExperimentConfig) -> Result<RemoteSystem> {
        system(cfg, self.sensing.clone(), Some(self.controlling.clone()))
    }
}

/// Phase 1 end to end: split sensing training, then the controlling model
/// on closed-loop data gathered through the same link.
pub fn train_system(
    cfg: &ExperimentConfig,
    d: usize,
    snr_db: Option<f64>,
    data: &TrajectoryDataset,
    seed: u64,
) -> Result<TrainedSystem> {
    let t0 = Instant::now();
    let (sensing, sensing_report) = train_sensing(cfg, d, snr_db, data, seed)?;
    let runs = collect_controlling_data(cfg, &sensing, snr_db, cfg.controlling_runs, seed)?;
    let split = (runs.len() * 4 / 5).max(1).min(runs.len());
    let (train, val) = runs.split_at(split);
    let val = if val.is_empty() { train } else { val };
    let (controlling, controlling_report) = train_controlling(cfg, &sensing, train, val, seed)?;
    Ok(TrainedSystem {
        sensing,
        controlling,
        sensing_report,
        controlling_report,
        seconds: t0.elapsed().as_secs_f64(),
    })
}

/// Mean state NRMSE of open-loop predictions from `x_{start}` over
/// `horizon` steps, driven by the recorded commands.
pub fn state_nrmse(model: &SensingModel, test: &[Trajectory], start: usize, horizon: usize) -> Result<f64> {
    state_nrmse_over_link(model, test, start, horizon, None)
}

/// State NRMSE at the controller when the sensor keeps sending `g(x_m)`
/// over `uplink`: a delivered latent restarts the prediction, a lost one is
/// replaced by `K11 g + K12 u`. Without a link nothing after `x_{start}`
/// arrives and this is the open-loop prediction.
pub fn state_nrmse_over_link(
    model: &SensingModel,
    test: &[Trajectory],
    start: usize,
    horizon: usize,
    mut uplink: Option<&mut Link>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for traj in test {
        if traj.len() < start + horizon + 1 {
            continue;
        }
        let mut latent = model.encode(&traj.state(start))?;
        let mut pred = Vec::with_capacity(horizon);
        for m in start + 1..=start + horizon {
            let received = match uplink.as_deref_mut() {
                Some(link) => link.transmit(model.encode(&traj.state(m))?.as_slice())?.payload,
                None => None,
            };
            latent = match received {
                Some(rx) => DVector::from_vec(rx),
                None => model.latent_step(&latent, &traj.action(m - 1))?,
            };
            pred.push(model.decode(&AugmentedLatent::new(latent.clone(), traj.action(m)))?);
        }
        let obs = traj.states.columns(start + 1, horizon).into_owned();
        total += nrmse(&DMatrix::from_columns(&pred), &obs, 0, horizon)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientHorizon {
            needed: start + horizon + 1,
            available: test.iter().map(|t| t.len()).max().unwrap_or(0),
        });
    }
    Ok(total / n as f64)
}

/// Mean action NRMSE of the actuator's predicted commands against the
/// commands actually issued.
pub fn action_nrmse(model: &ControllingModel, runs: &[Trajectory], start: usize, horizon: usize) -> Result<f64> {
    action_nrmse_over_link(model, runs, start, horizon, None)
}

/// Action NRMSE at the actuator when the issued commands travel over
/// `downlink`; lost commands are predicted as in the phase-2 loop.
pub fn action_nrmse_over_link(
    model: &ControllingModel,
    runs: &[Trajectory],
    start: usize,
    horizon: usize,
    mut downlink: Option<&mut Link>,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for run in runs {
        if run.len() < start + horizon + 1 {
            continue;
        }
        let mut latent = model.encode(&run.state(start))?;
        let mut a = run.action(start);
        let mut input: Option<DVector<f64>> = None;
        let mut pred = Vec::with_capacity(horizon);
        for m in start + 1..=start + horizon {
            let received = match downlink.as_deref_mut() {
                Some(link) => link.transmit(run.action(m).as_slice())?.payload,
                None => None,
            };
            match received {
                Some(rx) => {
                    a = DVector::from_vec(rx);
                    latent = model.encode(&run.state(m))?;
                    input = None;
                }
                None => {
                    if let Some(u) = &input {
                        latent = model.next_latent(&latent, u, Some(&model.encode(&run.state(m - 1))?))?;
                    }
                    let next = model.action_step(&latent, &a)?;
                    input = Some(std::mem::replace(&mut a, next));
                }
            }
            pred.push(a.clone());
        }
        let obs = run.actions.columns(start + 1, horizon).into_owned();
        total += nrmse(&DMatrix::from_columns(&pred), &obs, 0, horizon)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::InsufficientHorizon {
            needed: start + horizon + 1,
            available: runs.iter().map(|t| t.len()).max().unwrap_or(0),
        });
    }
    Ok(total / n as f64)
}

/// Clean Koopman-LQR runs from the test initial states, used as the action
/// reference.
pub fn action_reference_runs(cfg: &ExperimentConfig, sys: &RemoteSystem, test: &[Trajectory], seed: u64) -> Result<Vec<Trajectory>> {
    let p2 = Phase2Config {
        horizon: cfg.eval.predict_start + cfg.eval.predict_horizon + 1,
        mode: ControlMode::HoldLast,
        ..Phase2Config::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ROLE_EVAL));
    let mut out = Vec::new();
    for traj in test {
        let mut links = links_for(cfg, None, seed)?;
        match run_phase2_loop(sys, &traj.state(0), &p2, &mut links.uplink, &mut links.downlink, &mut rng) {
            Ok(run) => out.push(Trajectory {
                states: run.states.columns(0, p2.horizon).into_owned(),
                actions: run.issued,
            }),
            Err(Error::PlantDiverged { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// MSCE over loops `1..=horizon` of a run towards the origin.
pub fn run_msce(run: &Phase2Run) -> Result<f64> {
    let n = run.states.ncols() - 1;
    msce(&run.states.columns(1, n).into_owned(), &DVector::zeros(run.states.nrows()), n)
}

/// Outcome of one closed-loop run; a diverged plant scores infinity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlOutcome {
    pub msce: f64,
    /// `||x(end)||_inf`.
    pub final_error: f64,
    pub m_lost: usize,
    pub diverged_at: Option<usize>,
}

pub fn control_outcome(
    sys: &RemoteSystem,
    x0: &DVector<f64>,
    p2: &Phase2Config,
    links: &mut SplitLinks,
    seed: u64,
) -> Result<ControlOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, ROLE_EVAL));
    match run_phase2_loop(sys, x0, p2, &mut links.uplink, &mut links.downlink, &mut rng) {
        Ok(run) => Ok(ControlOutcome {
            msce: run_msce(&run)?,
            final_error: run.states.column(run.states.ncols() - 1).amax(),
            m_lost: run.m_lost,
            diverged_at: None,
        }),
        Err(Error::PlantDiverged { loop_index }) => Ok(ControlOutcome {
            msce: f64::INFINITY,
            final_error: f64::INFINITY,
            m_lost: 0,
            diverged_at: Some(loop_index),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilizationResult {
    pub seed: u64,
    pub koopman: ControlOutcome,
    pub jacobian: ControlOutcome,
}

impl StabilizationResult {
    /// Koopman wins on MSCE and reaches the tolerance while the baseline
    /// does not.
    pub fn koopman_wins(&self, tolerance: f64) -> bool {
        self.koopman.msce < self.jacobian.msce && self.koopman.final_error < tolerance && !(self.jacobian.final_error < tolerance)
    }
}

/// Koopman LQR against the Jacobian baseline from the far initial state over
/// an ideal link.
pub fn run_stabilization(cfg: &ExperimentConfig, sys: &RemoteSystem, seed: u64) -> Result<StabilizationResult> {
    let x0 = cfg.far_x0();
    let run = |mode| {
        let p2 = Phase2Config {
            horizon: cfg.eval.control_horizon,
            mode,
            ..Phase2Config::default()
        };
        control_outcome(sys, &x0, &p2, &mut links_for(cfg, None, seed)?, seed)
    };
    Ok(StabilizationResult {
        seed,
        koopman: run(ControlMode::HoldLast)?,
        jacobian: run(ControlMode::Jacobian)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub seed: u64,
    /// Forced consecutive losses after every delivery.
    pub burst: usize,
    pub predictive: ControlOutcome,
    pub hold: ControlOutcome,
}

/// Predictive versus zero-order-hold operation under repeating loss runs at
/// the configured mean SNR.
pub fn run_packet_loss(cfg: &ExperimentConfig, sys: &RemoteSystem, seed: u64) -> Result<Vec<LossPoint>> {
    let x0 = cfg.loss_x0();
    let mut out = Vec::new();
    for &burst in &cfg.eval.loss_bursts {
        let run = |mode| {
            let p2 = Phase2Config {
                horizon: cfg.eval.control_horizon,
                mode,
                forced: ForcedLosses::repeating(burst, cfg.eval.control_horizon),
                ..Phase2Config::default()
            };
            let mut links = links_for(cfg, Some(cfg.eval.loss_snr_db), sub_seed(seed, burst as u64))?;
            control_outcome(sys, &x0, &p2, &mut links, seed)
        };
        out.push(LossPoint {
            seed,
            burst,
            predictive: run(ControlMode::Predictive)?,
            hold: run(ControlMode::HoldLast)?,
        });
    }
    Ok(out)
}

/// `KoopmanController` for a trained sensing model under the config weights.
pub fn koopman_controller(cfg: &ExperimentConfig, sensing: &SensingModel) -> Result<KoopmanController> {
    KoopmanController::build(&sensing.k11, &sensing.k12, &sensing.q_tilde, &cfg.r())
}
