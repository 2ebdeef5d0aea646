//! Phase 2: closed loop over the uplink and downlink.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{Link, LinkOutcome, LinkStatus};
use crate::control::{JacobianController, KoopmanController};
use crate::dynamics::{step_plant, ActionVector, CartPoleParams, IntegratorConfig, NoiseSpec, StateVector};
use crate::error::{Error, Result};
use crate::koopman::{ControllingModel, SensingModel};

use super::records::{LinkRecord, LoopRecord, SideUse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Koopman LQR on the (predicted) latent; the actuator predicts lost
    /// commands with the controlling model.
    #[default]
    Predictive,
    /// Koopman LQR on the last received latent; the actuator holds the last
    /// command.
    HoldLast,
    /// Jacobian LQR on the last received state; the actuator holds the last
    /// command.
    Jacobian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UplinkRefresh {
    /// Send a fresh sample every loop.
    #[default]
    EveryLoop,
    /// Send only at the first loop and predict from then on.
    Never,
}

/// Loops at which a link is forced to drop its packet.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ForcedLosses {
    pub uplink: Vec<bool>,
    pub downlink: Vec<bool>,
}

impl ForcedLosses {
    /// `len` consecutive losses on both links starting at loop `start`.
    pub fn burst(start: usize, len: usize) -> Self {
        let mask: Vec<bool> = (0..start + len).map(|m| m >= start).collect();
        Self {
            uplink: mask.clone(),
            downlink: mask,
        }
    }

    /// `burst` losses after every delivery on both links, over `horizon`
    /// loops; loop 0 is delivered.
    pub fn repeating(burst: usize, horizon: usize) -> Self {
        let mask: Vec<bool> = (0..horizon).map(|m| m % (burst + 1) != 0).collect();
        Self {
            uplink: mask.clone(),
            downlink: mask,
        }
    }

    fn up(&self, m: usize) -> bool {
        self.uplink.get(m).copied().unwrap_or(false)
    }

    fn down(&self, m: usize) -> bool {
        self.downlink.get(m).copied().unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Phase2Config {
    /// Loops `M_p`.
    pub horizon: usize,
    pub mode: ControlMode,
    pub uplink_refresh: UplinkRefresh,
    pub forced: ForcedLosses,
    /// Any state entry beyond this is reported as divergence.
    pub divergence_bound: f64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            horizon: 1000,
            mode: ControlMode::Predictive,
            uplink_refresh: UplinkRefresh::EveryLoop,
            forced: ForcedLosses::default(),
            divergence_bound: 1e6,
        }
    }
}

/// Plant plus trained models and both controllers.
#[derive(Debug, Clone)]
pub struct RemoteSystem {
    pub plant: CartPoleParams,
    pub integrator: IntegratorConfig,
    pub noise: NoiseSpec,
    pub sensing: SensingModel,
    pub controlling: Option<ControllingModel>,
    pub koopman: KoopmanController,
    pub jacobian: JacobianController,
}

impl RemoteSystem {
    /// Freezes the models: `Q_g = psd(Q~_g)` and `K_LQR` are computed here.
    pub fn new(
        plant: CartPoleParams,
        integrator: IntegratorConfig,
        noise: NoiseSpec,
        sensing: SensingModel,
        controlling: Option<ControllingModel>,
        q_x: &DMatrix<f64>,
        r: &DMatrix<f64>,
    ) -> Result<Self> {
        let koopman = KoopmanController::build(&sensing.k11, &sensing.k12, &sensing.q_tilde, r)?;
        let jacobian = JacobianController::build(&plant, integrator.tau_o, q_x, r)?;
        Ok(Self {
            plant,
            integrator,
            noise,
            sensing,
            controlling,
            koopman,
            jacobian,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase2Run {
    /// `x_0 .. x_{M_p}`.
    pub states: DMatrix<f64>,
    /// Applied at the plant, `q × M_p`.
    pub applied: DMatrix<f64>,
    /// Issued by the controller, `q × M_p`.
    pub issued: DMatrix<f64>,
    pub records: Vec<LoopRecord>,
    /// Longest completed downlink loss run.
    pub m_lost: usize,
}

fn send(link: &mut Link, forced: bool, payload: &[f64]) -> Result<LinkOutcome> {
    if forced {
        link.transmit_forced_loss(payload)
    } else {
        link.transmit(payload)
    }
}

/// Controller-side memory.
struct ControllerSide {
    /// Last received or predicted latent (predictive) or state (baseline).
    estimate: Option<DVector<f64>>,
    since: usize,
}

/// Actuator-side memory.
struct ActuatorSide {
    /// Latent paired with `current`.
    latent: Option<DVector<f64>>,
    current: Option<DVector<f64>>,
    /// Command fed to the last action step, and the encoding it was paired with.
    previous_input: Option<DVector<f64>>,
    previous_fresh: Option<DVector<f64>>,
    since: usize,
}

pub fn run_phase2_loop<R: Rng + ?Sized>(
    sys: &RemoteSystem,
    x0: &DVector<f64>,
    cfg: &Phase2Config,
    uplink: &mut Link,
    downlink: &mut Link,
    rng: &mut R,
) -> Result<Phase2Run> {
    let dims = sys.sensing.dims;
    if x0.len() != dims.p {
        return Err(Error::Dimension {
            expected: dims.p,
            got: x0.len(),
            context: "initial state",
        });
    }
    if cfg.mode == ControlMode::Predictive && sys.controlling.is_none() {
        return Err(Error::Config("predictive mode needs a controlling model".into()));
    }
    let n = cfg.horizon;
    let mut states = DMatrix::zeros(dims.p, n + 1);
    let mut applied = DMatrix::zeros(dims.q, n);
    let mut issued = DMatrix::zeros(dims.q, n);
    let mut records = Vec::with_capacity(n);
    let mut ctrl = ControllerSide { estimate: None, since: 0 };
    let mut act = ActuatorSide {
        latent: None,
        current: None,
        previous_input: None,
        previous_fresh: None,
        since: 0,
    };
    let mut last_issued = DVector::zeros(dims.q);
    let (mut run, mut m_lost) = (0usize, 0usize);
    let mut x = StateVector(x0.clone());
    states.set_column(0, &x.0);

    for m in 0..n {
        // Sensor -> controller.
        let predictive = cfg.mode == ControlMode::Predictive;
        let latent_based = cfg.mode != ControlMode::Jacobian;
        let encoded = sys.sensing.encode(&x.0)?;
        let sent = if latent_based { encoded.as_slice() } else { x.0.as_slice() };
        let refresh = m == 0 || cfg.uplink_refresh == UplinkRefresh::EveryLoop;
        let up = send(uplink, cfg.forced.up(m) || !refresh, sent)?;
        let state_use = match &up.payload {
            Some(rx) => {
                ctrl.estimate = Some(DVector::from_column_slice(rx));
                ctrl.since = 0;
                SideUse::Received
            }
            None => match ctrl.estimate.take() {
                Some(prev) => {
                    ctrl.since += 1;
                    ctrl.estimate = Some(if predictive {
                        sys.sensing.latent_step(&prev, &last_issued)?
                    } else {
                        prev
                    });
                    SideUse::Predicted { depth: ctrl.since }
                }
                None => SideUse::ColdStart,
            },
        };
        let command = match &ctrl.estimate {
            Some(e) if latent_based => sys.koopman.control(e)?.0,
            Some(e) => sys.jacobian.control(e)?.0,
            None => DVector::zeros(dims.q),
        };
        issued.set_column(m, &command);
        last_issued = command.clone();

        // Controller -> actuator.
        let down = send(downlink, cfg.forced.down(m), command.as_slice())?;
        let action_use = match &down.payload {
            Some(rx) => {
                let a = DVector::from_column_slice(rx);
                act.latent = Some(encoded.clone());
                act.previous_input = None;
                act.previous_fresh = Some(encoded.clone());
                act.current = Some(a);
                act.since = 0;
                SideUse::Received
            }
            None => match act.current.take() {
                Some(prev) => {
                    act.since += 1;
                    let next = match (&sys.controlling, predictive) {
                        (Some(model), true) => {
                            let mut latent = act.latent.take().unwrap_or_else(|| encoded.clone());
                            if let Some(input) = &act.previous_input {
                                latent = model.next_latent(&latent, input, act.previous_fresh.as_ref())?;
                            }
                            let a = model.action_step(&latent, &prev)?;
                            act.latent = Some(latent);
                            act.previous_input = Some(prev.clone());
                            act.previous_fresh = Some(encoded.clone());
                            a
                        }
                        _ => prev,
                    };
                    act.current = Some(next);
                    SideUse::Predicted { depth: act.since }
                }
                None => SideUse::ColdStart,
            },
        };
        let a = act.current.clone().unwrap_or_else(|| DVector::zeros(dims.q));
        applied.set_column(m, &a);

        if down.status == LinkStatus::Lost {
            run += 1;
        } else {
            m_lost = m_lost.max(run);
            run = 0;
        }
        let latency = |o: &LinkOutcome| if o.latency.is_finite() { o.latency } else { 0.0 };
        records.push(LoopRecord {
            m,
            uplink: LinkRecord::from(&up),
            downlink: LinkRecord::from(&down),
            state_use,
            action_use,
            tau_comm: latency(&up) + latency(&down),
            tau_comp: uplink.config.tau_comp,
            m_lost,
        });

        x = step_plant(&x, &ActionVector(a), &sys.plant, &sys.integrator, &sys.noise, rng)
            .map_err(|_| Error::PlantDiverged { loop_index: m })?;
        if !x.0.iter().all(|v| v.is_finite()) || x.0.amax() > cfg.divergence_bound {
            return Err(Error::PlantDiverged { loop_index: m });
        }
        states.set_column(m + 1, &x.0);
    }
    // With no delivery at all the whole run counts.
    if records.iter().all(|r| r.downlink.status == LinkStatus::Lost) {
        m_lost = run;
    }
    Ok(Phase2Run {
        states,
        applied,
        issued,
        records,
        m_lost,
    })
}
