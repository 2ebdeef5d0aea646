//! Two-phase remote control over the simulated link: split training, then
//! predictive closed-loop operation with loss compensation on both links.

mod missing;
mod phase2;
mod records;
mod stopping;
mod training;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use missing::{handle_missing_state, MissingStatePolicy};
pub use phase2::{run_phase2_loop, ControlMode, ForcedLosses, Phase2Config, Phase2Run, RemoteSystem, UplinkRefresh};
pub use records::{read_records, write_records, Direction, LinkRecord, LoopRecord, SideUse, SplitBoundaryMessage};
pub use stopping::{switch_to_phase2, EarlyStopping};
pub use training::{ControllingTrainer, EpochStats, SensingTrainer, SplitLinks, TrainingConfig, TrainingReport};

/// Epoch at which training stopped and the validation loss kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseTransition {
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub enum Phase {
    #[default]
    Phase1Training,
    Phase2Predictive(PhaseTransition),
}

impl Phase {
    /// The only legal transition.
    pub fn enter_phase2(self, transition: PhaseTransition) -> Result<Phase> {
        match self {
            Phase::Phase1Training => Ok(Phase::Phase2Predictive(transition)),
            Phase::Phase2Predictive(_) => Err(Error::InvalidState("phase 2 already entered".into())),
        }
    }

    pub fn transition(&self) -> Option<PhaseTransition> {
        match self {
            Phase::Phase1Training => None,
            Phase::Phase2Predictive(t) => Some(*t),
        }
    }
}
