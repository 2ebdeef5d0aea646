//! Split Koopman autoencoders: sensing model (state evolution and prediction)
//! and controlling model (action evolution at the actuator).

mod checkpoint;
mod losses;
mod model;
mod psd;
mod schedule;

pub use checkpoint::{Checkpoint, MatrixRecord, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use losses::{
    controlling_loss_on_tape, controlling_loss_value, sensing_loss_on_tape, sensing_loss_value, ControllingCoefficients,
    ControllingGrads, ControllingLossGraph, ControllingParamVars, LossBreakdown, SensingCoefficients, SensingLossGraph,
    SensingParamVars, SensingServerGrads, WindowBatch,
};
pub use model::{
    action_step, latent_step, rollout_latent, ActuatorLatent, Architecture, AugmentedLatent, ControlSource, ControllingModel,
    Encoder, KoopmanDims, PredictedStep, SensingModel,
};
pub use psd::project_psd;
pub use schedule::{ScheduleMode, WeightSchedule};
