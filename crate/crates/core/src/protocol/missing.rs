use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::{rollout_latent, SensingModel};

/// What the controller does with a missing uplink sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MissingStatePolicy {
    /// Roll the last received latent forward with the issued commands.
    #[default]
    Predict,
    /// Reuse the last received latent.
    HoldLast,
}

/// Latent estimate after `issued.len()` consecutive losses. `issued[k]` is
/// the command the controller sent `k` loops after the last reception.
pub fn handle_missing_state(
    last_received: Option<&DVector<f64>>,
    issued: &[DVector<f64>],
    model: &SensingModel,
    policy: MissingStatePolicy,
) -> Result<DVector<f64>> {
    let last = last_received.ok_or(Error::ColdStart)?;
    if issued.is_empty() || policy == MissingStatePolicy::HoldLast {
        return Ok(last.clone());
    }
    let path = rollout_latent(&model.k11, &model.k12, last, issued, issued.len())?;
    Ok(path.last().cloned().unwrap_or_else(|| last.clone()))
}
