//! Prediction and control error metrics.

use nalgebra::{DMatrix, DVector};

use crate::channel::LinkStatus;
use crate::error::{Error, Result};

/// Normalized RMSE in percent over columns `start .. start + horizon`:
/// `100 * sqrt(mean ||pred - obs||^2) / ||max(obs) - min(obs)||`, with the
/// element-wise range taken over the observed window.
pub fn nrmse(predicted: &DMatrix<f64>, observed: &DMatrix<f64>, start: usize, horizon: usize) -> Result<f64> {
    if predicted.shape() != observed.shape() {
        return Err(Error::Dimension {
            expected: observed.ncols(),
            got: predicted.ncols(),
            context: "predicted vs observed length",
        });
    }
    if horizon == 0 || start + horizon > observed.ncols() {
        return Err(Error::InsufficientHorizon {
            needed: start + horizon.max(1),
            available: observed.ncols(),
        });
    }
    let obs = observed.columns(start, horizon);
    let err = predicted.columns(start, horizon) - obs;
    let mse = err.column_iter().map(|c| c.norm_squared()).sum::<f64>() / horizon as f64;
    let range: DVector<f64> = DVector::from_iterator(obs.nrows(), obs.row_iter().map(|r| r.max() - r.min()));
    let scale = range.norm();
    if scale == 0.0 {
        return Err(Error::ZeroRange);
    }
    Ok(100.0 * mse.sqrt() / scale)
}

/// Mean squared control error over the first `horizon` columns.
pub fn msce(states: &DMatrix<f64>, desired: &DVector<f64>, horizon: usize) -> Result<f64> {
    if horizon == 0 {
        return Err(Error::Config("MSCE horizon must be >= 1".into()));
    }
    if horizon > states.ncols() {
        return Err(Error::InsufficientHorizon {
            needed: horizon,
            available: states.ncols(),
        });
    }
    if desired.len() != states.nrows() {
        return Err(Error::Dimension {
            expected: states.nrows(),
            got: desired.len(),
            context: "desired state",
        });
    }
    let total: f64 = states.columns(0, horizon).column_iter().map(|c| (c - desired).norm_squared()).sum();
    Ok(total / horizon as f64)
}

/// `M_lost`: the longest run of losses that ended in a delivery, or the
/// whole length when nothing was delivered.
pub fn consecutive_lost(outcomes: &[LinkStatus]) -> usize {
    let Some(last) = outcomes.iter().rposition(|s| *s == LinkStatus::Delivered) else {
        return outcomes.len();
    };
    let mut best = 0;
    let mut run = 0;
    for s in &outcomes[..last] {
        if *s == LinkStatus::Lost {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}
