use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// Only the window start is rolled forward (`w_0 = 1`).
    SpecialCase,
    /// Every received sample in the window contributes (`w_l = 1 / M_d`).
    GeneralCase,
}

/// Target prediction depth and per-source weights of the multi-step losses.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSchedule {
    mode: ScheduleMode,
    depth: usize,
    weights: Vec<f64>,
}

impl WeightSchedule {
    pub fn new(mode: ScheduleMode, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::Config("prediction depth M_d must be >= 1".into()));
        }
        let weights = match mode {
            ScheduleMode::SpecialCase => vec![1.0],
            ScheduleMode::GeneralCase => vec![1.0 / depth as f64; depth],
        };
        let s = Self { mode, depth, weights };
        debug_assert!(s.check().is_ok());
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let total: f64 = self.weights.iter().sum();
        match self.mode {
            ScheduleMode::SpecialCase if self.weights.len() != 1 || self.weights[0] != 1.0 => {
                Err(Error::Config("special case has exactly one unit weight".into()))
            }
            ScheduleMode::GeneralCase if (total - 1.0).abs() > 1e-12 => {
                Err(Error::Config("general-case weights must sum to one".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn mode(&self) -> ScheduleMode {
        self.mode
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Declared weights `w_l`, `l = 0..` (length 1 or `M_d`).
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Sources and weights predicting window offset `target` (`1..=M_d`).
    ///
    /// Only sources strictly before the target can be rolled forward to it;
    /// their declared weights are renormalized over that set. At
    /// `target == M_d` this is the full declared weighting.
    pub fn sources_for(&self, target: usize) -> Vec<(usize, f64)> {
        let active: Vec<usize> = (0..self.weights.len()).filter(|&l| l < target).collect();
        let total: f64 = active.iter().map(|&l| self.weights[l]).sum();
        active.into_iter().map(|l| (l, self.weights[l] / total)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn special_case_single_term() {
        let s = WeightSchedule::new(ScheduleMode::SpecialCase, 4).unwrap();
        assert_eq!(s.weights(), &[1.0]);
        for t in 1..=4 {
            assert_eq!(s.sources_for(t), vec![(0, 1.0)]);
        }
    }

    #[test]
    fn general_case_weights_sum_to_one() {
        let s = WeightSchedule::new(ScheduleMode::GeneralCase, 3).unwrap();
        assert!((s.weights().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(s.sources_for(1), vec![(0, 1.0)]);
        let last = s.sources_for(3);
        assert_eq!(last.len(), 3);
        assert!(last.iter().all(|(_, w)| (*w - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn zero_depth_rejected() {
        assert!(WeightSchedule::new(ScheduleMode::GeneralCase, 0).is_err());
    }
}
