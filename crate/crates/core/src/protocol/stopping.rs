/// Patience-based early stopping on the validation total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    best: f64,
    since_best: usize,
    seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            since_best: 0,
            seen: 0,
        }
    }

    /// Record one validation value; true when it becomes the new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.seen += 1;
        if self.seen == 1 || self.best - value >= self.min_delta {
            self.best = value;
            self.since_best = 0;
            true
        } else {
            self.since_best += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.seen > 0 && self.since_best >= self.patience.max(1)
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Replay the rule over a whole history: stop once the best value has not
/// improved by `min_delta` for `patience` epochs.
pub fn switch_to_phase2(history: &[f64], patience: usize, min_delta: f64) -> bool {
    let mut rule = EarlyStopping::new(patience, min_delta);
    history.iter().any(|&v| {
        rule.observe(v);
        rule.should_stop()
    })
}
