//! Phase 1: the sensing model trained across the link (encoder at the
//! sensor, everything else at the controller), plus the controlling model
//! trained at the actuator with the encoder frozen.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::Link;
use crate::error::{Error, Result};
use crate::harness::Trajectory;
use crate::koopman::{
    controlling_loss_on_tape, sensing_loss_on_tape, AugmentedLatent, ControllingCoefficients, ControllingModel,
    LossBreakdown, ScheduleMode, SensingCoefficients, SensingModel, SensingServerGrads, WeightSchedule, WindowBatch,
};
use crate::neural::{AdamConfig, AdamState, GradientSet, Tape};

use super::stopping::EarlyStopping;
use super::{Phase, PhaseTransition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    /// Target prediction depth `M_d`.
    pub depth: usize,
    pub schedule: ScheduleMode,
    pub coefficients: SensingCoefficients,
    pub controlling_coefficients: ControllingCoefficients,
    pub adam: AdamConfig,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Random subset of windows visited per epoch; `None` visits all.
    pub windows_per_epoch: Option<usize>,
    /// Evenly spaced validation windows; `None` uses all.
    pub val_windows: Option<usize>,
    pub patience: usize,
    pub min_delta: f64,
    /// Diagonal of `Q_x`.
    pub q_x: Vec<f64>,
    /// Diagonal of `R`.
    pub r: Vec<f64>,
    /// Route the boundary gradient through the downlink channel model.
    pub impaired_gradients: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            schedule: ScheduleMode::SpecialCase,
            coefficients: SensingCoefficients::default(),
            controlling_coefficients: ControllingCoefficients::default(),
            adam: AdamConfig::default(),
            lr_decay: 1.0,
            batch_size: 64,
            max_epochs: 200,
            windows_per_epoch: None,
            val_windows: None,
            patience: 10,
            min_delta: 1e-4,
            q_x: vec![1.0; 4],
            r: vec![1.0],
            impaired_gradients: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and epoch budget must be >= 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must be in (0, 1]".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be >= 0".into()));
        }
        self.coefficients.validate()?;
        self.controlling_coefficients.validate()?;
        self.adam.validate()?;
        WeightSchedule::new(self.schedule, self.depth).map(|_| ())
    }

    pub fn q_x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_x))
    }

    pub fn r_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.r))
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        self.adam.lr * self.lr_decay.powi(epoch as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Fraction of uplink samples lost this epoch.
    pub uplink_loss_rate: f64,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub transition: Option<PhaseTransition>,
}

impl TrainingReport {
    pub fn val_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val.total).collect()
    }
}

/// Uplink and downlink used during split training.
#[derive(Debug, Clone)]
pub struct SplitLinks {
    pub uplink: Link,
    pub downlink: Link,
}

/// `(trajectory, start)` pairs whose `depth + 1` offsets are all usable.
fn windows_for(trajs: &[Trajectory], depth: usize, first_usable: &[usize]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        for m in first_usable[i]..t.len().saturating_sub(depth) {
            out.push((i, m));
        }
    }
    out
}

fn gather(trajs: &[Trajectory], windows: &[(usize, usize)], offset: usize, pick: fn(&Trajectory) -> &DMatrix<f64>) -> DMatrix<f64> {
    let rows = pick(&trajs[windows[0].0]).nrows();
    let mut out = DMatrix::zeros(rows, windows.len());
    for (j, &(t, m)) in windows.iter().enumerate() {
        out.set_column(j, &pick(&trajs[t]).column(m + offset));
    }
    out
}

fn states_of(t: &Trajectory) -> &DMatrix<f64> {
    &t.states
}

fn actions_of(t: &Trajectory) -> &DMatrix<f64> {
    &t.actions
}

fn evenly_spaced(mut all: Vec<(usize, usize)>, limit: Option<usize>) -> Vec<(usize, usize)> {
    match limit {
        Some(n) if n < all.len() && n > 0 => {
            let stride = all.len() as f64 / n as f64;
            (0..n).map(|i| all[(i as f64 * stride) as usize]).collect()
        }
        _ => {
            all.shrink_to_fit();
            all
        }
    }
}

struct LossMeter {
    sum: LossBreakdown,
    weight: f64,
}

impl LossMeter {
    fn new() -> Self {
        Self {
            sum: LossBreakdown::default(),
            weight: 0.0,
        }
    }

    fn add(&mut self, b: &LossBreakdown, w: usize) {
        let w = w as f64;
        self.sum.l1 += b.l1 * w;
        self.sum.l2 += b.l2 * w;
        self.sum.l3 += b.l3 * w;
        self.sum.l4 += b.l4 * w;
        self.sum.total += b.total * w;
        self.weight += w;
    }

    fn mean(&self) -> LossBreakdown {
        if self.weight == 0.0 {
            return LossBreakdown::default();
        }
        let w = self.weight;
        LossBreakdown {
            l1: self.sum.l1 / w,
            l2: self.sum.l2 / w,
            l3: self.sum.l3 / w,
            l4: self.sum.l4 / w,
            total: self.sum.total / w,
        }
    }
}

fn server_params(model: &SensingModel) -> Vec<&DMatrix<f64>> {
    let mut v = vec![&model.k11, &model.k12, &model.q_tilde];
    v.extend(model.decoder.params());
    v
}

fn server_params_mut(model: &mut SensingModel) -> Vec<&mut DMatrix<f64>> {
    let SensingModel {
        k11, k12, q_tilde, decoder, ..
    } = model;
    let mut v = vec![k11, k12, q_tilde];
    v.extend(decoder.params_mut());
    v
}

fn all_params_mut(model: &mut SensingModel) -> Vec<&mut DMatrix<f64>> {
    let SensingModel {
        encoder,
        k11,
        k12,
        q_tilde,
        decoder,
        ..
    } = model;
    let mut v = encoder.net.params_mut();
    v.extend([k11, k12, q_tilde]);
    v.extend(decoder.params_mut());
    v
}

fn server_gradient_set(g: SensingServerGrads) -> GradientSet {
    let mut v = vec![g.k11, g.k12, g.q_tilde];
    v.extend(g.decoder.0);
    GradientSet(v)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let s = (&*m + m.transpose()) * 0.5;
    *m = s;
}

/// Where the optimizer state lives.
#[derive(Debug, Clone)]
enum Optimizers {
    Split { sensor: AdamState, server: AdamState },
    Centralized(AdamState),
}

/// What the controller holds for one trajectory after the epoch's uplink
/// transmissions.
#[derive(Debug, Clone)]
struct UplinkView {
    lost: Vec<bool>,
    /// Additive latent noise of delivered samples.
    latent_noise: Option<DMatrix<f64>>,
    /// Received or predicted state estimates.
    state_hat: DMatrix<f64>,
    /// Predicted latents for lost samples.
    latent_fill: DMatrix<f64>,
    first_received: Option<usize>,
}

/// Sensing-model trainer. Split mode keeps separate optimizers at the sensor
/// (encoder) and controller (`K11`, `K12`, `Q~_g`, decoder); centralized mode
/// runs the same arithmetic on one tape.
#[derive(Debug, Clone)]
pub struct SensingTrainer {
    pub model: SensingModel,
    pub config: TrainingConfig,
    pub schedule: WeightSchedule,
    pub phase: Phase,
    optim: Optimizers,
    q_x: DMatrix<f64>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl SensingTrainer {
    pub fn split(model: SensingModel, config: TrainingConfig, seed: u64) -> Result<Self> {
        let sensor = AdamState::new(config.adam, &model.encoder.net.params())?;
        let server = AdamState::new(config.adam, &server_params(&model))?;
        Self::build(model, config, seed, Optimizers::Split { sensor, server })
    }

    pub fn centralized(model: SensingModel, config: TrainingConfig, seed: u64) -> Result<Self> {
        let mut params = model.encoder.net.params();
        params.extend(server_params(&model));
        let adam = AdamState::new(config.adam, &params)?;
        Self::build(model, config, seed, Optimizers::Centralized(adam))
    }

    fn build(model: SensingModel, config: TrainingConfig, seed: u64, optim: Optimizers) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let q_x = config.q_x_matrix();
        if q_x.nrows() != model.dims.p {
            return Err(Error::Dimension {
                expected: model.dims.p,
                got: q_x.nrows(),
                context: "Q_x diagonal",
            });
        }
        Ok(Self {
            schedule: WeightSchedule::new(config.schedule, config.depth)?,
            model,
            config,
            phase: Phase::Phase1Training,
            optim,
            q_x,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Send every training sample uplink once as `[g(x); x]` and fill the
    /// losses from the last reception.
    fn uplink_views(&self, train: &[Trajectory], uplink: &mut Link) -> Result<Vec<UplinkView>> {
        let d = self.model.dims.d;
        let mut views = Vec::with_capacity(train.len());
        for traj in train {
            let t_len = traj.len();
            let g = self.model.encoder.encode_batch(&traj.states)?;
            let mut lost = vec![false; t_len];
            let mut latent_noise = DMatrix::zeros(d, t_len);
            let mut state_hat = traj.states.clone();
            let mut latent_fill = DMatrix::zeros(d, t_len);
            let mut first_received = None;
            let mut running: Option<DVector<f64>> = None;
            for t in 0..t_len {
                let mut payload: Vec<f64> = g.column(t).iter().copied().collect();
                payload.extend(traj.states.column(t).iter());
                let out = uplink.transmit(&payload)?;
                match out.payload {
                    Some(rx) => {
                        let g_hat = DVector::from_column_slice(&rx[..d]);
                        latent_noise.set_column(t, &(&g_hat - g.column(t)));
                        state_hat.set_column(t, &DVector::from_column_slice(&rx[d..]));
                        first_received.get_or_insert(t);
                        running = Some(g_hat);
                    }
                    None => {
                        lost[t] = true;
                        if let Some(z) = running.take() {
                            let z = self.model.latent_step(&z, &traj.action(t - 1))?;
                            let x = self.model.decode(&AugmentedLatent::new(z.clone(), traj.action(t)))?;
                            latent_fill.set_column(t, &z);
                            state_hat.set_column(t, &x);
                            running = Some(z);
                        }
                    }
                }
            }
            let noisy = latent_noise.iter().any(|v| *v != 0.0);
            views.push(UplinkView {
                lost,
                latent_noise: noisy.then_some(latent_noise),
                state_hat,
                latent_fill,
                first_received,
            });
        }
        Ok(views)
    }

    /// One pass over (a random subset of) the training windows.
    pub fn run_epoch(&mut self, train: &[Trajectory], links: Option<&mut SplitLinks>) -> Result<LossBreakdown> {
        let md = self.config.depth;
        let lr = self.config.lr_at(self.epoch);
        match &mut self.optim {
            Optimizers::Split { sensor, server } => {
                sensor.config.lr = lr;
                server.config.lr = lr;
            }
            Optimizers::Centralized(adam) => adam.config.lr = lr,
        }
        let (views, mut downlink) = match links {
            Some(l) if !l.uplink.is_ideal() => (Some(self.uplink_views(train, &mut l.uplink)?), Some(&mut l.downlink)),
            Some(l) => (None, Some(&mut l.downlink)),
            None => (None, None),
        };
        if !self.config.impaired_gradients {
            downlink = None;
        }
        if matches!(self.optim, Optimizers::Centralized(_)) && views.is_some() {
            return Err(Error::Config("centralized training has no link".into()));
        }
        let first_usable: Vec<usize> = match &views {
            Some(v) => v.iter().map(|u| u.first_received.unwrap_or(usize::MAX - md)).collect(),
            None => vec![0; train.len()],
        };
        let mut windows = windows_for(train, md, &first_usable);
        if windows.is_empty() {
            return Err(Error::InsufficientHorizon {
                needed: md + 1,
                available: train.iter().map(|t| t.len()).max().unwrap_or(0),
            });
        }
        windows.shuffle(&mut self.rng);
        if let Some(n) = self.config.windows_per_epoch {
            windows.truncate(n.max(1));
        }
        let mut meter = LossMeter::new();
        for chunk in windows.chunks(self.config.batch_size) {
            let b = match &mut self.optim {
                Optimizers::Centralized(_) => self.centralized_step(train, chunk)?,
                Optimizers::Split { .. } => self.split_step(train, chunk, views.as_deref(), downlink.as_deref_mut())?,
            };
            if !b.total.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: self.epoch + 1,
                    detail: "non-finite training loss".into(),
                });
            }
            meter.add(&b, chunk.len());
        }
        self.epoch += 1;
        Ok(meter.mean())
    }

    fn centralized_step(&mut self, train: &[Trajectory], windows: &[(usize, usize)]) -> Result<LossBreakdown> {
        let md = self.config.depth;
        let states: Vec<_> = (0..=md).map(|k| gather(train, windows, k, states_of)).collect();
        let controls: Vec<_> = (0..=md).map(|k| gather(train, windows, k, actions_of)).collect();
        let mut tape = Tape::new();
        let (latents, enc_vars) = self.model.encoder.encode_window_tape(&mut tape, &states)?;
        let batch = WindowBatch { states, controls };
        let graph = sensing_loss_on_tape(
            &mut tape,
            &self.model,
            &latents,
            &batch,
            &self.schedule,
            &self.config.coefficients,
            &self.q_x,
        )?;
        let grads = tape.backward(graph.total)?;
        let mut all = enc_vars.gradients(&grads)?;
        all.extend(server_gradient_set(graph.params.gradients(&grads)?));
        let Optimizers::Centralized(adam) = &mut self.optim else {
            unreachable!("centralized step on a split trainer")
        };
        adam.step(&mut all_params_mut(&mut self.model), &all)?;
        symmetrize(&mut self.model.q_tilde);
        Ok(graph.breakdown)
    }

    fn split_step(
        &mut self,
        train: &[Trajectory],
        windows: &[(usize, usize)],
        views: Option<&[UplinkView]>,
        gradient_link: Option<&mut Link>,
    ) -> Result<LossBreakdown> {
        let md = self.config.depth;
        let b = windows.len();
        let states: Vec<_> = (0..=md).map(|k| gather(train, windows, k, states_of)).collect();
        let controls: Vec<_> = (0..=md).map(|k| gather(train, windows, k, actions_of)).collect();

        // Sensor: encode the sampled states.
        let mut sensor_tape = Tape::new();
        let (slices, enc_vars) = self.model.encoder.encode_window_tape(&mut sensor_tape, &states)?;

        // Uplink: what the controller ends up holding.
        let mut received = Vec::with_capacity(md + 1);
        let mut targets = Vec::with_capacity(md + 1);
        let mut predicted = vec![vec![false; b]; md + 1];
        for k in 0..=md {
            let mut g = sensor_tape.value(slices[k]).clone();
            let mut x_hat = states[k].clone();
            if let Some(views) = views {
                for (j, &(ti, m)) in windows.iter().enumerate() {
                    let view = &views[ti];
                    let t = m + k;
                    if view.lost[t] {
                        g.set_column(j, &view.latent_fill.column(t));
                        predicted[k][j] = true;
                    } else if let Some(noise) = &view.latent_noise {
                        let noisy = g.column(j) + noise.column(t);
                        g.set_column(j, &noisy);
                    }
                    x_hat.set_column(j, &view.state_hat.column(t));
                }
            }
            received.push(g);
            targets.push(x_hat);
        }

        // Controller: loss, server update, boundary gradient.
        let mut tape = Tape::new();
        let latent_vars: Vec<_> = received.into_iter().map(|g| tape.leaf(g)).collect();
        let batch = WindowBatch {
            states: targets,
            controls,
        };
        let graph = sensing_loss_on_tape(
            &mut tape,
            &self.model,
            &latent_vars,
            &batch,
            &self.schedule,
            &self.config.coefficients,
            &self.q_x,
        )?;
        let grads = tape.backward(graph.total)?;
        let server = server_gradient_set(graph.params.gradients(&grads)?);
        let mut boundary = latent_vars.iter().map(|v| grads.get(*v)).collect::<Result<Vec<_>>>()?;
        for (k, mask) in predicted.iter().enumerate() {
            for (j, &p) in mask.iter().enumerate() {
                if p {
                    boundary[k].column_mut(j).fill(0.0);
                }
            }
        }
        let Optimizers::Split { sensor, server: server_opt } = &mut self.optim else {
            unreachable!("split step on a centralized trainer")
        };
        server_opt.step(&mut server_params_mut(&mut self.model), &server)?;
        symmetrize(&mut self.model.q_tilde);

        // Downlink: one gradient packet per window.
        if let Some(link) = gradient_link {
            let d = self.model.dims.d;
            for j in 0..b {
                let payload: Vec<f64> = boundary.iter().flat_map(|g| g.column(j).iter().copied().collect::<Vec<_>>()).collect();
                let out = link.transmit(&payload)?;
                for (k, g) in boundary.iter_mut().enumerate() {
                    match &out.payload {
                        Some(rx) => g.set_column(j, &DVector::from_column_slice(&rx[k * d..(k + 1) * d])),
                        None => g.column_mut(j).fill(0.0),
                    }
                }
            }
        }

        // Sensor: finish backpropagation through the encoder.
        let seeds = slices.iter().copied().zip(boundary).collect();
        let sensor_grads = sensor_tape.backward_seeds(seeds)?;
        let enc = enc_vars.gradients(&sensor_grads)?;
        sensor.step(&mut self.model.encoder.net.params_mut(), &enc)?;
        Ok(graph.breakdown)
    }

    /// Mean loss over clean validation windows.
    pub fn validation_loss(&self, val: &[Trajectory]) -> Result<LossBreakdown> {
        let md = self.config.depth;
        let windows = evenly_spaced(windows_for(val, md, &vec![0; val.len()]), self.config.val_windows);
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut meter = LossMeter::new();
        for chunk in windows.chunks(self.config.batch_size.max(256)) {
            let states: Vec<_> = (0..=md).map(|k| gather(val, chunk, k, states_of)).collect();
            let controls: Vec<_> = (0..=md).map(|k| gather(val, chunk, k, actions_of)).collect();
            let mut tape = Tape::new();
            let latents = states
                .iter()
                .map(|s| Ok(tape.leaf(self.model.encoder.encode_batch(s)?)))
                .collect::<Result<Vec<_>>>()?;
            let batch = WindowBatch { states, controls };
            let graph = sensing_loss_on_tape(
                &mut tape,
                &self.model,
                &latents,
                &batch,
                &self.schedule,
                &self.config.coefficients,
                &self.q_x,
            )?;
            meter.add(&graph.breakdown, chunk.len());
        }
        Ok(meter.mean())
    }

    /// Train until early stopping or the epoch budget, keep the best
    /// validation model, and hand over to phase 2.
    pub fn train(&mut self, train: &[Trajectory], val: &[Trajectory], mut links: Option<&mut SplitLinks>) -> Result<TrainingReport> {
        let mut stop = EarlyStopping::new(self.config.patience, self.config.min_delta);
        let mut best = (self.model.clone(), 0usize);
        let mut epochs = Vec::new();
        while self.epoch < self.config.max_epochs {
            let uplink_before = links.as_ref().map(|l| l.uplink.clone());
            let train_loss = self.run_epoch(train, links.as_deref_mut())?;
            let val_loss = self.validation_loss(val)?;
            if !val_loss.total.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: self.epoch,
                    detail: "non-finite validation loss".into(),
                });
            }
            let loss_rate = match uplink_before {
                Some(link) if !link.is_ideal() => uplink_loss_rate(link, train, self.model.dims.d),
                _ => 0.0,
            };
            epochs.push(EpochStats {
                epoch: self.epoch,
                train: train_loss,
                val: val_loss,
                uplink_loss_rate: loss_rate,
                windows: self.config.windows_per_epoch.unwrap_or(0),
            });
            let improved = stop.observe(val_loss.total);
            if improved {
                best = (self.model.clone(), self.epoch);
            }
            if stop.should_stop() {
                break;
            }
        }
        self.model = best.0;
        let transition = PhaseTransition {
            epoch: self.epoch,
            val_loss: stop.best(),
        };
        self.phase = Phase::Phase2Predictive(transition);
        Ok(TrainingReport {
            epochs,
            best_epoch: best.1,
            transition: Some(transition),
        })
    }
}

/// Expected uplink loss fraction, from the link's own closed form.
fn uplink_loss_rate(link: Link, train: &[Trajectory], d: usize) -> f64 {
    let p = train.first().map_or(4, |t| t.states.nrows());
    link.outage_probability(d + p)
}

/// Controlling-model trainer; the shared encoder is frozen, so latents are
/// computed once per trajectory.
#[derive(Debug, Clone)]
pub struct ControllingTrainer {
    pub model: ControllingModel,
    pub config: TrainingConfig,
    pub schedule: WeightSchedule,
    adam: AdamState,
    rng: ChaCha8Rng,
    epoch: usize,
}

fn controlling_params_mut(model: &mut ControllingModel) -> Vec<&mut DMatrix<f64>> {
    let ControllingModel { k21, k22, decoder, .. } = model;
    let mut v = vec![k21, k22];
    v.extend(decoder.params_mut());
    v
}

impl ControllingTrainer {
    pub fn new(model: ControllingModel, config: TrainingConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let mut params = vec![&model.k21, &model.k22];
        params.extend(model.decoder.params());
        let adam = AdamState::new(config.adam, &params)?;
        Ok(Self {
            schedule: WeightSchedule::new(config.schedule, config.depth)?,
            model,
            config,
            adam,
            rng: ChaCha8Rng::seed_from_u64(seed),
            epoch: 0,
        })
    }

    fn latents(&self, data: &[Trajectory]) -> Result<Vec<DMatrix<f64>>> {
        data.iter().map(|t| self.model.encoder.encode_batch(&t.states)).collect()
    }

    fn batch_loss(
        &self,
        data: &[Trajectory],
        latents: &[DMatrix<f64>],
        windows: &[(usize, usize)],
        tape: &mut Tape,
    ) -> Result<crate::koopman::ControllingLossGraph> {
        let md = self.config.depth;
        let states: Vec<_> = (0..=md).map(|k| gather(data, windows, k, states_of)).collect();
        let controls: Vec<_> = (0..=md).map(|k| gather(data, windows, k, actions_of)).collect();
        let lat: Vec<DMatrix<f64>> = (0..=md)
            .map(|k| {
                let mut out = DMatrix::zeros(self.model.dims.d, windows.len());
                for (j, &(t, m)) in windows.iter().enumerate() {
                    out.set_column(j, &latents[t].column(m + k));
                }
                out
            })
            .collect();
        let batch = WindowBatch { states, controls };
        controlling_loss_on_tape(
            tape,
            &self.model,
            &lat,
            &batch,
            &self.schedule,
            &self.config.controlling_coefficients,
        )
    }

    /// `data` holds true states and the commands received at the actuator.
    pub fn run_epoch(&mut self, data: &[Trajectory]) -> Result<LossBreakdown> {
        self.adam.config.lr = self.config.lr_at(self.epoch);
        let latents = self.latents(data)?;
        let mut windows = windows_for(data, self.config.depth, &vec![0; data.len()]);
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        windows.shuffle(&mut self.rng);
        if let Some(n) = self.config.windows_per_epoch {
            windows.truncate(n.max(1));
        }
        let mut meter = LossMeter::new();
        for chunk in windows.chunks(self.config.batch_size) {
            let mut tape = Tape::new();
            let graph = self.batch_loss(data, &latents, chunk, &mut tape)?;
            let grads = tape.backward(graph.total)?;
            let g = graph.params.gradients(&grads)?;
            let mut set = vec![g.k21, g.k22];
            set.extend(g.decoder.0);
            self.adam.step(&mut controlling_params_mut(&mut self.model), &GradientSet(set))?;
            meter.add(&graph.breakdown, chunk.len());
        }
        self.epoch += 1;
        Ok(meter.mean())
    }

    pub fn validation_loss(&self, val: &[Trajectory]) -> Result<LossBreakdown> {
        let latents = self.latents(val)?;
        let windows = evenly_spaced(windows_for(val, self.config.depth, &vec![0; val.len()]), self.config.val_windows);
        if windows.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let mut meter = LossMeter::new();
        for chunk in windows.chunks(self.config.batch_size.max(256)) {
            let mut tape = Tape::new();
            let graph = self.batch_loss(val, &latents, chunk, &mut tape)?;
            meter.add(&graph.breakdown, chunk.len());
        }
        Ok(meter.mean())
    }

    pub fn train(&mut self, train: &[Trajectory], val: &[Trajectory]) -> Result<TrainingReport> {
        let mut stop = EarlyStopping::new(self.config.patience, self.config.min_delta);
        let mut best = (self.model.clone(), 0usize);
        let mut epochs = Vec::new();
        while self.epoch < self.config.max_epochs {
            let train_loss = self.run_epoch(train)?;
            let val_loss = self.validation_loss(val)?;
            if !val_loss.total.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch: self.epoch,
                    detail: "non-finite controlling validation loss".into(),
                });
            }
            epochs.push(EpochStats {
                epoch: self.epoch,
                train: train_loss,
                val: val_loss,
                uplink_loss_rate: 0.0,
                windows: self.config.windows_per_epoch.unwrap_or(0),
            });
            if stop.observe(val_loss.total) {
                best = (self.model.clone(), self.epoch);
            }
            if stop.should_stop() {
                break;
            }
        }
        self.model = best.0;
        Ok(TrainingReport {
            epochs,
            best_epoch: best.1,
            transition: None,
        })
    }
}
