//! Training losses, recorded on a [`Tape`] so every term is differentiable.
//!
//! A window batch holds `M_d + 1` offsets of `B` windows each. All squared
//! norms are averaged over windows and, for the multi-step terms, over the
//! `M_d` target offsets.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{ActuatorLatent, ControllingModel, KoopmanDims, SensingModel};
use super::schedule::WeightSchedule;
use crate::error::{Error, Result};
use crate::neural::{GradientSet, Gradients, NetworkVars, Tape, Var};

/// States and commands at offsets `m, m+1, ..., m+M_d`, one column per window.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub states: Vec<DMatrix<f64>>,
    pub controls: Vec<DMatrix<f64>>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.states.first().map_or(0, |s| s.ncols())
    }

    pub fn offsets(&self) -> usize {
        self.states.len()
    }

    pub fn validate(&self, dims: &KoopmanDims, depth: usize) -> Result<()> {
        let b = self.batch_size();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.states.len() < depth + 1 || self.controls.len() < depth + 1 {
            return Err(Error::InsufficientHorizon {
                needed: depth + 1,
                available: self.states.len().min(self.controls.len()),
            });
        }
        for s in &self.states {
            if s.shape() != (dims.p, b) {
                return Err(Error::Dimension {
                    expected: dims.p * b,
                    got: s.len(),
                    context: "window state block",
                });
            }
        }
        for u in &self.controls {
            if u.shape() != (dims.q, b) {
                return Err(Error::Dimension {
                    expected: dims.q * b,
                    got: u.len(),
                    context: "window control block",
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensingCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    pub c4: f64,
}

impl Default for SensingCoefficients {
    fn default() -> Self {
        Self {
            c1: 0.5,
            c2: 1.0,
            c3: 0.5,
            c4: 1.0,
        }
    }
}

impl SensingCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.c3, self.c4].iter().all(|c| *c > 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss coefficients must be positive".into()))
        }
    }

    pub fn combine(&self, b: &LossBreakdown) -> f64 {
        self.c1 * b.l1 + self.c2 * b.l2 + self.c3 * b.l3 + self.c4 * b.l4
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllingCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

impl Default for ControllingCoefficients {
    fn default() -> Self {
        Self {
            c1: 0.5,
            c2: 1.0,
            c3: 0.5,
        }
    }
}

impl ControllingCoefficients {
    pub fn validate(&self) -> Result<()> {
        if [self.c1, self.c2, self.c3].iter().all(|c| *c > 0.0 && c.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("loss coefficients must be positive".into()))
        }
    }
}

/// Term values; `l4` is zero for the controlling model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    pub l4: f64,
    pub total: f64,
}

/// Parameter nodes of a recorded sensing loss.
#[derive(Debug, Clone)]
pub struct SensingParamVars {
    pub k11: Var,
    pub k12: Var,
    pub q_tilde: Var,
    pub decoder: NetworkVars,
}

/// Gradients of the controller-side sensing parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingServerGrads {
    pub k11: DMatrix<f64>,
    pub k12: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
    pub decoder: GradientSet,
}

impl SensingParamVars {
    pub fn gradients(&self, g: &Gradients) -> Result<SensingServerGrads> {
        Ok(SensingServerGrads {
            k11: g.get(self.k11)?,
            k12: g.get(self.k12)?,
            q_tilde: g.get(self.q_tilde)?,
            decoder: self.decoder.gradients(g)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SensingLossGraph {
    pub total: Var,
    pub terms: [Var; 4],
    pub params: SensingParamVars,
    pub breakdown: LossBreakdown,
}

fn sum_vars(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let (&first, rest) = vars.split_first().ok_or(Error::EmptyBatch)?;
    let mut acc = first;
    for &v in rest {
        acc = tape.add(acc, v)?;
    }
    Ok(acc)
}

/// `sum ||a - b||^2`.
fn sq_dist(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff);
    Ok(tape.sum(sq))
}

/// `sum_l w_l v_l`, skipping the multiply for a unit weight.
fn weighted(tape: &mut Tape, terms: &[(Var, f64)]) -> Result<Var> {
    let scaled: Vec<Var> = terms
        .iter()
        .map(|&(v, w)| if w == 1.0 { v } else { tape.scale(v, w) })
        .collect();
    sum_vars(tape, &scaled)
}

fn active_sources(schedule: &WeightSchedule) -> Vec<usize> {
    let mut s: Vec<usize> = (1..=schedule.depth())
        .flat_map(|t| schedule.sources_for(t).into_iter().map(|(l, _)| l))
        .collect();
    s.sort_unstable();
    s.dedup();
    s
}

/// Record `c1 L1 + c2 L2 + c3 L3 + c4 L4` on `tape`.
///
/// `latents[k]` holds `g(x_{m+k})` for every offset (a leaf at the
/// controller, or encoder output when the whole model shares one tape).
/// `batch.states` are the state estimates `x^_{m+k}`.
pub fn sensing_loss_on_tape(
    tape: &mut Tape,
    model: &SensingModel,
    latents: &[Var],
    batch: &WindowBatch,
    schedule: &WeightSchedule,
    coeffs: &SensingCoefficients,
    q_x: &DMatrix<f64>,
) -> Result<SensingLossGraph> {
    coeffs.validate()?;
    let md = schedule.depth();
    batch.validate(&model.dims, md)?;
    if latents.len() < md + 1 {
        return Err(Error::InsufficientHorizon {
            needed: md + 1,
            available: latents.len(),
        });
    }
    let p = model.dims.p;
    if q_x.shape() != (p, p) {
        return Err(Error::Dimension {
            expected: p * p,
            got: q_x.len(),
            context: "Q_x",
        });
    }
    let b = batch.batch_size();

    let k11 = tape.leaf(model.k11.clone());
    let k12 = tape.leaf(model.k12.clone());
    let q_tilde = tape.leaf(model.q_tilde.clone());
    let u: Vec<Var> = batch.controls[..=md].iter().map(|c| tape.leaf(c.clone())).collect();

    // roll[l][k]: latent at offset k rolled forward from offset l.
    let mut roll: Vec<Vec<Option<Var>>> = vec![vec![None; md + 1]; md + 1];
    for l in active_sources(schedule) {
        let mut z = latents[l];
        for k in l + 1..=md {
            let a = tape.matmul(k11, z)?;
            let c = tape.matmul(k12, u[k - 1])?;
            z = tape.add(a, c)?;
            roll[l][k] = Some(z);
        }
    }
    let rolled = |l: usize, t: usize| roll[l][t].ok_or(Error::MissingCache("rollout not recorded"));

    let mut l2_terms = Vec::with_capacity(md);
    for t in 1..=md {
        let parts = schedule
            .sources_for(t)
            .into_iter()
            .map(|(l, w)| Ok((rolled(l, t)?, w)))
            .collect::<Result<Vec<_>>>()?;
        let pred = weighted(tape, &parts)?;
        l2_terms.push(sq_dist(tape, latents[t], pred)?);
    }
    let l2_sum = sum_vars(tape, &l2_terms)?;
    let l2 = tape.scale(l2_sum, 1.0 / (md * b) as f64);

    // One decoder pass over [g_m; u_m] and every rolled [z; u_{m+t}].
    let mut dec_inputs = vec![tape.concat_rows(&[latents[0], u[0]])?];
    let mut dec_index = Vec::new();
    for t in 1..=md {
        for (l, w) in schedule.sources_for(t) {
            let z = rolled(l, t)?;
            dec_inputs.push(tape.concat_rows(&[z, u[t]])?);
            dec_index.push((t, w, dec_inputs.len() - 1));
        }
    }
    let dec_in = tape.concat_cols(&dec_inputs)?;
    let (dec_out, decoder_vars) = model.decoder.forward_tape(tape, dec_in)?;
    let mut decoded = Vec::with_capacity(dec_inputs.len());
    for j in 0..dec_inputs.len() {
        decoded.push(tape.cols(dec_out, j * b, b)?);
    }

    let x: Vec<Var> = batch.states[..=md].iter().map(|s| tape.leaf(s.clone())).collect();
    let l1_sum = sq_dist(tape, x[0], decoded[0])?;
    let l1 = tape.scale(l1_sum, 1.0 / b as f64);

    let mut l3_terms = Vec::with_capacity(md);
    for t in 1..=md {
        let parts: Vec<(Var, f64)> = dec_index
            .iter()
            .filter(|(tt, _, _)| *tt == t)
            .map(|&(_, w, j)| (decoded[j], w))
            .collect();
        let xbar = weighted(tape, &parts)?;
        l3_terms.push(sq_dist(tape, x[t], xbar)?);
    }
    let l3_sum = sum_vars(tape, &l3_terms)?;
    let l3 = tape.scale(l3_sum, 1.0 / (md * b) as f64);

    // L4: (x^T Q_x x - g^T Q~ g)^2 per window.
    let x0 = &batch.states[0];
    let state_cost = DMatrix::from_fn(1, b, |_, j| {
        let c = x0.column(j);
        (c.transpose() * q_x * c)[(0, 0)]
    });
    let state_cost = tape.leaf(state_cost);
    let qg = tape.matmul(q_tilde, latents[0])?;
    let gqg = tape.hadamard(latents[0], qg)?;
    let latent_cost = tape.column_sums(gqg);
    let l4_sum = sq_dist(tape, state_cost, latent_cost)?;
    let l4 = tape.scale(l4_sum, 1.0 / b as f64);

    let weighted_terms = [
        tape.scale(l1, coeffs.c1),
        tape.scale(l2, coeffs.c2),
        tape.scale(l3, coeffs.c3),
        tape.scale(l4, coeffs.c4),
    ];
    let total = sum_vars(tape, &weighted_terms)?;

    let val = |v: Var| tape.value(v)[(0, 0)];
    let breakdown = LossBreakdown {
        l1: val(l1),
        l2: val(l2),
        l3: val(l3),
        l4: val(l4),
        total: val(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            detail: "non-finite sensing loss".into(),
        });
    }
    Ok(SensingLossGraph {
        total,
        terms: [l1, l2, l3, l4],
        params: SensingParamVars {
            k11,
            k12,
            q_tilde,
            decoder: decoder_vars,
        },
        breakdown,
    })
}

/// Loss value only; the encoder is evaluated off-tape.
pub fn sensing_loss_value(
    model: &SensingModel,
    batch: &WindowBatch,
    schedule: &WeightSchedule,
    coeffs: &SensingCoefficients,
    q_x: &DMatrix<f64>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let latents = batch.states[..=schedule.depth().min(batch.offsets().saturating_sub(1))]
        .iter()
        .map(|s| Ok(tape.leaf(model.encoder.encode_batch(s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(sensing_loss_on_tape(&mut tape, model, &latents, batch, schedule, coeffs, q_x)?.breakdown)
}

/// Parameter nodes of a recorded controlling loss.
#[derive(Debug, Clone)]
pub struct ControllingParamVars {
    pub k21: Var,
    pub k22: Var,
    pub decoder: NetworkVars,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllingGrads {
    pub k21: DMatrix<f64>,
    pub k22: DMatrix<f64>,
    pub decoder: GradientSet,
}

impl ControllingParamVars {
    pub fn gradients(&self, g: &Gradients) -> Result<ControllingGrads> {
        Ok(ControllingGrads {
            k21: g.get(self.k21)?,
            k22: g.get(self.k22)?,
            decoder: self.decoder.gradients(g)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct ControllingLossGraph {
    pub total: Var,
    pub params: ControllingParamVars,
    pub breakdown: LossBreakdown,
}

/// Record `c'1 L'1 + c'2 L'2 + c'3 L'3`. The encoder is frozen here, so
/// `latents[k] = g(x_{m+k})` enter as constants; `batch.states` are true states.
pub fn controlling_loss_on_tape(
    tape: &mut Tape,
    model: &ControllingModel,
    latents: &[DMatrix<f64>],
    batch: &WindowBatch,
    schedule: &WeightSchedule,
    coeffs: &ControllingCoefficients,
) -> Result<ControllingLossGraph> {
    coeffs.validate()?;
    model.validate()?;
    let md = schedule.depth();
    batch.validate(&model.dims, md)?;
    if latents.len() < md + 1 {
        return Err(Error::InsufficientHorizon {
            needed: md + 1,
            available: latents.len(),
        });
    }
    let b = batch.batch_size();

    let k21 = tape.leaf(model.k21.clone());
    let k22 = tape.leaf(model.k22.clone());
    let (k11, k12) = match (&model.latent_mode, &model.sensing_blocks) {
        (ActuatorLatent::Advance, Some((a, c))) => (Some(tape.leaf(a.clone())), Some(tape.leaf(c.clone()))),
        _ => (None, None),
    };
    let lat: Vec<Var> = latents[..=md].iter().map(|g| tape.leaf(g.clone())).collect();
    let u: Vec<Var> = batch.controls[..=md].iter().map(|c| tape.leaf(c.clone())).collect();

    // roll[l][k] = (latent, action) at offset k rolled from offset l.
    let mut roll: Vec<Vec<Option<(Var, Var)>>> = vec![vec![None; md + 1]; md + 1];
    for l in active_sources(schedule) {
        let (mut g, mut a) = (lat[l], u[l]);
        for k in l + 1..=md {
            let ga = tape.matmul(k21, g)?;
            let aa = tape.matmul(k22, a)?;
            let next_a = tape.add(ga, aa)?;
            g = match model.latent_mode {
                ActuatorLatent::Hold => g,
                ActuatorLatent::Fresh => lat[k],
                ActuatorLatent::Advance => {
                    let (k11, k12) = k11.zip(k12).ok_or_else(|| Error::Config("advance mode needs a copy of K11/K12".into()))?;
                    let zg = tape.matmul(k11, g)?;
                    let zu = tape.matmul(k12, a)?;
                    tape.add(zg, zu)?
                }
            };
            a = next_a;
            roll[l][k] = Some((g, a));
        }
    }
    let rolled = |l: usize, t: usize| roll[l][t].ok_or(Error::MissingCache("rollout not recorded"));

    let mut l2_terms = Vec::with_capacity(md);
    for t in 1..=md {
        let parts = schedule
            .sources_for(t)
            .into_iter()
            .map(|(l, w)| Ok((rolled(l, t)?.1, w)))
            .collect::<Result<Vec<_>>>()?;
        let pred = weighted(tape, &parts)?;
        l2_terms.push(sq_dist(tape, u[t], pred)?);
    }
    let l2_sum = sum_vars(tape, &l2_terms)?;
    let l2 = tape.scale(l2_sum, 1.0 / (md * b) as f64);

    let mut dec_inputs = vec![tape.concat_rows(&[lat[0], u[0]])?];
    let mut dec_index = Vec::new();
    for t in 1..=md {
        for (l, w) in schedule.sources_for(t) {
            let (g, a) = rolled(l, t)?;
            dec_inputs.push(tape.concat_rows(&[g, a])?);
            dec_index.push((t, w, dec_inputs.len() - 1));
        }
    }
    let dec_in = tape.concat_cols(&dec_inputs)?;
    let (dec_out, decoder_vars) = model.decoder.forward_tape(tape, dec_in)?;
    let mut decoded = Vec::with_capacity(dec_inputs.len());
    for j in 0..dec_inputs.len() {
        decoded.push(tape.cols(dec_out, j * b, b)?);
    }

    let x: Vec<Var> = batch.states[..=md].iter().map(|s| tape.leaf(s.clone())).collect();
    let l1_sum = sq_dist(tape, x[0], decoded[0])?;
    let l1 = tape.scale(l1_sum, 1.0 / b as f64);

    let mut l3_terms = Vec::with_capacity(md);
    for t in 1..=md {
        let parts: Vec<(Var, f64)> = dec_index
            .iter()
            .filter(|(tt, _, _)| *tt == t)
            .map(|&(_, w, j)| (decoded[j], w))
            .collect();
        let xbar = weighted(tape, &parts)?;
        l3_terms.push(sq_dist(tape, x[t], xbar)?);
    }
    let l3_sum = sum_vars(tape, &l3_terms)?;
    let l3 = tape.scale(l3_sum, 1.0 / (md * b) as f64);

    let weighted_terms = [tape.scale(l1, coeffs.c1), tape.scale(l2, coeffs.c2), tape.scale(l3, coeffs.c3)];
    let total = sum_vars(tape, &weighted_terms)?;
    let val = |v: Var| tape.value(v)[(0, 0)];
    let breakdown = LossBreakdown {
        l1: val(l1),
        l2: val(l2),
        l3: val(l3),
        l4: 0.0,
        total: val(total),
    };
    if !breakdown.total.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            detail: "non-finite controlling loss".into(),
        });
    }
    Ok(ControllingLossGraph {
        total,
        params: ControllingParamVars {
            k21,
            k22,
            decoder: decoder_vars,
        },
        breakdown,
    })
}

pub fn controlling_loss_value(
    model: &ControllingModel,
    batch: &WindowBatch,
    schedule: &WeightSchedule,
    coeffs: &ControllingCoefficients,
) -> Result<LossBreakdown> {
    let latents = batch
        .states
        .iter()
        .map(|s| model.encoder.encode_batch(s))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    Ok(controlling_loss_on_tape(&mut tape, model, &latents, batch, schedule, coeffs)?.breakdown)
}
