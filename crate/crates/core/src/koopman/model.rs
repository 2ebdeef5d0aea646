use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{Network, NetworkVars, Tape, Var};

/// Plant state, action and latent dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KoopmanDims {
    pub p: usize,
    pub q: usize,
    pub d: usize,
}

impl KoopmanDims {
    pub fn cartpole(d: usize) -> Self {
        Self { p: 4, q: 1, d }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.q == 0 || self.d == 0 {
            return Err(Error::Config("p, q and d must all be >= 1".into()));
        }
        Ok(())
    }
}

/// Layer widths. The decoder mirrors the encoder after two `(d+q)`-wide
/// layers: `(d+q) -> (d+q) -> (d+q) -> 32 -> 64 -> 128 -> p` by default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub encoder_hidden: Vec<usize>,
    /// Subtract the encoding of the origin so that `g(0) = 0`.
    pub anchored: bool,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128, 64, 32],
            anchored: true,
        }
    }
}

impl Architecture {
    pub fn micro(width: usize) -> Self {
        Self {
            encoder_hidden: vec![width, width],
            anchored: true,
        }
    }

    pub fn encoder_widths(&self, dims: &KoopmanDims) -> Vec<usize> {
        let mut w = vec![dims.p];
        w.extend(&self.encoder_hidden);
        w.push(dims.d);
        w
    }

    pub fn decoder_widths(&self, dims: &KoopmanDims) -> Vec<usize> {
        let dq = dims.d + dims.q;
        let mut w = vec![dq, dq, dq];
        w.extend(self.encoder_hidden.iter().rev());
        w.push(dims.p);
        w
    }
}

/// `[latent; command]`, the `y_m` / `z_m` vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedLatent {
    pub latent: DVector<f64>,
    pub command: DVector<f64>,
}

impl AugmentedLatent {
    pub fn new(latent: DVector<f64>, command: DVector<f64>) -> Self {
        Self { latent, command }
    }

    pub fn concat(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.latent.len() + self.command.len());
        v.rows_mut(0, self.latent.len()).copy_from(&self.latent);
        v.rows_mut(self.latent.len(), self.command.len()).copy_from(&self.command);
        v
    }
}

/// Shared encoder; optionally anchored so the origin maps to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub net: Network,
    pub anchored: bool,
}

impl Encoder {
    pub fn out_dim(&self) -> usize {
        self.net.out_dim()
    }

    /// Batch encode, one state per column.
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if !self.anchored {
            return self.net.forward(x);
        }
        let mut with_origin = DMatrix::zeros(x.nrows(), x.ncols() + 1);
        with_origin.columns_mut(0, x.ncols()).copy_from(x);
        let out = self.net.forward(&with_origin)?;
        let origin = out.column(x.ncols()).clone_owned();
        let mut g = out.columns(0, x.ncols()).clone_owned();
        for mut c in g.column_iter_mut() {
            c -= &origin;
        }
        Ok(g)
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        let g = self.encode_batch(&DMatrix::from_column_slice(x.len(), 1, x.as_slice()))?;
        Ok(g.column(0).clone_owned())
    }

    /// Record the encoding of `x` (`p x B`) on `tape`.
    pub fn encode_tape(&self, tape: &mut Tape, x: &DMatrix<f64>) -> Result<(Var, NetworkVars)> {
        if x.nrows() != self.net.in_dim() {
            return Err(Error::Dimension {
                expected: self.net.in_dim(),
                got: x.nrows(),
                context: "encoder input",
            });
        }
        if !self.anchored {
            let input = tape.leaf(x.clone());
            return self.net.forward_tape(tape, input);
        }
        let mut with_origin = DMatrix::zeros(x.nrows(), x.ncols() + 1);
        with_origin.columns_mut(0, x.ncols()).copy_from(x);
        let input = tape.leaf(with_origin);
        let (out, vars) = self.net.forward_tape(tape, input)?;
        Ok((tape.anchor_last(out)?, vars))
    }

    /// Encode every window offset in one pass and slice the result back into
    /// one `d x B` node per offset.
    pub fn encode_window_tape(&self, tape: &mut Tape, states: &[DMatrix<f64>]) -> Result<(Vec<Var>, NetworkVars)> {
        let b = states.first().ok_or(Error::EmptyBatch)?.ncols();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut all = DMatrix::zeros(self.net.in_dim(), b * states.len());
        for (k, s) in states.iter().enumerate() {
            if s.shape() != (self.net.in_dim(), b) {
                return Err(Error::Dimension {
                    expected: self.net.in_dim() * b,
                    got: s.len(),
                    context: "window state block",
                });
            }
            all.columns_mut(k * b, b).copy_from(s);
        }
        let (g, vars) = self.encode_tape(tape, &all)?;
        let mut out = Vec::with_capacity(states.len());
        for k in 0..states.len() {
            out.push(tape.cols(g, k * b, b)?);
        }
        Ok((out, vars))
    }
}

fn check_len(v: &DVector<f64>, expected: usize, context: &'static str) -> Result<()> {
    if v.len() != expected {
        return Err(Error::Dimension {
            expected,
            got: v.len(),
            context,
        });
    }
    Ok(())
}

/// `K11 g + K12 u`.
pub fn latent_step(k11: &DMatrix<f64>, k12: &DMatrix<f64>, latent: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(latent, k11.ncols(), "latent vs K11")?;
    check_len(u, k12.ncols(), "command vs K12")?;
    if k11.nrows() != k12.nrows() {
        return Err(Error::Dimension {
            expected: k11.nrows(),
            got: k12.nrows(),
            context: "K11/K12 rows",
        });
    }
    Ok(k11 * latent + k12 * u)
}

/// Iterate [`latent_step`] with `controls[k]` applied at step `k`; returns
/// the `depth` successor latents.
pub fn rollout_latent(
    k11: &DMatrix<f64>,
    k12: &DMatrix<f64>,
    latent: &DVector<f64>,
    controls: &[DVector<f64>],
    depth: usize,
) -> Result<Vec<DVector<f64>>> {
    if controls.len() < depth {
        return Err(Error::InsufficientHorizon {
            needed: depth,
            available: controls.len(),
        });
    }
    let mut out = Vec::with_capacity(depth);
    let mut z = latent.clone();
    for u in &controls[..depth] {
        z = latent_step(k11, k12, &z, u)?;
        out.push(z.clone());
    }
    Ok(out)
}

/// `K'21 g + K'22 u`.
pub fn action_step(k21: &DMatrix<f64>, k22: &DMatrix<f64>, latent: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    check_len(latent, k21.ncols(), "latent vs K'21")?;
    check_len(u, k22.ncols(), "command vs K'22")?;
    Ok(k21 * latent + k22 * u)
}

/// Controls feeding a state prediction.
pub enum ControlSource<'a> {
    /// `u_{m+1}, u_{m+2}, ...` as recorded.
    Recorded(&'a [DVector<f64>]),
    /// Commands computed from each predicted latent.
    Policy(&'a dyn Fn(&DVector<f64>) -> Result<DVector<f64>>),
}

/// One predicted step.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedStep {
    pub latent: DVector<f64>,
    pub command: DVector<f64>,
    pub state: DVector<f64>,
}

/// Sensing model: encoder at the sensor, `K_s = [K11 | K12]`, decoder and
/// the trainable latent cost `Q~_g` at the controller.
#[derive(Debug, Clone, PartialEq)]
pub struct SensingModel {
    pub dims: KoopmanDims,
    pub encoder: Encoder,
    pub k11: DMatrix<f64>,
    pub k12: DMatrix<f64>,
    pub decoder: Network,
    pub q_tilde: DMatrix<f64>,
}

impl SensingModel {
    /// `K11 = I`, `K12 = 0`, `Q~_g = I`; networks He-initialized.
    pub fn new<R: Rng + ?Sized>(dims: KoopmanDims, arch: &Architecture, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let encoder = Encoder {
            net: Network::mlp(&arch.encoder_widths(&dims), rng)?,
            anchored: arch.anchored,
        };
        let decoder = Network::mlp(&arch.decoder_widths(&dims), rng)?;
        Ok(Self {
            dims,
            encoder,
            k11: DMatrix::identity(dims.d, dims.d),
            k12: DMatrix::zeros(dims.d, dims.q),
            decoder,
            q_tilde: DMatrix::identity(dims.d, dims.d),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let KoopmanDims { p, q, d } = self.dims;
        let ok = self.encoder.net.in_dim() == p
            && self.encoder.out_dim() == d
            && self.k11.shape() == (d, d)
            && self.k12.shape() == (d, q)
            && self.decoder.in_dim() == d + q
            && self.decoder.out_dim() == p
            && self.q_tilde.shape() == (d, d);
        if !ok {
            return Err(Error::Config("sensing model block shapes are inconsistent".into()));
        }
        self.encoder.net.validate()?;
        self.decoder.validate()
    }

    /// `K_s = [K11 | K12]`.
    pub fn koopman_state(&self) -> DMatrix<f64> {
        let KoopmanDims { q, d, .. } = self.dims;
        let mut k = DMatrix::zeros(d, d + q);
        k.columns_mut(0, d).copy_from(&self.k11);
        k.columns_mut(d, q).copy_from(&self.k12);
        k
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        check_len(x, self.dims.p, "state")?;
        self.encoder.encode(x)
    }

    pub fn decode(&self, y: &AugmentedLatent) -> Result<DVector<f64>> {
        check_len(&y.latent, self.dims.d, "latent")?;
        check_len(&y.command, self.dims.q, "command")?;
        self.decoder.forward_vec(&y.concat())
    }

    pub fn latent_step(&self, latent: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        latent_step(&self.k11, &self.k12, latent, u)
    }

    /// Predicted states `x_{m+1..m+depth}` from `y_m`.
    pub fn predict_states(&self, y: &AugmentedLatent, depth: usize, controls: ControlSource<'_>) -> Result<Vec<PredictedStep>> {
        if depth == 0 {
            return Err(Error::Config("prediction depth must be >= 1".into()));
        }
        if let ControlSource::Recorded(c) = &controls {
            if c.len() < depth {
                return Err(Error::InsufficientHorizon {
                    needed: depth,
                    available: c.len(),
                });
            }
        }
        let mut latent = y.latent.clone();
        let mut command = y.command.clone();
        let mut out = Vec::with_capacity(depth);
        for k in 0..depth {
            latent = self.latent_step(&latent, &command)?;
            command = match &controls {
                ControlSource::Recorded(c) => c[k].clone(),
                ControlSource::Policy(policy) => policy(&latent)?,
            };
            let state = self.decode(&AugmentedLatent::new(latent.clone(), command.clone()))?;
            out.push(PredictedStep {
                latent: latent.clone(),
                command: command.clone(),
                state,
            });
        }
        Ok(out)
    }
}

/// Which latent the actuator pairs with its predicted commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ActuatorLatent {
    /// Keep the latent of the last delivered command.
    #[default]
    Hold,
    /// Advance the held latent with a local copy of `K11`/`K12`.
    Advance,
    /// Use a fresh encoding from the co-located sensor.
    Fresh,
}

/// Controlling model at the actuator: encoder snapshot, `K'_a = [K'21 | K'22]`
/// and its own decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllingModel {
    pub dims: KoopmanDims,
    pub encoder: Encoder,
    pub k21: DMatrix<f64>,
    pub k22: DMatrix<f64>,
    pub decoder: Network,
    pub latent_mode: ActuatorLatent,
    /// Local copy of the sensing blocks, used by [`ActuatorLatent::Advance`].
    pub sensing_blocks: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl ControllingModel {
    /// `K'21 = 0`, `K'22 = I`; the encoder is a snapshot of the sensing one.
    pub fn new<R: Rng + ?Sized>(
        dims: KoopmanDims,
        arch: &Architecture,
        encoder: Encoder,
        latent_mode: ActuatorLatent,
        rng: &mut R,
    ) -> Result<Self> {
        dims.validate()?;
        if encoder.out_dim() != dims.d {
            return Err(Error::Dimension {
                expected: dims.d,
                got: encoder.out_dim(),
                context: "shared encoder output",
            });
        }
        Ok(Self {
            dims,
            encoder,
            k21: DMatrix::zeros(dims.q, dims.d),
            k22: DMatrix::identity(dims.q, dims.q),
            decoder: Network::mlp(&arch.decoder_widths(&dims), rng)?,
            latent_mode,
            sensing_blocks: None,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let KoopmanDims { p, q, d } = self.dims;
        let ok = self.encoder.out_dim() == d
            && self.k21.shape() == (q, d)
            && self.k22.shape() == (q, q)
            && self.decoder.in_dim() == d + q
            && self.decoder.out_dim() == p;
        if !ok {
            return Err(Error::Config("controlling model block shapes are inconsistent".into()));
        }
        if self.latent_mode == ActuatorLatent::Advance && self.sensing_blocks.is_none() {
            return Err(Error::Config("advance mode needs a copy of K11/K12".into()));
        }
        self.decoder.validate()
    }

    /// `K'_a = [K'21 | K'22]`.
    pub fn koopman_action(&self) -> DMatrix<f64> {
        let KoopmanDims { q, d, .. } = self.dims;
        let mut k = DMatrix::zeros(q, d + q);
        k.columns_mut(0, d).copy_from(&self.k21);
        k.columns_mut(d, q).copy_from(&self.k22);
        k
    }

    pub fn encode(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.encoder.encode(x)
    }

    pub fn decode(&self, z: &AugmentedLatent) -> Result<DVector<f64>> {
        self.decoder.forward_vec(&z.concat())
    }

    pub fn action_step(&self, latent: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        action_step(&self.k21, &self.k22, latent, u)
    }

    /// Next latent paired with a predicted command, given the latent used
    /// at the previous step. `fresh` is only consulted in `Fresh` mode.
    pub fn next_latent(
        &self,
        latent: &DVector<f64>,
        command: &DVector<f64>,
        fresh: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>> {
        match self.latent_mode {
            ActuatorLatent::Hold => Ok(latent.clone()),
            ActuatorLatent::Advance => {
                let (k11, k12) = self
                    .sensing_blocks
                    .as_ref()
                    .ok_or_else(|| Error::Config("advance mode needs a copy of K11/K12".into()))?;
                latent_step(k11, k12, latent, command)
            }
            ActuatorLatent::Fresh => fresh
                .cloned()
                .ok_or_else(|| Error::Config("fresh mode needs the current encoding".into())),
        }
    }

    /// Commands `u_{m+1..m+depth}` predicted from `z_m`. `fresh_latents[k]`
    /// supplies `g(x_{m+k+1})` in `Fresh` mode.
    pub fn predict_actions(
        &self,
        z: &AugmentedLatent,
        depth: usize,
        fresh_latents: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>> {
        if depth == 0 {
            return Err(Error::Config("prediction depth must be >= 1".into()));
        }
        let mut latent = z.latent.clone();
        let mut u = z.command.clone();
        let mut out = Vec::with_capacity(depth);
        for k in 0..depth {
            let next_u = self.action_step(&latent, &u)?;
            if k + 1 < depth {
                latent = self.next_latent(&latent, &u, fresh_latents.get(k))?;
            }
            u = next_u;
            out.push(u.clone());
        }
        Ok(out)
    }
}
