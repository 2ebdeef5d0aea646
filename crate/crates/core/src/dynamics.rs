//! Nonlinear cart-pole plant: vector field, fixed-step RK4 integration,
//! process noise and numeric linearization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plant state `[x, v, theta, omega]` (m, m/s, rad, rad/s).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector(pub DVector<f64>);

/// Control command; for the cart-pole a single horizontal force in N.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionVector(pub DVector<f64>);

impl StateVector {
    pub const CARTPOLE_DIM: usize = 4;

    pub fn new(values: &[f64]) -> Result<Self> {
        let v = DVector::from_column_slice(values);
        check_finite(&v, "state")?;
        Ok(Self(v))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }
}

impl ActionVector {
    pub fn new(values: &[f64]) -> Result<Self> {
        let v = DVector::from_column_slice(values);
        check_finite(&v, "action")?;
        Ok(Self(v))
    }

    pub fn scalar(u: f64) -> Self {
        Self(DVector::from_element(1, u))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(DVector::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub(crate) fn check_finite(v: &DVector<f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidState(format!("non-finite {what} entry")))
    }
}

/// Physical constants of the cart-pole. The gravitational constant and the
/// damping carry the sign convention of the reference model (`nu = -10`,
/// `delta = -2`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CartPoleParams {
    /// Pendulum mass (kg).
    pub m_p: f64,
    /// Cart mass (kg).
    pub m_c: f64,
    /// Pendulum length (m).
    pub length: f64,
    /// Gravitational acceleration (m/s^2).
    pub nu: f64,
    /// Cart damping (N s/m).
    pub delta: f64,
    /// Second mass in the `m_pm = m_p + m_m` coupling term; `None` means the
    /// cart mass.
    pub m_m: Option<f64>,
}

impl Default for CartPoleParams {
    fn default() -> Self {
        Self {
            m_p: 1.0,
            m_c: 5.0,
            length: 0.2,
            nu: -10.0,
            delta: -2.0,
            m_m: None,
        }
    }
}

impl CartPoleParams {
    pub fn validate(&self) -> Result<()> {
        let fields = [self.m_p, self.m_c, self.length, self.nu, self.delta];
        if fields.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("cart-pole parameters must be finite".into()));
        }
        if self.m_p <= 0.0 || self.m_c <= 0.0 || self.length <= 0.0 {
            return Err(Error::Config(
                "cart-pole masses and length must be positive".into(),
            ));
        }
        if let Some(m) = self.m_m {
            if !(m.is_finite() && m > 0.0) {
                return Err(Error::Config("m_m must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn m_pm(&self) -> f64 {
        self.m_p + self.m_m.unwrap_or(self.m_c)
    }
}

/// Additive Gaussian process noise applied once per control period.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Per-entry variance `N_s`.
    pub variance: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            variance: 0.0,
            seed: 0,
        }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(Error::Config("noise variance must be >= 0".into()));
        }
        Ok(())
    }
}

/// RK4 step `h` and control period `tau_o`; `tau_o` must be an integer
/// multiple of `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IntegratorConfig {
    pub h: f64,
    pub tau_o: f64,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            h: 0.01,
            tau_o: 0.01,
        }
    }
}

impl IntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.substeps().map(|_| ())
    }

    pub fn substeps(&self) -> Result<usize> {
        if !(self.h > 0.0 && self.tau_o > 0.0) {
            return Err(Error::Config("step and control period must be positive".into()));
        }
        let ratio = self.tau_o / self.h;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
            return Err(Error::Config(format!(
                "control period {} is not an integer multiple of step {}",
                self.tau_o, self.h
            )));
        }
        Ok(n as usize)
    }
}

/// Cart-pole vector field `[dx/dt, dv/dt, dtheta/dt, domega/dt]`.
pub fn cartpole_derivative(
    state: &DVector<f64>,
    action: &DVector<f64>,
    params: &CartPoleParams,
) -> Result<DVector<f64>> {
    if state.len() != 4 {
        return Err(Error::Dimension {
            expected: 4,
            got: state.len(),
            context: "cart-pole state",
        });
    }
    if action.len() != 1 {
        return Err(Error::Dimension {
            expected: 1,
            got: action.len(),
            context: "cart-pole action",
        });
    }
    check_finite(state, "state")?;
    check_finite(action, "action")?;
    Ok(cartpole_field(state, action[0], params))
}

#[inline]
fn cartpole_field(s: &DVector<f64>, u: f64, p: &CartPoleParams) -> DVector<f64> {
    let (v, theta, omega) = (s[1], s[2], s[3]);
    let (st, ct) = theta.sin_cos();
    let (mp, mc, l, nu, delta) = (p.m_p, p.m_c, p.length, p.nu, p.delta);
    let denom = mp * l * l * (mc + mp * (1.0 - ct * ct));
    let swing = mp * l * omega * omega * st - delta * v;
    let dv = (-mp * mp * l * l * nu * ct * st + mp * l * l * swing + mp * l * l * u) / denom;
    let domega = (p.m_pm() * mp * nu * l * st - mp * l * ct * swing + mp * l * ct * u) / denom;
    DVector::from_vec(vec![v, dv, omega, domega])
}

/// One classic fourth-order Runge-Kutta step with the action held constant.
pub fn rk4_step<F>(f: F, state: &DVector<f64>, action: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let k1 = f(state, action)?;
    let k2 = f(&(state + &k1 * (h / 2.0)), action)?;
    let k3 = f(&(state + &k2 * (h / 2.0)), action)?;
    let k4 = f(&(state + &k3 * h), action)?;
    let next = state + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    if next.iter().all(|x| x.is_finite()) {
        Ok(next)
    } else {
        Err(Error::IntegrationDiverged { time: h })
    }
}

/// Integrate the cart-pole for one control period under zero-order hold.
pub fn integrate_period(
    state: &DVector<f64>,
    action: &DVector<f64>,
    params: &CartPoleParams,
    integrator: &IntegratorConfig,
) -> Result<DVector<f64>> {
    let substeps = integrator.substeps()?;
    let mut x = state.clone();
    for i in 0..substeps {
        x = rk4_step(|s, a| cartpole_derivative(s, a, params), &x, action, integrator.h).map_err(
            |e| match e {
                Error::IntegrationDiverged { .. } => Error::IntegrationDiverged {
                    time: (i + 1) as f64 * integrator.h,
                },
                other => other,
            },
        )?;
    }
    Ok(x)
}

/// `x_{m+1} = f(x_m, u_m) + n_s`: integrate one control period then add one
/// Gaussian draw per entry with variance `noise.variance`.
pub fn step_plant<R: Rng + ?Sized>(
    state: &StateVector,
    action: &ActionVector,
    params: &CartPoleParams,
    integrator: &IntegratorConfig,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<StateVector> {
    let mut next = integrate_period(&state.0, &action.0, params, integrator)?;
    if noise.variance > 0.0 {
        let normal = Normal::new(0.0, noise.variance.sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        for x in next.iter_mut() {
            *x += normal.sample(rng);
        }
    }
    Ok(StateVector(next))
}

/// Central-difference Jacobians `(df/dx, df/du)` of the cart-pole field.
pub fn numeric_jacobian(
    state: &StateVector,
    action: &ActionVector,
    params: &CartPoleParams,
    eps: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    if !(eps > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let p = state.dim();
    let q = action.dim();
    let mut a = DMatrix::zeros(p, p);
    let mut b = DMatrix::zeros(p, q);
    for j in 0..p {
        let mut plus = state.0.clone();
        let mut minus = state.0.clone();
        plus[j] += eps;
        minus[j] -= eps;
        let df = (cartpole_derivative(&plus, &action.0, params)?
            - cartpole_derivative(&minus, &action.0, params)?)
            / (2.0 * eps);
        a.set_column(j, &df);
    }
    for j in 0..q {
        let mut plus = action.0.clone();
        let mut minus = action.0.clone();
        plus[j] += eps;
        minus[j] -= eps;
        let df = (cartpole_derivative(&state.0, &plus, params)?
            - cartpole_derivative(&state.0, &minus, params)?)
            / (2.0 * eps);
        b.set_column(j, &df);
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let f = cartpole_derivative(&dv(&[0.0; 4]), &dv(&[0.0]), &CartPoleParams::default()).unwrap();
        assert!(f.amax() < 1e-12);
    }

    #[test]
    fn velocity_only_field_matches_hand_evaluation() {
        let f = cartpole_derivative(&dv(&[0.0, 1.0, 0.0, 0.0]), &dv(&[0.0]), &CartPoleParams::default())
            .unwrap();
        let expected = [1.0, 0.4, 0.0, -2.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{f}");
        }
    }

    #[test]
    fn unit_force_field_matches_hand_evaluation() {
        let f = cartpole_derivative(&dv(&[0.0; 4]), &dv(&[1.0]), &CartPoleParams::default()).unwrap();
        let expected = [0.0, 0.2, 0.0, 1.0];
        for (a, b) in f.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{f}");
        }
    }

    #[test]
    fn non_finite_state_rejected() {
        let err = cartpole_derivative(&dv(&[f64::NAN, 0.0, 0.0, 0.0]), &dv(&[0.0]), &CartPoleParams::default());
        assert!(matches!(err, Err(Error::InvalidState(_))));
    }

    #[test]
    fn rk4_zero_field_is_identity() {
        let x = dv(&[0.3, -1.0, 2.0]);
        let out = rk4_step(|s, _| Ok(DVector::zeros(s.len())), &x, &dv(&[0.0]), 0.1).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn rk4_scalar_decay() {
        let out = rk4_step(|s, _| Ok(-s.clone()), &dv(&[1.0]), &dv(&[0.0]), 0.1).unwrap();
        // 1 - h + h^2/2 - h^3/6 + h^4/24 at h = 0.1
        assert!((out[0] - 0.904_837_5).abs() < 1e-12);
        assert!((out[0] - (-0.1f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn rk4_reports_divergence() {
        let err = rk4_step(|s, _| Ok(s.map(|x| x * 1e308)), &dv(&[1e10]), &dv(&[0.0]), 1.0);
        assert!(matches!(err, Err(Error::IntegrationDiverged { .. })));
    }

    #[test]
    fn integrator_requires_integer_substeps() {
        assert!(IntegratorConfig { h: 0.003, tau_o: 0.01 }.validate().is_err());
        assert_eq!(IntegratorConfig { h: 0.0025, tau_o: 0.01 }.substeps().unwrap(), 4);
        assert_eq!(IntegratorConfig::default().substeps().unwrap(), 1);
    }

    #[test]
    fn params_validation() {
        assert!(CartPoleParams { m_c: 0.0, ..Default::default() }.validate().is_err());
        assert!(CartPoleParams::default().validate().is_ok());
        assert_eq!(CartPoleParams::default().m_pm(), 6.0);
    }

    #[test]
    fn noiseless_step_keeps_equilibrium() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = step_plant(
            &StateVector::zeros(4),
            &ActionVector::zeros(1),
            &CartPoleParams::default(),
            &IntegratorConfig::default(),
            &NoiseSpec::default(),
            &mut rng,
        )
        .unwrap();
        assert_eq!(out, StateVector::zeros(4));
    }

    #[test]
    fn seeded_step_is_deterministic() {
        let noise = NoiseSpec { variance: 0.01, seed: 9 };
        let x = StateVector::new(&[0.1, 0.2, -0.3, 0.4]).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            step_plant(
                &x,
                &ActionVector::scalar(0.7),
                &CartPoleParams::default(),
                &IntegratorConfig::default(),
                &noise,
                &mut rng,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.0.iter().zip(b.0.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn jacobian_kinematic_entries() {
        let (a, b) = numeric_jacobian(
            &StateVector::zeros(4),
            &ActionVector::zeros(1),
            &CartPoleParams::default(),
            1e-6,
        )
        .unwrap();
        assert!((a[(0, 1)] - 1.0).abs() < 1e-6);
        assert!((a[(1, 1)] - 0.4).abs() < 1e-6);
        assert!((b[(1, 0)] - 0.2).abs() < 1e-6);
    }
}
