//! Infinite-horizon discrete LQR: Riccati solver, feedback gain and the
//! Jacobian-linearization baseline controller.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dynamics::{numeric_jacobian, ActionVector, CartPoleParams, StateVector};
use crate::error::{Error, Result};
use crate::koopman::project_psd;

/// Cost weights. `q_g` weights the latent deviation, `q_x` the plant state
/// deviation (Jacobian baseline and representation-cost loss).
#[derive(Debug, Clone, PartialEq)]
pub struct LqrWeights {
    pub q_g: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_x: DMatrix<f64>,
}

impl LqrWeights {
    pub fn validate(&self) -> Result<()> {
        if min_sym_eigenvalue(&self.q_g)? < -1e-10 {
            return Err(Error::Config("Q_g must be positive semi-definite".into()));
        }
        if min_sym_eigenvalue(&self.q_x)? < -1e-10 {
            return Err(Error::Config("Q_x must be positive semi-definite".into()));
        }
        if min_sym_eigenvalue(&self.r)? <= 0.0 {
            return Err(Error::Config("R must be positive definite".into()));
        }
        Ok(())
    }
}

fn min_sym_eigenvalue(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::Config("weight matrix must be square".into()));
    }
    let sym = (m + m.transpose()) * 0.5;
    Ok(sym.symmetric_eigenvalues().min())
}

/// Riccati solution and the gain it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// Spectral radius of `A - B K`.
    pub closed_loop_radius: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DareOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for DareOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 10_000,
        }
    }
}

fn check_system(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<()> {
    let n = a.nrows();
    let m = b.ncols();
    if !a.is_square() || b.nrows() != n || q.shape() != (n, n) || r.shape() != (m, m) {
        return Err(Error::Dimension {
            expected: n,
            got: b.nrows(),
            context: "Riccati system shapes",
        });
    }
    Ok(())
}

fn riccati_map(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let at = a.transpose();
    let bt = b.transpose();
    let pa = p * a;
    let pb = p * b;
    let s = r + &bt * &pb;
    let k = s
        .clone()
        .cholesky()
        .map(|c| c.solve(&(&bt * &pa)))
        .or_else(|| s.clone().lu().solve(&(&bt * &pa)))
        .ok_or_else(|| Error::InvalidState("singular R + B'PB".into()))?;
    let next = &at * &pa - (&at * &pb) * k + q;
    Ok((&next + next.transpose()) * 0.5)
}

/// Max-norm residual `|P - (A'PA - A'PB (B'PB + R)^-1 B'PA + Q)|`.
pub fn dare_residual(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: &DMatrix<f64>,
) -> Result<f64> {
    Ok((riccati_map(a, b, q, r, p)? - p).amax())
}

/// Fixed-point Riccati iteration from `P_0 = Q`.
pub fn solve_dare(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<DareSolution> {
    check_system(a, b, q, r)?;
    let mut p = (q + q.transpose()) * 0.5;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let next = riccati_map(a, b, q, r, &p)?;
        let change = (&next - &p).amax();
        p = next;
        if !change.is_finite() {
            return Err(Error::SolverFailed {
                iterations: it,
                residual: change,
            });
        }
        if change < opts.tol {
            residual = dare_residual(a, b, q, r, &p)?;
            if residual < opts.tol {
                return finish(a, b, r, p, it, residual);
            }
        } else {
            residual = change;
        }
    }
    Err(Error::SolverFailed {
        iterations: opts.max_iter,
        residual,
    })
}

/// Structure-preserving doubling; converges quadratically and serves as an
/// independent route to the same stabilizing solution.
pub fn solve_dare_doubling(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
    opts: DareOptions,
) -> Result<DareSolution> {
    check_system(a, b, q, r)?;
    let n = a.nrows();
    let eye = DMatrix::<f64>::identity(n, n);
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidState("R is singular".into()))?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = (q + q.transpose()) * 0.5;
    for it in 1..=opts.max_iter.min(200) {
        let w = (&eye + &gk * &hk)
            .try_inverse()
            .ok_or_else(|| Error::SolverFailed { iterations: it, residual: f64::NAN })?;
        let a_next = &ak * &w * &ak;
        let g_next = &gk + &ak * &w * &gk * ak.transpose();
        let h_next = &hk + ak.transpose() * &hk * &w * &ak;
        let h_next = (&h_next + h_next.transpose()) * 0.5;
        let change = (&h_next - &hk).amax();
        ak = a_next;
        gk = g_next;
        hk = h_next;
        if !change.is_finite() {
            break;
        }
        if change <= opts.tol * hk.amax().max(1.0) {
            let residual = dare_residual(a, b, q, r, &hk)?;
            return finish(a, b, r, hk, it, residual);
        }
    }
    Err(Error::SolverFailed {
        iterations: opts.max_iter.min(200),
        residual: dare_residual(a, b, q, r, &hk).unwrap_or(f64::NAN),
    })
}

fn finish(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    r: &DMatrix<f64>,
    p: DMatrix<f64>,
    iterations: usize,
    residual: f64,
) -> Result<DareSolution> {
    let gain = lqr_gain(&p, a, b, r)?;
    let closed_loop_radius = spectral_radius(&(a - b * &gain));
    Ok(DareSolution {
        p,
        gain,
        iterations,
        residual,
        closed_loop_radius,
    })
}

/// `K = (R + B'PB)^-1 B'PA`.
pub fn lqr_gain(p: &DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let bt = b.transpose();
    let s = r + &bt * p * b;
    let rhs = &bt * p * a;
    s.clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidState("singular R + B'PB".into()))
}

/// `u = -K g`.
pub fn optimal_action(gain: &DMatrix<f64>, latent: &DVector<f64>) -> Result<ActionVector> {
    if gain.ncols() != latent.len() {
        return Err(Error::Dimension {
            expected: gain.ncols(),
            got: latent.len(),
            context: "LQR gain vs latent",
        });
    }
    Ok(ActionVector(-(gain * latent)))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// LQR on the forward-Euler discretization of the cart-pole linearized at
/// the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianController {
    pub a_d: DMatrix<f64>,
    pub b_d: DMatrix<f64>,
    pub solution: DareSolution,
}

impl JacobianController {
    pub fn build(params: &CartPoleParams, tau_o: f64, q_x: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        params.validate()?;
        let (a_c, b_c) = numeric_jacobian(&StateVector::zeros(4), &ActionVector::zeros(1), params, 1e-6)?;
        let a_d = DMatrix::identity(4, 4) + &a_c * tau_o;
        let b_d = &b_c * tau_o;
        let solution = solve_dare(&a_d, &b_d, q_x, r, DareOptions { tol: 1e-10, max_iter: 100_000 })?;
        Ok(Self { a_d, b_d, solution })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.solution.gain
    }

    pub fn control(&self, state: &DVector<f64>) -> Result<ActionVector> {
        optimal_action(&self.solution.gain, state)
    }
}

/// LQR over a learned latent model: `(K11, K12)` with `Q_g = psd(Q~_g)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanController {
    pub q_g: DMatrix<f64>,
    pub solution: DareSolution,
}

impl KoopmanController {
    /// Doubling first; the plain fixed point is the fallback.
    pub fn build(k11: &DMatrix<f64>, k12: &DMatrix<f64>, q_tilde: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<Self> {
        let q_g = project_psd(q_tilde)?;
        let solution = match solve_dare_doubling(k11, k12, &q_g, r, DareOptions::default()) {
            Ok(s) if s.residual.is_finite() && s.residual < 1e-8 * s.p.amax().max(1.0) => s,
            _ => solve_dare(k11, k12, &q_g, r, DareOptions { tol: 1e-10, max_iter: 200_000 })?,
        };
        Ok(Self { q_g, solution })
    }

    pub fn gain(&self) -> &DMatrix<f64> {
        &self.solution.gain
    }

    pub fn control(&self, latent: &DVector<f64>) -> Result<ActionVector> {
        optimal_action(&self.solution.gain, latent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(x: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, x)
    }

    #[test]
    fn lyapunov_case_geometric_series() {
        let sol = solve_dare(&s(0.5), &s(0.0), &s(1.0), &s(1.0), DareOptions::default()).unwrap();
        assert!((sol.p[0] - 4.0 / 3.0).abs() < 1e-9);
        assert_eq!(sol.gain[0], 0.0);
    }

    #[test]
    fn golden_ratio_case() {
        let sol = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(1.0), DareOptions::default()).unwrap();
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((sol.p[0] - phi).abs() < 1e-9);
        assert!((sol.gain[0] - (phi - 1.0)).abs() < 1e-9);
        assert!(sol.closed_loop_radius < 1.0);
    }

    #[test]
    fn zero_cost_gives_zero_solution() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]);
        let b = DMatrix::from_row_slice(2, 1, &[1.0, 2.0]);
        let sol = solve_dare(&a, &b, &DMatrix::zeros(2, 2), &s(1.0), DareOptions::default()).unwrap();
        assert!(sol.p.amax() < 1e-15);
    }

    #[test]
    fn doubling_agrees_with_fixed_point() {
        let sol = solve_dare_doubling(&s(1.0), &s(1.0), &s(1.0), &s(1.0), DareOptions::default()).unwrap();
        assert!((sol.p[0] - (1.0 + 5f64.sqrt()) / 2.0).abs() < 1e-9);
    }

    #[test]
    fn unstabilizable_reports_failure() {
        let err = solve_dare(&s(2.0), &s(0.0), &s(1.0), &s(1.0), DareOptions { tol: 1e-10, max_iter: 200 });
        assert!(matches!(err, Err(Error::SolverFailed { .. })));
    }

    #[test]
    fn optimal_action_hand_case() {
        let u = optimal_action(&s(0.618), &DVector::from_element(1, 1.0)).unwrap();
        assert!((u.0[0] + 0.618).abs() < 1e-15);
        let zero = optimal_action(&s(0.618), &DVector::zeros(1)).unwrap();
        assert_eq!(zero.0[0], 0.0);
        assert!(optimal_action(&s(0.618), &DVector::zeros(2)).is_err());
    }

    #[test]
    fn jacobian_discretization_entries() {
        let c = JacobianController::build(
            &CartPoleParams::default(),
            0.01,
            &DMatrix::identity(4, 4),
            &s(1.0),
        )
        .unwrap();
        assert!((c.a_d[(0, 1)] - 0.01).abs() < 1e-9);
        assert!(c.solution.closed_loop_radius < 1.0);
    }

    #[test]
    fn weights_validation() {
        let w = LqrWeights {
            q_g: DMatrix::identity(2, 2),
            r: s(0.0),
            q_x: DMatrix::identity(4, 4),
        };
        assert!(w.validate().is_err());
    }
}
