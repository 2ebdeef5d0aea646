//! Discrete algebraic Riccati equation: closed forms, both solvers, and a
//! latent-space LQR on a hand-built Koopman model.

use nalgebra::{DMatrix, DVector};
use split_koopman::control::{dare_residual, solve_dare, solve_dare_doubling, DareOptions, KoopmanController};

fn main() -> split_koopman::Result<()> {
    let s = |x: f64| DMatrix::from_element(1, 1, x);
    let gold = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(1.0), DareOptions::default())?;
    println!("a=b=q=r=1: P = {:.12} (golden ratio {:.12}), K = {:.12}", gold.p[0], (1.0 + 5f64.sqrt()) / 2.0, gold.gain[0]);

    let a = DMatrix::from_row_slice(3, 3, &[1.1, 0.2, 0.0, 0.0, 0.9, 0.3, 0.1, 0.0, 1.05]);
    let b = DMatrix::from_row_slice(3, 1, &[0.0, 0.1, 1.0]);
    let q = DMatrix::identity(3, 3);
    let r = s(0.5);
    let fixed = solve_dare(&a, &b, &q, &r, DareOptions::default())?;
    let dbl = solve_dare_doubling(&a, &b, &q, &r, DareOptions::default())?;
    println!("\nfixed point: {} iterations, residual {:.1e}", fixed.iterations, fixed.residual);
    println!("doubling:    {} iterations, residual {:.1e}", dbl.iterations, dare_residual(&a, &b, &q, &r, &dbl.p)?);
    println!("gain {:.4}closed-loop spectral radius {:.4}", fixed.gain, fixed.closed_loop_radius);

    // Same pair as a Koopman model: K11 = A, K12 = B, learned cost Q~ = I.
    let ctrl = KoopmanController::build(&a, &b, &q, &r)?;
    let z = DVector::from_vec(vec![1.0, -0.5, 0.2]);
    println!("u = -K g = {:.4}", ctrl.control(&z)?.0[0]);
    Ok(())
}
