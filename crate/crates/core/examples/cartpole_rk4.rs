//! Cart-pole under RK4: open-loop swing, then the Jacobian LQR from the same start.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use split_koopman::control::JacobianController;
use split_koopman::dynamics::{numeric_jacobian, step_plant, ActionVector, CartPoleParams, IntegratorConfig, NoiseSpec, StateVector};

fn main() -> split_koopman::Result<()> {
    let params = CartPoleParams::default();
    let integ = IntegratorConfig::default();
    let noise = NoiseSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let (a, b) = numeric_jacobian(&StateVector::zeros(4), &ActionVector::zeros(1), &params, 1e-6)?;
    println!("linearization at the origin:\nA = {a:.3}B = {b:.3}");

    let jac = JacobianController::build(&params, integ.tau_o, &DMatrix::identity(4, 4), &DMatrix::identity(1, 1))?;
    println!("Jacobian LQR gain {:.3}", jac.gain());

    let x0 = StateVector(DVector::from_element(4, 0.3));
    for (label, closed) in [("open loop", false), ("Jacobian LQR", true)] {
        let mut x = x0.clone();
        println!("\n{label}:   t      x       v     theta   omega");
        for m in 0..=1000 {
            if m % 200 == 0 {
                println!("      {:5.2} {:7.3} {:7.3} {:7.3} {:7.3}", m as f64 * integ.tau_o, x.0[0], x.0[1], x.0[2], x.0[3]);
            }
            let u = if closed { jac.control(&x.0)? } else { ActionVector::zeros(1) };
            x = step_plant(&x, &u, &params, &integ, &noise, &mut rng)?;
        }
    }
    Ok(())
}
