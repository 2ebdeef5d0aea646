//! Far from equilibrium: Koopman LQR on learned latents against the
//! Jacobian LQR, both over an ideal link.
//!
//! `cargo run --release --example stabilization -- [seed]`

use split_koopman::harness::{dataset_for, run_stabilization, train_system, ExperimentConfig};

fn main() -> split_koopman::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ExperimentConfig::desk();
    let data = dataset_for(&cfg, None, seed)?;
    let trained = train_system(&cfg, cfg.eval.control_latent_dim, None, &data, seed)?;
    println!("trained in {:.0} s", trained.seconds);
    let sys = trained.remote(&cfg)?;
    let r = run_stabilization(&cfg, &sys, seed)?;
    println!("x0 = {:?}", cfg.eval.far_x0);
    for (name, o) in [("Koopman LQR", r.koopman), ("Jacobian LQR", r.jacobian)] {
        println!("{name:13} MSCE {:10.3}  |x(10 s)|inf {:8.3}", o.msce, o.final_error);
    }
    println!("Koopman wins: {}", r.koopman_wins(0.5));
    Ok(())
}
