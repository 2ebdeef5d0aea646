//! Repeated runs of forced consecutive losses at 0 dB: the actuator's
//! predicted commands against holding the last one.

use split_koopman::harness::{dataset_for, run_packet_loss, train_system, ExperimentConfig};

fn main() -> split_koopman::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let cfg = ExperimentConfig::desk();
    let data = dataset_for(&cfg, None, seed)?;
    let trained = train_system(&cfg, cfg.eval.control_latent_dim, None, &data, seed)?;
    let sys = trained.remote(&cfg)?;
    println!("losses   predictive MSCE   hold MSCE   M_lost");
    for p in run_packet_loss(&cfg, &sys, seed)? {
        println!("{:6}   {:15.4}   {:9.4}   {:6}", p.burst, p.predictive.msce, p.hold.msce, p.predictive.m_lost);
    }
    Ok(())
}
