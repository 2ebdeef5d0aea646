//! Phase 1 over a lossy link: the sensor encodes, the controller fits the
//! Koopman blocks and decoder, gradients travel back for the encoder.
//!
//! `cargo run --release --example split_training -- [snr_db]`

use split_koopman::harness::{dataset_for, train_sensing, ExperimentConfig};

fn main() -> split_koopman::Result<()> {
    let snr: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let mut cfg = ExperimentConfig::desk();
    cfg.sensing.max_epochs = 20;
    let data = dataset_for(&cfg, None, 1)?;
    println!("{} training trajectories of {} steps, uplink at {snr} dB", data.train.len(), cfg.dataset.steps);
    let (model, report) = train_sensing(&cfg, 4, Some(snr), &data, 1)?;
    println!("epoch   train      val        uplink loss");
    for e in &report.epochs {
        println!("{:5}   {:.3e}  {:.3e}  {:.1}%", e.epoch, e.train.total, e.val.total, 100.0 * e.uplink_loss_rate);
    }
    println!("best epoch {}; K11 eigenvalue moduli {:.4}", report.best_epoch, model.k11.complex_eigenvalues().map(|z| z.norm()).transpose());
    Ok(())
}
