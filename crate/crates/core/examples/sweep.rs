//! A small SNR sweep written as CSV to stdout, then summarized.

use split_koopman::harness::{mean_by_snr, run_sweep, write_csv, ExperimentConfig};

fn main() -> split_koopman::Result<()> {
    let mut cfg = ExperimentConfig::desk();
    cfg.seeds = vec![1];
    cfg.snr_db = vec![-10.0, 10.0];
    cfg.sensing.max_epochs = 10;
    cfg.controlling.max_epochs = 5;
    cfg.controlling_runs = 4;
    let rows = run_sweep(&cfg, 1)?;
    write_csv(&rows, std::io::stdout())?;
    for (snr, v) in mean_by_snr(&rows, 4, |r| r.state_nrmse) {
        eprintln!("{snr:6.1} dB: state NRMSE {v:.3}%");
    }
    Ok(())
}
