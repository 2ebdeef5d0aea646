//! Outage of a control packet versus mean SNR: closed form against a seeded link.

use split_koopman::channel::{snr_threshold, ChannelConfig, Link, LinkStatus};

fn main() -> split_koopman::Result<()> {
    let base = ChannelConfig::default();
    println!("path loss {:.1} dB, default mean SNR {:.1} dB", split_koopman::channel::path_loss_db(&base), base.mean_snr_db());
    let scalars = 8;
    let bits = base.payload_bits(scalars);
    println!("{bits}-bit packet needs SNR >= {:.3} within {:.1} ms", snr_threshold(&base, bits), 1e3 * (base.tau_o - base.tau_comp));
    println!("\n SNR dB   closed form   empirical (1e5 packets)");
    for db in [-10.0, -5.0, 0.0, 5.0, 10.0, 20.0] {
        let cfg = base.with_mean_snr_db(db);
        let mut link = Link::new(cfg, 7)?;
        let n = 100_000;
        let mut lost = 0;
        for _ in 0..n {
            if link.transmit(&vec![0.0; scalars])?.status == LinkStatus::Lost {
                lost += 1;
            }
        }
        println!("{db:7.1}   {:11.5}   {:9.5}", link.outage_probability(scalars), lost as f64 / n as f64);
    }
    Ok(())
}
