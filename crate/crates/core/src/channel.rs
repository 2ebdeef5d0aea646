//! Wireless link: log-distance path loss, Rayleigh block fading, Shannon
//! rate, outage and per-packet delivery.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How delivered payloads are corrupted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind", content = "variance")]
pub enum PayloadNoise {
    Noiseless,
    FixedVariance(f64),
    /// Variance `mean(payload^2) / snr_draw`.
    #[default]
    SnrScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    /// Path loss at the reference distance, dB.
    pub pl0_db: f64,
    pub d0: f64,
    pub distance: f64,
    pub eta: f64,
    pub tx_power_dbm: f64,
    /// Noise power, W.
    pub noise_power: f64,
    pub bandwidth: f64,
    pub tau_o: f64,
    pub tau_comp: f64,
    pub bits_per_scalar: usize,
    pub header_bits: usize,
    pub payload_noise: PayloadNoise,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            pl0_db: 30.0,
            d0: 1.0,
            distance: 10.0,
            eta: 3.0,
            tx_power_dbm: 20.0,
            noise_power: 1e-10,
            bandwidth: 1e5,
            tau_o: 0.01,
            tau_comp: 0.001,
            bits_per_scalar: 32,
            header_bits: 64,
            payload_noise: PayloadNoise::SnrScaled,
        }
    }
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(format!("channel: {msg}")));
        if !(self.d0 > 0.0 && self.distance > 0.0) {
            return bad("distances must be positive");
        }
        if !(self.eta >= 2.0) {
            return bad("path-loss exponent must be >= 2");
        }
        if !(self.noise_power > 0.0 && self.bandwidth > 0.0 && self.tx_power_dbm.is_finite()) {
            return bad("power, noise and bandwidth must be positive");
        }
        if !(self.tau_comp >= 0.0 && self.tau_comp < self.tau_o) {
            return bad("need 0 <= tau_comp < tau_o");
        }
        if let PayloadNoise::FixedVariance(v) = self.payload_noise {
            if !(v >= 0.0) {
                return bad("noise variance must be >= 0");
            }
        }
        Ok(())
    }

    pub fn tx_power(&self) -> f64 {
        dbm_to_watts(self.tx_power_dbm)
    }

    /// Packet size for `scalars` payload values.
    pub fn payload_bits(&self, scalars: usize) -> usize {
        self.bits_per_scalar * scalars + self.header_bits
    }

    /// Mean received SNR (`E|h|^2 = 1`), linear.
    pub fn mean_snr(&self) -> f64 {
        10f64.powf(-path_loss_db(self) / 10.0) * self.tx_power() / self.noise_power
    }

    pub fn mean_snr_db(&self) -> f64 {
        10.0 * self.mean_snr().log10()
    }

    /// Same link with the noise power chosen so the mean SNR is `snr_db`.
    pub fn with_mean_snr_db(mut self, snr_db: f64) -> Self {
        self.noise_power = 10f64.powf(-path_loss_db(&self) / 10.0) * self.tx_power() / db_to_linear(snr_db);
        self
    }

    /// Same link with the transmit power chosen so the mean SNR is `snr_db`.
    pub fn with_mean_snr_db_via_power(mut self, snr_db: f64) -> Self {
        let watts = db_to_linear(snr_db) * self.noise_power * 10f64.powf(path_loss_db(&self) / 10.0);
        self.tx_power_dbm = 10.0 * watts.log10() + 30.0;
        self
    }
}

/// `PL(D0) + 10 eta log10(D / D0)`.
pub fn path_loss_db(cfg: &ChannelConfig) -> f64 {
    cfg.pl0_db + 10.0 * cfg.eta * (cfg.distance / cfg.d0).log10()
}

/// Received SNR for fading power gain `h2`.
pub fn snr_for_gain(cfg: &ChannelConfig, h2: f64) -> f64 {
    10f64.powf(-cfg.pl0_db / 10.0) * cfg.tx_power() * h2 / cfg.noise_power * (cfg.d0 / cfg.distance).powf(cfg.eta)
}

/// Draw `|h|^2 ~ Exp(1)` and return the received SNR.
pub fn sample_snr<R: Rng + ?Sized>(cfg: &ChannelConfig, rng: &mut R) -> f64 {
    let h2: f64 = Exp1.sample(rng);
    snr_for_gain(cfg, h2)
}

/// `W log2(1 + snr)`, bits/s.
pub fn shannon_rate(snr: f64, bandwidth: f64) -> f64 {
    bandwidth * snr.max(0.0).ln_1p() / std::f64::consts::LN_2
}

/// Smallest SNR that delivers `bits` within the air-time budget.
pub fn snr_threshold(cfg: &ChannelConfig, bits: usize) -> f64 {
    let budget = cfg.tau_o - cfg.tau_comp;
    if budget <= 0.0 {
        return f64::INFINITY;
    }
    (bits as f64 / (cfg.bandwidth * budget) * std::f64::consts::LN_2).exp_m1()
}

/// Probability that a `bits`-long packet misses the control deadline.
pub fn outage_probability(cfg: &ChannelConfig, bits: usize) -> f64 {
    let threshold = snr_threshold(cfg, bits);
    if threshold.is_infinite() {
        return 1.0;
    }
    let scale = 10f64.powf(cfg.pl0_db / 10.0) * cfg.noise_power * (cfg.distance / cfg.d0).powf(cfg.eta) / cfg.tx_power();
    -(-scale * threshold).exp_m1()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkStatus {
    Delivered,
    Lost,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkOutcome {
    pub status: LinkStatus,
    /// Noisy payload; `None` when lost.
    pub payload: Option<Vec<f64>>,
    pub snr_draw: f64,
    /// `L / R`, seconds (infinite when the rate is zero).
    pub latency: f64,
}

impl LinkOutcome {
    pub fn is_delivered(&self) -> bool {
        self.status == LinkStatus::Delivered
    }
}

/// Test and experiment overrides.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LinkOverrides {
    /// Fixed `|h|^2` instead of a fading draw.
    pub fading_gain: Option<f64>,
    /// Deliver regardless of the deadline.
    pub force_delivery: bool,
    /// Drop regardless of the deadline.
    pub force_loss: bool,
}

/// One packet over `cfg`: draw fading, check the deadline, add noise.
pub fn transmit<R: Rng + ?Sized>(
    cfg: &ChannelConfig,
    payload: &[f64],
    bits: usize,
    overrides: LinkOverrides,
    rng: &mut R,
) -> Result<LinkOutcome> {
    if payload.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidState("non-finite payload".into()));
    }
    let h2 = match overrides.fading_gain {
        Some(g) => g,
        None => Exp1.sample(rng),
    };
    let snr = snr_for_gain(cfg, h2);
    let rate = shannon_rate(snr, cfg.bandwidth);
    let latency = if rate > 0.0 { bits as f64 / rate } else { f64::INFINITY };
    let late = latency > cfg.tau_o - cfg.tau_comp;
    if overrides.force_loss || (late && !overrides.force_delivery) {
        return Ok(LinkOutcome {
            status: LinkStatus::Lost,
            payload: None,
            snr_draw: snr,
            latency,
        });
    }
    let variance = match cfg.payload_noise {
        PayloadNoise::Noiseless => 0.0,
        PayloadNoise::FixedVariance(v) => v,
        PayloadNoise::SnrScaled if payload.is_empty() => 0.0,
        PayloadNoise::SnrScaled => payload.iter().map(|v| v * v).sum::<f64>() / payload.len() as f64 / snr,
    };
    let noisy = if variance > 0.0 && variance.is_finite() {
        let sd = variance.sqrt();
        payload
            .iter()
            .map(|v| {
                let n: f64 = StandardNormal.sample(rng);
                v + sd * n
            })
            .collect()
    } else {
        payload.to_vec()
    };
    Ok(LinkOutcome {
        status: LinkStatus::Delivered,
        payload: Some(noisy),
        snr_draw: snr,
        latency,
    })
}

/// A link with its own random stream. Uplink and downlink are two links
/// built from the same configuration.
#[derive(Debug, Clone)]
pub struct Link {
    pub config: ChannelConfig,
    pub overrides: LinkOverrides,
    rng: ChaCha8Rng,
}

impl Link {
    pub fn new(config: ChannelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            overrides: LinkOverrides::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Lossless, noiseless link.
    pub fn ideal(config: ChannelConfig) -> Self {
        Self {
            config: ChannelConfig {
                payload_noise: PayloadNoise::Noiseless,
                ..config
            },
            overrides: LinkOverrides {
                fading_gain: None,
                force_delivery: true,
                force_loss: false,
            },
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn is_ideal(&self) -> bool {
        self.overrides.force_delivery && !self.overrides.force_loss && self.config.payload_noise == PayloadNoise::Noiseless
    }

    pub fn transmit(&mut self, payload: &[f64]) -> Result<LinkOutcome> {
        let bits = self.config.payload_bits(payload.len());
        transmit(&self.config, payload, bits, self.overrides, &mut self.rng)
    }

    /// Transmit once more but force a loss, keeping the random stream aligned.
    pub fn transmit_forced_loss(&mut self, payload: &[f64]) -> Result<LinkOutcome> {
        let saved = self.overrides;
        self.overrides.force_loss = true;
        let out = self.transmit(payload);
        self.overrides = saved;
        out
    }

    pub fn outage_probability(&self, scalars: usize) -> f64 {
        outage_probability(&self.config, self.config.payload_bits(scalars))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_loss_examples() {
        let mut cfg = ChannelConfig {
            distance: 1.0,
            ..Default::default()
        };
        assert_eq!(path_loss_db(&cfg), 30.0);
        cfg.distance = 100.0;
        assert!((path_loss_db(&cfg) - 90.0).abs() < 1e-12);
        let mut last = f64::NEG_INFINITY;
        for d in [1.0, 2.0, 5.0, 50.0] {
            cfg.distance = d;
            assert!(path_loss_db(&cfg) > last);
            last = path_loss_db(&cfg);
        }
    }

    #[test]
    fn unit_gain_snr_by_hand() {
        // PL0 = 30 dB, D = 10, eta = 3 -> 60 dB; P_t = 0.1 W; N = 1e-10.
        let cfg = ChannelConfig::default();
        let expected = 1e-3 * 0.1 / 1e-10 * 1e-3;
        assert!((snr_for_gain(&cfg, 1.0) / expected - 1.0).abs() < 1e-12);
        assert!((cfg.mean_snr() / expected - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rate_identities() {
        assert_eq!(shannon_rate(0.0, 1e5), 0.0);
        assert!((shannon_rate(1.0, 1e5) - 1e5).abs() < 1e-9);
        assert!((shannon_rate(3.0, 1e5) - 2e5).abs() < 1e-9);
    }

    #[test]
    fn outage_limits() {
        let cfg = ChannelConfig::default();
        assert_eq!(outage_probability(&cfg, 0), 0.0);
        let tight = ChannelConfig {
            tau_comp: cfg.tau_o * (1.0 - 1e-9),
            ..cfg
        };
        assert!(outage_probability(&tight, 320) > 1.0 - 1e-9);
        let over = ChannelConfig {
            tau_comp: cfg.tau_o,
            ..cfg
        };
        assert_eq!(outage_probability(&over, 320), 1.0);
    }

    #[test]
    fn back_solved_snr_hits_target() {
        for db in [-10.0, 0.0, 10.0, 20.0] {
            assert!((ChannelConfig::default().with_mean_snr_db(db).mean_snr_db() - db).abs() < 1e-9);
            assert!((ChannelConfig::default().with_mean_snr_db_via_power(db).mean_snr_db() - db).abs() < 1e-9);
        }
    }

    #[test]
    fn forced_clean_delivery_is_exact() {
        let cfg = ChannelConfig {
            payload_noise: PayloadNoise::Noiseless,
            ..Default::default()
        };
        let mut link = Link::new(cfg, 3).unwrap();
        link.overrides.force_delivery = true;
        let out = link.transmit(&[1.5, -2.0]).unwrap();
        assert_eq!(out.payload.unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn same_seed_reproduces() {
        let cfg = ChannelConfig::default().with_mean_snr_db(0.0);
        let mut a = Link::new(cfg, 9).unwrap();
        let mut b = Link::new(cfg, 9).unwrap();
        for _ in 0..50 {
            assert_eq!(a.transmit(&[0.3, 0.1]).unwrap(), b.transmit(&[0.3, 0.1]).unwrap());
        }
    }

    #[test]
    fn lost_carries_no_payload() {
        let mut link = Link::new(ChannelConfig::default(), 1).unwrap();
        let out = link.transmit_forced_loss(&[1.0]).unwrap();
        assert_eq!(out.status, LinkStatus::Lost);
        assert!(out.payload.is_none());
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(ChannelConfig { eta: 1.5, ..Default::default() }.validate().is_err());
        assert!(ChannelConfig { tau_comp: 0.02, ..Default::default() }.validate().is_err());
        assert!(ChannelConfig { distance: 0.0, ..Default::default() }.validate().is_err());
    }
}
