#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use split_koopman::koopman::{
    controlling_loss_on_tape, controlling_loss_value, sensing_loss_on_tape, sensing_loss_value, ActuatorLatent, Architecture,
    ControllingCoefficients, ControllingModel, KoopmanDims, ScheduleMode, SensingCoefficients, SensingModel, WeightSchedule,
    WindowBatch,
};
use split_koopman::neural::Tape;

const H: f64 = 1e-5;

pub fn micro_dims() -> KoopmanDims {
    KoopmanDims { p: 4, q: 1, d: 2 }
}

pub fn random_batch(dims: &KoopmanDims, offsets: usize, b: usize, rng: &mut ChaCha8Rng) -> WindowBatch {
    let mut block = |r: usize| DMatrix::from_fn(r, b, |_, _| rng.random_range(-1.0..1.0));
    WindowBatch {
        states: (0..offsets).map(|_| block(dims.p)).collect(),
        controls: (0..offsets).map(|_| block(dims.q)).collect(),
    }
}

/// Perturb K blocks away from their identity/zero init so every term is active.
fn jitter(m: &mut DMatrix<f64>, rng: &mut ChaCha8Rng) {
    m.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
}

/// Nonzero biases keep pre-activations off the ReLU kink at exactly zero
/// inputs (an anchored encoder maps the origin there).
fn jitter_biases(net: &mut split_koopman::neural::Network, rng: &mut ChaCha8Rng) {
    for (i, p) in net.params_mut().into_iter().enumerate() {
        if i % 2 == 1 {
            jitter(p, rng);
        }
    }
}

/// `|a - n| / max(|a|, |n|, 1e-3)` over every entry. The floor turns the
/// check into an absolute 1e-8 bound on entries that are exactly zero
/// analytically (final encoder biases cancel under anchoring, dead units),
/// where central differences only see round-off.
fn compare(analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, worst: &mut f64) {
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
        *worst = worst.max(rel);
    }
}

/// Central differences over each entry of the parameter picked by `pick`.
fn numeric<M: Clone>(model: &M, pick: impl Fn(&mut M) -> &mut DMatrix<f64>, f: impl Fn(&M) -> f64) -> DMatrix<f64> {
    let mut m = model.clone();
    let shape = pick(&mut m).shape();
    DMatrix::from_fn(shape.0, shape.1, |i, j| {
        let orig = pick(&mut m)[(i, j)];
        pick(&mut m)[(i, j)] = orig + H;
        let up = f(&m);
        pick(&mut m)[(i, j)] = orig - H;
        let down = f(&m);
        pick(&mut m)[(i, j)] = orig;
        (up - down) / (2.0 * H)
    })
}

/// Max relative error between tape gradients of the sensing loss and
/// central differences, over encoder, K11, K12, Q~ and decoder parameters.
pub fn sensing_gradient_error(depth: usize, mode: ScheduleMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = micro_dims();
    let mut model = SensingModel::new(dims, &Architecture::micro(8), &mut rng).unwrap();
    jitter(&mut model.k11, &mut rng);
    jitter(&mut model.k12, &mut rng);
    jitter(&mut model.q_tilde, &mut rng);
    jitter_biases(&mut model.encoder.net, &mut rng);
    jitter_biases(&mut model.decoder, &mut rng);
    let batch = random_batch(&dims, depth + 1, 5, &mut rng);
    let schedule = WeightSchedule::new(mode, depth).unwrap();
    let coeffs = SensingCoefficients::default();
    let q_x = DMatrix::identity(4, 4);

    let mut tape = Tape::new();
    let (latents, enc_vars) = model.encoder.encode_window_tape(&mut tape, &batch.states).unwrap();
    let graph = sensing_loss_on_tape(&mut tape, &model, &latents, &batch, &schedule, &coeffs, &q_x).unwrap();
    let grads = tape.backward(graph.total).unwrap();
    let server = graph.params.gradients(&grads).unwrap();
    let enc = enc_vars.gradients(&grads).unwrap();

    let f = |m: &SensingModel| sensing_loss_value(m, &batch, &schedule, &coeffs, &q_x).unwrap().total;
    let mut worst = 0.0f64;
    compare(&server.k11, &numeric(&model, |m| &mut m.k11, f), &mut worst);
    compare(&server.k12, &numeric(&model, |m| &mut m.k12, f), &mut worst);
    compare(&server.q_tilde, &numeric(&model, |m| &mut m.q_tilde, f), &mut worst);
    for (i, g) in enc.0.iter().enumerate() {
        compare(g, &numeric(&model, |m| m.encoder.net.params_mut().swap_remove(i), f), &mut worst);
    }
    for (i, g) in server.decoder.0.iter().enumerate() {
        compare(g, &numeric(&model, |m| m.decoder.params_mut().swap_remove(i), f), &mut worst);
    }
    worst
}

/// Same check for the controlling loss over K'21, K'22 and its decoder.
pub fn controlling_gradient_error(depth: usize, mode: ScheduleMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = micro_dims();
    let arch = Architecture::micro(8);
    let sensing = SensingModel::new(dims, &arch, &mut rng).unwrap();
    let mut model = ControllingModel::new(dims, &arch, sensing.encoder.clone(), ActuatorLatent::Hold, &mut rng).unwrap();
    jitter(&mut model.k21, &mut rng);
    jitter(&mut model.k22, &mut rng);
    jitter_biases(&mut model.encoder.net, &mut rng);
    jitter_biases(&mut model.decoder, &mut rng);
    let batch = random_batch(&dims, depth + 1, 5, &mut rng);
    let schedule = WeightSchedule::new(mode, depth).unwrap();
    let coeffs = ControllingCoefficients::default();

    let latents: Vec<DMatrix<f64>> = batch.states.iter().map(|s| model.encoder.encode_batch(s).unwrap()).collect();
    let mut tape = Tape::new();
    let graph = controlling_loss_on_tape(&mut tape, &model, &latents, &batch, &schedule, &coeffs).unwrap();
    let grads = graph.params.gradients(&tape.backward(graph.total).unwrap()).unwrap();

    let f = |m: &ControllingModel| controlling_loss_value(m, &batch, &schedule, &coeffs).unwrap().total;
    let mut worst = 0.0f64;
    compare(&grads.k21, &numeric(&model, |m| &mut m.k21, f), &mut worst);
    compare(&grads.k22, &numeric(&model, |m| &mut m.k22, f), &mut worst);
    for (i, g) in grads.decoder.0.iter().enumerate() {
        compare(g, &numeric(&model, |m| m.decoder.params_mut().swap_remove(i), f), &mut worst);
    }
    worst
}

use split_koopman::channel::{ChannelConfig, Link, LinkStatus};
use split_koopman::dynamics::{CartPoleParams, IntegratorConfig, NoiseSpec};
use split_koopman::harness::consecutive_lost;
use split_koopman::protocol::{run_phase2_loop, ControlMode, ForcedLosses, Phase2Config, RemoteSystem, SideUse};

/// Micro sensing and controlling models with stabilizable K blocks, wrapped
/// around the default plant.
pub fn micro_system(seed: u64) -> RemoteSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = KoopmanDims::cartpole(3);
    let arch = Architecture::micro(8);
    let mut sensing = SensingModel::new(dims, &arch, &mut rng).unwrap();
    sensing.k11 = DMatrix::from_row_slice(3, 3, &[1.01, 0.05, 0.0, 0.0, 0.97, 0.1, 0.02, 0.0, 0.9]);
    sensing.k12 = DMatrix::from_row_slice(3, 1, &[0.1, 0.3, -0.2]);
    let mut controlling = ControllingModel::new(dims, &arch, sensing.encoder.clone(), ActuatorLatent::Hold, &mut rng).unwrap();
    controlling.k21 = DMatrix::from_row_slice(1, 3, &[-0.2, 0.1, 0.05]);
    controlling.k22 = DMatrix::from_row_slice(1, 1, &[0.8]);
    RemoteSystem::new(
        CartPoleParams::default(),
        IntegratorConfig::default(),
        NoiseSpec::default(),
        sensing,
        Some(controlling),
        &DMatrix::identity(4, 4),
        &DMatrix::identity(1, 1),
    )
    .unwrap()
}

/// Expected use of one side given its link statuses so far.
fn expected_use(statuses: &[LinkStatus]) -> SideUse {
    match statuses.last() {
        Some(LinkStatus::Delivered) => SideUse::Received,
        _ => match statuses.iter().rposition(|s| *s == LinkStatus::Delivered) {
            Some(i) => SideUse::Predicted {
                depth: statuses.len() - 1 - i,
            },
            None => SideUse::ColdStart,
        },
    }
}

/// Run predictive phase 2 over ideal links with the given forced-loss masks
/// and check routing exclusivity and `M_lost` bookkeeping on every loop.
pub fn check_routing(sys: &RemoteSystem, up: &[bool], down: &[bool]) -> Result<(), String> {
    let horizon = up.len();
    let cfg = Phase2Config {
        horizon,
        mode: ControlMode::Predictive,
        forced: ForcedLosses {
            uplink: up.to_vec(),
            downlink: down.to_vec(),
        },
        divergence_bound: 1e12,
        ..Phase2Config::default()
    };
    let mut uplink = Link::ideal(ChannelConfig::default());
    let mut downlink = Link::ideal(ChannelConfig::default());
    let x0 = nalgebra::DVector::from_element(4, 0.05);
    let run = run_phase2_loop(sys, &x0, &cfg, &mut uplink, &mut downlink, &mut ChaCha8Rng::seed_from_u64(0))
        .map_err(|e| e.to_string())?;
    let ups: Vec<LinkStatus> = run.records.iter().map(|r| r.uplink.status).collect();
    let downs: Vec<LinkStatus> = run.records.iter().map(|r| r.downlink.status).collect();
    for (m, r) in run.records.iter().enumerate() {
        let want_up = if up[m] { LinkStatus::Lost } else { LinkStatus::Delivered };
        let want_down = if down[m] { LinkStatus::Lost } else { LinkStatus::Delivered };
        if ups[m] != want_up || downs[m] != want_down {
            return Err(format!("loop {m}: statuses {:?}/{:?}", ups[m], downs[m]));
        }
        if r.state_use != expected_use(&ups[..=m]) {
            return Err(format!("loop {m}: state use {:?}", r.state_use));
        }
        if r.action_use != expected_use(&downs[..=m]) {
            return Err(format!("loop {m}: action use {:?}", r.action_use));
        }
        if downs[m] == LinkStatus::Delivered && run.applied.column(m) != run.issued.column(m) {
            return Err(format!("loop {m}: delivered command altered"));
        }
        let completed = match downs[..=m].iter().rposition(|s| *s == LinkStatus::Delivered) {
            Some(i) => consecutive_lost(&downs[..=i]),
            None => 0,
        };
        if r.m_lost != completed {
            return Err(format!("loop {m}: m_lost {} vs {completed}", r.m_lost));
        }
    }
    if run.m_lost != consecutive_lost(&downs) {
        return Err(format!("final m_lost {} vs {}", run.m_lost, consecutive_lost(&downs)));
    }
    Ok(())
}

use split_koopman::channel::outage_probability;
use split_koopman::control::{dare_residual, solve_dare, spectral_radius, DareOptions, DareSolution};
use split_koopman::dynamics::{integrate_period, numeric_jacobian, ActionVector, StateVector};

/// Scalar DARE cases with closed forms: `a = 0.5, b = 0` gives the geometric
/// series `P = 1 / (1 - a^2)`; `a = b = q = r = 1` gives the golden ratio.
/// Returns the largest deviation.
pub fn dare_scalar_error() -> f64 {
    let s = |x: f64| DMatrix::from_element(1, 1, x);
    let geo = solve_dare(&s(0.5), &s(0.0), &s(1.0), &s(1.0), DareOptions::default()).unwrap();
    let gold = solve_dare(&s(1.0), &s(1.0), &s(1.0), &s(1.0), DareOptions::default()).unwrap();
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    [
        (geo.p[0] - 4.0 / 3.0).abs(),
        geo.gain[0].abs(),
        (gold.p[0] - phi).abs(),
        (gold.gain[0] - (phi - 1.0)).abs(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

/// Random 3x3 systems with a full-rank input matrix, hence stabilizable.
pub fn random_dare(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, DareSolution) {
    loop {
        let a = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        if b.clone().svd(false, false).singular_values.min() < 0.1 {
            continue;
        }
        let sol = solve_dare(&a, &b, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2), DareOptions::default()).unwrap();
        return (a, b, sol);
    }
}

/// Worst residual and closed-loop spectral radius over `n` random systems.
pub fn dare_random_worst(n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut res, mut rad) = (0.0f64, 0.0f64);
    for _ in 0..n {
        let (a, b, sol) = random_dare(&mut rng);
        let r = dare_residual(&a, &b, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2), &sol.p).unwrap();
        res = res.max(r);
        rad = rad.max(spectral_radius(&(&a - &b * &sol.gain)));
    }
    (res, rad)
}

/// `|f(0, 0)|_inf` after one control period from the equilibrium.
pub fn equilibrium_drift() -> f64 {
    let p = split_koopman::dynamics::CartPoleParams::default();
    let x = integrate_period(&nalgebra::DVector::zeros(4), &nalgebra::DVector::zeros(1), &p, &IntegratorConfig::default()).unwrap();
    x.amax()
}

/// Observed RK4 order from errors at `h` and `h/2` over one second, against
/// an `h/16` reference.
pub fn rk4_observed_order() -> f64 {
    let p = split_koopman::dynamics::CartPoleParams::default();
    let x0 = nalgebra::DVector::from_vec(vec![0.1, 0.2, 0.6, -0.3]);
    let u = nalgebra::DVector::from_element(1, 0.5);
    let run = |h: f64| {
        let cfg = IntegratorConfig { h, tau_o: 1.0 };
        integrate_period(&x0, &u, &p, &cfg).unwrap()
    };
    let h = 0.02;
    let reference = run(h / 16.0);
    let e1 = (run(h) - &reference).amax();
    let e2 = (run(h / 2.0) - &reference).amax();
    (e1 / e2).log2()
}

/// Largest deviation of the numeric Jacobian at the origin from the
/// hand-linearized matrices.
pub fn jacobian_error() -> f64 {
    let (a, b) = numeric_jacobian(
        &StateVector::zeros(4),
        &ActionVector::zeros(1),
        &split_koopman::dynamics::CartPoleParams::default(),
        1e-6,
    )
    .unwrap();
    let a_c = DMatrix::from_row_slice(4, 4, &[0.0, 1.0, 0.0, 0.0, 0.0, 0.4, 2.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, -2.0, -60.0, 0.0]);
    let b_c = DMatrix::from_row_slice(4, 1, &[0.0, 0.2, 0.0, 1.0]);
    (a - a_c).amax().max((b - b_c).amax())
}

/// Channel parameter sets spanning low to high outage.
pub fn channel_cases() -> Vec<(ChannelConfig, usize)> {
    let base = ChannelConfig::default();
    vec![
        (base.with_mean_snr_db(0.0), 4),
        (base.with_mean_snr_db(-10.0), 1),
        (base.with_mean_snr_db(10.0), 8),
        (ChannelConfig { distance: 25.0, eta: 2.5, ..base }, 16),
        (ChannelConfig { bandwidth: 2e4, tau_comp: 0.004, ..base.with_mean_snr_db(5.0) }, 2),
    ]
}

/// `(empirical, analytic, binomial sigma)` outage for `draws` packets of
/// `scalars` values through a seeded link.
pub fn channel_outage(cfg: ChannelConfig, scalars: usize, draws: usize, seed: u64) -> (f64, f64, f64) {
    let mut link = Link::new(cfg, seed).unwrap();
    let payload = vec![0.5; scalars];
    let lost = (0..draws)
        .filter(|_| link.transmit(&payload).unwrap().status == LinkStatus::Lost)
        .count();
    let p = outage_probability(&cfg, cfg.payload_bits(scalars));
    let sigma = (p * (1.0 - p) / draws as f64).sqrt();
    (lost as f64 / draws as f64, p, sigma)
}

use split_koopman::harness::{DatasetConfig, EvalConfig, ExperimentConfig};

/// A seconds-scale configuration that still exercises every stage.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk();
    cfg.name = "tiny".into();
    cfg.seeds = vec![1];
    cfg.snr_db = vec![10.0];
    cfg.latent_dims = vec![3];
    cfg.architecture = Architecture::micro(8);
    cfg.dataset = DatasetConfig {
        train: 3,
        val: 1,
        test: 2,
        steps: 400,
        ..cfg.dataset
    };
    for t in [&mut cfg.sensing, &mut cfg.controlling] {
        t.depth = 3;
        t.max_epochs = 3;
        t.windows_per_epoch = Some(256);
        t.val_windows = Some(128);
        t.batch_size = 32;
    }
    cfg.controlling_runs = 3;
    cfg.controlling_steps = 300;
    cfg.eval = EvalConfig {
        predict_horizon: 20,
        predict_start: 10,
        control_horizon: 100,
        loss_bursts: vec![1, 3],
        control_latent_dim: 3,
        ..EvalConfig::default()
    };
    cfg
}
