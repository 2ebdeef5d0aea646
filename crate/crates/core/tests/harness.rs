mod common;

use proptest::prelude::*;
use split_koopman::harness::{
    control_outcome, dataset_for, links_for, mean_by_snr, monotone_with_slack, nrmse, read_csv, run_sweep, sub_seed, train_sensing, write_csv,
    ExperimentConfig,
};
use nalgebra::{DMatrix, DVector};
use split_koopman::channel::{ChannelConfig, Link};
use split_koopman::harness::{action_nrmse_over_link, state_nrmse_over_link};
use split_koopman::koopman::{AugmentedLatent, ControlSource};
use split_koopman::protocol::{ControlMode, Phase2Config, RemoteSystem};
use split_koopman::Error;

const START: usize = 10;
const HORIZON: usize = 25;

fn mean_nrmse(pairs: Vec<(DMatrix<f64>, DMatrix<f64>)>) -> f64 {
    let n = pairs.len() as f64;
    pairs.iter().map(|(p, o)| nrmse(p, o, 0, HORIZON).unwrap()).sum::<f64>() / n
}

#[test]
fn state_nrmse_without_link_is_open_loop_and_ideal_link_is_reconstruction() {
    let sys = common::micro_system(4);
    let test = dataset_for(&common::tiny_config(), None, 6).unwrap().test;
    let m = &sys.sensing;
    let obs = |t: &split_koopman::harness::Trajectory| t.states.columns(START + 1, HORIZON).into_owned();
    let open: Vec<_> = test
        .iter()
        .map(|t| {
            let y = AugmentedLatent::new(m.encode(&t.state(START)).unwrap(), t.action(START));
            let c: Vec<DVector<f64>> = (START + 1..=START + HORIZON).map(|k| t.action(k)).collect();
            let steps = m.predict_states(&y, HORIZON, ControlSource::Recorded(&c)).unwrap();
            (DMatrix::from_columns(&steps.iter().map(|s| s.state.clone()).collect::<Vec<_>>()), obs(t))
        })
        .collect();
    let got = state_nrmse_over_link(m, &test, START, HORIZON, None).unwrap();
    assert!((got - mean_nrmse(open)).abs() < 1e-12);

    let recon: Vec<_> = test
        .iter()
        .map(|t| {
            let cols: Vec<DVector<f64>> = (START + 1..=START + HORIZON)
                .map(|k| m.decode(&AugmentedLatent::new(m.encode(&t.state(k)).unwrap(), t.action(k))).unwrap())
                .collect();
            (DMatrix::from_columns(&cols), obs(t))
        })
        .collect();
    let mut ideal = Link::ideal(ChannelConfig::default());
    let got = state_nrmse_over_link(m, &test, START, HORIZON, Some(&mut ideal)).unwrap();
    assert!((got - mean_nrmse(recon)).abs() < 1e-12);
}

#[test]
fn action_nrmse_without_link_is_open_loop_and_zero_over_ideal_link() {
    let sys = common::micro_system(7);
    let model = sys.controlling.as_ref().unwrap();
    let runs = dataset_for(&common::tiny_config(), None, 8).unwrap().test;
    let open: Vec<_> = runs
        .iter()
        .map(|t| {
            let z = AugmentedLatent::new(model.encode(&t.state(START)).unwrap(), t.action(START));
            let fresh: Vec<DVector<f64>> = (START + 1..=START + HORIZON).map(|k| model.encode(&t.state(k)).unwrap()).collect();
            let pred = model.predict_actions(&z, HORIZON, &fresh).unwrap();
            (DMatrix::from_columns(&pred), t.actions.columns(START + 1, HORIZON).into_owned())
        })
        .collect();
    let got = action_nrmse_over_link(model, &runs, START, HORIZON, None).unwrap();
    assert!((got - mean_nrmse(open)).abs() < 1e-12);
    let mut ideal = Link::ideal(ChannelConfig::default());
    assert_eq!(action_nrmse_over_link(model, &runs, START, HORIZON, Some(&mut ideal)).unwrap(), 0.0);
}

#[test]
fn config_file_round_trip() {
    let cfg = common::tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    assert_eq!(ExperimentConfig::load(&path).unwrap(), cfg);
}

#[test]
fn bad_config_is_a_config_error() {
    let err = ExperimentConfig::from_toml("snr_db = []").unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    assert_eq!(err.exit_code(), Error::Config(String::new()).exit_code());
}

#[test]
fn tiny_sweep_end_to_end() {
    let cfg = common::tiny_config();
    let rows = run_sweep(&cfg, 1).unwrap();
    assert_eq!(rows.len(), 1);
    let row = &rows[0];
    assert!(row.error.is_none(), "{:?}", row.error);
    assert!(row.state_nrmse.unwrap().is_finite());
    assert!(row.action_nrmse.unwrap().is_finite());
    let mut buf = Vec::new();
    write_csv(&rows, &mut buf).unwrap();
    assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
    let means = mean_by_snr(&rows, 3, |r| r.state_nrmse);
    assert_eq!(means.len(), 1);
    assert!(monotone_with_slack(&means, 0.1));
}

#[test]
fn sensing_training_is_seed_deterministic() {
    let cfg = common::tiny_config();
    let data = dataset_for(&cfg, None, 4).unwrap();
    let (a, ra) = train_sensing(&cfg, 3, Some(0.0), &data, 4).unwrap();
    let (b, rb) = train_sensing(&cfg, 3, Some(0.0), &data, 4).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

/// Validation loss after 50 epochs on the desk dataset falls below a tenth
/// of its first-epoch value, averaged over three seeds.
#[test]
fn desk_training_converges() {
    let mut cfg = ExperimentConfig::desk();
    cfg.sensing.max_epochs = 50;
    cfg.sensing.patience = 50;
    let mut ratio = 0.0;
    for seed in [1, 2, 3] {
        let data = dataset_for(&cfg, None, seed).unwrap();
        let (_, report) = train_sensing(&cfg, cfg.latent_dims[0], None, &data, seed).unwrap();
        let h = report.val_history();
        assert_eq!(h.len(), 50);
        ratio += h[49] / h[0] / 3.0;
    }
    assert!(ratio < 0.1, "mean ratio {ratio}");
}

/// Desk-trained Koopman LQR from 0.3 in every coordinate, lossless links:
/// `|x(10 s)|_inf < 0.1`, averaged over three seeds.
#[test]
fn desk_system_stabilizes_small_offset() {
    let cfg = ExperimentConfig::desk();
    let mut total = 0.0;
    for seed in [1, 2, 3] {
        let data = dataset_for(&cfg, None, seed).unwrap();
        let (sensing, _) = train_sensing(&cfg, cfg.eval.control_latent_dim, None, &data, seed).unwrap();
        let sys = RemoteSystem::new(cfg.plant, cfg.integrator, cfg.process_noise, sensing, None, &cfg.q_x(), &cfg.r()).unwrap();
        let p2 = Phase2Config {
            horizon: cfg.eval.control_horizon,
            mode: ControlMode::HoldLast,
            ..Phase2Config::default()
        };
        let mut links = links_for(&cfg, None, seed).unwrap();
        let out = control_outcome(&sys, &cfg.loss_x0(), &p2, &mut links, seed).unwrap();
        eprintln!("seed {seed}: |x(10 s)|inf {:.4}", out.final_error);
        total += out.final_error / 3.0;
    }
    assert!(total < 0.1, "mean |x(10 s)|inf {total}");
}

proptest! {
    #[test]
    fn sub_seeds_differ_by_role(seed in any::<u64>(), a in 0u64..64, b in 0u64..64) {
        prop_assume!(a != b);
        prop_assert_ne!(sub_seed(seed, a), sub_seed(seed, b));
    }

    #[test]
    fn nrmse_is_scale_invariant(k in 0.1f64..100.0, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let obs = nalgebra::DMatrix::from_fn(2, 30, |_, _| rng.random_range(-1.0..1.0));
        let pred = &obs + nalgebra::DMatrix::from_fn(2, 30, |_, _| rng.random_range(-0.1..0.1));
        let a = nrmse(&pred, &obs, 0, 30).unwrap();
        let b = nrmse(&(&pred * k), &(&obs * k), 0, 30).unwrap();
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
    }
}
