mod common;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use split_koopman::channel::{ChannelConfig, Link};
use split_koopman::dynamics::{CartPoleParams, IntegratorConfig, NoiseSpec};
use split_koopman::harness::{generate_dataset, DatasetConfig, TrajectoryDataset};
use split_koopman::koopman::{Architecture, KoopmanDims, ScheduleMode, SensingModel};
use split_koopman::dynamics::{step_plant, StateVector};
use split_koopman::koopman::AugmentedLatent;
use split_koopman::protocol::{
    run_phase2_loop, ControlMode, ForcedLosses, Phase2Config, SensingTrainer, SideUse, SplitLinks, TrainingConfig,
};

fn small_dataset(seed: u64) -> TrajectoryDataset {
    let cfg = DatasetConfig {
        train: 3,
        val: 1,
        test: 1,
        steps: 60,
        ..DatasetConfig::desk()
    };
    generate_dataset(
        &cfg,
        &CartPoleParams::default(),
        &IntegratorConfig::default(),
        &NoiseSpec::default(),
        &DMatrix::identity(4, 4),
        &DMatrix::identity(1, 1),
        seed,
    )
    .unwrap()
}

fn config(depth: usize, schedule: ScheduleMode) -> TrainingConfig {
    TrainingConfig {
        depth,
        schedule,
        batch_size: 16,
        max_epochs: 3,
        adam: split_koopman::neural::AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..TrainingConfig::default()
    }
}

fn model(seed: u64) -> SensingModel {
    SensingModel::new(KoopmanDims::cartpole(3), &Architecture::micro(8), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn bits(m: &SensingModel) -> Vec<u64> {
    let mut out: Vec<u64> = m.encoder.net.params().iter().flat_map(|p| p.iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect();
    for p in [&m.k11, &m.k12, &m.q_tilde] {
        out.extend(p.iter().map(|v| v.to_bits()));
    }
    for p in m.decoder.params() {
        out.extend(p.iter().map(|v| v.to_bits()));
    }
    out
}

#[test]
fn ideal_link_split_training_is_bitwise_centralized() {
    let ds = small_dataset(4);
    for (depth, schedule) in [(1, ScheduleMode::SpecialCase), (3, ScheduleMode::GeneralCase)] {
        let mut central = SensingTrainer::centralized(model(9), config(depth, schedule), 17).unwrap();
        let mut split = SensingTrainer::split(model(9), config(depth, schedule), 17).unwrap();
        let ideal = Link::ideal(ChannelConfig::default());
        let mut links = SplitLinks {
            uplink: ideal.clone(),
            downlink: ideal,
        };
        for _ in 0..3 {
            let a = central.run_epoch(&ds.train, None).unwrap();
            let b = split.run_epoch(&ds.train, Some(&mut links)).unwrap();
            assert_eq!(a.total.to_bits(), b.total.to_bits());
            assert_eq!(bits(&central.model), bits(&split.model));
        }
    }
}

#[test]
fn lossy_training_runs_and_is_reproducible() {
    let ds = small_dataset(5);
    let run = || {
        let mut t = SensingTrainer::split(model(2), config(2, ScheduleMode::GeneralCase), 3).unwrap();
        let ch = ChannelConfig::default().with_mean_snr_db(0.0);
        let mut links = SplitLinks {
            uplink: Link::new(ch, 10).unwrap(),
            downlink: Link::new(ch, 11).unwrap(),
        };
        let report = t.train(&ds.train, &ds.val, Some(&mut links)).unwrap();
        (bits(&t.model), report.val_history())
    };
    let (a, ha) = run();
    let (b, hb) = run();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert!(ha.iter().all(|v| v.is_finite()));
}

#[test]
fn lossless_phase2_matches_offline_simulation() {
    let sys = common::micro_system(3);
    let x0 = DVector::from_vec(vec![0.1, -0.1, 0.05, 0.0]);
    let cfg = Phase2Config {
        horizon: 200,
        mode: ControlMode::HoldLast,
        ..Phase2Config::default()
    };
    let ideal = Link::ideal(ChannelConfig::default());
    let run = run_phase2_loop(&sys, &x0, &cfg, &mut ideal.clone(), &mut ideal.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = StateVector(x0);
    for m in 0..cfg.horizon {
        let u = sys.koopman.control(&sys.sensing.encode(&x.0).unwrap()).unwrap();
        assert_eq!(run.applied.column(m), u.0.column(0));
        assert_eq!(run.states.column(m), x.0.column(0));
        x = step_plant(&x, &u, &sys.plant, &sys.integrator, &sys.noise, &mut rng).unwrap();
    }
    assert!(run.records.iter().all(|r| r.state_use == SideUse::Received && r.action_use == SideUse::Received));
    assert_eq!(run.m_lost, 0);
}

#[test]
fn forced_downlink_losses_replay_predicted_actions() {
    let sys = common::micro_system(5);
    let controlling = sys.controlling.clone().unwrap();
    let x0 = DVector::from_vec(vec![0.2, 0.0, -0.1, 0.1]);
    let (start, k) = (7, 6);
    let mut forced = ForcedLosses::burst(start, k);
    forced.uplink.clear();
    let cfg = Phase2Config {
        horizon: start + k + 3,
        mode: ControlMode::Predictive,
        forced,
        ..Phase2Config::default()
    };
    let ideal = Link::ideal(ChannelConfig::default());
    let run = run_phase2_loop(&sys, &x0, &cfg, &mut ideal.clone(), &mut ideal.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    let last = start - 1;
    let z = AugmentedLatent::new(
        sys.sensing.encode(&run.states.column(last).into_owned()).unwrap(),
        run.applied.column(last).into_owned(),
    );
    let predicted = controlling.predict_actions(&z, k, &[]).unwrap();
    for (j, u) in predicted.iter().enumerate() {
        assert_eq!(run.applied.column(start + j), u.column(0), "loss {}", j + 1);
        assert_eq!(run.records[start + j].action_use, SideUse::Predicted { depth: j + 1 });
    }
    assert_eq!(run.applied.column(start + k), run.issued.column(start + k));
    assert_eq!(run.m_lost, k);
}

#[test]
fn held_command_without_controlling_model() {
    let mut sys = common::micro_system(6);
    sys.controlling = None;
    let cfg = Phase2Config {
        horizon: 12,
        mode: ControlMode::HoldLast,
        forced: ForcedLosses::burst(4, 5),
        ..Phase2Config::default()
    };
    let ideal = Link::ideal(ChannelConfig::default());
    let x0 = DVector::from_element(4, 0.1);
    let run = run_phase2_loop(&sys, &x0, &cfg, &mut ideal.clone(), &mut ideal.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for m in 4..9 {
        assert_eq!(run.applied.column(m), run.applied.column(3));
    }
}

/// Linear plant with a linear encoder and exact Koopman blocks: the
/// depth-k estimate is the true latent.
#[test]
fn missing_state_on_a_linear_plant_is_exact() {
    use split_koopman::control::JacobianController;
    use split_koopman::neural::{Activation, DenseLayer, Network};
    use split_koopman::protocol::{handle_missing_state, MissingStatePolicy};

    let jac = JacobianController::build(&Default::default(), 0.01, &DMatrix::identity(4, 4), &DMatrix::identity(1, 1)).unwrap();
    let t = DMatrix::from_row_slice(4, 4, &[1.0, 0.5, 0.0, 0.0, 0.0, 2.0, 0.1, 0.0, 0.3, 0.0, 1.0, -0.4, 0.0, 0.0, 0.2, 1.5]);
    let t_inv = t.clone().try_inverse().unwrap();
    let mut m = SensingModel::new(KoopmanDims::cartpole(4), &Architecture::micro(4), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    m.encoder.net = Network::from_layers(vec![DenseLayer {
        weights: t.clone(),
        biases: DMatrix::zeros(4, 1),
        activation: Activation::Linear,
    }])
    .unwrap();
    m.k11 = &t * &jac.a_d * &t_inv;
    m.k12 = &t * &jac.b_d;

    let mut x = DVector::from_vec(vec![0.3, -0.2, 0.1, 0.4]);
    let last = m.encode(&x).unwrap();
    let mut issued = Vec::new();
    for k in 0..25 {
        let u = DVector::from_element(1, (k as f64 * 0.7).sin());
        x = &jac.a_d * &x + &jac.b_d * &u;
        issued.push(u);
        let est = handle_missing_state(Some(&last), &issued, &m, MissingStatePolicy::Predict).unwrap();
        assert!((est - m.encode(&x).unwrap()).amax() < 1e-8, "depth {}", k + 1);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn routing_and_m_lost_invariants(
        masks in (1usize..40).prop_flat_map(|n| (prop::collection::vec(prop::bool::weighted(0.4), n), prop::collection::vec(prop::bool::weighted(0.4), n)))
    ) {
        let sys = common::micro_system(8);
        let (up, down) = masks;
        if let Err(e) = common::check_routing(&sys, &up, &down) {
            prop_assert!(false, "{}", e);
        }
    }
}
