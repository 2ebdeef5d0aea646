use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use split_koopman::harness::{
    action_nrmse, action_reference_runs, collect_controlling_data, dataset_for, mean_by_snr, monotone_with_slack, read_csv,
    run_packet_loss, run_stabilization, run_sweep, state_nrmse, train_controlling, train_sensing, write_csv,
    ExperimentConfig, PlotData, Preset, TrajectoryDataset,
};
use split_koopman::koopman::Checkpoint;
use split_koopman::protocol::{run_phase2_loop, write_records, ControlMode, Phase2Config, RemoteSystem};
use split_koopman::Result;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PresetArg {
    Paper,
    Desk,
}

#[derive(Debug, Parser)]
#[command(name = "skae", about = "Split Koopman autoencoder remote-control experiments")]
struct Cli {
    /// TOML experiment configuration; unset fields take the preset values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long, global = true, value_enum, default_value = "desk")]
    preset: PresetArg,
    /// Target mean SNR; single-run commands use an ideal link without it.
    #[arg(long, global = true, allow_hyphen_values = true)]
    snr_db: Option<f64>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the trajectory dataset.
    GenData,
    /// Phase 1: split training of the sensing model.
    TrainSensing,
    /// Train the actuator's controlling model on closed-loop data.
    TrainControlling,
    /// State and action prediction NRMSE on the test split.
    EvalPredict,
    /// Far-from-equilibrium stabilization and packet-loss runs.
    RunControl,
    /// Train and evaluate every cell of the SNR x d x trajectories x seed grid.
    Sweep {
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Summarize a sweep CSV.
    Report {
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

struct Ctx {
    cfg: ExperimentConfig,
    out: PathBuf,
    seed: u64,
    snr_db: Option<f64>,
    d: usize,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn dataset(&self) -> Result<TrajectoryDataset> {
        let p = self.path("dataset.json");
        if p.exists() {
            TrajectoryDataset::load(&p)
        } else {
            dataset_for(&self.cfg, None, self.seed)
        }
    }

    fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::load(&self.path("checkpoint.json"))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn context(cli: &Cli) -> Result<Ctx> {
    let preset = match cli.preset {
        PresetArg::Paper => Preset::Paper,
        PresetArg::Desk => Preset::Desk,
    };
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::preset(preset),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(snr) = cli.snr_db {
        cfg.snr_db = vec![snr];
    }
    if let Some(d) = cli.latent_dim {
        cfg.latent_dims = vec![d];
    }
    cfg.validate()?;
    fs::create_dir_all(&cli.out_dir)?;
    Ok(Ctx {
        seed: cfg.seeds[0],
        d: cfg.latent_dims[0],
        snr_db: cli.snr_db,
        out: cli.out_dir.clone(),
        cfg,
    })
}

fn run(cli: Cli) -> Result<()> {
    let ctx = context(&cli)?;
    let cfg = &ctx.cfg;
    match cli.command {
        Command::GenData => {
            let ds = dataset_for(cfg, None, ctx.seed)?;
            ds.save(&ctx.path("dataset.json"))?;
            println!("train {} / val {} / test {} trajectories", ds.train.len(), ds.val.len(), ds.test.len());
        }
        Command::TrainSensing => {
            let ds = ctx.dataset()?;
            let (sensing, report) = train_sensing(cfg, ctx.d, ctx.snr_db, &ds, ctx.seed)?;
            let ck = Checkpoint {
                sensing,
                controlling: None,
                depth: cfg.sensing.depth,
                schedule: cfg.sensing.schedule,
            };
            ck.save(&ctx.path("checkpoint.json"))?;
            write(&ctx.path("sensing_report.json"), &serde_json::to_string_pretty(&report)?)?;
            let mut plot = PlotData::new("sensing training", "epoch", "loss");
            for e in &report.epochs {
                plot.push("train", e.epoch as f64, e.train.total);
                plot.push("validation", e.epoch as f64, e.val.total);
            }
            write(&ctx.path("sensing_loss_plot.json"), &plot.to_json()?)?;
        }
        Command::TrainControlling => {
            let mut ck = ctx.checkpoint()?;
            let runs = collect_controlling_data(cfg, &ck.sensing, ctx.snr_db, cfg.controlling_runs, ctx.seed)?;
            let split = (runs.len() * 4 / 5).max(1).min(runs.len());
            let (train, val) = runs.split_at(split);
            let val = if val.is_empty() { train } else { val };
            let (controlling, report) = train_controlling(cfg, &ck.sensing, train, val, ctx.seed)?;
            ck.controlling = Some(controlling);
            ck.save(&ctx.path("checkpoint.json"))?;
            write(&ctx.path("controlling_report.json"), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::EvalPredict => {
            let ck = ctx.checkpoint()?;
            let ds = ctx.dataset()?;
            let (start, horizon) = (cfg.eval.predict_start, cfg.eval.predict_horizon);
            let state = state_nrmse(&ck.sensing, &ds.test, start, horizon)?;
            let mut summary = serde_json::json!({ "state_nrmse": state });
            if let Some(c) = &ck.controlling {
                let sys = RemoteSystem::new(cfg.plant, cfg.integrator, cfg.process_noise, ck.sensing.clone(), Some(c.clone()), &cfg.q_x(), &cfg.r())?;
                let reference = action_reference_runs(cfg, &sys, &ds.test, ctx.seed)?;
                summary["action_nrmse"] = action_nrmse(c, &reference, start, horizon)?.into();
            }
            let mut plot = PlotData::new("state prediction NRMSE vs horizon", "horizon", "NRMSE %");
            for h in (10..=horizon).step_by(10) {
                plot.push("state", h as f64, state_nrmse(&ck.sensing, &ds.test, start, h)?);
            }
            println!("{summary}");
            write(&ctx.path("predict.json"), &serde_json::to_string_pretty(&summary)?)?;
            write(&ctx.path("predict_plot.json"), &plot.to_json()?)?;
        }
        Command::RunControl => {
            let ck = ctx.checkpoint()?;
            let sys = RemoteSystem::new(cfg.plant, cfg.integrator, cfg.process_noise, ck.sensing.clone(), ck.controlling.clone(), &cfg.q_x(), &cfg.r())?;
            let stab = run_stabilization(cfg, &sys, ctx.seed)?;
            println!(
                "far start: Koopman MSCE {:.4} final {:.4}; Jacobian MSCE {:.4} final {:.4}",
                stab.koopman.msce, stab.koopman.final_error, stab.jacobian.msce, stab.jacobian.final_error
            );
            let mut summary = serde_json::json!({ "stabilization": stab });
            if ck.controlling.is_some() {
                let points = run_packet_loss(cfg, &sys, ctx.seed)?;
                let mut plot = PlotData::new("MSCE vs consecutive losses", "M_lost", "MSCE");
                for p in &points {
                    println!("losses {:>3}: predictive MSCE {:.4}  hold MSCE {:.4}", p.burst, p.predictive.msce, p.hold.msce);
                    plot.push("predictive", p.burst as f64, p.predictive.msce);
                    plot.push("non-predictive", p.burst as f64, p.hold.msce);
                }
                summary["packet_loss"] = serde_json::to_value(&points)?;
                write(&ctx.path("packet_loss_plot.json"), &plot.to_json()?)?;
                let p2 = Phase2Config {
                    horizon: cfg.eval.control_horizon,
                    mode: ControlMode::Predictive,
                    ..Phase2Config::default()
                };
                let mut links = split_koopman::harness::links_for(cfg, ctx.snr_db, ctx.seed)?;
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(ctx.seed);
                let run = run_phase2_loop(&sys, &cfg.loss_x0(), &p2, &mut links.uplink, &mut links.downlink, &mut rng)?;
                let f = fs::File::create(ctx.path("loop_records.ndjson"))?;
                write_records(&run.records, BufWriter::new(f))?;
                println!("wrote {}", ctx.path("loop_records.ndjson").display());
            }
            write(&ctx.path("control.json"), &serde_json::to_string_pretty(&summary)?)?;
        }
        Command::Sweep { threads } => {
            let rows = run_sweep(cfg, threads)?;
            let path = ctx.path("results.csv");
            write_csv(&rows, fs::File::create(&path)?)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
        }
        Command::Report { input } => {
            let path = input.unwrap_or_else(|| ctx.path("results.csv"));
            let rows = read_csv(fs::File::open(&path)?)?;
            let failed = rows.iter().filter(|r| r.error.is_some()).count();
            println!("{} rows, {} failed", rows.len(), failed);
            let mut plot = PlotData::new("prediction NRMSE vs SNR", "SNR dB", "NRMSE %");
            for &d in &cfg.latent_dims {
                let state = mean_by_snr(&rows, d, |r| r.state_nrmse);
                let action = mean_by_snr(&rows, d, |r| r.action_nrmse);
                for (snr, v) in &state {
                    println!("d={d} snr={snr:>6.1} dB  state NRMSE {v:.3}%");
                    plot.push(&format!("state d={d}"), *snr, *v);
                }
                for (snr, v) in &action {
                    println!("d={d} snr={snr:>6.1} dB  action NRMSE {v:.3}%");
                    plot.push(&format!("action d={d}"), *snr, *v);
                }
                println!(
                    "d={d} trend: state {} action {}",
                    if monotone_with_slack(&state, 0.1) { "monotone" } else { "not monotone" },
                    if monotone_with_slack(&action, 0.1) { "monotone" } else { "not monotone" }
                );
            }
            write(&ctx.path("nrmse_plot.json"), &plot.to_json()?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
