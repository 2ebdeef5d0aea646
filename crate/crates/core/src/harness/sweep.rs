//! Grid sweeps, CSV result tables and plot-ready JSON.

use std::io::{Read, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::config::ExperimentConfig;
use super::experiments::{
    action_nrmse_over_link, action_reference_runs, control_outcome, dataset_for, links_for, state_nrmse_over_link, sub_seed,
    train_system,
};
use crate::protocol::{ControlMode, Phase2Config};

const EVAL_LINKS: u64 = 10;

/// One sweep cell. Metrics are empty when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub snr_db: f64,
    pub latent_dim: usize,
    pub trajectories: usize,
    pub seed: u64,
    pub state_nrmse: Option<f64>,
    pub action_nrmse: Option<f64>,
    pub msce: Option<f64>,
    pub m_lost: Option<usize>,
    pub sensing_epochs: Option<usize>,
    pub controlling_epochs: Option<usize>,
    pub train_seconds: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepCell {
    pub snr_db: f64,
    pub latent_dim: usize,
    pub trajectories: usize,
    pub seed: u64,
}

pub fn grid(cfg: &ExperimentConfig) -> Vec<SweepCell> {
    let counts = if cfg.trajectory_counts.is_empty() {
        vec![cfg.dataset.train]
    } else {
        cfg.trajectory_counts.clone()
    };
    let mut out = Vec::new();
    for &snr_db in &cfg.snr_db {
        for &latent_dim in &cfg.latent_dims {
            for &trajectories in &counts {
                for &seed in &cfg.seeds {
                    out.push(SweepCell {
                        snr_db,
                        latent_dim,
                        trajectories,
                        seed,
                    });
                }
            }
        }
    }
    out
}

/// Train and evaluate one cell.
pub fn run_cell(cfg: &ExperimentConfig, cell: SweepCell) -> Result<ResultRow> {
    let mut cfg = cfg.clone();
    if let Some(depth) = cfg.sweep_depth {
        cfg.sensing.depth = depth;
        cfg.controlling.depth = depth;
    }
    let cfg = &cfg;
    let data = dataset_for(cfg, Some(cell.trajectories), cell.seed)?;
    let trained = train_system(cfg, cell.latent_dim, Some(cell.snr_db), &data, cell.seed)?;
    let sys = trained.remote(cfg)?;
    // Predictions restart whenever a packet gets through at the cell's SNR.
    let mut eval_links = links_for(cfg, Some(cell.snr_db), sub_seed(cell.seed, EVAL_LINKS))?;
    let (start, horizon) = (cfg.eval.predict_start, cfg.eval.predict_horizon);
    let state = state_nrmse_over_link(&trained.sensing, &data.test, start, horizon, Some(&mut eval_links.uplink))?;
    let reference = action_reference_runs(cfg, &sys, &data.test, cell.seed)?;
    let action = action_nrmse_over_link(&trained.controlling, &reference, start, horizon, Some(&mut eval_links.downlink))?;
    let p2 = Phase2Config {
        horizon: cfg.eval.control_horizon,
        mode: ControlMode::Predictive,
        ..Phase2Config::default()
    };
    let mut links = links_for(cfg, Some(cell.snr_db), cell.seed)?;
    let outcome = control_outcome(&sys, &cfg.loss_x0(), &p2, &mut links, cell.seed)?;
    Ok(ResultRow {
        experiment: cfg.name.clone(),
        snr_db: cell.snr_db,
        latent_dim: cell.latent_dim,
        trajectories: cell.trajectories,
        seed: cell.seed,
        state_nrmse: Some(state),
        action_nrmse: Some(action),
        msce: Some(outcome.msce),
        m_lost: Some(outcome.m_lost),
        sensing_epochs: Some(trained.sensing_report.epochs.len()),
        controlling_epochs: Some(trained.controlling_report.epochs.len()),
        train_seconds: Some(trained.seconds),
        error: None,
    })
}

fn failed_row(cfg: &ExperimentConfig, cell: SweepCell, e: &Error) -> ResultRow {
    ResultRow {
        experiment: cfg.name.clone(),
        snr_db: cell.snr_db,
        latent_dim: cell.latent_dim,
        trajectories: cell.trajectories,
        seed: cell.seed,
        state_nrmse: None,
        action_nrmse: None,
        msce: None,
        m_lost: None,
        sensing_epochs: None,
        controlling_epochs: None,
        train_seconds: None,
        error: Some(e.to_string()),
    }
}

/// Every cell of the grid, in grid order. Cells run on up to `threads`
/// workers; a failing cell is recorded and the sweep continues.
pub fn run_sweep(cfg: &ExperimentConfig, threads: usize) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let cells = grid(cfg);
    let slots: Vec<Mutex<Option<ResultRow>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, cells.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&cell) = cells.get(i) else { break };
                let row = run_cell(cfg, cell).unwrap_or_else(|e| failed_row(cfg, cell, &e));
                *slots[i].lock().expect("result slot") = Some(row);
            });
        }
    });
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot").expect("every cell ran"))
        .collect())
}

pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Serialization(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<ResultRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::Serialization(e.to_string())))
        .collect()
}

pub const PLOT_FORMAT: &str = "split-koopman/plot";
pub const PLOT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Plot-ready series; rendering is left to the reader.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub format: String,
    pub version: u32,
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<PlotPoint>,
}

impl PlotData {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            format: PLOT_FORMAT.into(),
            version: PLOT_VERSION,
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, series: &str, x: f64, y: f64) {
        self.points.push(PlotPoint {
            x,
            y,
            series: series.into(),
        });
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Mean of a metric per SNR, over rows with latent dimension `d`.
pub fn mean_by_snr(rows: &[ResultRow], d: usize, metric: fn(&ResultRow) -> Option<f64>) -> Vec<(f64, f64)> {
    let mut snrs: Vec<f64> = rows.iter().filter(|r| r.latent_dim == d).map(|r| r.snr_db).collect();
    snrs.sort_by(f64::total_cmp);
    snrs.dedup();
    snrs.into_iter()
        .filter_map(|snr| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.latent_dim == d && r.snr_db == snr)
                .filter_map(metric)
                .collect();
            (!vals.is_empty()).then(|| (snr, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect()
}

/// Non-increasing along increasing SNR, allowing one adjacent inversion of
/// at most `slack` relative.
pub fn monotone_with_slack(means: &[(f64, f64)], slack: f64) -> bool {
    let mut inversions = 0;
    for w in means.windows(2) {
        let (prev, next) = (w[0].1, w[1].1);
        if next > prev {
            if next > prev * (1.0 + slack) {
                return false;
            }
            inversions += 1;
        }
    }
    inversions <= 1
}
