//! Experiment harness: datasets, metrics, configuration, experiment drivers and sweeps.

mod config;
mod dataset;
mod experiments;
mod metrics;
mod sweep;

pub use config::{EvalConfig, ExperimentConfig, Preset, CONFIG_FORMAT, CONFIG_VERSION};
pub use dataset::{
    generate_dataset, record_trajectory, DataPolicy, DatasetConfig, Trajectory, TrajectoryDataset, DATASET_FORMAT,
    DATASET_VERSION,
};
pub use experiments::{
    action_nrmse, action_nrmse_over_link, action_reference_runs, collect_controlling_data, control_outcome, dataset_for, koopman_controller,
    links_for, run_msce, run_packet_loss, run_stabilization, state_nrmse, state_nrmse_over_link, sub_seed, train_controlling, train_sensing,
    train_system, ControlOutcome, LossPoint, StabilizationResult, TrainedSystem,
};
pub use metrics::{consecutive_lost, msce, nrmse};
pub use sweep::{
    grid, mean_by_snr, monotone_with_slack, read_csv, run_cell, run_sweep, write_csv, PlotData, PlotPoint, ResultRow,
    SweepCell, PLOT_FORMAT, PLOT_VERSION,
};
