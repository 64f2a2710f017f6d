//! Experiment runner: configuration files, binary trajectories and the
//! `sample`, `simulate`, `verify`, `conditions` and `report` commands.

pub mod config;
pub mod error;
pub mod run;
pub mod trajfile;

pub use config::{emit, parse_config, ExperimentConfig};
pub use error::CliError;
pub use run::{apply_seed, run, Command, RunOutcome};
pub use trajfile::{read_trajectory, write_trajectory, TrajectoryFile};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TAGDYN_OUT";
