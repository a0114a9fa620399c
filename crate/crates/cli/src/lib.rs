//! Batch pipeline behind the `stackdrive` binary.
//!
//! Every command reads the layered [`config::RunConfig`], writes its
//! artifacts below one output directory and records a manifest with the
//! SHA-256 of each input and output file.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use stackdrive::planner::{DriveMode, ScheduleMode};
use stackdrive::VehicleState;

pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "stackdrive", version, about = "Shared-control planning with meta-learned driver models")]
pub struct Cli {
    /// JSON run configuration with sections scenario, population, learning, datagen, planner, solver.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Directory that receives every artifact.
    #[arg(long, global = true, default_value = "runs", value_name = "DIR")]
    pub out: PathBuf,
    /// Override one config leaf, e.g. `learning.alpha=0.02`. Repeatable; applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_state(s: &str) -> Result<VehicleState, String> {
    s.parse().map_err(|e: stackdrive::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate drivers answering announced planner policies; one JSONL file per type.
    GenData {
        /// Driver types to simulate (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
        types: Vec<u32>,
        /// Sets datagen.seed and datagen.policies.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sets datagen.samples_per_type.
        #[arg(long)]
        samples: Option<usize>,
        /// Sets datagen.policies.count.
        #[arg(long)]
        policies: Option<usize>,
    },
    /// Meta-train a population utility from the generated datasets.
    MetaTrain {
        /// Dataset directory (default: <out>/data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Sets learning.max_outer_iters.
        #[arg(long)]
        iters: Option<usize>,
        /// Sets learning.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Also train with this many consecutive seeds and write a mean/std summary.
        #[arg(long, value_name = "N")]
        seed_sweep: Option<usize>,
        /// Sets learning.first_order.
        #[arg(long)]
        first_order: bool,
    },
    /// Adapt the meta utility to one driver type.
    Adapt {
        #[arg(long = "type", value_name = "ID")]
        driver_type: u32,
        /// Meta utility file (default: <out>/meta.json).
        #[arg(long, value_name = "FILE")]
        meta: Option<PathBuf>,
        /// Dataset directory (default: <out>/data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Sets learning.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Sets learning.adapt_iters.
        #[arg(long)]
        adapt_iters: Option<usize>,
        /// Sets learning.adapt_sample_size.
        #[arg(long)]
        adapt_samples: Option<usize>,
    },
    /// Drive one receding-horizon episode with a simulated driver.
    Drive {
        #[arg(long = "type", value_name = "ID")]
        driver_type: u32,
        /// Initial state `p,y,v` (default: [0,0,0] for types 1 and 3, [0,1,0] otherwise).
        #[arg(long, value_parser = parse_state)]
        x0: Option<VehicleState>,
        /// shared or driver_only.
        #[arg(long, default_value = "shared", value_parser = parse_json_enum::<DriveMode>)]
        mode: DriveMode,
        /// Planner utility: `adapted`, `meta`, or a table file.
        #[arg(long, default_value = "adapted")]
        utility: String,
        /// Forced driver action `p,y,v=action`. Repeatable.
        #[arg(long = "override", value_name = "P,Y,V=ACTION")]
        overrides: Vec<String>,
        /// Sets planner.schedule_mode (replan_relative or absolute).
        #[arg(long, value_parser = parse_json_enum::<ScheduleMode>)]
        schedule: Option<ScheduleMode>,
        /// Sets planner.seed; also seeds the simulated driver.
        #[arg(long)]
        seed: Option<u64>,
        /// File stem of the episode artifacts.
        #[arg(long)]
        name: Option<String>,
    },
    /// Tabulate every episode under the episode directory.
    Eval {
        /// Episode directory (default: <out>/episodes).
        #[arg(long, value_name = "DIR")]
        episodes: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> CliResult<()> {
    commands::dispatch(cli)
}
