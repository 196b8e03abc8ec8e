//! Experiment runner for the `aloha-num` library.
//!
//! Every subcommand produces one CSV table (plus a JSON manifest when written to a
//! file). The functions in [`commands`] are usable without the command line.

pub mod commands;
pub mod source;
pub mod table;

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

pub use source::{NetworkRange, NetworkSpec};
pub use table::{Cell, Table};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ALOHA_NUM_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] aloha_num::Error),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use aloha_num::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidSize { .. } | E::Domain(_) | E::UnknownLink(_) => 2,
                E::Infeasible { .. } | E::Unstable { .. } => 3,
                E::Divergence { .. } => 4,
                E::Io(_) | E::Network(_) => 5,
                E::Numeric { .. } => 7,
            },
            CliError::Io(_) | CliError::Csv(_) => 5,
            CliError::Validation(_) => 6,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "aloha-num", version, about = "Delay-constrained slotted-Aloha optimization experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Output CSV file. Without it the table goes to `$ALOHA_NUM_OUT_DIR/<command>.csv`
    /// when that variable is set, and to stdout otherwise.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true, env = OUT_DIR_ENV, hide_env_values = true)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Minimum feasible link delay bound for one or more networks.
    MinDc(MinDcArgs),
    /// Energy and rate utility of optimal points over a weight and bound grid.
    Tradeoff(TradeoffArgs),
    /// Per-round error trace of a distributed algorithm against the centralized optimum.
    Converge(ConvergeArgs),
    /// Optimal against suboptimal MAC rates over a weight grid.
    CompareSubopt(CompareArgs),
    /// Slot-level simulation of a MAC operating point against the delay model.
    Simulate(SimulateArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::MinDc(_) => "min-dc",
            Command::Tradeoff(_) => "tradeoff",
            Command::Converge(_) => "converge",
            Command::CompareSubopt(_) => "compare-subopt",
            Command::Simulate(_) => "simulate",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MinDcArgs {
    /// Networks, e.g. `linear:4..32:4,star:4..16` (ranges are inclusive).
    #[arg(long, value_delimiter = ',', required = true)]
    pub network: Vec<NetworkRange>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Problem {
    Mac,
    Xlayer,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TradeoffArgs {
    #[arg(long, default_value = "sample10")]
    pub network: NetworkSpec,
    #[arg(long, value_enum, default_value = "mac")]
    pub problem: Problem,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.1, 1.0, 10.0])]
    pub lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub lambda2: Vec<f64>,
    /// Link delay bounds (MAC problem).
    #[arg(long, value_delimiter = ',', default_values_t = [40.0, 100.0, 1000.0])]
    pub dc: Vec<f64>,
    /// Session delay bounds (cross-layer problem).
    #[arg(long, value_delimiter = ',', default_values_t = [100.0, 800.0, 1600.0])]
    pub ds: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    MacDist,
    XlayerGrad,
    XlayerNewton,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StepArgs {
    /// Link dual step.
    #[arg(long)]
    pub step_alpha: Option<f64>,
    /// Session dual step (cross-layer) or rate dual step (MAC).
    #[arg(long)]
    pub step_beta: Option<f64>,
    /// Probability step (cross-layer).
    #[arg(long)]
    pub step_phi: Option<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ConvergeArgs {
    #[arg(long, default_value = "sample10")]
    pub network: NetworkSpec,
    #[arg(long, value_enum)]
    pub algorithm: Algorithm,
    /// Defaults: 5 for mac-dist, 0.005 for the cross-layer algorithms.
    #[arg(long)]
    pub lambda1: Option<f64>,
    /// Defaults: 0.1 for mac-dist, 10 for the cross-layer algorithms.
    #[arg(long)]
    pub lambda2: Option<f64>,
    #[arg(long, default_value_t = 100.0)]
    pub dc: f64,
    /// Session delay bound; without it the bounds stored with the network are used.
    #[arg(long)]
    pub ds: Option<f64>,
    #[command(flatten)]
    pub steps: StepArgs,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Relative error counted as converged.
    #[arg(long, default_value_t = 0.01)]
    pub tolerance: f64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct CompareArgs {
    #[arg(long, default_value = "sample10")]
    pub network: NetworkSpec,
    #[arg(long, value_delimiter = ',', default_values_t = [0.01, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0])]
    pub lambda1: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1.0])]
    pub lambda2: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [100.0])]
    pub dc: Vec<f64>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value = "linear:2")]
    pub network: NetworkSpec,
    /// JSON array of link probabilities in link order.
    #[arg(long, conflicts_with = "dc")]
    pub probs: Option<PathBuf>,
    /// Simulate the optimal MAC point for this link delay bound, loaded at its rates.
    #[arg(long)]
    pub dc: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Load every link at this fraction of its success probability. Defaults to 0.5
    /// unless `--dc` supplies the rates.
    #[arg(long)]
    pub load: Option<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [1u64])]
    pub seed: Vec<u64>,
    #[arg(long, default_value_t = 1_000_000)]
    pub horizon: u64,
    /// Relative tolerance on mean link delay (throughput uses 2%).
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

/// Result of one subcommand. A `failure` is reported after the table is written.
#[derive(Debug)]
pub struct Outcome {
    pub table: Table,
    pub seeds: Vec<u64>,
    pub summary: Vec<String>,
    pub failure: Option<CliError>,
}

impl Outcome {
    pub(crate) fn ok(table: Table) -> Self {
        Self {
            table,
            seeds: Vec::new(),
            summary: Vec::new(),
            failure: None,
        }
    }
}

pub fn execute(command: &Command) -> Result<Outcome, CliError> {
    match command {
        Command::MinDc(a) => commands::min_dc(a),
        Command::Tradeoff(a) => commands::tradeoff(a),
        Command::Converge(a) => commands::converge(a),
        Command::CompareSubopt(a) => commands::compare_subopt(a),
        Command::Simulate(a) => commands::simulate(a),
    }
}

/// Runs the parsed command line, writes the table and returns the summary lines.
pub fn run(cli: &Cli) -> Result<Vec<String>, CliError> {
    let outcome = execute(&cli.command)?;
    let target = cli
        .out
        .clone()
        .or_else(|| cli.out_dir.as_ref().map(|d| d.join(format!("{}.csv", cli.command.name()))));
    let mut summary = outcome.summary;
    match &target {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            outcome.table.write_csv(BufWriter::new(File::create(path)?))?;
            let manifest = table::Manifest {
                tool: env!("CARGO_PKG_NAME"),
                version: env!("CARGO_PKG_VERSION"),
                command: cli.command.name(),
                schema: outcome.table.schema,
                columns: &outcome.table.header,
                rows: outcome.table.rows.len(),
                seeds: &outcome.seeds,
                config: &cli.command,
                status: outcome.failure.as_ref().map_or_else(|| "ok".to_string(), |e| e.to_string()),
            };
            let json = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
            fs::write(table::manifest_path(path), json + "\n")?;
            summary.push(format!("wrote {}", path.display()));
        }
        None => outcome.table.write_csv(io::stdout().lock())?,
    }
    match outcome.failure {
        Some(e) => Err(e),
        None => Ok(summary),
    }
}
