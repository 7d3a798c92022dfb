//! `rowguard`: generate traces, replay them under the allocator modes,
//! sweep parameters, and check isolation.

mod commands;
mod setup;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rowguard::alloc::Mode;

/// Exit status when a run breaks isolation or fails its audit.
pub const EXIT_SECURITY: u8 = 1;
/// Exit status for bad flags, configs or inputs.
pub const EXIT_USAGE: u8 = 2;
/// Exit status of `simulate --strict` when the mode ran out of memory.
pub const EXIT_UNSUPPORTED: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "rowguard", version, about = "Rowhammer-isolating page allocator simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a JSON-Lines trace from a mix spec.
    GenTrace(GenTraceArgs),
    /// Replay a workload under one mode and report its overheads.
    Simulate(SimulateArgs),
    /// Replay one workload across chunk sizes or guard-row counts.
    Sweep(SweepArgs),
    /// Replay with periodic isolation checks and audits.
    Verify(VerifyArgs),
    /// Dump the Global Row Table or its chunk neighbor histogram.
    Grt(GrtArgs),
    /// Compare modes on one workload.
    Report(ReportArgs),
}

/// Flags shared by every command that replays a workload. Flags win over
/// the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct RunArgs {
    /// JSON run config with `dram`, `allocator`, `workload`, `output` and
    /// `seed` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Allocator mode.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    /// Logical rows per reservation chunk.
    #[arg(long)]
    pub chunk_rows: Option<u32>,
    /// Guard rows between domains.
    #[arg(long)]
    pub n_guard: Option<u32>,
    /// Zonelet-to-zone switch threshold in bytes.
    #[arg(long)]
    pub switch_threshold: Option<u64>,
    /// Disable zone expansion.
    #[arg(long)]
    pub no_expand: bool,
    /// Disable zonelets.
    #[arg(long)]
    pub no_zonelets: bool,
    /// Replay this trace instead of the configured workload.
    #[arg(long, conflicts_with = "mix")]
    pub trace: Option<PathBuf>,
    /// Generate the workload from this mix spec.
    #[arg(long)]
    pub mix: Option<PathBuf>,
    /// Seed for trace generation and replay. Falls back to the config,
    /// then to ROWGUARD_SEED, then to 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Ticks between timeline samples.
    #[arg(long)]
    pub sample_interval: Option<u64>,
}

#[derive(Args, Debug)]
pub struct GenTraceArgs {
    /// Mix spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Overrides the spec's seed. Falls back to ROWGUARD_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory for timeline.csv and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 3 if any request could not be served.
    #[arg(long)]
    pub strict: bool,
    /// Also check isolation and audit the allocator at the end.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    ChunkRows,
    NGuard,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Parameter to vary.
    #[arg(long, value_enum)]
    pub axis: Axis,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<u32>,
    /// Write the table as JSON here too.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Events between checks; 0 checks only at the end.
    #[arg(long, default_value_t = 10_000)]
    pub every: u64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GrtArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write the table as CSV here; `-` for stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Print the fraction of chunks with each neighbor count.
    #[arg(long)]
    pub histogram: bool,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Modes to compare.
    #[arg(long, value_delimiter = ',', value_parser = parse_mode,
          default_value = "aegis,zebram,siloz,buddy")]
    pub modes: Vec<Mode>,
    /// Write the rows as JSON here too.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    s.parse().map_err(|e: rowguard::Error| e.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match cli.cmd {
        Command::GenTrace(a) => commands::gen_trace(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::Grt(a) => commands::grt(&a),
        Command::Report(a) => commands::report(&a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
