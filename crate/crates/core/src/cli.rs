//! Command-line front end: `solve` for one instance, `bench` for a directory.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::bench::{self, BenchConfig};
use crate::mipsearch::{events_to_jsonl, solve, SolveConfig, SolveError, SolveResult, SolveStatus};
use crate::mps::{read_mps, MpsError, ParseDiagnostics};
use crate::rapid::{parse_criteria, Criterion, RapidConfig, RapidConfigError, RapidMode};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_IO: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "rapidlearn", version, about = "Branch-and-bound for pure integer programs with Rapid Learning")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one MPS instance.
    Solve(SolveArgs),
    /// Run every (instance, seed, config) combination of a directory.
    Bench(BenchArgs),
}

/// Solver flags shared by `solve` and the bench configurations.
#[derive(Debug, Clone, Args)]
pub struct SolverFlags {
    /// Where Rapid Learning may run: off, root or local.
    #[arg(long, default_value = "local")]
    pub rapid: String,
    /// Comma separated criteria: dualbound, leaves, degeneracy, obj, nsols, sblps.
    #[arg(long, default_value = "degeneracy")]
    pub criteria: String,
    #[arg(long = "freq-f", default_value_t = 5)]
    pub freq_f: u64,
    #[arg(long = "freq-beta", default_value_t = 4.0)]
    pub freq_beta: f64,
    #[arg(long = "max-conflicts", default_value_t = 10)]
    pub max_conflicts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long = "node-limit")]
    pub node_limit: Option<u64>,
    /// Seconds.
    #[arg(long = "time-limit", default_value_t = 3600.0)]
    pub time_limit: f64,
    /// Disable strong branching at shallow depths.
    #[arg(long = "no-strong-branching")]
    pub no_strong_branching: bool,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub path: PathBuf,
    #[command(flatten)]
    pub flags: SolverFlags,
    /// Write one JSON record per node to this file.
    #[arg(long = "emit-events")]
    pub emit_events: Option<PathBuf>,
    /// Print the JSON result instead of text.
    #[arg(long)]
    pub json: bool,
    /// Report wall_seconds as 0 so output is byte-for-byte reproducible.
    #[arg(long = "no-timing")]
    pub no_timing: bool,
    /// Write `<var> <value>` lines for the best solution.
    #[arg(long = "solution-out")]
    pub solution_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    pub dir: PathBuf,
    /// `name=flags`, e.g. `rl=--rapid local --criteria degeneracy`; repeatable.
    #[arg(long = "config", required = true)]
    pub configs: Vec<String>,
    /// Comma separated seeds.
    #[arg(long, default_value = "0,1,2,3,4")]
    pub seeds: String,
    /// Config the relative columns are computed against; defaults to the first.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Summary table.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub markdown: Option<PathBuf>,
    /// One row per (instance, seed, config) run.
    #[arg(long = "runs-csv")]
    pub runs_csv: Option<PathBuf>,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Parse(#[from] MpsError),
    #[error(transparent)]
    Rapid(#[from] RapidConfigError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Bench(#[from] bench::BenchError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse(MpsError::Io { .. }) => EXIT_IO,
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Rapid(_) | CliError::Solve(_) | CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Bench(bench::BenchError::Config(_)) => EXIT_CONFIG,
            CliError::Bench(_) => EXIT_IO,
        }
    }
}

impl SolverFlags {
    pub fn to_config(&self) -> Result<SolveConfig, CliError> {
        let mode: RapidMode = self.rapid.parse()?;
        let criteria = parse_criteria(&self.criteria)?;
        let rapid = RapidConfig {
            mode,
            criteria,
            f: self.freq_f,
            beta: self.freq_beta,
            max_transferred_conflicts: self.max_conflicts,
            base_seed: self.seed,
            ..RapidConfig::default()
        };
        let config = SolveConfig {
            rapid,
            node_limit: self.node_limit,
            time_limit: Some(self.time_limit),
            strong_branching: !self.no_strong_branching,
            audit: false,
        };
        config.validate()?;
        Ok(config)
    }

    /// Parses a whitespace separated flag string, as used by bench configs.
    pub fn parse_str(flags: &str) -> Result<SolverFlags, CliError> {
        #[derive(Parser)]
        #[command(no_binary_name = true)]
        struct Wrapper {
            #[command(flatten)]
            flags: SolverFlags,
        }
        Wrapper::try_parse_from(flags.split_whitespace())
            .map(|w| w.flags)
            .map_err(|e| CliError::Config(e.to_string().lines().next().unwrap_or_default().to_string()))
    }
}

/// The JSON result record.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: Option<f64>,
    pub dual_bound: Option<f64>,
    pub nodes: u64,
    pub rl_calls: u64,
    pub criterion_counts: BTreeMap<String, u64>,
    pub wall_seconds: f64,
    pub seed: u64,
}

impl SolveReport {
    pub fn new(result: &SolveResult, diag: &ParseDiagnostics, seed: u64, wall_seconds: f64) -> Self {
        let sign = if diag.maximize { -1.0 } else { 1.0 };
        let finite = |v: f64| v.is_finite().then_some(sign * v);
        let criterion_counts = Criterion::ALL
            .into_iter()
            .map(|c| (c.name().to_string(), result.stats.criterion_counts.get(&c).copied().unwrap_or(0)))
            .collect();
        SolveReport {
            status: result.status,
            objective: result.objective().map(|v| sign * v),
            dual_bound: finite(result.dual_bound),
            nodes: result.stats.nodes,
            rl_calls: result.stats.rl_calls,
            criterion_counts,
            wall_seconds,
            seed,
        }
    }

    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v}"));
        let status = serde_json::to_value(self.status).expect("status serializes");
        let tallies: Vec<String> = self
            .criterion_counts
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        format!(
            "status      {}\nobjective   {}\ndual bound  {}\nnodes       {}\nrl calls    {}\ncriteria    {}\ntime        {:.3}s\n",
            status.as_str().unwrap_or_default(),
            fmt(self.objective),
            fmt(self.dual_bound),
            self.nodes,
            self.rl_calls,
            tallies.join(" "),
            self.wall_seconds
        )
    }
}

fn write_file(path: &PathBuf, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.clone(),
        source,
    })
}

pub fn cmd_solve(args: &SolveArgs, out: &mut dyn Write) -> Result<SolveReport, CliError> {
    let config = args.flags.to_config()?;
    let (instance, diag) = read_mps(&args.path)?;
    let started = Instant::now();
    let result = solve(&instance, &config)?;
    let wall = if args.no_timing {
        0.0
    } else {
        started.elapsed().as_secs_f64()
    };
    let report = SolveReport::new(&result, &diag, args.flags.seed, wall);

    if let Some(path) = &args.emit_events {
        write_file(path, &events_to_jsonl(&result.events))?;
    }
    if let Some(path) = &args.solution_out {
        let mut text = String::new();
        if let Some((x, _)) = &result.incumbent {
            for (j, v) in x.iter().enumerate() {
                text.push_str(&format!("{} {}\n", instance.var_name(j), v));
            }
        }
        write_file(path, &text)?;
    }
    let rendered = if args.json {
        format!("{}\n", serde_json::to_string(&report).expect("report serializes"))
    } else {
        report.to_text()
    };
    let _ = out.write_all(rendered.as_bytes());
    Ok(report)
}

pub fn cmd_bench(args: &BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let mut configs = Vec::new();
    for spec in &args.configs {
        let (name, flags) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("config `{spec}` is not of the form name=flags")))?;
        let flags = SolverFlags::parse_str(flags)?;
        configs.push(BenchConfig {
            name: name.to_string(),
            solve: flags.to_config()?,
        });
    }
    let seeds: Vec<u64> = args
        .seeds
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Config(format!("bad seed list: {e}")))?;
    let suite = bench::run_suite(&args.dir, &configs, &seeds)?;
    for w in &suite.warnings {
        let _ = writeln!(err, "warning: {w}");
    }
    let baseline = args.baseline.clone().unwrap_or_else(|| configs[0].name.clone());
    let report = bench::Report::build(&suite.rows, &baseline)?;
    let _ = out.write_all(report.to_markdown().as_bytes());
    if let Some(path) = &args.csv {
        write_file(path, &report.to_csv()?)?;
    }
    if let Some(path) = &args.runs_csv {
        write_file(path, &bench::rows_to_csv(&suite.rows)?)?;
    }
    if let Some(path) = &args.markdown {
        write_file(path, &report.to_markdown())?;
    }
    Ok(())
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = write!(err, "{e}");
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a, out).map(|_| ()),
        Command::Bench(a) => cmd_bench(a, out, err),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
