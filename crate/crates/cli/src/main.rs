use anyhow::{bail, Context, Result};
use astlb_cli::config::{
    parse_lambda_grid, parse_policy_list, FileConfig, JobSizeSpec, PolicySpec,
};
use astlb_cli::output::{write_csv, write_json, Row};
use astlb_cli::runner::{self, SimSettings, SolveSettings};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

/// Load-balancing experiments: large-system solver and finite-system
/// simulator for policies driven by queue length and attained service time.
#[derive(Parser)]
#[command(name = "astlb", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the large-system fixed point for one policy and load.
    Solve(SolveArgs),
    /// Simulate the finite system.
    Simulate(SimulateArgs),
    /// Solve a grid of loads for several policies.
    Sweep(SweepArgs),
    /// Run the built-in reference configurations.
    Table1(Table1Args),
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Key=value file supplying any long option; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of probed servers per arrival.
    #[arg(long)]
    d: Option<usize>,
    /// Layer width of the attained-service grid.
    #[arg(long)]
    delta: Option<f64>,
    /// Number of finite layers (defaults to covering all but 1e-3 of job sizes, capped at 400).
    #[arg(long)]
    r: Option<usize>,
    /// Squared coefficient of variation of the job-size law.
    #[arg(long)]
    scv: Option<f64>,
    /// Fraction of the workload brought by the short-job branch.
    #[arg(long)]
    f: Option<f64>,
    /// Erlang phases per branch of the job-size law.
    #[arg(long)]
    k: Option<usize>,
    /// Output CSV path.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a JSON mirror next to the CSV.
    #[arg(long)]
    json: bool,
}

#[derive(Args, Clone)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Fixed-point tolerance (l1 distance between iterates).
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Pin the queue-length buffer instead of adapting it.
    #[arg(long)]
    buffer: Option<usize>,
}

#[derive(Args, Clone)]
struct SimulateArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Number of servers.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    /// Simulated time; defaults to 1e7 / N.
    #[arg(long)]
    horizon: Option<f64>,
    /// Warm-up fraction of the horizon discarded from statistics.
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Sample the d servers with replacement.
    #[arg(long)]
    with_replacement: bool,
}

#[derive(Args, Clone)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated policy list.
    #[arg(long)]
    policies: Option<String>,
    /// Load grid start:step:end (inclusive).
    #[arg(long)]
    lambdas: Option<String>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    /// Concurrent solve limit.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Clone)]
struct Table1Args {
    #[command(flatten)]
    common: CommonArgs,
    /// Also simulate each configuration at this system size.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn file_config(path: &Option<PathBuf>) -> Result<FileConfig> {
    match path {
        Some(p) => FileConfig::load(p),
        None => Ok(FileConfig::default()),
    }
}

struct Merged<'a> {
    file: &'a FileConfig,
}

impl<'a> Merged<'a> {
    fn value<T: std::str::FromStr + Copy>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.file.get::<T>(key)?,
        })
    }

    fn require<T: std::str::FromStr + Copy>(&self, flag: Option<T>, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value(flag, key)?
            .ok_or_else(|| anyhow::anyhow!("missing required option --{key}"))
    }
}

fn job_spec(merged: &Merged, common: &CommonArgs) -> Result<JobSizeSpec> {
    Ok(JobSizeSpec {
        scv: merged.value(common.scv, "scv")?.unwrap_or(1.0),
        f: merged.value(common.f, "f")?.unwrap_or(0.5),
        k: merged.value(common.k, "k")?.unwrap_or(1),
    })
}

fn check_lambda(lambda: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        bail!("offered load must lie in [0, 1), got {lambda}");
    }
    Ok(lambda)
}

fn out_path(merged: &Merged, common: &CommonArgs, default: &str) -> Result<PathBuf> {
    Ok(match &common.out {
        Some(p) => p.clone(),
        None => merged
            .file
            .raw("out")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(default)),
    })
}

fn emit(rows: Vec<Row>, path: PathBuf, json: bool) -> Result<()> {
    write_csv(&path, &rows)?;
    if json {
        write_json(&path, &rows)?;
    }
    for row in &rows {
        println!("{}", row.to_csv_line());
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve(args) => {
            let file = file_config(&args.common.config)?;
            let merged = Merged { file: &file };
            let policy_text: String = match &args.policy {
                Some(p) => p.clone(),
                None => file
                    .raw("policy")
                    .context("missing required option --policy")?
                    .to_string(),
            };
            let spec = PolicySpec::parse(&policy_text)?;
            let lambda = check_lambda(merged.require(args.lambda, "lambda")?)?;
            let settings = SolveSettings {
                tol: merged.value(args.tol, "tol")?.unwrap_or(1e-10),
                max_iterations: merged.value(args.max_iters, "max-iters")?.unwrap_or(500),
                buffer: merged.value(args.buffer, "buffer")?,
            };
            let job = job_spec(&merged, &args.common)?;
            let d = merged.require(args.common.d, "d")?;
            let delta = merged.value(args.common.delta, "delta")?;
            let r = merged.value(args.common.r, "r")?;
            let outcome = runner::solve_point(&spec, lambda, d, delta, r, &job, &settings)?;
            let path = out_path(&merged, &args.common, "results.csv")?;
            emit(vec![outcome.row], path, args.common.json)?;
        }
        Command::Simulate(args) => {
            let file = file_config(&args.common.config)?;
            let merged = Merged { file: &file };
            let policy_text: String = match &args.policy {
                Some(p) => p.clone(),
                None => file
                    .raw("policy")
                    .context("missing required option --policy")?
                    .to_string(),
            };
            let spec = PolicySpec::parse(&policy_text)?;
            let lambda = check_lambda(merged.require(args.lambda, "lambda")?)?;
            let job = job_spec(&merged, &args.common)?;
            let d = merged.require(args.common.d, "d")?;
            let delta = merged.value(args.common.delta, "delta")?;
            let r = merged.value(args.common.r, "r")?;
            let sim = SimSettings {
                n: merged.require(args.n, "n")?,
                runs: merged.value(args.runs, "runs")?.unwrap_or(40),
                horizon: merged.value(args.horizon, "horizon")?,
                warmup: merged.value(args.warmup, "warmup")?.unwrap_or(0.3),
                seed: merged.value(args.seed, "seed")?.unwrap_or(0x5eed),
                with_replacement: args.with_replacement
                    || merged
                        .file
                        .get::<bool>("with-replacement")?
                        .unwrap_or(false),
            };
            let row = runner::simulate_point(&spec, lambda, d, delta, r, &job, &sim)?;
            let path = out_path(&merged, &args.common, "results.csv")?;
            emit(vec![row], path, args.common.json)?;
        }
        Command::Sweep(args) => {
            let file = file_config(&args.common.config)?;
            let merged = Merged { file: &file };
            let policies_text: String = match &args.policies {
                Some(p) => p.clone(),
                None => file
                    .raw("policies")
                    .context("missing required option --policies")?
                    .to_string(),
            };
            let lambdas_text: String = match &args.lambdas {
                Some(l) => l.clone(),
                None => file
                    .raw("lambdas")
                    .context("missing required option --lambdas")?
                    .to_string(),
            };
            let policies = parse_policy_list(&policies_text)?;
            let lambdas = parse_lambda_grid(&lambdas_text)?;
            let settings = SolveSettings {
                tol: merged.value(args.tol, "tol")?.unwrap_or(1e-10),
                max_iterations: merged.value(args.max_iters, "max-iters")?.unwrap_or(500),
                buffer: None,
            };
            let job = job_spec(&merged, &args.common)?;
            let d = merged.require(args.common.d, "d")?;
            let delta = merged.value(args.common.delta, "delta")?;
            let r = merged.value(args.common.r, "r")?;
            let jobs = merged.value(args.jobs, "jobs")?;
            let rows = runner::sweep(&policies, &lambdas, d, delta, r, &job, &settings, jobs)?;
            let path = out_path(&merged, &args.common, "sweep.csv")?;
            emit(rows, path, args.common.json)?;
        }
        Command::Table1(args) => {
            let file = file_config(&args.common.config)?;
            let merged = Merged { file: &file };
            let n = merged.value(args.n, "n")?;
            let runs = merged.value(args.runs, "runs")?;
            let seed = merged.value(args.seed, "seed")?.unwrap_or(0x5eed);
            let rows = runner::table1(n, runs, seed)?;
            let path = out_path(&merged, &args.common, "table1.csv")?;
            emit(rows, path, args.common.json)?;
        }
    }
    Ok(())
}
