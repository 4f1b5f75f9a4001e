use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bethe_cs::harness::{cells_to_csv, parse_grid, run_checks, run_sweep, SweepSpec};
use bethe_cs::solvers::SeedInit;
use bethe_cs::{generate_instance, solve, Algorithm, Error, Instance, MatrixScaling, PriorParams, SolverConfig};

#[derive(Parser)]
#[command(
    name = "bethe-cs",
    version,
    about = "Compressed sensing by mean-field and Bethe free-energy methods"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random instance and write it as JSON.
    Gen(GenArgs),
    /// Run a solver on an instance file.
    Solve(SolveArgs),
    /// Sweep a (rho, alpha) grid and write success statistics as CSV.
    Sweep(SweepArgs),
    /// Run the gradient, bound and equivalence self-checks.
    Check(CheckArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scaling {
    OneOverN,
    UnitVariance,
}

impl From<Scaling> for MatrixScaling {
    fn from(s: Scaling) -> Self {
        match s {
            Scaling::OneOverN => MatrixScaling::OneOverN,
            Scaling::UnitVariance => MatrixScaling::UnitVariance,
        }
    }
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    rho: f64,
    #[arg(long, default_value_t = 1e-8)]
    delta0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Scaling::OneOverN)]
    scaling: Scaling,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SolverArgs {
    #[arg(long, value_parser = parse_algo, default_value = "amp")]
    algo: Algorithm,
    #[arg(long, default_value_t = 1000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Damping factor in [0, 1); amp-damped defaults to 0.5.
    #[arg(long)]
    damping: Option<f64>,
    /// Re-estimate the noise variance during AMP.
    #[arg(long)]
    learn_delta: bool,
    /// Fixed (or starting) noise variance used by the solver.
    #[arg(long)]
    delta: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::new(self.algo);
        cfg.max_iter = self.max_iter;
        cfg.tol = self.tol;
        if let Some(d) = self.damping {
            cfg.damping = d;
        }
        cfg.learn_delta = self.learn_delta;
        cfg.delta_init = self.delta;
        cfg
    }
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long)]
    instance: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// Include per-iteration energy and noise traces in the report.
    #[arg(long)]
    trace: bool,
    /// Start from a random estimate drawn with this seed instead of zero.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Grid as start:stop:step or a comma-separated list.
    #[arg(long)]
    rho: String,
    #[arg(long)]
    alpha: String,
    #[arg(long, default_value_t = 256)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
    #[arg(long, default_value_t = 1e-8)]
    delta0: f64,
    #[arg(long, default_value_t = 1e-6)]
    success_mse: f64,
    #[arg(long, value_enum, default_value_t = Scaling::UnitVariance)]
    scaling: Scaling,
    #[command(flatten)]
    solver: SolverArgs,
    /// Worker threads; defaults to the available parallelism.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => std::io::stdout().write_all(text.as_bytes())?,
    }
    Ok(())
}

enum Failure {
    Usage(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Gen(a) => {
            let prior = PriorParams::new(a.rho)?;
            let inst = generate_instance(a.n, a.m, prior, a.delta0, a.scaling.into(), a.seed)?;
            emit(a.out.as_deref(), &inst.to_json()?)?;
        }
        Command::Solve(a) => {
            let text = fs::read_to_string(&a.instance)?;
            let inst = Instance::from_json(&text)?;
            let mut cfg = a.solver.config();
            if let Some(seed) = a.seed {
                cfg.seed_init = SeedInit::Random(seed);
            }
            let report = solve(&inst, &cfg)?;
            emit(a.out.as_deref(), &report.to_json(a.trace)?)?;
            if report.diverged {
                return Err(Failure::Numeric(format!(
                    "{} diverged after {} iterations",
                    cfg.algo, report.iterations
                )));
            }
        }
        Command::Sweep(a) => {
            let cfg = a.solver.config();
            let mut spec = SweepSpec::new(parse_grid(&a.rho)?, parse_grid(&a.alpha)?, cfg);
            spec.n = a.n;
            spec.trials = a.trials;
            spec.delta0 = a.delta0;
            spec.success_mse = a.success_mse;
            spec.scaling = a.scaling.into();
            spec.seed = a.seed;
            spec.workers = a
                .workers
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let cells = run_sweep(&spec)?;
            emit(a.out.as_deref(), &cells_to_csv(&cells, cfg.algo))?;
        }
        Command::Check(a) => {
            let results = run_checks(a.seed)?;
            let mut failed = 0;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                failed += usize::from(!r.passed);
            }
            if failed > 0 {
                return Err(Failure::Numeric(format!("{failed} check(s) failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}
