use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lpvmpc::config::{ExperimentConfig, Rows, SweepAxis, SweepSpec};
use lpvmpc::experiment::{self, VerifyOptions};
use lpvmpc::io::write_atomic;
use lpvmpc::sdp::{SdpProblem, SdpStatus};
use lpvmpc::{solver, Error};
use nalgebra::DVector;
use serde::Serialize;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_ORACLE_FAILURE: u8 = 3;
const EXIT_INPUT: u8 = 4;
const EXIT_OTHER: u8 = 1;

/// Data-driven min-max MPC for LPV systems with unknown scheduling.
#[derive(Parser, Debug)]
#[command(name = "lpvmpc", version)]
struct Cli {
    /// Experiment configuration (TOML). Defaults to the angular positioning preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the data seed; `simulate` then runs this seed only.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for runs and sweep points.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes the effective configuration to `<out>/config.toml`.
    InitConfig,
    /// Records one input-state dataset to `<out>/dataset.csv`.
    GenerateData,
    /// Solves the program once at the configured initial state.
    SolveStep {
        /// State to solve at, comma separated (defaults to run.x0).
        #[arg(long, value_delimiter = ',')]
        state: Option<Vec<f64>>,
    },
    /// Closed-loop runs for every configured seed.
    Simulate,
    /// Runs the configured sweep (or the one given here) in parallel.
    Sweep {
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Runs every oracle on a bundle written by `simulate` or `sweep`.
    Verify {
        /// Bundle directory (defaults to --out).
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Scheduling samples per oracle.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Writes the solver-form program at the initial state in SDPA format.
    ExportSdp {
        #[arg(long, value_delimiter = ',')]
        state: Option<Vec<f64>>,
    },
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum Axis {
    C,
    T,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Input(_) | Error::Parse(_) => EXIT_INPUT,
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_INPUT,
            _ => EXIT_OTHER,
        };
        Failure { code, message: e.to_string() }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_INPUT, message: message.into() }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(input_error(format!("config file {} does not exist", path.display())));
            }
            ExperimentConfig::load(path)?
        }
        None => ExperimentConfig::angular_positioning(),
    };
    if let Some(seed) = cli.seed {
        cfg.data.seed = seed;
        cfg.run.seeds = vec![seed];
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn state_or_default(cfg: &ExperimentConfig, state: &Option<Vec<f64>>) -> DVector<f64> {
    DVector::from_column_slice(state.as_deref().unwrap_or(&cfg.run.x0))
}

#[derive(Serialize)]
struct StepFile {
    status: String,
    backend_status: String,
    iterations: u32,
    solve_time: f64,
    state: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    solution: Option<SolutionFile>,
}

#[derive(Serialize)]
struct SolutionFile {
    gamma: f64,
    lambda: f64,
    alpha: Vec<f64>,
    f: Rows,
    p: Rows,
    h: Rows,
    l: Rows,
}

fn solve_step(cli: &Cli, cfg: &ExperimentConfig, state: &Option<Vec<f64>>) -> Result<u8, Failure> {
    let data = experiment::generate_dataset(cfg, cfg.data.seed, cfg.data.length)?;
    let ctrl = experiment::controller(cfg, data)?;
    let x = state_or_default(cfg, state);
    let out = ctrl.solve(&x)?;
    let rows = lpvmpc::config::rows_from_matrix;
    let file = StepFile {
        status: out.status.to_string(),
        backend_status: out.solver.backend_status.clone(),
        iterations: out.solver.iterations,
        solve_time: out.solver.solve_time,
        state: x.iter().copied().collect(),
        solution: out.solution.as_ref().filter(|_| out.status == SdpStatus::Optimal).map(|s| SolutionFile {
            gamma: s.gamma,
            lambda: s.lambda,
            alpha: s.alpha.clone(),
            f: rows(&s.f),
            p: rows(&s.p),
            h: rows(&s.h),
            l: rows(&s.l),
        }),
    };
    let text = toml::to_string(&file).map_err(|e| Failure { code: EXIT_OTHER, message: e.to_string() })?;
    write_atomic(&cli.out.join("solution.toml"), text.as_bytes())?;
    println!("status: {}", out.status);
    if let Some(s) = &file.solution {
        println!("gamma: {:e}", s.gamma);
    }
    Ok(match out.status {
        SdpStatus::Optimal => 0,
        SdpStatus::Infeasible => EXIT_INFEASIBLE,
        SdpStatus::NumericalFailure => EXIT_OTHER,
    })
}

fn print_runs(report: &experiment::ExperimentReport) {
    for r in &report.runs {
        let value = r.sweep_value.map(|v| format!(" value={v}")).unwrap_or_default();
        println!(
            "{}{value}: {} cost={:e} gamma0={:e} |x_N|={:e}",
            r.label, r.termination, r.accumulated_cost, r.gamma0, r.final_state_norm
        );
    }
}

fn run(cli: &Cli) -> Result<u8, Failure> {
    if cli.workers == 0 {
        return Err(input_error("--workers must be at least 1"));
    }
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::InitConfig => {
            write_atomic(&cli.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
            Ok(0)
        }
        Command::GenerateData => {
            let data = experiment::generate_dataset(&cfg, cfg.data.seed, cfg.data.length)?;
            write_atomic(&cli.out.join("dataset.csv"), data.to_csv().as_bytes())?;
            println!("{} samples written to {}", data.len(), cli.out.join("dataset.csv").display());
            Ok(0)
        }
        Command::SolveStep { state } => solve_step(cli, &cfg, state),
        Command::Simulate => {
            let mut cfg = cfg;
            cfg.sweep = None;
            let report = experiment::run_experiment(&cfg, &cli.out, cli.workers)?;
            print_runs(&report);
            Ok(if report.runs.iter().any(|r| r.infeasible_at_start()) { EXIT_INFEASIBLE } else { 0 })
        }
        Command::Sweep { axis, values } => {
            let mut cfg = cfg;
            if axis.is_some() || values.is_some() {
                let (Some(axis), Some(values)) = (axis, values) else {
                    return Err(input_error("--axis and --values must be given together"));
                };
                let axis = match axis {
                    Axis::C => SweepAxis::C,
                    Axis::T => SweepAxis::T,
                };
                cfg.sweep = Some(SweepSpec { axis, values: values.clone() });
            }
            if cfg.sweep.is_none() {
                return Err(input_error("no sweep configured; pass --axis and --values"));
            }
            let report = experiment::run_experiment(&cfg, &cli.out, cli.workers)?;
            print_runs(&report);
            Ok(0)
        }
        Command::Verify { bundle, samples } => {
            let bundle = bundle.clone().unwrap_or_else(|| cli.out.clone());
            if !bundle.is_dir() {
                return Err(input_error(format!("bundle directory {} does not exist", bundle.display())));
            }
            // The bundle's own config wins over the command line so sweeps verify point by point.
            let cfg = match (&cli.config, bundle.join("config.toml")) {
                (None, path) if path.exists() => ExperimentConfig::load(&path)?,
                _ => cfg,
            };
            let opts = VerifyOptions { delta_samples: *samples, seed: cli.seed.unwrap_or(0), ..Default::default() };
            let summary = experiment::verify_bundle(&cfg, &bundle, &opts)?;
            write_atomic(&bundle.join("verification.toml"), summary.to_toml()?.as_bytes())?;
            for r in &summary.reports {
                println!("{}", r.summary_line());
            }
            Ok(if summary.pass { 0 } else { EXIT_ORACLE_FAILURE })
        }
        Command::ExportSdp { state } => {
            let data = experiment::generate_dataset(&cfg, cfg.data.seed, cfg.data.length)?;
            let ctrl = experiment::controller(&cfg, data)?;
            let x = state_or_default(&cfg, state);
            let problem = SdpProblem::assemble(&x, &ctrl.model, &ctrl.ingredients, &ctrl.assembly, &ctrl.solver)?;
            let path = cli.out.join("problem.dat-s");
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(Error::from)?;
            }
            solver::export(problem.request(), &path)?;
            println!(
                "{} variables, scale {:e}, written to {}",
                problem.layout().len(),
                problem.scale(),
                path.display()
            );
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
