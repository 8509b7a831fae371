//! Experiment driver: data generation, closed-loop runs, parameter sweeps,
//! artifact bundles and their verification.
//!
//! Bundle layout (one directory per run or sweep point):
//! `dataset.csv`, `trace.csv`, `solutions.csv`; at the top level
//! `report.toml`, `plot.csv` and, for sweeps, `plot.gp`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Resolved, SweepAxis};
use crate::data::{generate, random_state_in_ellipsoid, DataSet};
use crate::error::{ensure_input, Error, Result};
use crate::io::write_atomic;
use crate::linalg;
use crate::mpc::{self, ClosedLoopTrace, Controller, Termination, TraceFile};
use crate::sdp::{DataDrivenModel, SdpSolution, SdpStatus};
use crate::verification::{
    self, check_cost_upper_bound, check_invariant_ellipsoid, check_schur_chain, decrease_report,
    sample_consistent_systems, Adversary, OracleReport, Strictness, SystemPair, VerificationSummary,
};

/// Offset between the data seed and the seed of the closed-loop scheduling.
pub const RUN_SEED_OFFSET: u64 = 1000;

/// Initial state of the data experiment for `seed`.
pub fn data_initial_state(cfg: &ExperimentConfig, resolved: &Resolved, seed: u64) -> Result<DVector<f64>> {
    match &cfg.data.x0 {
        Some(x0) => Ok(DVector::from_column_slice(x0)),
        None => random_state_in_ellipsoid(resolved.ingredients.s_x(), &mut ChaCha8Rng::seed_from_u64(seed)),
    }
}

/// Recorded data for `seed` with `length` samples.
pub fn generate_dataset(cfg: &ExperimentConfig, seed: u64, length: usize) -> Result<DataSet> {
    let r = cfg.resolve()?;
    let x0 = data_initial_state(cfg, &r, seed)?;
    Ok(generate(&r.plant, length, &cfg.data.input, &r.data_law, &x0, seed)?.data)
}

pub fn controller(cfg: &ExperimentConfig, data: DataSet) -> Result<Controller> {
    let r = cfg.resolve()?;
    Ok(Controller {
        model: DataDrivenModel::new(data, r.plant.bound.clone(), r.plant.c.clone(), r.plant.d.clone())?,
        ingredients: r.ingredients,
        assembly: cfg.mpc.assembly.clone(),
        solver: cfg.mpc.solver.clone(),
    })
}

/// A finished closed-loop run and the data it was built on.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub seed: u64,
    pub dataset: DataSet,
    pub trace: ClosedLoopTrace,
}

/// Runs the loop on `data`, scheduling drawn with `seed + RUN_SEED_OFFSET`.
pub fn run_on_data(cfg: &ExperimentConfig, data: DataSet, seed: u64) -> Result<RunArtifacts> {
    let r = cfg.resolve()?;
    let ctrl = controller(cfg, data.clone())?;
    let trace = mpc::run(&r.plant, &ctrl, &r.run_x0, cfg.run.steps, &r.run_law, seed + RUN_SEED_OFFSET)?;
    Ok(RunArtifacts { seed, dataset: data, trace })
}

pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunArtifacts> {
    run_on_data(cfg, generate_dataset(cfg, seed, cfg.data.length)?, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep_value: Option<f64>,
    pub termination: String,
    pub steps_completed: usize,
    pub accumulated_cost: f64,
    /// `NaN` when the first solve failed.
    pub gamma0: f64,
    pub final_state_norm: f64,
    pub min_input_slack: f64,
    pub min_state_slack: f64,
}

impl RunSummary {
    pub fn new(label: String, sweep_value: Option<f64>, run: &RunArtifacts) -> Self {
        let optimal = || run.trace.records.iter().filter(|r| r.status == SdpStatus::Optimal);
        Self {
            label,
            seed: run.seed,
            sweep_value,
            termination: run.trace.termination.to_string(),
            steps_completed: run.trace.solutions.len(),
            accumulated_cost: run.trace.accumulated_cost(),
            gamma0: run.trace.gamma0().unwrap_or(f64::NAN),
            final_state_norm: run.trace.final_state.norm(),
            min_input_slack: optimal().map(|r| r.input_slack).fold(f64::INFINITY, f64::min),
            min_state_slack: optimal().map(|r| r.state_slack).fold(f64::INFINITY, f64::min),
        }
    }

    pub fn infeasible_at_start(&self) -> bool {
        self.termination == Termination::InfeasibleAtStart.to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub runs: Vec<RunSummary>,
}

impl ExperimentReport {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("report serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// `F`, `P`, `H`, `L`, `α`, `λ` per optimal step; `α` has one column per data sample.
pub fn solutions_to_csv(trace: &ClosedLoopTrace) -> String {
    let mut out = String::new();
    let Some(first) = trace.solutions.first() else {
        return "t,gamma,lambda\n".into();
    };
    let (n_x, n_u, n_a) = (first.h.nrows(), first.l.nrows(), first.alpha.len());
    let mut header = vec!["t".to_string(), "gamma".into(), "lambda".into()];
    header.extend((0..n_x).flat_map(|i| (0..n_x).map(move |j| format!("h{i}{j}"))));
    header.extend((0..n_u).flat_map(|i| (0..n_x).map(move |j| format!("l{i}{j}"))));
    header.extend((0..n_a).map(|k| format!("alpha{k}")));
    let _ = writeln!(out, "{}", header.join(","));
    for (rec, sol) in trace.records.iter().zip(&trace.solutions) {
        let mut row = vec![rec.t.to_string(), format!("{:e}", sol.gamma), format!("{:e}", sol.lambda)];
        row.extend(sol.h.transpose().iter().map(|v| format!("{v:e}")));
        row.extend(sol.l.transpose().iter().map(|v| format!("{v:e}")));
        row.extend(sol.alpha.iter().map(|v| format!("{v:e}")));
        let _ = writeln!(out, "{}", row.join(","));
    }
    out
}

/// Inverse of [`solutions_to_csv`]; `F` and `P` are re-derived from `H` and `L`.
pub fn solutions_from_csv(text: &str, n_x: usize, n_u: usize) -> Result<Vec<(usize, SdpSolution)>> {
    let mut out = Vec::new();
    for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let v: Vec<f64> = line
            .split(',')
            .map(|c| c.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad number {c:?}: {e}"))))
            .collect::<Result<_>>()?;
        let fixed = 3 + n_x * n_x + n_u * n_x;
        ensure_input!(v.len() >= fixed, "solution row has {} cells, expected at least {fixed}", v.len());
        let h = DMatrix::from_row_slice(n_x, n_x, &v[3..3 + n_x * n_x]);
        let l = DMatrix::from_row_slice(n_u, n_x, &v[3 + n_x * n_x..fixed]);
        out.push((v[0] as usize, SdpSolution::from_parts(v[1], h, l, v[fixed..].to_vec(), v[2])?));
    }
    Ok(out)
}

/// A solution carrying only `γ`, `F` and `P`, as stored in a trace file.
pub fn solution_from_gain(gamma: f64, f: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<SdpSolution> {
    let h = linalg::inverse_pd(p)? * gamma;
    let l = f * &h;
    SdpSolution::from_parts(gamma, h, l, Vec::new(), 0.0)
}

fn write_run(dir: &Path, run: &RunArtifacts) -> Result<()> {
    write_atomic(&dir.join("dataset.csv"), run.dataset.to_csv().as_bytes())?;
    write_atomic(&dir.join("trace.csv"), run.trace.to_csv().as_bytes())?;
    write_atomic(&dir.join("solutions.csv"), solutions_to_csv(&run.trace).as_bytes())
}

/// One sweep point, before it is run.
#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub index: usize,
    pub value: f64,
    pub seed: u64,
    pub config: ExperimentConfig,
}

/// Expands the sweep. Points along `c` regenerate data with seed
/// `base + index`; points along `T` share one dataset (seed `base`) and use
/// nested prefixes of it, so longer horizons only add data.
pub fn sweep_points(cfg: &ExperimentConfig) -> Result<Vec<SweepPoint>> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| Error::Input("config has no sweep section".into()))?;
    ensure_input!(!sweep.values.is_empty(), "sweep has no values");
    sweep
        .values
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            let (config, seed) = match sweep.axis {
                SweepAxis::C => (cfg.with_c(value)?, cfg.data.seed + index as u64),
                SweepAxis::T => {
                    ensure_input!(
                        value >= 0.0 && value.fract() == 0.0,
                        "T sweep values must be nonnegative integers, got {value}"
                    );
                    (cfg.with_length(value as usize), cfg.data.seed)
                }
            };
            Ok(SweepPoint { index, value, seed, config })
        })
        .collect()
}

fn run_point(cfg: &ExperimentConfig, point: &SweepPoint) -> Result<RunArtifacts> {
    let axis = cfg.sweep.as_ref().map(|s| s.axis);
    if axis == Some(SweepAxis::T) {
        let longest = cfg.sweep.as_ref().map_or(0.0, |s| s.values.iter().copied().fold(0.0, f64::max)) as usize;
        let full = generate_dataset(cfg, point.seed, longest)?;
        run_on_data(&point.config, full.prefix(point.config.data.length)?, point.seed)
    } else {
        run_seed(&point.config, point.seed)
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

/// Runs every sweep point, in parallel up to `workers`; results are in point order.
pub fn run_sweep(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<(SweepPoint, RunArtifacts)>> {
    let points = sweep_points(cfg)?;
    pool(workers)?.install(|| {
        points
            .into_par_iter()
            .map(|p| run_point(cfg, &p).map(|run| (p, run)))
            .collect()
    })
}

/// Seeds used by the `simulate` command.
pub fn run_seeds(cfg: &ExperimentConfig) -> Vec<u64> {
    if cfg.run.seeds.is_empty() {
        vec![cfg.data.seed]
    } else {
        cfg.run.seeds.clone()
    }
}

/// `value,seed,termination,accumulated_cost,gamma0,final_state_norm`.
/// One row per run. Sweeps get a leading column with the swept value.
pub fn plot_csv(axis: Option<&str>, runs: &[RunSummary]) -> String {
    let mut out = String::new();
    if let Some(axis) = axis {
        let _ = write!(out, "{axis},");
    }
    out.push_str("seed,termination,accumulated_cost,gamma0,final_state_norm\n");
    for r in runs {
        if axis.is_some() {
            let _ = write!(out, "{:e},", r.sweep_value.unwrap_or(f64::NAN));
        }
        let _ = writeln!(
            out,
            "{},{},{:e},{:e},{:e}",
            r.seed, r.termination, r.accumulated_cost, r.gamma0, r.final_state_norm
        );
    }
    out
}

pub fn gnuplot_script(axis: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key off\n\
         set xlabel '{axis}'\n\
         set ylabel 'accumulated cost'\n\
         set terminal pngcairo size 640,480\n\
         set output 'plot.png'\n\
         plot 'plot.csv' every ::1 using 1:(strcol(3) eq 'completed' ? $4 : 1/0) with linespoints pt 7\n"
    )
}

/// Runs the configured experiment and writes its bundle under `out_dir`.
/// With a sweep section every point is run; otherwise every run seed.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path, workers: usize) -> Result<ExperimentReport> {
    cfg.resolve()?;
    let (axis, runs): (Option<&str>, Vec<(PathBuf, RunSummary, RunArtifacts)>) = match &cfg.sweep {
        Some(sweep) => {
            let axis = match sweep.axis {
                SweepAxis::C => "c",
                SweepAxis::T => "T",
            };
            let runs = run_sweep(cfg, workers)?
                .into_iter()
                .map(|(p, run)| {
                    let label = format!("point_{}", p.index);
                    (out_dir.join(&label), RunSummary::new(label, Some(p.value), &run), run)
                })
                .collect();
            (Some(axis), runs)
        }
        None => {
            let seeds = run_seeds(cfg);
            let results: Vec<Result<RunArtifacts>> =
                pool(workers)?.install(|| seeds.par_iter().map(|&s| run_seed(cfg, s)).collect());
            let runs = results
                .into_iter()
                .map(|run| {
                    let run = run?;
                    let label = format!("seed_{}", run.seed);
                    Ok((out_dir.join(&label), RunSummary::new(label, None, &run), run))
                })
                .collect::<Result<_>>()?;
            (None, runs)
        }
    };
    for (dir, _, run) in &runs {
        write_run(dir, run)?;
    }
    let report = ExperimentReport { runs: runs.into_iter().map(|(_, s, _)| s).collect() };
    write_atomic(&out_dir.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    write_atomic(&out_dir.join("report.toml"), report.to_toml()?.as_bytes())?;
    write_atomic(&out_dir.join("plot.csv"), plot_csv(axis, &report.runs).as_bytes())?;
    if let Some(axis) = axis {
        write_atomic(&out_dir.join("plot.gp"), gnuplot_script(axis).as_bytes())?;
    }
    Ok(report)
}

/// Sample counts used by [`verify_run_dir`].
#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub delta_samples: usize,
    pub rollouts: usize,
    pub horizon: usize,
    pub greedy_candidates: usize,
    pub ellipsoid_points: usize,
    pub ellipsoid_deltas: usize,
    /// Extra consistent systems drawn for the decrease and chain oracles.
    pub extra_systems: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            delta_samples: 1000,
            rollouts: 100,
            horizon: 200,
            greedy_candidates: 100,
            ellipsoid_points: 200,
            ellipsoid_deltas: 200,
            extra_systems: 4,
            seed: 0,
        }
    }
}

/// Runs every oracle on the artifacts of one run directory.
pub fn verify_run_dir(cfg: &ExperimentConfig, dir: &Path, opts: &VerifyOptions) -> Result<Vec<OracleReport>> {
    let read = |name: &str| -> Result<String> {
        let path = dir.join(name);
        ensure_input!(path.exists(), "missing artifact {}", path.display());
        Ok(std::fs::read_to_string(path)?)
    };
    let r = cfg.resolve()?;
    let dims = r.plant.dims();
    let data = DataSet::from_csv(&read("dataset.csv")?)?;
    let trace = TraceFile::parse(&read("trace.csv")?, dims.n_x, dims.n_u)?;
    let chain_solutions = solutions_from_csv(&read("solutions.csv")?, dims.n_x, dims.n_u)?;
    let model = DataDrivenModel::new(data, r.plant.bound.clone(), r.plant.c.clone(), r.plant.d.clone())?;
    let ing = &r.ingredients;
    let truth: SystemPair = (r.plant.a.clone(), r.plant.b.clone());
    let mut systems = vec![truth.clone()];
    systems.extend(sample_consistent_systems(&model, Some(&truth), opts.extra_systems, opts.seed)?);

    let rows: Vec<_> = trace.rows.iter().filter(|row| row.status == SdpStatus::Optimal.to_string()).collect();
    let gains: Vec<SdpSolution> =
        rows.iter().map(|row| solution_from_gain(row.gamma, &row.f, &row.p)).collect::<Result<_>>()?;
    let per_step = |name: &str, reports: Vec<OracleReport>| OracleReport::combine(name, &reports);

    let decrease = per_step(
        "decrease_inequality",
        gains
            .iter()
            .map(|sol| {
                decrease_report(
                    sol,
                    &systems,
                    model.bound(),
                    model.c(),
                    model.d(),
                    ing,
                    opts.delta_samples,
                    opts.seed,
                    Strictness::Strict,
                )
            })
            .collect(),
    );
    let rollouts = |adversary: Adversary, name: &str| {
        per_step(
            name,
            gains
                .iter()
                .zip(&rows)
                .map(|(sol, row)| {
                    check_cost_upper_bound(sol, &row.x, &truth, &model, ing, opts.horizon, opts.rollouts, opts.seed, adversary)
                })
                .collect(),
        )
    };
    let cost = rollouts(Adversary::Random, "cost_upper_bound");
    let greedy = rollouts(Adversary::Greedy { candidates: opts.greedy_candidates }, "cost_upper_bound_greedy");
    let chain = chain_solutions
        .iter()
        .map(|(_, sol)| check_schur_chain(sol, &systems, &model, ing, opts.delta_samples / 10, opts.seed))
        .collect::<Result<Vec<_>>>()?;
    let chain = per_step("schur_chain", chain.iter().map(|c| c.combined()).collect());
    let ellipsoid = per_step(
        "invariant_ellipsoid",
        gains
            .iter()
            .map(|sol| {
                check_invariant_ellipsoid(
                    sol,
                    &truth,
                    &model,
                    opts.ellipsoid_points,
                    opts.ellipsoid_deltas,
                    opts.seed,
                    verification::DEFAULT_TOL,
                )
            })
            .collect::<Result<_>>()?,
    );

    // Closed-loop certificates read off the trace itself.
    let gamma0 = rows.first().map_or(f64::NAN, |row| row.gamma);
    let states: Vec<DVector<f64>> =
        rows.iter().map(|row| row.x.clone()).chain(std::iter::once(trace.final_state.clone())).collect();
    let lyapunov_tol = 1e-6 * gamma0;
    let decrease_margins: Vec<(usize, f64)> = rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let (x, xn) = (&states[k], &states[k + 1]);
            let lhs = xn.dot(&(&row.p * xn)) - x.dot(&(&row.p * x));
            (k, -(lhs + ing.lambda_min_q() * x.norm_squared()))
        })
        .collect();
    let lyapunov = OracleReport::from_margins(
        "lyapunov_decrease",
        lyapunov_tol,
        Strictness::Tolerant,
        &decrease_margins,
        |k| format!("t = {}", rows[k].t),
    );
    let accumulated = OracleReport::from_margins(
        "accumulated_cost_bound",
        1e-5 * gamma0,
        Strictness::Tolerant,
        &rows.last().map(|row| vec![(0, gamma0 - row.accumulated_cost)]).unwrap_or_default(),
        |_| format!("cost {:e}, γ0 {gamma0:e}", rows.last().map_or(0.0, |r| r.accumulated_cost)),
    );
    let slack_margins: Vec<(usize, f64)> =
        rows.iter().enumerate().map(|(k, row)| (k, row.input_slack.min(row.state_slack))).collect();
    let slacks = OracleReport::from_margins("constraint_slacks", 1e-9, Strictness::Tolerant, &slack_margins, |k| {
        format!("t = {}", rows[k].t)
    });
    Ok(vec![decrease, cost, greedy, chain, ellipsoid, lyapunov, accumulated, slacks])
}

/// Verifies every run directory listed in the bundle's report.
pub fn verify_bundle(cfg: &ExperimentConfig, bundle: &Path, opts: &VerifyOptions) -> Result<VerificationSummary> {
    let path = bundle.join("report.toml");
    ensure_input!(path.exists(), "missing artifact {}", path.display());
    let report = ExperimentReport::from_toml(&std::fs::read_to_string(&path)?)?;
    let points = match &cfg.sweep {
        Some(_) => sweep_points(cfg)?.into_iter().map(|p| Some(p.config)).collect(),
        None => vec![None; report.runs.len()],
    };
    ensure_input!(points.len() == report.runs.len(), "report does not match the configured sweep");
    let mut reports = Vec::new();
    for (run, point_cfg) in report.runs.iter().zip(points) {
        let run_cfg = point_cfg.unwrap_or_else(|| cfg.clone());
        for mut rep in verify_run_dir(&run_cfg, &bundle.join(&run.label), opts)? {
            rep.name = format!("{}/{}", run.label, rep.name);
            reports.push(rep);
        }
    }
    Ok(VerificationSummary::new(reports))
}
