//! Receding-horizon operation: measure the state, solve the step program,
//! apply `u_t = F_t x_t`, advance the plant, record.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::linalg;
use crate::lpv_model::{LpvPlant, Scheduler, SchedulingLaw};
use crate::sdp::{solve_step, AssemblyOptions, DataDrivenModel, MpcIngredients, SdpSolution, SdpStatus, StepOutcome};
use crate::solver::SolverOptions;

/// Everything needed to compute the control law at a measured state.
#[derive(Clone, Debug)]
pub struct Controller {
    pub model: DataDrivenModel,
    pub ingredients: MpcIngredients,
    pub assembly: AssemblyOptions,
    pub solver: SolverOptions,
}

impl Controller {
    pub fn solve(&self, x: &DVector<f64>) -> Result<StepOutcome> {
        solve_step(x, &self.model, &self.ingredients, &self.assembly, &self.solver)
    }
}

/// A plant the controller can drive.
pub trait Plant {
    /// The current state measurement.
    fn measure(&mut self) -> Result<DVector<f64>>;
    /// Applies `u` at time `t`; the next [`Plant::measure`] returns the successor state.
    fn apply(&mut self, t: usize, u: &DVector<f64>) -> Result<()>;
}

/// Simulation of an [`LpvPlant`] driven by a scheduling law.
pub struct SimulatedPlant<'a, R: Rng> {
    plant: &'a LpvPlant,
    scheduler: Scheduler<'a, R>,
    x: DVector<f64>,
    deltas: Vec<DMatrix<f64>>,
}

impl<'a> SimulatedPlant<'a, ChaCha8Rng> {
    pub fn new(plant: &'a LpvPlant, x0: &DVector<f64>, law: SchedulingLaw, seed: u64) -> Result<Self> {
        Self::with_rng(plant, x0, law, ChaCha8Rng::seed_from_u64(seed))
    }
}

impl<'a, R: Rng> SimulatedPlant<'a, R> {
    pub fn with_rng(plant: &'a LpvPlant, x0: &DVector<f64>, law: SchedulingLaw, rng: R) -> Result<Self> {
        linalg::check_len("x0", x0, plant.dims().n_x)?;
        let scheduler = Scheduler::new(law, &plant.bound, rng)?;
        Ok(Self { plant, scheduler, x: x0.clone(), deltas: Vec::new() })
    }

    /// Scheduling matrices realized so far.
    pub fn deltas(&self) -> &[DMatrix<f64>] {
        &self.deltas
    }
}

impl<R: Rng> Plant for SimulatedPlant<'_, R> {
    fn measure(&mut self) -> Result<DVector<f64>> {
        Ok(self.x.clone())
    }

    fn apply(&mut self, t: usize, u: &DVector<f64>) -> Result<()> {
        let delta = self.scheduler.next(t)?;
        self.x = self.plant.step(&self.x, u, &delta)?;
        self.deltas.push(delta);
        Ok(())
    }
}

/// External plant over a line protocol: the controller writes `u_t` and
/// reads the next state, one whitespace-separated decimal vector per line.
/// The first line read is `x_0`.
pub struct PipePlant<Rd: BufRead, Wr: Write> {
    reader: Rd,
    writer: Wr,
    n_x: usize,
    pending: Option<DVector<f64>>,
}

impl<Rd: BufRead, Wr: Write> PipePlant<Rd, Wr> {
    pub fn new(reader: Rd, writer: Wr, n_x: usize) -> Self {
        Self { reader, writer, n_x, pending: None }
    }

    fn read_state(&mut self) -> Result<DVector<f64>> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Err(Error::Input("plant closed the stream".into()));
        }
        let values = parse_vector(&line)?;
        ensure_input!(values.len() == self.n_x, "plant sent {} values, expected {}", values.len(), self.n_x);
        Ok(values)
    }
}

impl<Rd: BufRead, Wr: Write> Plant for PipePlant<Rd, Wr> {
    fn measure(&mut self) -> Result<DVector<f64>> {
        match self.pending.take() {
            Some(x) => Ok(x),
            None => self.read_state(),
        }
    }

    fn apply(&mut self, _t: usize, u: &DVector<f64>) -> Result<()> {
        writeln!(self.writer, "{}", format_vector(u))?;
        self.writer.flush()?;
        self.pending = Some(self.read_state()?);
        Ok(())
    }
}

pub fn format_vector(v: &DVector<f64>) -> String {
    v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(" ")
}

pub fn parse_vector(line: &str) -> Result<DVector<f64>> {
    let values: std::result::Result<Vec<f64>, _> = line.split_whitespace().map(str::parse::<f64>).collect();
    let values = values.map_err(|e| Error::Parse(format!("bad number in {line:?}: {e}")))?;
    ensure_input!(values.iter().all(|v| v.is_finite()), "non-finite value in {line:?}");
    Ok(DVector::from_vec(values))
}

/// One closed-loop step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub x: DVector<f64>,
    /// Empty on a flagged (non-optimal) record.
    pub u: DVector<f64>,
    pub stage_cost: f64,
    pub gamma: f64,
    /// `x_tᵀ P_t x_t`.
    pub value: f64,
    /// `x_{t+1}ᵀ P_t x_{t+1} − x_tᵀ P_t x_t + λ_min(Q)‖x_t‖²`; should be `≤ 0`.
    pub decrease_check: f64,
    pub status: SdpStatus,
    pub solve_time: f64,
    pub iterations: u32,
    /// `1 − ‖u_t‖_{S_u}`.
    pub input_slack: f64,
    /// `1 − ‖x_t‖_{S_x}`.
    pub state_slack: f64,
    /// Running sum of stage costs up to and including this step.
    pub accumulated_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Termination {
    Completed,
    /// The program at `x_0` is infeasible; the trace is empty.
    InfeasibleAtStart,
    /// The program became infeasible at `t > 0`. Never expected for valid inputs.
    RecursiveFeasibilityViolation { t: usize },
    /// The solver failed numerically at `t`.
    SolverFailure { t: usize },
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Completed => f.write_str("completed"),
            Termination::InfeasibleAtStart => f.write_str("infeasible_at_start"),
            Termination::RecursiveFeasibilityViolation { t } => write!(f, "recursive_feasibility_violation@{t}"),
            Termination::SolverFailure { t } => write!(f, "solver_failure@{t}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClosedLoopTrace {
    pub records: Vec<StepRecord>,
    /// Solution used at each optimal record, aligned with `records`.
    pub solutions: Vec<SdpSolution>,
    /// State after the last applied input.
    pub final_state: DVector<f64>,
    pub termination: Termination,
    /// Solver message of the step that ended the run early, if any.
    pub diagnostics: String,
}

impl ClosedLoopTrace {
    pub fn accumulated_cost(&self) -> f64 {
        self.records.iter().rev().find(|r| r.status == SdpStatus::Optimal).map_or(0.0, |r| r.accumulated_cost)
    }

    pub fn all_optimal(&self) -> bool {
        self.termination == Termination::Completed
    }

    pub fn gamma0(&self) -> Option<f64> {
        self.solutions.first().map(|s| s.gamma)
    }

    /// States `x_0 … x_N` visited (the final state included).
    pub fn states(&self) -> Vec<DVector<f64>> {
        let mut out: Vec<_> = self.solutions.iter().zip(&self.records).map(|(_, r)| r.x.clone()).collect();
        out.push(self.final_state.clone());
        out
    }

    /// Fixed-column CSV; `F` and `P` are stored row-major so certificates can
    /// be re-checked from the file alone.
    pub fn to_csv(&self) -> String {
        let n_x = self.final_state.len();
        let n_u = self.solutions.first().map_or(0, |s| s.f.nrows());
        let mut header: Vec<String> = vec!["t".into()];
        header.extend((0..n_x).map(|i| format!("x{i}")));
        header.extend((0..n_u).map(|i| format!("u{i}")));
        header.extend(
            ["stage_cost", "gamma", "value", "decrease_check", "status", "solve_time", "iterations"]
                .map(String::from),
        );
        header.extend(["input_slack", "state_slack", "accumulated_cost"].map(String::from));
        header.extend((0..n_u).flat_map(|i| (0..n_x).map(move |j| format!("f{i}{j}"))));
        header.extend((0..n_x).flat_map(|i| (0..n_x).map(move |j| format!("p{i}{j}"))));
        let mut out = String::new();
        let _ = writeln!(out, "# termination,{}", self.termination);
        let _ = writeln!(out, "# final_state,{}", format_vector(&self.final_state).replace(' ', ","));
        let _ = writeln!(out, "{}", header.join(","));
        for (k, r) in self.records.iter().enumerate() {
            let mut row: Vec<String> = vec![r.t.to_string()];
            row.extend(r.x.iter().map(|v| format!("{v:e}")));
            let sol = self.solutions.get(k);
            if sol.is_some() {
                row.extend(r.u.iter().map(|v| format!("{v:e}")));
            } else {
                row.extend((0..n_u).map(|_| "nan".to_string()));
            }
            for v in [r.stage_cost, r.gamma, r.value, r.decrease_check] {
                row.push(format!("{v:e}"));
            }
            row.push(r.status.to_string());
            row.push(format!("{:e}", r.solve_time));
            row.push(r.iterations.to_string());
            for v in [r.input_slack, r.state_slack, r.accumulated_cost] {
                row.push(format!("{v:e}"));
            }
            match sol {
                Some(s) => {
                    row.extend(s.f.transpose().iter().map(|v| format!("{v:e}")));
                    row.extend(s.p.transpose().iter().map(|v| format!("{v:e}")));
                }
                None => row.extend((0..n_u * n_x + n_x * n_x).map(|_| "nan".to_string())),
            }
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Per-step quantities read back from a trace CSV.
#[derive(Clone, Debug)]
pub struct TraceRow {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub stage_cost: f64,
    pub gamma: f64,
    pub status: String,
    pub input_slack: f64,
    pub state_slack: f64,
    pub accumulated_cost: f64,
    pub f: DMatrix<f64>,
    pub p: DMatrix<f64>,
}

/// Rows of a trace file plus its final state.
#[derive(Clone, Debug)]
pub struct TraceFile {
    pub termination: String,
    pub final_state: DVector<f64>,
    pub rows: Vec<TraceRow>,
}

impl TraceFile {
    pub fn parse(text: &str, n_x: usize, n_u: usize) -> Result<Self> {
        let mut termination = String::new();
        let mut final_state = None;
        let mut rows = Vec::new();
        let mut header_seen = false;
        let num = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("bad number {s:?}: {e}")));
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# termination,") {
                termination = rest.to_string();
                continue;
            }
            if let Some(rest) = line.strip_prefix("# final_state,") {
                let v: Result<Vec<f64>> = rest.split(',').filter(|s| !s.is_empty()).map(num).collect();
                final_state = Some(DVector::from_vec(v?));
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            let expected = 1 + n_x + n_u + 10 + n_u * n_x + n_x * n_x;
            ensure_input!(cells.len() == expected, "trace row has {} cells, expected {expected}", cells.len());
            let status_col = 1 + n_x + n_u + 4;
            let mut values = Vec::with_capacity(expected);
            for (k, c) in cells.iter().enumerate() {
                values.push(if k == status_col { f64::NAN } else { num(c)? });
            }
            let slice = |from: usize, len: usize| values[from..from + len].to_vec();
            let after = status_col + 3;
            let gains = after + 3;
            rows.push(TraceRow {
                t: values[0] as usize,
                x: DVector::from_vec(slice(1, n_x)),
                u: DVector::from_vec(slice(1 + n_x, n_u)),
                stage_cost: values[1 + n_x + n_u],
                gamma: values[2 + n_x + n_u],
                status: cells[status_col].to_string(),
                input_slack: values[after],
                state_slack: values[after + 1],
                accumulated_cost: values[after + 2],
                f: DMatrix::from_row_slice(n_u, n_x, &slice(gains, n_u * n_x)),
                p: DMatrix::from_row_slice(n_x, n_x, &slice(gains + n_u * n_x, n_x * n_x)),
            });
        }
        let final_state = final_state.ok_or_else(|| Error::Parse("trace has no final_state line".into()))?;
        ensure_input!(final_state.len() == n_x, "final state has {} entries, expected {n_x}", final_state.len());
        Ok(Self { termination, final_state, rows })
    }
}

/// Runs the loop for `steps` steps against any plant.
pub fn run_with_plant<P: Plant>(controller: &Controller, plant: &mut P, steps: usize) -> Result<ClosedLoopTrace> {
    let ing = &controller.ingredients;
    let lambda_q = ing.lambda_min_q();
    let mut records: Vec<StepRecord> = Vec::with_capacity(steps);
    let mut solutions: Vec<SdpSolution> = Vec::with_capacity(steps);
    let mut x = plant.measure()?;
    linalg::check_len("measured state", &x, ing.n_x())?;
    let mut accumulated = 0.0;
    let mut termination = Termination::Completed;
    let mut diagnostics = String::new();
    for t in 0..steps {
        let out = controller.solve(&x)?;
        let Some(sol) = out.solution.clone().filter(|_| out.status == SdpStatus::Optimal) else {
            termination = match (t, out.status) {
                (0, SdpStatus::Infeasible) => Termination::InfeasibleAtStart,
                (_, SdpStatus::Infeasible) => Termination::RecursiveFeasibilityViolation { t },
                _ => Termination::SolverFailure { t },
            };
            diagnostics = out.diagnostics.clone();
            if t > 0 || out.status != SdpStatus::Infeasible {
                records.push(StepRecord {
                    t,
                    x: x.clone(),
                    u: DVector::zeros(0),
                    stage_cost: f64::NAN,
                    gamma: f64::NAN,
                    value: f64::NAN,
                    decrease_check: f64::NAN,
                    status: out.status,
                    solve_time: out.solver.solve_time,
                    iterations: out.solver.iterations,
                    input_slack: f64::NAN,
                    state_slack: ing.state_slack(&x),
                    accumulated_cost: accumulated,
                });
            }
            break;
        };
        let u = sol.input(&x);
        let stage = ing.stage_cost(&x, &u);
        accumulated += stage;
        plant.apply(t, &u)?;
        let x_next = plant.measure()?;
        linalg::check_len("measured state", &x_next, ing.n_x())?;
        let value = sol.value(&x);
        records.push(StepRecord {
            t,
            x: x.clone(),
            u: u.clone(),
            stage_cost: stage,
            gamma: sol.gamma,
            value,
            decrease_check: sol.value(&x_next) - value + lambda_q * x.norm_squared(),
            status: out.status,
            solve_time: out.solver.solve_time,
            iterations: out.solver.iterations,
            input_slack: ing.input_slack(&u),
            state_slack: ing.state_slack(&x),
            accumulated_cost: accumulated,
        });
        solutions.push(sol);
        x = x_next;
    }
    Ok(ClosedLoopTrace { records, solutions, final_state: x, termination, diagnostics })
}

/// Closed loop on a simulated plant with scheduling drawn from `law`.
pub fn run(
    plant: &LpvPlant,
    controller: &Controller,
    x0: &DVector<f64>,
    steps: usize,
    law: &SchedulingLaw,
    seed: u64,
) -> Result<ClosedLoopTrace> {
    let mut sim = SimulatedPlant::new(plant, x0, law.clone(), seed)?;
    run_with_plant(controller, &mut sim, steps)
}

/// The three inequalities of one step pair, each reported as
/// `left − right` (pass iff `≤ tol`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepCertificate {
    /// `x₊ᵀP_t x₊ − xᵀP_t x + λ_min(Q)‖x‖²`.
    pub decrease: f64,
    /// `x₊ᵀP_t x₊ − γ_t`.
    pub inheritance: f64,
    /// `x₊ᵀP_{t+1} x₊ − x₊ᵀP_t x₊`.
    pub monotonicity: f64,
    pub tol: f64,
}

impl StepCertificate {
    pub fn pass(&self) -> bool {
        self.decrease <= self.tol && self.inheritance <= self.tol && self.monotonicity <= self.tol
    }

    pub fn worst(&self) -> f64 {
        self.decrease.max(self.inheritance).max(self.monotonicity)
    }
}

/// Checks the step pair `(x_t, x_{t+1})` against the solutions at both times.
pub fn check_step_certificate(
    x_t: &DVector<f64>,
    x_next: &DVector<f64>,
    p_t: &DMatrix<f64>,
    gamma_t: f64,
    p_next: &DMatrix<f64>,
    lambda_min_q: f64,
    tol: f64,
) -> StepCertificate {
    let v = |p: &DMatrix<f64>, x: &DVector<f64>| x.dot(&(p * x));
    let next_old = v(p_t, x_next);
    StepCertificate {
        decrease: next_old - v(p_t, x_t) + lambda_min_q * x_t.norm_squared(),
        inheritance: next_old - gamma_t,
        monotonicity: v(p_next, x_next) - next_old,
        tol,
    }
}

/// Certificates for every consecutive pair of optimal steps in `trace`.
pub fn trace_certificates(trace: &ClosedLoopTrace, ing: &MpcIngredients, tol: f64) -> Vec<StepCertificate> {
    let states = trace.states();
    (0..trace.solutions.len().saturating_sub(1))
        .map(|t| {
            let (a, b) = (&trace.solutions[t], &trace.solutions[t + 1]);
            check_step_certificate(&states[t], &states[t + 1], &a.p, a.gamma, &b.p, ing.lambda_min_q(), tol)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, InputLaw};

    fn controller(seed: u64) -> (LpvPlant, Controller) {
        let plant = LpvPlant::angular_positioning(1.0).unwrap();
        let g = generate(
            &plant,
            20,
            &InputLaw::Uniform { low: -1.0, high: 1.0 },
            &SchedulingLaw::Uniform { low: 0.05, high: 0.1 },
            &DVector::from_vec(vec![0.2, -0.1]),
            seed,
        )
        .unwrap();
        let model = DataDrivenModel::new(g.data, plant.bound.clone(), plant.c.clone(), plant.d.clone()).unwrap();
        let ctl = Controller {
            model,
            ingredients: MpcIngredients::angular_positioning(),
            assembly: AssemblyOptions::default(),
            solver: SolverOptions::default(),
        };
        (plant, ctl)
    }

    #[test]
    fn origin_stays_at_origin() {
        let (plant, ctl) = controller(1);
        let trace = run(&plant, &ctl, &DVector::zeros(2), 5, &SchedulingLaw::Uniform { low: 0.05, high: 0.1 }, 0).unwrap();
        assert_eq!(trace.termination, Termination::Completed);
        for r in &trace.records {
            assert!(r.u.iter().all(|&v| v == 0.0));
            assert!(r.x.iter().all(|&v| v == 0.0));
        }
        for c in trace_certificates(&trace, &ctl.ingredients, 0.0) {
            assert!(c.pass());
        }
    }

    #[test]
    fn short_run_converges_and_certifies() {
        let (plant, ctl) = controller(2);
        let x0 = DVector::from_vec(vec![0.05, 0.0]);
        let trace = run(&plant, &ctl, &x0, 30, &SchedulingLaw::QmiBoundary, 9).unwrap();
        assert_eq!(trace.termination, Termination::Completed, "{}", trace.diagnostics);
        assert_eq!(trace.records.len(), 30);
        let g0 = trace.gamma0().unwrap();
        assert!(trace.accumulated_cost() <= g0 * (1.0 + 1e-5));
        for w in trace.records.windows(2) {
            assert!(w[1].accumulated_cost >= w[0].accumulated_cost);
            assert_eq!(w[1].t, w[0].t + 1);
        }
        for c in trace_certificates(&trace, &ctl.ingredients, 1e-6 * g0) {
            assert!(c.decrease <= c.tol && c.inheritance <= c.tol, "{c:?}");
        }
        assert!(trace.final_state.norm() < x0.norm());
    }

    // The margin-free program is the one for which the optimal value at the
    // successor state is bounded by the shrunk previous solution; with a
    // margin the bound picks up an offset proportional to it.
    #[test]
    fn value_monotonicity_without_margin() {
        let (plant, mut ctl) = controller(2);
        ctl.assembly.strictness = 0.0;
        let trace = run(&plant, &ctl, &DVector::from_vec(vec![0.05, 0.0]), 30, &SchedulingLaw::QmiBoundary, 9).unwrap();
        assert_eq!(trace.termination, Termination::Completed, "{}", trace.diagnostics);
        let g0 = trace.gamma0().unwrap();
        for c in trace_certificates(&trace, &ctl.ingredients, 1e-6 * g0) {
            assert!(c.pass(), "{c:?}");
        }
    }

    #[test]
    fn no_data_is_infeasible_at_start() {
        let (plant, mut ctl) = controller(3);
        ctl.model = ctl.model.prefix(2).unwrap();
        let trace = run(&plant, &ctl, &DVector::from_vec(vec![0.05, 0.0]), 10, &SchedulingLaw::QmiInterior, 0).unwrap();
        assert_eq!(trace.termination, Termination::InfeasibleAtStart);
        assert!(trace.records.is_empty());
        assert_eq!(trace.accumulated_cost(), 0.0);
    }

    #[test]
    fn trace_csv_round_trips_gains() {
        let (plant, ctl) = controller(4);
        let trace = run(&plant, &ctl, &DVector::from_vec(vec![0.05, 0.0]), 3, &SchedulingLaw::QmiInterior, 1).unwrap();
        let parsed = TraceFile::parse(&trace.to_csv(), 2, 1).unwrap();
        assert_eq!(parsed.termination, "completed");
        assert_eq!(parsed.rows.len(), 3);
        assert_eq!(parsed.final_state, trace.final_state);
        for (row, sol) in parsed.rows.iter().zip(&trace.solutions) {
            assert_eq!(row.f, sol.f);
            assert_eq!(row.p, sol.p);
            assert_eq!(row.gamma, sol.gamma);
        }
    }

    #[test]
    fn pipe_plant_follows_protocol() {
        let (_, ctl) = controller(5);
        let input = b"0.05 0\n0.04 -0.01\n0.03 -0.01\n".to_vec();
        let mut output = Vec::new();
        {
            let mut pipe = PipePlant::new(std::io::Cursor::new(input), &mut output, 2);
            let trace = run_with_plant(&ctl, &mut pipe, 2).unwrap();
            assert_eq!(trace.records.len(), 2);
            assert_eq!(trace.final_state, DVector::from_vec(vec![0.03, -0.01]));
        }
        let text = String::from_utf8(output).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(parse_vector(lines[0]).unwrap().len(), 1);
    }

    #[test]
    fn step_certificate_examples() {
        let p = DMatrix::identity(2, 2);
        let x = DVector::zeros(2);
        let c = check_step_certificate(&x, &x, &p, 1.0, &p, 1.0, 0.0);
        assert!(c.pass());
        let x = DVector::from_vec(vec![1.0, 0.0]);
        let grow = check_step_certificate(&x, &(x.clone() * 2.0), &p, 10.0, &p, 1.0, 0.0);
        assert!(!grow.pass());
        assert_eq!(grow.decrease, 4.0);
    }
}
