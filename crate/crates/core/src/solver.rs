//! Conic-solver contract for problems of the form
//!
//! ```text
//! minimize cᵀy  s.t.  C₀ + Σₖ yₖ Aₖ ⪰ 0  (one per PSD block),
//!                     c₀ + aᵀy ≥ 0      (scalar rows)
//! ```
//!
//! backed by Clarabel, plus export/import in the SDPA sparse text format.

use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use log::debug;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::linalg;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    pub max_iterations: u32,
    pub feasibility_tol: f64,
    pub gap_tol: f64,
    /// Tolerance of the second attempt when the first ends inconclusively.
    pub relaxed_tol: f64,
    /// Largest PSD/linear violation accepted on a returned optimum.
    pub audit_tol: f64,
    /// Tolerance of a polishing re-solve after an accepted optimum; the
    /// polished point replaces it only if it also passes the audit. Zero
    /// disables polishing.
    pub polish_tol: f64,
    /// Backend row/column equilibration. Off by default: on these problems it
    /// lets the backend stop up to 1e-2 (relative) above the optimum.
    pub equilibrate: bool,
    /// Static KKT regularization of the backend.
    pub static_regularization: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            feasibility_tol: 1e-8,
            gap_tol: 1e-8,
            relaxed_tol: 1e-6,
            audit_tol: 1e-7,
            polish_tol: 1e-10,
            equilibrate: false,
            static_regularization: 1e-12,
        }
    }
}

/// `C₀ + Σₖ yₖ Aₖ ⪰ 0`; coefficient matrices are symmetric, listed by variable.
#[derive(Clone, Debug, PartialEq)]
pub struct PsdConstraint {
    pub constant: DMatrix<f64>,
    pub coeffs: Vec<(usize, DMatrix<f64>)>,
}

impl PsdConstraint {
    pub fn dim(&self) -> usize {
        self.constant.nrows()
    }

    pub fn eval(&self, y: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, a) in &self.coeffs {
            m += a * y[*k];
        }
        m
    }
}

/// `c₀ + Σₖ aₖ yₖ ≥ 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearConstraint {
    pub constant: f64,
    pub coeffs: Vec<(usize, f64)>,
}

impl LinearConstraint {
    pub fn eval(&self, y: &[f64]) -> f64 {
        self.constant + self.coeffs.iter().map(|(k, a)| a * y[*k]).sum::<f64>()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverRequest {
    pub n_vars: usize,
    pub objective: Vec<f64>,
    pub psd: Vec<PsdConstraint>,
    pub nonneg: Vec<LinearConstraint>,
    pub options: SolverOptions,
}

impl SolverRequest {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(
            self.objective.len() == self.n_vars,
            "objective has {} entries for {} variables",
            self.objective.len(),
            self.n_vars
        );
        for (b, c) in self.psd.iter().enumerate() {
            let d = c.dim();
            ensure_input!(d > 0 && c.constant.ncols() == d, "PSD block {b} is not square");
            ensure_input!(
                (&c.constant - c.constant.transpose()).amax() <= 1e-12 * (1.0 + c.constant.amax()),
                "PSD block {b} constant is not symmetric"
            );
            for (k, a) in &c.coeffs {
                ensure_input!(*k < self.n_vars, "PSD block {b} references variable {k}");
                ensure_input!(
                    a.nrows() == d && a.ncols() == d,
                    "PSD block {b} coefficient of variable {k} has wrong shape"
                );
                ensure_input!(
                    (a - a.transpose()).amax() <= 1e-12 * (1.0 + a.amax()),
                    "PSD block {b} coefficient of variable {k} is not symmetric"
                );
            }
        }
        for (r, c) in self.nonneg.iter().enumerate() {
            for (k, _) in &c.coeffs {
                ensure_input!(*k < self.n_vars, "linear row {r} references variable {k}");
            }
        }
        Ok(())
    }

    /// Largest constraint violation at `y` (0 when feasible).
    pub fn max_violation(&self, y: &[f64]) -> f64 {
        let psd = self
            .psd
            .iter()
            .map(|c| -linalg::min_eigenvalue(&c.eval(y)))
            .fold(0.0_f64, f64::max);
        let lin = self
            .nonneg
            .iter()
            .map(|c| -c.eval(y))
            .fold(0.0_f64, f64::max);
        psd.max(lin)
    }

    pub fn objective_value(&self, y: &[f64]) -> f64 {
        self.objective.iter().zip(y).map(|(c, v)| c * v).sum()
    }

    /// Ratio of largest to smallest nonzero coefficient magnitude.
    pub fn coefficient_spread(&self) -> f64 {
        let mut lo = f64::INFINITY;
        let mut hi = 0.0_f64;
        let mut visit = |v: f64| {
            let a = v.abs();
            if a > 0.0 {
                lo = lo.min(a);
                hi = hi.max(a);
            }
        };
        for c in &self.psd {
            c.constant.iter().for_each(|&v| visit(v));
            for (_, a) in &c.coeffs {
                a.iter().for_each(|&v| visit(v));
            }
        }
        for c in &self.nonneg {
            visit(c.constant);
            c.coeffs.iter().for_each(|(_, a)| visit(*a));
        }
        if hi == 0.0 {
            1.0
        } else {
            hi / lo
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    IterationLimit,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::NumericalFailure => "numerical_failure",
            SolveStatus::IterationLimit => "iteration_limit",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    pub solve_time: f64,
    pub iterations: u32,
    /// Largest constraint violation at `x`.
    pub max_violation: f64,
    /// Status reported by the backend on the final attempt.
    pub backend_status: String,
    /// Whether more than one backend attempt ran.
    pub retried: bool,
    /// Whether the reported point comes from the polishing re-solve.
    pub polished: bool,
}

struct Attempt {
    status: SolverStatus,
    x: Vec<f64>,
    iterations: u32,
    primal_objective: f64,
    dual_objective: f64,
}

/// Column-major upper-triangle vectorization with off-diagonals scaled by √2.
fn svec_entries(m: &DMatrix<f64>) -> impl Iterator<Item = f64> + '_ {
    let d = m.nrows();
    (0..d).flat_map(move |j| {
        (0..=j).map(move |i| {
            if i == j {
                m[(i, j)]
            } else {
                m[(i, j)] * std::f64::consts::SQRT_2
            }
        })
    })
}

/// One backend run. With `column_scale`, variable `k` is substituted by
/// `scale[k]·y'_k` and the solver runs with light regularization; the
/// returned point is mapped back.
fn run_backend(req: &SolverRequest, tol: f64, column_scale: Option<&[f64]>) -> Result<Attempt> {
    let opts = &req.options;
    let n = req.n_vars;
    let col = |k: usize| column_scale.map_or(1.0, |s| s[k]);
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    let mut b = Vec::new();
    let mut cones = Vec::new();
    let mut row0 = 0;

    if !req.nonneg.is_empty() {
        for (r, c) in req.nonneg.iter().enumerate() {
            b.push(c.constant);
            for (k, a) in &c.coeffs {
                if *a != 0.0 {
                    rows.push(row0 + r);
                    cols.push(*k);
                    vals.push(-a * col(*k));
                }
            }
        }
        row0 += req.nonneg.len();
        cones.push(SupportedConeT::NonnegativeConeT(req.nonneg.len()));
    }
    for c in &req.psd {
        let d = c.dim();
        let len = d * (d + 1) / 2;
        b.extend(svec_entries(&c.constant));
        for (k, a) in &c.coeffs {
            for (r, v) in svec_entries(a).enumerate() {
                if v != 0.0 {
                    rows.push(row0 + r);
                    cols.push(*k);
                    vals.push(-v * col(*k));
                }
            }
        }
        row0 += len;
        cones.push(SupportedConeT::PSDTriangleConeT(d));
    }

    let a = CscMatrix::new_from_triplets(row0, n, rows, cols, vals);
    let p = CscMatrix::zeros((n, n));
    let objective: Vec<f64> = req.objective.iter().enumerate().map(|(k, c)| c * col(k)).collect();
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .max_iter(opts.max_iterations)
        .equilibrate_enable(opts.equilibrate)
        .static_regularization_constant(opts.static_regularization)
        .tol_feas(tol)
        .tol_gap_abs(tol)
        .tol_gap_rel(tol)
        .max_threads(1)
        // The blocks are tiny; decomposition would only reorder the same work.
        .chordal_decomposition_enable(false)
        .build()
        .map_err(|e| Error::Input(format!("invalid solver settings: {e:?}")))?;

    let outcome = catch_unwind(AssertUnwindSafe(|| {
        let mut solver = DefaultSolver::new(&p, &objective, &a, &b, &cones, settings)
            .map_err(|e| format!("{e:?}"))?;
        solver.solve();
        Ok::<_, String>(Attempt {
            status: solver.solution.status,
            x: solver.solution.x.iter().enumerate().map(|(k, v)| v * col(k)).collect(),
            iterations: solver.solution.iterations,
            primal_objective: solver.solution.obj_val,
            dual_objective: solver.solution.obj_val_dual,
        })
    }));
    match outcome {
        Ok(Ok(att)) => Ok(att),
        Ok(Err(msg)) => Err(Error::Input(format!("solver rejected problem: {msg}"))),
        Err(_) => Ok(Attempt {
            status: SolverStatus::NumericalError,
            x: vec![f64::NAN; n],
            iterations: 0,
            primal_objective: f64::NAN,
            dual_objective: f64::NAN,
        }),
    }
}

const POLISH_SCALE_FLOOR: f64 = 1e-3;

/// Tolerance of the extra attempt made when a reported optimum fails the audit.
const TIGHT_TOL: f64 = 1e-10;

/// Solves `req`.
///
/// A point is reported optimal only if it passes the feasibility audit
/// (`max_violation ≤ audit_tol`) and its duality gap is at most
/// `audit_tol·max(1, |objective|)`; this also rescues stalled runs whose
/// iterate already meets both. A reported optimum failing the audit is
/// re-solved at a tighter tolerance, and an accepted one is polished at
/// `polish_tol` when that is positive. Anything still inconclusive is retried
/// once at `relaxed_tol`, whose infeasibility certificates (full or reduced
/// accuracy) decide between `Infeasible` and `NumericalFailure`.
pub fn solve(req: &SolverRequest) -> Result<SolverResult> {
    req.validate()?;
    let opts = &req.options;
    let start = Instant::now();

    let audit = |att: &Attempt| -> (bool, f64) {
        if !att.x.iter().all(|v| v.is_finite()) {
            return (false, f64::INFINITY);
        }
        let violation = req.max_violation(&att.x);
        let p = req.objective_value(&att.x);
        let gap = (att.primal_objective - att.dual_objective).abs();
        let gap_ok = gap.is_finite() && gap <= opts.audit_tol * p.abs().max(1.0);
        (violation <= opts.audit_tol && gap_ok, violation)
    };
    let optimal_candidate = |st: SolverStatus| {
        matches!(
            st,
            SolverStatus::Solved
                | SolverStatus::AlmostSolved
                | SolverStatus::InsufficientProgress
                | SolverStatus::MaxIterations
                | SolverStatus::NumericalError
        )
    };

    let tol = opts.feasibility_tol.min(opts.gap_tol);
    let mut attempts = 0;
    let mut run = |tol: f64| -> Result<Attempt> {
        attempts += 1;
        run_backend(req, tol, None)
    };

    let mut att = run(tol)?;
    let mut outcome: Option<SolveStatus> = match att.status {
        SolverStatus::PrimalInfeasible => Some(SolveStatus::Infeasible),
        SolverStatus::DualInfeasible => Some(SolveStatus::Unbounded),
        st if optimal_candidate(st) && audit(&att).0 => Some(SolveStatus::Optimal),
        _ => None,
    };
    if outcome.is_none() && matches!(att.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        debug!(
            "optimum failed the audit (violation {:e}, primal {:e}, dual {:e}); tightening",
            audit(&att).1,
            att.primal_objective,
            att.dual_objective
        );
        let tight = run(TIGHT_TOL)?;
        if optimal_candidate(tight.status) && audit(&tight).0 {
            att = tight;
            outcome = Some(SolveStatus::Optimal);
        }
    }
    let mut polished = false;
    if outcome == Some(SolveStatus::Optimal) {
        let polish = opts.polish_tol;
        if polish > 0.0 && polish < tol {
            // Magnitudes of the accepted point set the variable scaling; tiny
            // entries are floored so inactive variables keep room to move.
            let scale: Vec<f64> = att.x.iter().map(|v| v.abs().max(POLISH_SCALE_FLOOR)).collect();
            let attempt = run_backend(req, polish, Some(&scale))?;
            // Reduced-accuracy exits are not trusted to improve on an accepted optimum.
            if attempt.status == SolverStatus::Solved && audit(&attempt).0 {
                att = attempt;
                polished = true;
            } else {
                debug!("polishing ended with {:?}; keeping the first optimum", attempt.status);
            }
        }
    }
    if outcome.is_none() {
        debug!("solver attempt ended with {:?}; retrying at relaxed tolerance", att.status);
        let relaxed = run(opts.relaxed_tol)?;
        let status = match relaxed.status {
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SolveStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SolveStatus::Unbounded,
            st if optimal_candidate(st) && audit(&relaxed).0 => SolveStatus::Optimal,
            SolverStatus::MaxIterations => SolveStatus::IterationLimit,
            _ => SolveStatus::NumericalFailure,
        };
        att = relaxed;
        outcome = Some(status);
    }
    let status = outcome.expect("every branch assigns a status");
    let (_, violation) = audit(&att);
    let objective = if att.x.iter().all(|v| v.is_finite()) {
        req.objective_value(&att.x)
    } else {
        f64::NAN
    };
    Ok(SolverResult {
        status,
        objective,
        solve_time: start.elapsed().as_secs_f64(),
        iterations: att.iterations,
        max_violation: violation,
        backend_status: format!("{:?}", att.status),
        retried: attempts > 1,
        polished,
        x: att.x,
    })
}

/// Renders `req` in SDPA sparse format (dual form
/// `min cᵀy s.t. Σ yₖ Fₖ − F₀ ⪰ 0`, so `F₀ = −C₀`). Scalar rows form one
/// trailing diagonal block.
pub fn to_sdpa(req: &SolverRequest) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "\"lpvmpc semidefinite program, SDPA sparse format");
    let _ = writeln!(out, "{} = mDIM", req.n_vars);
    let n_blocks = req.psd.len() + usize::from(!req.nonneg.is_empty());
    let _ = writeln!(out, "{n_blocks} = nBLOCK");
    let mut sizes: Vec<String> = req.psd.iter().map(|c| c.dim().to_string()).collect();
    if !req.nonneg.is_empty() {
        sizes.push(format!("-{}", req.nonneg.len()));
    }
    let _ = writeln!(out, "{} = bLOCKsTRUCT", sizes.join(" "));
    let c: Vec<String> = req.objective.iter().map(|v| format!("{v}")).collect();
    let _ = writeln!(out, "{}", c.join(" "));

    // (matno, block, i, j, value), 1-based, upper triangle.
    let mut entries: Vec<(usize, usize, usize, usize, f64)> = Vec::new();
    let mut push_sym = |mat: usize, blk: usize, m: &DMatrix<f64>, sign: f64| {
        for j in 0..m.ncols() {
            for i in 0..=j {
                let v = sign * m[(i, j)];
                if v != 0.0 {
                    entries.push((mat, blk, i + 1, j + 1, v));
                }
            }
        }
    };
    for (b, c) in req.psd.iter().enumerate() {
        push_sym(0, b + 1, &c.constant, -1.0);
        for (k, a) in &c.coeffs {
            push_sym(k + 1, b + 1, a, 1.0);
        }
    }
    if !req.nonneg.is_empty() {
        let blk = req.psd.len() + 1;
        for (r, c) in req.nonneg.iter().enumerate() {
            if c.constant != 0.0 {
                entries.push((0, blk, r + 1, r + 1, -c.constant));
            }
            for (k, a) in &c.coeffs {
                if *a != 0.0 {
                    entries.push((k + 1, blk, r + 1, r + 1, *a));
                }
            }
        }
    }
    // Merge duplicates so the rendering depends on content only.
    entries.sort_by_key(|e| (e.0, e.1, e.2, e.3));
    let mut merged: Vec<(usize, usize, usize, usize, f64)> = Vec::with_capacity(entries.len());
    for e in entries {
        match merged.last_mut() {
            Some(last) if (last.0, last.1, last.2, last.3) == (e.0, e.1, e.2, e.3) => last.4 += e.4,
            _ => merged.push(e),
        }
    }
    for (m, b, i, j, v) in merged.into_iter().filter(|e| e.4 != 0.0) {
        let _ = writeln!(out, "{m} {b} {i} {j} {v}");
    }
    out
}

fn leading_numbers(line: &str) -> Vec<&str> {
    line.replace(['{', '}', '(', ')', ','], " ")
        .split_whitespace()
        .take_while(|t| t.parse::<f64>().is_ok())
        .map(|t| {
            let start = line.find(t).unwrap_or(0);
            &line[start..start + t.len()]
        })
        .collect()
}

/// Parses the SDPA sparse format produced by [`to_sdpa`] (and most other
/// writers). Negative block sizes become scalar rows.
pub fn from_sdpa(text: &str) -> Result<SolverRequest> {
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('"') && !l.starts_with('*'));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Parse(format!("SDPA file ended before {what}")))
    };
    let parse_usize = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| Error::Parse(format!("invalid integer `{s}`")))
    };
    let m_line = next("mDIM")?;
    let n_vars = parse_usize(
        leading_numbers(m_line)
            .first()
            .ok_or_else(|| Error::Parse("missing mDIM".into()))?,
    )?;
    let b_line = next("nBLOCK")?;
    let n_blocks = parse_usize(
        leading_numbers(b_line)
            .first()
            .ok_or_else(|| Error::Parse("missing nBLOCK".into()))?,
    )?;
    let s_line = next("bLOCKsTRUCT")?;
    let sizes: Vec<i64> = leading_numbers(s_line)
        .iter()
        .map(|s| s.parse::<i64>().map_err(|_| Error::Parse(format!("invalid block size `{s}`"))))
        .collect::<Result<_>>()?;
    if sizes.len() != n_blocks {
        return Err(Error::Parse(format!(
            "bLOCKsTRUCT lists {} blocks, nBLOCK says {n_blocks}",
            sizes.len()
        )));
    }
    let objective: Vec<f64> = if n_vars == 0 {
        Vec::new()
    } else {
        next("objective")?
            .replace(['{', '}', '(', ')', ','], " ")
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("invalid objective entry `{t}`"))))
            .collect::<Result<_>>()?
    };
    if objective.len() != n_vars {
        return Err(Error::Parse(format!(
            "objective has {} entries, mDIM is {n_vars}",
            objective.len()
        )));
    }

    // Dense per-(matrix, block) storage; problems here are small.
    let mut mats: Vec<Vec<DMatrix<f64>>> = (0..=n_vars)
        .map(|_| {
            sizes
                .iter()
                .map(|&s| {
                    let d = s.unsigned_abs() as usize;
                    if s < 0 {
                        DMatrix::zeros(d, 1)
                    } else {
                        DMatrix::zeros(d, d)
                    }
                })
                .collect()
        })
        .collect();
    let mut touched = vec![vec![false; sizes.len()]; n_vars + 1];
    for line in lines {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() < 5 {
            return Err(Error::Parse(format!("malformed entry line `{line}`")));
        }
        let (m, b, i, j) = (
            parse_usize(t[0])?,
            parse_usize(t[1])?,
            parse_usize(t[2])?,
            parse_usize(t[3])?,
        );
        let v: f64 = t[4]
            .parse()
            .map_err(|_| Error::Parse(format!("invalid value in `{line}`")))?;
        if m > n_vars || b == 0 || b > sizes.len() {
            return Err(Error::Parse(format!("entry out of range: `{line}`")));
        }
        let size = sizes[b - 1];
        let d = size.unsigned_abs() as usize;
        if i == 0 || j == 0 || i > d || j > d {
            return Err(Error::Parse(format!("entry index out of range: `{line}`")));
        }
        let target = &mut mats[m][b - 1];
        if size < 0 {
            if i != j {
                return Err(Error::Parse(format!("off-diagonal entry in diagonal block: `{line}`")));
            }
            target[(i - 1, 0)] = v;
        } else {
            target[(i - 1, j - 1)] = v;
            target[(j - 1, i - 1)] = v;
        }
        touched[m][b - 1] = true;
    }

    let mut psd = Vec::new();
    let mut nonneg = Vec::new();
    for (b, &size) in sizes.iter().enumerate() {
        if size > 0 {
            let coeffs = (1..=n_vars)
                .filter(|&k| touched[k][b])
                .map(|k| (k - 1, mats[k][b].clone()))
                .collect();
            psd.push(PsdConstraint {
                constant: -&mats[0][b],
                coeffs,
            });
        } else {
            for r in 0..size.unsigned_abs() as usize {
                let coeffs = (1..=n_vars)
                    .filter(|&k| mats[k][b][(r, 0)] != 0.0)
                    .map(|k| (k - 1, mats[k][b][(r, 0)]))
                    .collect();
                nonneg.push(LinearConstraint {
                    constant: -mats[0][b][(r, 0)],
                    coeffs,
                });
            }
        }
    }
    Ok(SolverRequest {
        n_vars,
        objective,
        psd,
        nonneg,
        options: SolverOptions::default(),
    })
}

pub fn export(req: &SolverRequest, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, to_sdpa(req).as_bytes())
}

pub fn import(path: &Path) -> Result<SolverRequest> {
    from_sdpa(&std::fs::read_to_string(path)?)
}
