//! Monte-Carlo falsifiers for the properties a solved program is supposed to
//! guarantee. Nothing here proves anything; a pass means no counterexample
//! was found among the drawn samples.
//!
//! Every oracle derives one RNG stream per sample index from the seed, so
//! results do not depend on the thread count.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::{stacked_system, SIGMA_RTOL};
use crate::error::{ensure_input, Result};
use crate::linalg;
use crate::lpv_model::{SampleMode, SchedulingBound};
use crate::sdp::{DataDrivenModel, MpcIngredients, SdpSolution};

/// Default absolute tolerance on eigenvalue margins.
pub const DEFAULT_TOL: f64 = 1e-7;

/// Witnesses kept per report.
pub const MAX_WITNESSES: usize = 5;

/// How a margin of exactly zero is judged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strictness {
    /// Pass iff the worst margin is positive.
    Strict,
    /// Pass iff the worst margin is at least `−tol`.
    Tolerant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub index: usize,
    pub margin: f64,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub samples: usize,
    /// Smallest margin seen; `+∞` when there were no samples.
    pub worst_margin: f64,
    pub tol: f64,
    pub strictness: Strictness,
    pub pass: bool,
    /// No samples were evaluated; `pass` carries no information.
    pub inconclusive: bool,
    pub witnesses: Vec<Witness>,
}

impl OracleReport {
    /// Builds a report from `(index, margin)` pairs; `describe` is only
    /// called for the retained witnesses.
    pub fn from_margins(
        name: &str,
        tol: f64,
        strictness: Strictness,
        margins: &[(usize, f64)],
        describe: impl Fn(usize) -> String,
    ) -> Self {
        let samples = margins.len();
        let worst_margin = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        let fails = |m: f64| match strictness {
            Strictness::Strict => !(m > 0.0),
            Strictness::Tolerant => !(m >= -tol),
        };
        let mut failing: Vec<(usize, f64)> = margins.iter().copied().filter(|m| fails(m.1)).collect();
        failing.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let witnesses = failing
            .into_iter()
            .take(MAX_WITNESSES)
            .map(|(index, margin)| Witness { index, margin, detail: describe(index) })
            .collect();
        Self {
            name: name.to_string(),
            samples,
            worst_margin,
            tol,
            strictness,
            pass: samples == 0 || !fails(worst_margin),
            inconclusive: samples == 0,
            witnesses,
        }
    }

    /// Conjunction of several reports under a new name.
    pub fn combine(name: &str, parts: &[OracleReport]) -> Self {
        let mut witnesses: Vec<Witness> = parts
            .iter()
            .flat_map(|p| {
                p.witnesses.iter().map(move |w| Witness { detail: format!("{}: {}", p.name, w.detail), ..w.clone() })
            })
            .collect();
        witnesses.sort_by(|a, b| a.margin.total_cmp(&b.margin).then(a.index.cmp(&b.index)));
        witnesses.truncate(MAX_WITNESSES);
        let samples = parts.iter().map(|p| p.samples).sum();
        Self {
            name: name.to_string(),
            samples,
            worst_margin: parts.iter().map(|p| p.worst_margin).fold(f64::INFINITY, f64::min),
            tol: parts.iter().map(|p| p.tol).fold(0.0, f64::max),
            strictness: if parts.iter().any(|p| p.strictness == Strictness::Strict) {
                Strictness::Strict
            } else {
                Strictness::Tolerant
            },
            pass: parts.iter().all(|p| p.pass),
            inconclusive: samples == 0,
            witnesses,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{} {}: samples={} worst_margin={:e} tol={:e}{}",
            if self.inconclusive {
                "INCONCLUSIVE"
            } else if self.pass {
                "PASS"
            } else {
                "FAIL"
            },
            self.name,
            self.samples,
            self.worst_margin,
            self.tol,
            if self.witnesses.is_empty() { String::new() } else { format!(" witnesses={}", self.witnesses.len()) }
        )
    }
}

/// A collection of reports as written by the `verify` subcommand.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub pass: bool,
    pub reports: Vec<OracleReport>,
}

impl VerificationSummary {
    pub fn new(reports: Vec<OracleReport>) -> Self {
        Self { pass: reports.iter().all(|r| r.pass), reports }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| crate::Error::Internal(format!("report serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| crate::Error::Parse(e.to_string()))
    }
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Half of all draws land on the boundary of `Π`.
fn draw_delta(bound: &SchedulingBound, rng: &mut ChaCha8Rng, index: usize) -> DMatrix<f64> {
    let mode = if index.is_multiple_of(2) { SampleMode::Boundary } else { SampleMode::Interior };
    bound.sample(rng, mode)
}

/// `A + BF + Δ(C + DF)`.
pub fn closed_loop_matrix(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    f: &DMatrix<f64>,
    delta: &DMatrix<f64>,
) -> DMatrix<f64> {
    a + b * f + delta * (c + d * f)
}

/// Left-hand side of the robust decrease inequality
/// `A_clᵀ P A_cl − P + Q + FᵀRF`.
pub fn decrease_lhs(acl: &DMatrix<f64>, p: &DMatrix<f64>, f: &DMatrix<f64>, ing: &MpcIngredients) -> DMatrix<f64> {
    linalg::symmetrize(&(acl.transpose() * p * acl - p + ing.q() + f.transpose() * ing.r() * f))
}

/// A system pair `(A, B)`.
pub type SystemPair = (DMatrix<f64>, DMatrix<f64>);

/// Robust decrease: for each system and each sampled `Δ ∈ Π`, the margin is
/// `−λ_max` of the decrease left-hand side.
///
/// Every system must pass the consistency test against `model`.
pub fn check_decrease_inequality(
    sol: &SdpSolution,
    systems: &[SystemPair],
    model: &DataDrivenModel,
    ing: &MpcIngredients,
    n_samples: usize,
    seed: u64,
    strictness: Strictness,
) -> Result<OracleReport> {
    for (k, (a, b)) in systems.iter().enumerate() {
        ensure_input!(
            model.certificate().contains(a, b, SIGMA_RTOL)?,
            "system {k} is not consistent with the data"
        );
    }
    Ok(decrease_report(sol, systems, model.bound(), model.c(), model.d(), ing, n_samples, seed, strictness))
}

/// Same as [`check_decrease_inequality`] without the consistency test.
#[allow(clippy::too_many_arguments)]
pub fn decrease_report(
    sol: &SdpSolution,
    systems: &[SystemPair],
    bound: &SchedulingBound,
    c: &DMatrix<f64>,
    d: &DMatrix<f64>,
    ing: &MpcIngredients,
    n_samples: usize,
    seed: u64,
    strictness: Strictness,
) -> OracleReport {
    let deltas = delta_samples(bound, n_samples, seed);
    let margins: Vec<(usize, f64)> = (0..systems.len() * n_samples)
        .into_par_iter()
        .map(|idx| {
            let (a, b) = &systems[idx / n_samples];
            let acl = closed_loop_matrix(a, b, c, d, &sol.f, &deltas[idx % n_samples]);
            (idx, -linalg::max_eigenvalue(&decrease_lhs(&acl, &sol.p, &sol.f, ing)))
        })
        .collect();
    OracleReport::from_margins("decrease_inequality", DEFAULT_TOL, strictness, &margins, |idx| {
        format!("system {}, Δ = {:?}", idx / n_samples, deltas[idx % n_samples].as_slice())
    })
}

/// `n` draws from `Π`, half of them on its boundary.
pub fn delta_samples(bound: &SchedulingBound, n: usize, seed: u64) -> Vec<DMatrix<f64>> {
    (0..n).map(|i| draw_delta(bound, &mut sample_rng(seed, i), i)).collect()
}

/// Size of the scheduling pool the rollouts draw from.
pub const ROLLOUT_POOL: usize = 1000;

/// How the rollout oracle picks `Δ` each step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adversary {
    Random,
    /// Picks, among `candidates` draws, the `Δ` maximizing the next stage cost.
    Greedy { candidates: usize },
}

/// Worst accumulated cost of the fixed feedback `u = F x` from `x_t` over
/// `n_rollouts` scheduling sequences; margin `γ − cost`. A finite horizon
/// underestimates the infinite sum, so passing is necessary, not sufficient.
///
/// Each step draws `Δ` uniformly from a pool of [`ROLLOUT_POOL`] samples of `Π`
/// whose closed-loop matrices are formed once.
#[allow(clippy::too_many_arguments)]
pub fn check_cost_upper_bound(
    sol: &SdpSolution,
    x_t: &DVector<f64>,
    system: &SystemPair,
    model: &DataDrivenModel,
    ing: &MpcIngredients,
    horizon: usize,
    n_rollouts: usize,
    seed: u64,
    adversary: Adversary,
) -> OracleReport {
    let (a, b) = system;
    let acls: Vec<DMatrix<f64>> = delta_samples(model.bound(), ROLLOUT_POOL, seed)
        .iter()
        .map(|delta| closed_loop_matrix(a, b, model.c(), model.d(), &sol.f, delta))
        .collect();
    let weight = linalg::symmetrize(&(ing.q() + sol.f.transpose() * ing.r() * &sol.f));
    let n_x = x_t.len();
    let stage = |x: &DVector<f64>, buf: &mut DVector<f64>| {
        buf.gemv(1.0, &weight, x, 0.0);
        x.dot(buf)
    };
    let margins: Vec<(usize, f64)> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = sample_rng(seed.wrapping_add(1), r);
            let (mut x, mut next, mut best, mut buf) =
                (x_t.clone(), DVector::zeros(n_x), DVector::zeros(n_x), DVector::zeros(n_x));
            let mut cost = 0.0;
            for _ in 0..horizon {
                cost += stage(&x, &mut buf);
                match adversary {
                    Adversary::Random => next.gemv(1.0, &acls[rng.gen_range(0..acls.len())], &x, 0.0),
                    Adversary::Greedy { candidates } => {
                        let mut top = f64::NEG_INFINITY;
                        for _ in 0..candidates.max(1) {
                            next.gemv(1.0, &acls[rng.gen_range(0..acls.len())], &x, 0.0);
                            let value = stage(&next, &mut buf);
                            if value > top {
                                top = value;
                                best.copy_from(&next);
                            }
                        }
                        next.copy_from(&best);
                    }
                }
                std::mem::swap(&mut x, &mut next);
            }
            (r, sol.gamma - cost)
        })
        .collect();
    let name = match adversary {
        Adversary::Random => "cost_upper_bound",
        Adversary::Greedy { .. } => "cost_upper_bound_greedy",
    };
    OracleReport::from_margins(name, DEFAULT_TOL, Strictness::Tolerant, &margins, |r| {
        let cost = sol.gamma - margins[r].1;
        format!("rollout {r}: cost {cost:e}")
    })
}

/// The three intermediate inequalities behind the decrease certificate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchurChainReport {
    /// `λ_min(H − ΦᵀΦ/γ) − tol`.
    pub inverse_bound: OracleReport,
    /// `λ_min(H − N_cl W⁻¹ N_clᵀ)` with `N_cl = AH + BL + Δ(CH + DL)`.
    pub quadratic_form: OracleReport,
    /// `λ_min` of the data-multiplier and scheduling-multiplier form.
    pub multiplier: OracleReport,
}

impl SchurChainReport {
    pub fn combined(&self) -> OracleReport {
        OracleReport::combine(
            "schur_chain",
            &[self.inverse_bound.clone(), self.quadratic_form.clone(), self.multiplier.clone()],
        )
    }
}

/// `H − ΦᵀΦ/γ`.
pub fn inverse_bound_matrix(sol: &SdpSolution, ing: &MpcIngredients) -> DMatrix<f64> {
    let phi = sol.phi(ing);
    linalg::symmetrize(&(&sol.h - phi.transpose() * &phi / sol.gamma))
}

/// The block matrix `S` whose `[I A B Δ]`-quadratic form is
/// `H − N_cl W⁻¹ N_clᵀ`.
pub fn s_matrix(sol: &SdpSolution, ing: &MpcIngredients, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n_x, n_u, n_z) = (sol.h.nrows(), sol.l.nrows(), c.nrows());
    let w_inv = linalg::inverse_pd(&inverse_bound_matrix(sol, ing))?;
    let mut n = DMatrix::zeros(n_x + n_u + n_z, n_x);
    linalg::set_block(&mut n, 0, 0, &sol.h);
    linalg::set_block(&mut n, n_x, 0, &sol.l);
    linalg::set_block(&mut n, n_x + n_u, 0, &(c * &sol.h + d * &sol.l));
    let mut s = DMatrix::zeros(2 * n_x + n_u + n_z, 2 * n_x + n_u + n_z);
    linalg::set_block(&mut s, 0, 0, &sol.h);
    linalg::set_block(&mut s, n_x, n_x, &(-(&n * w_inv * n.transpose())));
    Ok(linalg::symmetrize(&s))
}

/// `[I; Aᵀ; Bᵀ; Δᵀ]`.
fn stacked_with_delta(a: &DMatrix<f64>, b: &DMatrix<f64>, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (n_x, n_u, n_z) = (a.nrows(), b.ncols(), delta.ncols());
    let head = stacked_system(a, b, n_x, n_u)?;
    let mut w = DMatrix::zeros(2 * n_x + n_u + n_z, n_x);
    linalg::set_block(&mut w, 0, 0, &head);
    linalg::set_block(&mut w, 2 * n_x + n_u, 0, &delta.transpose());
    Ok(w)
}

/// Checks the chain `H − ΦᵀΦ/γ ≻ 0`, the `S`-quadratic form and the
/// multiplier inequality at sampled consistent systems and scheduling values.
pub fn check_schur_chain(
    sol: &SdpSolution,
    systems: &[SystemPair],
    model: &DataDrivenModel,
    ing: &MpcIngredients,
    n_samples: usize,
    seed: u64,
) -> Result<SchurChainReport> {
    let tol = DEFAULT_TOL;
    let wmat = inverse_bound_matrix(sol, ing);
    let first = linalg::min_eigenvalue(&wmat);
    let eigenvalues = linalg::sym_eigenvalues(&wmat);
    let inverse_bound = OracleReport::from_margins(
        "schur_chain.inverse_bound",
        tol,
        Strictness::Strict,
        &[(0, first - tol)],
        |_| format!("eigenvalues {:?}", eigenvalues.as_slice()),
    );
    if first <= 0.0 {
        // The remaining forms need W⁻¹; report them as failing at the same margin.
        let fail = |name: &str| {
            OracleReport::from_margins(name, tol, Strictness::Strict, &[(0, first - tol)], |_| {
                "H − ΦᵀΦ/γ is not positive definite".into()
            })
        };
        return Ok(SchurChainReport {
            inverse_bound,
            quadratic_form: fail("schur_chain.quadratic_form"),
            multiplier: fail("schur_chain.multiplier"),
        });
    }
    let s = s_matrix(sol, ing, model.c(), model.d())?;
    let m = model.certificate().build_m(&sol.alpha)?;
    let bound = model.bound();
    let deltas = delta_samples(bound, n_samples, seed);
    let results: Vec<Result<(usize, f64, f64)>> = (0..systems.len() * n_samples)
        .into_par_iter()
        .map(|idx| {
            let delta = &deltas[idx % n_samples];
            let (a, b) = &systems[idx / n_samples];
            let w = stacked_with_delta(a, b, delta)?;
            let quad = linalg::min_eigenvalue(&linalg::symmetrize(&(w.transpose() * &s * &w)));
            let head = stacked_system(a, b, a.nrows(), b.ncols())?;
            let mult = linalg::symmetrize(&(head.transpose() * &m * &head)) + bound.qmi_value(delta)? * sol.lambda;
            Ok((idx, quad, linalg::min_eigenvalue(&mult)))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    let describe = |idx: usize| format!("system {}, Δ = {:?}", idx / n_samples, deltas[idx % n_samples].as_slice());
    let quadratic: Vec<(usize, f64)> = results.iter().map(|r| (r.0, r.1)).collect();
    let multiplier: Vec<(usize, f64)> = results.iter().map(|r| (r.0, r.2)).collect();
    Ok(SchurChainReport {
        inverse_bound,
        quadratic_form: OracleReport::from_margins(
            "schur_chain.quadratic_form",
            tol,
            Strictness::Strict,
            &quadratic,
            describe,
        ),
        multiplier: OracleReport::from_margins("schur_chain.multiplier", tol, Strictness::Tolerant, &multiplier, describe),
    })
}

/// Robust invariance of `{x : xᵀPx ≤ γ}`: boundary points are pushed through
/// sampled closed loops; margin `γ − x₊ᵀPx₊`.
#[allow(clippy::too_many_arguments)]
pub fn check_invariant_ellipsoid(
    sol: &SdpSolution,
    system: &SystemPair,
    model: &DataDrivenModel,
    n_points: usize,
    n_deltas: usize,
    seed: u64,
    tol: f64,
) -> Result<OracleReport> {
    let (a, b) = system;
    let n_x = a.nrows();
    // xᵀPx = γ ⇔ x = √γ · P^{-1/2} v with ‖v‖ = 1.
    let to_boundary = linalg::inv_sqrt_pd(&sol.p)? * sol.gamma.sqrt();
    let points: Vec<DVector<f64>> = (0..n_points)
        .map(|i| {
            let mut rng = sample_rng(seed.wrapping_add(2), i);
            let v = DVector::from_fn(n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
            &to_boundary * v.normalize()
        })
        .collect();
    let acls: Vec<DMatrix<f64>> = delta_samples(model.bound(), n_deltas, seed)
        .iter()
        .map(|delta| closed_loop_matrix(a, b, model.c(), model.d(), &sol.f, delta))
        .collect();
    let margins: Vec<(usize, f64)> = (0..n_points)
        .into_par_iter()
        .flat_map_iter(|p| {
            let (mut next, mut buf) = (DVector::zeros(n_x), DVector::zeros(n_x));
            let (points, acls) = (&points, &acls);
            (0..n_deltas).map(move |j| {
                next.gemv(1.0, &acls[j], &points[p], 0.0);
                buf.gemv(1.0, &sol.p, &next, 0.0);
                (p * n_deltas + j, sol.gamma - next.dot(&buf))
            })
        })
        .collect();
    Ok(OracleReport::from_margins("invariant_ellipsoid", tol, Strictness::Tolerant, &margins, |idx| {
        format!("point {:?}, Δ sample {}", points[idx / n_deltas].as_slice(), idx % n_deltas)
    }))
}

/// Draws systems consistent with the data by accept/reject. Candidates are
/// perturbations of `anchor` (when given) and least-squares fits of the data
/// under alternative scheduling sequences, each perturbed by a random
/// direction at a geometrically shrinking radius. Only candidates that pass
/// the exact consistency test are returned.
pub fn sample_consistent_systems(
    model: &DataDrivenModel,
    anchor: Option<&SystemPair>,
    count: usize,
    seed: u64,
) -> Result<Vec<SystemPair>> {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let cert = model.certificate();
    let data = model.data();
    let mut accepted = Vec::new();
    let max_attempts = 200 * count.max(1);
    for attempt in 0..max_attempts {
        if accepted.len() >= count {
            break;
        }
        let mut rng = sample_rng(seed, attempt);
        let base = match anchor {
            Some(sys) if attempt % 2 == 0 => sys.clone(),
            _ => {
                // Re-explain the data with a fresh admissible scheduling sequence.
                let samples: Vec<_> = data.samples().collect();
                let mut regressors = DMatrix::zeros(n_x + n_u, samples.len());
                let mut targets = DMatrix::zeros(n_x, samples.len());
                for (k, s) in samples.iter().enumerate() {
                    let delta = model.bound().sample(&mut rng, SampleMode::Interior);
                    regressors.view_mut((0, k), (n_x, 1)).copy_from(&s.x);
                    regressors.view_mut((n_x, k), (n_u, 1)).copy_from(&s.u);
                    targets.set_column(k, &(&s.x_next - delta * &s.z));
                }
                let fit = targets
                    * regressors
                        .pseudo_inverse(1e-12)
                        .map_err(|e| crate::Error::Numerical(format!("pseudo-inverse: {e}")))?;
                (fit.columns(0, n_x).into_owned(), fit.columns(n_x, n_u).into_owned())
            }
        };
        let scale = (base.0.norm() + base.1.norm()).max(1.0);
        let radius = scale * 10f64.powi(-((attempt / 2 % 6) as i32 + 1));
        let da = DMatrix::from_fn(n_x, n_x, |_, _| rng.sample::<f64, _>(StandardNormal));
        let db = DMatrix::from_fn(n_x, n_u, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = (da.norm_squared() + db.norm_squared()).sqrt().max(f64::MIN_POSITIVE);
        let t: f64 = rng.gen_range(0.0..=1.0);
        let a = &base.0 + da * (radius * t / norm);
        let b = &base.1 + db * (radius * t / norm);
        if cert.contains(&a, &b, 0.0)? {
            accepted.push((a, b));
        }
    }
    Ok(accepted)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, InputLaw};
    use crate::lpv_model::{LpvPlant, SchedulingLaw};
    use crate::sdp::{solve_step, AssemblyOptions, SdpStatus};
    use crate::solver::SolverOptions;

    fn preset_model(t_len: usize, seed: u64) -> (LpvPlant, DataDrivenModel) {
        let plant = LpvPlant::angular_positioning(1.0).unwrap();
        let g = generate(
            &plant,
            t_len,
            &InputLaw::Uniform { low: -1.0, high: 1.0 },
            &SchedulingLaw::Uniform { low: 0.05, high: 0.1 },
            &DVector::from_vec(vec![0.1, -0.2]),
            seed,
        )
        .unwrap();
        let model = DataDrivenModel::new(g.data, plant.bound.clone(), plant.c.clone(), plant.d.clone()).unwrap();
        (plant, model)
    }

    fn x0() -> DVector<f64> {
        DVector::from_vec(vec![0.05, 0.0])
    }

    fn solved(seed: u64) -> (LpvPlant, DataDrivenModel, SdpSolution) {
        let (plant, model) = preset_model(20, seed);
        let ing = MpcIngredients::angular_positioning();
        let out =
            solve_step(&x0(), &model, &ing, &AssemblyOptions::default(), &SolverOptions::default()).unwrap();
        assert_eq!(out.status, SdpStatus::Optimal);
        (plant, model, out.solution.unwrap())
    }

    fn m(rows: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, v)
    }

    #[test]
    fn report_semantics() {
        let r = OracleReport::from_margins("x", 1e-7, Strictness::Tolerant, &[(0, -5e-8)], |_| String::new());
        assert!(r.pass);
        let r = OracleReport::from_margins("x", 1e-7, Strictness::Strict, &[(0, 0.0)], |_| String::new());
        assert!(!r.pass);
        assert_eq!(r.witnesses.len(), 1);
        let many: Vec<(usize, f64)> = (0..20).map(|i| (i, -(i as f64))).collect();
        let r = OracleReport::from_margins("x", 1e-7, Strictness::Tolerant, &many, |i| format!("{i}"));
        assert_eq!(r.witnesses.len(), MAX_WITNESSES);
        assert_eq!(r.witnesses[0].index, 19);
        let empty = OracleReport::from_margins("x", 1e-7, Strictness::Strict, &[], |_| String::new());
        assert!(empty.inconclusive && empty.samples == 0);
    }

    #[test]
    fn zero_system_with_identity_weights_has_zero_margin() {
        let ing = MpcIngredients::new(m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0]), m(1, 1, &[1.0])).unwrap();
        let sol = SdpSolution::from_parts(1.0, m(1, 1, &[1.0]), m(1, 1, &[0.0]), vec![], 0.0).unwrap();
        let bound = SchedulingBound::singular_value(1.0, 1, 1).unwrap();
        let zero = m(1, 1, &[0.0]);
        let systems = [(zero.clone(), zero.clone())];
        let strict = decrease_report(&sol, &systems, &bound, &zero, &zero, &ing, 10, 0, Strictness::Strict);
        assert_eq!(strict.worst_margin, 0.0);
        assert!(!strict.pass);
        let tolerant = decrease_report(&sol, &systems, &bound, &zero, &zero, &ing, 10, 0, Strictness::Tolerant);
        assert!(tolerant.pass);
    }

    #[test]
    fn preset_solution_passes_decrease_and_chain() {
        let (plant, model, sol) = solved(0);
        let ing = MpcIngredients::angular_positioning();
        let true_sys = (plant.a.clone(), plant.b.clone());
        let mut systems = vec![true_sys.clone()];
        systems.extend(sample_consistent_systems(&model, Some(&true_sys), 4, 1).unwrap());
        assert!(systems.len() > 1, "sampler found no consistent systems");
        let r = check_decrease_inequality(&sol, &systems, &model, &ing, 500, 3, Strictness::Strict).unwrap();
        assert!(r.pass, "{}", r.summary_line());
        let chain = check_schur_chain(&sol, &systems, &model, &ing, 200, 4).unwrap();
        for part in [&chain.inverse_bound, &chain.quadratic_form, &chain.multiplier] {
            assert!(part.pass, "{}", part.summary_line());
        }
    }

    #[test]
    fn boundary_only_samples_still_pass() {
        let (plant, model, sol) = solved(1);
        let ing = MpcIngredients::angular_positioning();
        let bound = model.bound();
        let acl_margin = (0..200)
            .map(|i| {
                let mut rng = sample_rng(9, i);
                let delta = bound.sample(&mut rng, SampleMode::Boundary);
                let acl = closed_loop_matrix(&plant.a, &plant.b, &plant.c, &plant.d, &sol.f, &delta);
                -linalg::max_eigenvalue(&decrease_lhs(&acl, &sol.p, &sol.f, &ing))
            })
            .fold(f64::INFINITY, f64::min);
        assert!(acl_margin > 0.0, "{acl_margin:e}");
    }

    #[test]
    fn rollouts_stay_below_gamma() {
        let (plant, model, sol) = solved(2);
        let ing = MpcIngredients::angular_positioning();
        let sys = (plant.a.clone(), plant.b.clone());
        for adversary in [Adversary::Random, Adversary::Greedy { candidates: 100 }] {
            let r = check_cost_upper_bound(&sol, &x0(), &sys, &model, &ing, 200, 20, 5, adversary);
            assert!(r.pass, "{}", r.summary_line());
            assert!(r.worst_margin < sol.gamma);
        }
        let zero = check_cost_upper_bound(
            &sol,
            &DVector::zeros(2),
            &sys,
            &model,
            &ing,
            50,
            5,
            0,
            Adversary::Random,
        );
        assert_eq!(zero.worst_margin, sol.gamma);
    }

    #[test]
    fn negative_h_fails_the_first_link() {
        let (_, model, sol) = solved(0);
        let ing = MpcIngredients::angular_positioning();
        let mut bad = sol.clone();
        bad.h = -DMatrix::identity(2, 2);
        let chain = check_schur_chain(&bad, &[], &model, &ing, 10, 0).unwrap();
        assert!(!chain.inverse_bound.pass);
        assert!(chain.inverse_bound.worst_margin < 0.0);
        assert!(!chain.combined().pass);
    }

    #[test]
    fn large_gamma_reduces_the_first_link_to_h() {
        let ing = MpcIngredients::angular_positioning();
        let h = m(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let sol = SdpSolution::from_parts(1e300, h.clone(), m(1, 2, &[0.3, -0.1]), vec![], 0.0).unwrap();
        assert!((inverse_bound_matrix(&sol, &ing) - &h).amax() < 1e-12);
    }

    #[test]
    fn invariant_ellipsoid_holds() {
        let (plant, model, sol) = solved(3);
        let sys = (plant.a.clone(), plant.b.clone());
        let r = check_invariant_ellipsoid(&sol, &sys, &model, 50, 50, 7, 1e-7).unwrap();
        assert!(r.pass, "{}", r.summary_line());
        assert_eq!(r.samples, 2500);
    }

    #[test]
    fn inconsistent_system_is_rejected() {
        let (plant, model, sol) = solved(0);
        let ing = MpcIngredients::angular_positioning();
        let bad = (plant.a.clone() * 2.0, plant.b.clone());
        let err = check_decrease_inequality(&sol, &[bad], &model, &ing, 5, 0, Strictness::Strict);
        assert!(matches!(err, Err(crate::Error::Input(_))));
    }

    #[test]
    fn sampled_systems_are_consistent_and_reproducible() {
        let (plant, model) = preset_model(20, 4);
        let anchor = (plant.a.clone(), plant.b.clone());
        let a = sample_consistent_systems(&model, Some(&anchor), 5, 11).unwrap();
        let b = sample_consistent_systems(&model, Some(&anchor), 5, 11).unwrap();
        assert_eq!(a, b);
        for (sa, sb) in &a {
            assert!(model.certificate().contains(sa, sb, 0.0).unwrap());
        }
    }

    #[test]
    fn reports_are_thread_count_independent() {
        let (plant, model, sol) = solved(0);
        let ing = MpcIngredients::angular_positioning();
        let sys = vec![(plant.a.clone(), plant.b.clone())];
        let run = || check_decrease_inequality(&sol, &sys, &model, &ing, 64, 2, Strictness::Strict).unwrap();
        let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap().install(run);
        let parallel = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap().install(run);
        assert_eq!(serial, parallel);
    }

    #[test]
    fn summary_round_trips() {
        let r = OracleReport::from_margins("x", 1e-7, Strictness::Strict, &[(3, -1.5)], |_| "bad".into());
        let s = VerificationSummary::new(vec![r, OracleReport::from_margins("y", 1e-7, Strictness::Strict, &[], |_| String::new())]);
        assert!(!s.pass);
        let text = s.to_toml().unwrap();
        assert_eq!(VerificationSummary::from_toml(&text).unwrap(), s);
    }
}
