//! Assembly of the per-step semidefinite program and extraction of the
//! feedback gain and Lyapunov matrix from its solution.
//!
//! Variable vector layout: `γ`, `vech(H)` (lower triangle, column by
//! column), `vec(L)` (column-major), `α` (one per active sample), `λ`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyCertificate;
use crate::data::DataSet;
use crate::error::{ensure_input, Error, Result};
use crate::linalg;
use crate::lpv_model::SchedulingBound;
use crate::solver::{self, LinearConstraint, PsdConstraint, SolveStatus, SolverOptions, SolverRequest, SolverResult};

/// Largest condition number of `H` accepted when extracting `F` and `P`.
pub const MAX_H_CONDITION: f64 = 1e12;

/// Default base of the strictness margin, scaled by `1 + ‖x_t‖`.
pub const DEFAULT_STRICTNESS: f64 = 1e-7;

/// Cost weights and constraint ellipsoids.
#[derive(Clone, Debug)]
pub struct MpcIngredients {
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    m_q: DMatrix<f64>,
    m_r: DMatrix<f64>,
    s_u: DMatrix<f64>,
    s_x: DMatrix<f64>,
    s_u_inv: DMatrix<f64>,
    s_x_inv: DMatrix<f64>,
}

impl MpcIngredients {
    /// `S_x` must be positive definite: the state-constraint LMI uses its inverse.
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>, s_u: DMatrix<f64>, s_x: DMatrix<f64>) -> Result<Self> {
        let n_x = q.nrows();
        let n_u = r.nrows();
        linalg::check_shape("Q", &q, n_x, n_x)?;
        linalg::check_shape("R", &r, n_u, n_u)?;
        linalg::check_shape("S_u", &s_u, n_u, n_u)?;
        linalg::check_shape("S_x", &s_x, n_x, n_x)?;
        for (name, m) in [("Q", &q), ("R", &r), ("S_u", &s_u), ("S_x", &s_x)] {
            ensure_input!(
                (m - m.transpose()).amax() <= 1e-12 * (1.0 + m.amax()),
                "{name} is not symmetric"
            );
            ensure_input!(linalg::is_positive_definite(m), "{name} must be positive definite");
        }
        let m_q = linalg::cholesky_upper(&q)?;
        let m_r = linalg::cholesky_upper(&r)?;
        for (name, m, f) in [("Q", &q, &m_q), ("R", &r, &m_r)] {
            let res = (f.transpose() * f - m).norm();
            if res > 1e-12 * m.norm() {
                return Err(Error::Numerical(format!("{name} factor residual {res:e}")));
            }
        }
        let s_u_inv = linalg::inverse_pd(&s_u)?;
        let s_x_inv = linalg::inverse_pd(&s_x)?;
        Ok(Self { q, r, m_q, m_r, s_u, s_x, s_u_inv, s_x_inv })
    }

    /// `Q = I`, `R = 0.01`, `S_x = 4I`, `S_u = 0.16`.
    pub fn angular_positioning() -> Self {
        Self::new(
            DMatrix::identity(2, 2),
            DMatrix::from_element(1, 1, 0.01),
            DMatrix::from_element(1, 1, 0.16),
            DMatrix::identity(2, 2) * 4.0,
        )
        .expect("preset ingredients are valid")
    }

    pub fn n_x(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.r.nrows()
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }

    pub fn m_q(&self) -> &DMatrix<f64> {
        &self.m_q
    }

    pub fn m_r(&self) -> &DMatrix<f64> {
        &self.m_r
    }

    pub fn s_u(&self) -> &DMatrix<f64> {
        &self.s_u
    }

    pub fn s_x(&self) -> &DMatrix<f64> {
        &self.s_x
    }

    pub fn lambda_min_q(&self) -> f64 {
        linalg::min_eigenvalue(&self.q)
    }

    /// `‖x‖²_Q + ‖u‖²_R`.
    pub fn stage_cost(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        x.dot(&(&self.q * x)) + u.dot(&(&self.r * u))
    }

    /// `1 − ‖u‖_{S_u}`.
    pub fn input_slack(&self, u: &DVector<f64>) -> f64 {
        1.0 - u.dot(&(&self.s_u * u)).max(0.0).sqrt()
    }

    /// `1 − ‖x‖_{S_x}`.
    pub fn state_slack(&self, x: &DVector<f64>) -> f64 {
        1.0 - x.dot(&(&self.s_x * x)).max(0.0).sqrt()
    }
}

/// Position of every scalar unknown in the variable vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariableLayout {
    pub n_x: usize,
    pub n_u: usize,
    pub n_alpha: usize,
}

impl VariableLayout {
    pub fn gamma(&self) -> usize {
        0
    }

    /// Index of `H[i][j]` (either triangle).
    pub fn h(&self, i: usize, j: usize) -> usize {
        let (r, c) = if i >= j { (i, j) } else { (j, i) };
        // Column c of the lower triangle starts after n_x + (n_x−1) + … entries.
        let start = c * self.n_x - c * c.saturating_sub(1) / 2;
        1 + start + (r - c)
    }

    pub fn h_len(&self) -> usize {
        self.n_x * (self.n_x + 1) / 2
    }

    pub fn l(&self, i: usize, j: usize) -> usize {
        1 + self.h_len() + j * self.n_u + i
    }

    pub fn alpha(&self, k: usize) -> usize {
        1 + self.h_len() + self.n_u * self.n_x + k
    }

    pub fn lambda(&self) -> usize {
        self.alpha(self.n_alpha)
    }

    pub fn len(&self) -> usize {
        self.lambda() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Structured view of a variable vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Variables {
    pub gamma: f64,
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
}

impl Variables {
    pub fn zeros(layout: &VariableLayout) -> Self {
        Self {
            gamma: 0.0,
            h: DMatrix::zeros(layout.n_x, layout.n_x),
            l: DMatrix::zeros(layout.n_u, layout.n_x),
            alpha: vec![0.0; layout.n_alpha],
            lambda: 0.0,
        }
    }

    pub fn from_vec(layout: &VariableLayout, y: &[f64]) -> Result<Self> {
        ensure_input!(
            y.len() == layout.len(),
            "variable vector has length {}, expected {}",
            y.len(),
            layout.len()
        );
        let mut v = Self::zeros(layout);
        v.gamma = y[layout.gamma()];
        for j in 0..layout.n_x {
            for i in 0..layout.n_x {
                v.h[(i, j)] = y[layout.h(i, j)];
            }
            for i in 0..layout.n_u {
                v.l[(i, j)] = y[layout.l(i, j)];
            }
        }
        for k in 0..layout.n_alpha {
            v.alpha[k] = y[layout.alpha(k)];
        }
        v.lambda = y[layout.lambda()];
        Ok(v)
    }

    /// Every variable multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            gamma: self.gamma * factor,
            h: &self.h * factor,
            l: &self.l * factor,
            alpha: self.alpha.iter().map(|a| a * factor).collect(),
            lambda: self.lambda * factor,
        }
    }

    /// Inverse of [`Variables::from_vec`]; `H` is read from its lower triangle.
    pub fn to_vec(&self, layout: &VariableLayout) -> Vec<f64> {
        let mut y = vec![0.0; layout.len()];
        y[layout.gamma()] = self.gamma;
        for j in 0..layout.n_x {
            for i in j..layout.n_x {
                y[layout.h(i, j)] = self.h[(i, j)];
            }
            for i in 0..layout.n_u {
                y[layout.l(i, j)] = self.l[(i, j)];
            }
        }
        for (k, a) in self.alpha.iter().enumerate() {
            y[layout.alpha(k)] = *a;
        }
        y[layout.lambda()] = self.lambda;
        y
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssemblyOptions {
    /// The large LMI is required to be `⪰ strictness·(1 + ‖x_t‖)·I`, and `γ` at least as large.
    pub strictness: f64,
    /// Number of closed-loop blocks `[H, Φᵀ; Φ, γI]` on the diagonal of the large LMI.
    pub closed_loop_copies: usize,
}

impl Default for AssemblyOptions {
    fn default() -> Self {
        Self {
            strictness: DEFAULT_STRICTNESS,
            closed_loop_copies: 1,
        }
    }
}

/// Everything the controller knows: recorded data, the scheduling bound and
/// the performance-channel matrices `C`, `D`.
#[derive(Clone, Debug)]
pub struct DataDrivenModel {
    data: DataSet,
    bound: SchedulingBound,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
    cert: ConsistencyCertificate,
}

impl DataDrivenModel {
    pub fn new(data: DataSet, bound: SchedulingBound, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        linalg::check_shape("C", &c, data.n_z(), data.n_x())?;
        linalg::check_shape("D", &d, data.n_z(), data.n_u())?;
        let cert = ConsistencyCertificate::new(&data, &bound)?;
        Ok(Self { data, bound, c, d, cert })
    }

    pub fn data(&self) -> &DataSet {
        &self.data
    }

    pub fn bound(&self) -> &SchedulingBound {
        &self.bound
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn certificate(&self) -> &ConsistencyCertificate {
        &self.cert
    }

    pub fn n_x(&self) -> usize {
        self.data.n_x()
    }

    pub fn n_u(&self) -> usize {
        self.data.n_u()
    }

    pub fn n_z(&self) -> usize {
        self.data.n_z()
    }

    /// Same knowledge restricted to the first `len` samples.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        Self::new(self.data.prefix(len)?, self.bound.clone(), self.c.clone(), self.d.clone())
    }
}

/// The assembled program for one measured state. Immutable once built.
///
/// The large LMI is handed to the solver in coordinates centered on a
/// least-squares fit `(Â, B̂)` of the data: with `T = [I 0 0; Âᵀ I 0; B̂ᵀ 0 I]`
/// (extended by identity), the solver sees `Tᵀ·LMI·T ⪰ eps·I`. The congruence
/// is exact; it replaces `x_{i+1}` by the residual `x_{i+1} − Â xᵢ − B̂ uᵢ` in
/// every data term and so avoids cancellation between large entries.
///
/// The program is homogeneous in the decision variables apart from its
/// constants, so the solver works on variables divided by
/// `scale = 10·max(‖x_t‖², 30·eps)` with every LMI rescaled to match. Without this
/// the optimum shrinks like `‖x_t‖²` and sinks below the solver's absolute
/// accuracy as the state converges.
#[derive(Clone, Debug)]
pub struct SdpProblem {
    layout: VariableLayout,
    x_t: DVector<f64>,
    eps: f64,
    scale: f64,
    copies: usize,
    alpha_weights: Vec<f64>,
    congruence: DMatrix<f64>,
    null_direction: Option<DVector<f64>>,
    request: SolverRequest,
}

/// Symmetric matrices of the four LMI families, in order.
struct LmiValues {
    initial: DMatrix<f64>,
    input: DMatrix<f64>,
    state: DMatrix<f64>,
    decrease: DMatrix<f64>,
}

impl LmiValues {
    fn into_vec(self) -> [DMatrix<f64>; 4] {
        [self.initial, self.input, self.state, self.decrease]
    }
}

/// The four LMI matrices in native coordinates, without strictness margin.
/// With `with_constant = false` only the linear part in `v` is produced.
/// `v.alpha` is in solver units: data term `i` enters as `v.alpha[i]·weights[i]`.
fn lmi_values(
    v: &Variables,
    x_t: &DVector<f64>,
    model: &DataDrivenModel,
    ing: &MpcIngredients,
    weights: &[f64],
    copies: usize,
    with_constant: bool,
) -> LmiValues {
    let n_x = model.n_x();
    let n_u = model.n_u();
    let n_z = model.n_z();
    let k = if with_constant { 1.0 } else { 0.0 };

    let mut initial = DMatrix::zeros(n_x + 1, n_x + 1);
    initial[(0, 0)] = k;
    linalg::set_sym_block(&mut initial, 1, 0, &(DMatrix::from_column_slice(n_x, 1, x_t.as_slice()) * k));
    linalg::set_block(&mut initial, 1, 1, &v.h);

    let mut input = DMatrix::zeros(n_x + n_u, n_x + n_u);
    linalg::set_block(&mut input, 0, 0, &v.h);
    linalg::set_sym_block(&mut input, n_x, 0, &v.l);
    linalg::set_block(&mut input, n_x, n_x, &(&ing.s_u_inv * k));

    let mut state = DMatrix::zeros(2 * n_x, 2 * n_x);
    linalg::set_block(&mut state, 0, 0, &v.h);
    linalg::set_sym_block(&mut state, n_x, 0, &v.h);
    linalg::set_block(&mut state, n_x, n_x, &(&ing.s_x_inv * k));

    let n1 = 2 * n_x + n_u;
    let per_copy = 2 * n_x + n_u;
    let dim = n1 + n_z + copies * per_copy;
    let mut big = DMatrix::zeros(dim, dim);
    let bound = model.bound();
    // Top-left: diag(H, 0, 0, 0) − λG (on the I/Δ rows) − M(α).
    linalg::set_block(&mut big, 0, 0, &(&v.h - bound.g11() * v.lambda));
    linalg::set_sym_block(&mut big, 0, n1, &(bound.g12() * -v.lambda));
    linalg::set_block(&mut big, n1, n1, &(bound.g22() * -v.lambda));
    let cert = model.certificate();
    let mut m = DMatrix::zeros(n1, n1);
    for (i, (a, w)) in v.alpha.iter().zip(weights).enumerate() {
        m += cert.term(i) * (*a * *w);
    }
    let corner = big.view((0, 0), (n1, n1)) - m;
    big.view_mut((0, 0), (n1, n1)).copy_from(&corner);

    let perf = model.c() * &v.h + model.d() * &v.l;
    let mut phi = DMatrix::zeros(n_u + n_x, n_x);
    linalg::set_block(&mut phi, 0, 0, &(ing.m_r() * &v.l));
    linalg::set_block(&mut phi, n_u, 0, &(ing.m_q() * &v.h));
    for copy in 0..copies {
        let base = n1 + n_z + copy * per_copy;
        linalg::set_sym_block(&mut big, n_x, base, &v.h);
        linalg::set_sym_block(&mut big, 2 * n_x, base, &v.l);
        linalg::set_sym_block(&mut big, n1, base, &perf);
        linalg::set_block(&mut big, base, base, &v.h);
        linalg::set_sym_block(&mut big, base + n_x, base, &phi);
        linalg::set_block(
            &mut big,
            base + n_x,
            base + n_x,
            &(DMatrix::identity(n_u + n_x, n_u + n_x) * v.gamma),
        );
    }
    LmiValues { initial, input, state, decrease: big }
}

fn linear_values(v: &Variables, eps: f64, with_constant: bool) -> Vec<f64> {
    let mut out = v.alpha.clone();
    out.push(v.lambda);
    out.push(v.gamma - if with_constant { eps } else { 0.0 });
    out
}

/// Least-squares `[Â B̂]` from the active samples (zero without data).
pub fn least_squares_fit(model: &DataDrivenModel) -> (DMatrix<f64>, DMatrix<f64>) {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let samples: Vec<_> = model.data().samples().collect();
    if samples.is_empty() {
        return (DMatrix::zeros(n_x, n_x), DMatrix::zeros(n_x, n_u));
    }
    let mut w = DMatrix::zeros(n_x + n_u, samples.len());
    let mut y = DMatrix::zeros(n_x, samples.len());
    for (k, s) in samples.iter().enumerate() {
        w.view_mut((0, k), (n_x, 1)).copy_from(&s.x);
        w.view_mut((n_x, k), (n_u, 1)).copy_from(&s.u);
        y.set_column(k, &s.x_next);
    }
    let pinv = w
        .clone()
        .pseudo_inverse(1e-12 * linalg::spectral_norm(&w))
        .unwrap_or_else(|_| DMatrix::zeros(samples.len(), n_x + n_u));
    let ab = y * pinv;
    (ab.columns(0, n_x).into_owned(), ab.columns(n_x, n_u).into_owned())
}

/// Unit vector `(w_x, w_u)` orthogonal to every active regressor `(xᵢ, uᵢ)`,
/// if the regressors do not span `R^{n_x+n_u}`.
fn regressor_null_vector(model: &DataDrivenModel) -> Option<DVector<f64>> {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let n = n_x + n_u;
    let mut gram = DMatrix::zeros(n, n);
    for s in model.data().samples() {
        let mut r = DVector::zeros(n);
        r.rows_mut(0, n_x).copy_from(&s.x);
        r.rows_mut(n_x, n_u).copy_from(&s.u);
        gram += &r * r.transpose();
    }
    let eig = nalgebra::SymmetricEigen::new(gram);
    let (imin, min) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let max = eig.eigenvalues.amax();
    if max == 0.0 || min <= 1e-12 * max {
        Some(eig.eigenvectors.column(imin).into_owned())
    } else {
        None
    }
}

impl SdpProblem {
    pub fn assemble(
        x_t: &DVector<f64>,
        model: &DataDrivenModel,
        ing: &MpcIngredients,
        opts: &AssemblyOptions,
        solver_options: &SolverOptions,
    ) -> Result<Self> {
        let n_x = model.n_x();
        let n_u = model.n_u();
        linalg::check_len("x_t", x_t, n_x)?;
        ensure_input!(x_t.iter().all(|v| v.is_finite()), "x_t must be finite");
        ensure_input!(
            ing.n_x() == n_x && ing.n_u() == n_u,
            "ingredient dimensions (n_x={}, n_u={}) do not match the model ({n_x}, {n_u})",
            ing.n_x(),
            ing.n_u()
        );
        ensure_input!(opts.strictness >= 0.0, "strictness must be nonnegative");
        ensure_input!(opts.closed_loop_copies >= 1, "at least one closed-loop block is required");
        let layout = VariableLayout { n_x, n_u, n_alpha: model.certificate().len() };
        let eps = opts.strictness * (1.0 + x_t.norm());
        let scale = 10.0 * x_t.norm_squared().max(30.0 * eps).max(f64::MIN_POSITIVE);
        let copies = opts.closed_loop_copies;
        let n1 = 2 * n_x + n_u;
        let dim = n1 + model.n_z() + copies * (2 * n_x + n_u);

        let (a_hat, b_hat) = least_squares_fit(model);
        let mut congruence = DMatrix::identity(dim, dim);
        linalg::set_block(&mut congruence, n_x, 0, &a_hat.transpose());
        linalg::set_block(&mut congruence, 2 * n_x, 0, &b_hat.transpose());

        // Each multiplier is free, so every (centered) data term is scaled to
        // unit magnitude; raw terms grow like 1/‖zᵢ‖².
        let cert = model.certificate();
        let t1 = congruence.view((0, 0), (n1, n1)).into_owned();
        let alpha_weights: Vec<f64> = (0..cert.len())
            .map(|i| {
                let m = (t1.transpose() * cert.term(i) * &t1).amax();
                if m > 0.0 { 1.0 / m } else { 1.0 }
            })
            .collect();

        let null_direction = regressor_null_vector(model).map(|w| {
            let mut e = DVector::zeros(dim);
            e.rows_mut(n_x, n_x + n_u).copy_from(&w);
            // Tᵀ-coordinates: T⁻¹ leaves vectors with a zero leading block unchanged.
            e
        });

        let mut problem = Self {
            layout,
            x_t: x_t.clone(),
            eps,
            scale,
            copies,
            alpha_weights,
            congruence,
            null_direction,
            request: SolverRequest {
                n_vars: layout.len(),
                objective: vec![0.0; layout.len()],
                psd: Vec::new(),
                nonneg: Vec::new(),
                options: solver_options.clone(),
            },
        };

        let zero = Variables::zeros(&layout);
        let (constant, lin_constant) = problem.solver_form(&zero, model, ing, true);
        let mut psd: Vec<PsdConstraint> = constant
            .into_iter()
            .map(|c| PsdConstraint { constant: c, coeffs: Vec::new() })
            .collect();
        let mut nonneg: Vec<LinearConstraint> = lin_constant
            .into_iter()
            .map(|c| LinearConstraint { constant: c, coeffs: Vec::new() })
            .collect();
        let mut unit = vec![0.0; layout.len()];
        for k in 0..layout.len() {
            unit[k] = 1.0;
            let v = Variables::from_vec(&layout, &unit)?;
            unit[k] = 0.0;
            let (mats, lin) = problem.solver_form(&v, model, ing, false);
            for (c, a) in psd.iter_mut().zip(mats) {
                if a.iter().any(|&e| e != 0.0) {
                    c.coeffs.push((k, a));
                }
            }
            for (c, a) in nonneg.iter_mut().zip(lin) {
                if a != 0.0 {
                    c.coeffs.push((k, a));
                }
            }
        }
        problem.request.objective[layout.gamma()] = 1.0;
        problem.request.psd = psd;
        problem.request.nonneg = nonneg;
        Ok(problem)
    }

    /// Constraint values as handed to the solver at scaled variables `v`.
    fn solver_form(
        &self,
        v: &Variables,
        model: &DataDrivenModel,
        ing: &MpcIngredients,
        with_constant: bool,
    ) -> (Vec<DMatrix<f64>>, Vec<f64>) {
        let native = v.scaled(self.scale);
        let [initial, input, state, decrease] =
            lmi_values(&native, &self.x_t, model, ing, &self.alpha_weights, self.copies, with_constant).into_vec();
        let mut d = DMatrix::identity(initial.nrows(), initial.nrows()) / self.scale.sqrt();
        d[(0, 0)] = 1.0;
        let initial = linalg::symmetrize(&(&d * initial * &d));
        let mut decrease =
            linalg::symmetrize(&(self.congruence.transpose() * decrease * &self.congruence)) / self.scale;
        if with_constant {
            for i in 0..decrease.nrows() {
                decrease[(i, i)] -= self.eps / self.scale;
            }
        }
        let lin = linear_values(&native, self.eps, with_constant).into_iter().map(|a| a / self.scale).collect();
        (vec![initial, input / self.scale, state / self.scale, decrease], lin)
    }

    pub fn layout(&self) -> &VariableLayout {
        &self.layout
    }

    pub fn x_t(&self) -> &DVector<f64> {
        &self.x_t
    }

    /// Absolute strictness margin used for the large LMI and for `γ`.
    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn closed_loop_copies(&self) -> usize {
        self.copies
    }

    pub fn request(&self) -> &SolverRequest {
        &self.request
    }

    /// The centering congruence `T` applied to the large LMI.
    pub fn congruence(&self) -> &DMatrix<f64> {
        &self.congruence
    }

    /// Factor converting the solver's `α` slots to multipliers of the raw
    /// data terms: `αᵢ = yᵢ·weightᵢ`.
    pub fn alpha_weights(&self) -> &[f64] {
        &self.alpha_weights
    }

    /// Solver variables are the native ones divided by this factor.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Solution in original units from a raw solver vector.
    pub fn extract(&self, y: &[f64]) -> Result<SdpSolution> {
        let v = Variables::from_vec(&self.layout, y)?.scaled(self.scale);
        let alpha = v.alpha.iter().zip(&self.alpha_weights).map(|(a, w)| a * w).collect();
        SdpSolution::from_parts(v.gamma, v.h, v.l, alpha, v.lambda)
    }

    /// Side length of the large LMI.
    pub fn decrease_lmi_dim(&self) -> usize {
        self.request.psd[3].dim()
    }

    /// Direct evaluation at the raw solver vector `y` of the four LMI
    /// matrices in native coordinates (margin not subtracted) and the scalar
    /// rows `α`, `λ`, `γ − eps`.
    pub fn evaluate_native(
        &self,
        y: &[f64],
        model: &DataDrivenModel,
        ing: &MpcIngredients,
    ) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
        let v = Variables::from_vec(&self.layout, y)?.scaled(self.scale);
        let mats = lmi_values(&v, &self.x_t, model, ing, &self.alpha_weights, self.copies, true).into_vec();
        Ok((mats.to_vec(), linear_values(&v, self.eps, true)))
    }

    /// Direct evaluation of exactly what the solver constrains, bypassing the
    /// stored coefficients (used to audit the affine map).
    pub fn evaluate_solver_form(
        &self,
        y: &[f64],
        model: &DataDrivenModel,
        ing: &MpcIngredients,
    ) -> Result<(Vec<DMatrix<f64>>, Vec<f64>)> {
        let v = Variables::from_vec(&self.layout, y)?;
        Ok(self.solver_form(&v, model, ing, true))
    }

    /// Checks the rank-one infeasibility certificate available when the
    /// regressors `(xᵢ, uᵢ)` miss a direction `w`: along `e = (0, w, 0, …)` the
    /// large LMI has no variable dependence, so `eᵀ(LMI − eps·I)e = −eps < 0`.
    pub fn infeasibility_certificate(&self) -> Option<DVector<f64>> {
        let e = self.null_direction.as_ref()?;
        let block = &self.request.psd[3];
        let value = e.dot(&(&block.constant * e));
        let flat = block.coeffs.iter().all(|(_, a)| {
            e.dot(&(a * e)).abs() <= 1e-12 * (1.0 + a.amax())
        });
        (flat && value < -0.5 * self.eps / self.scale).then(|| e.clone())
    }

    /// Largest nonzero coefficient magnitude divided by the smallest.
    pub fn coefficient_spread(&self) -> f64 {
        self.request.coefficient_spread()
    }
}

/// Optimal decision variables with the derived gain and Lyapunov matrix.
#[derive(Clone, Debug)]
pub struct SdpSolution {
    pub gamma: f64,
    pub h: DMatrix<f64>,
    pub l: DMatrix<f64>,
    pub alpha: Vec<f64>,
    pub lambda: f64,
    /// `F = L H⁻¹`.
    pub f: DMatrix<f64>,
    /// `P = γ H⁻¹`.
    pub p: DMatrix<f64>,
    /// `‖F H − L‖`.
    pub gain_residual: f64,
}

impl SdpSolution {
    pub fn from_parts(
        gamma: f64,
        h: DMatrix<f64>,
        l: DMatrix<f64>,
        alpha: Vec<f64>,
        lambda: f64,
    ) -> Result<Self> {
        let n_x = h.nrows();
        linalg::check_shape("H", &h, n_x, n_x)?;
        ensure_input!(l.ncols() == n_x, "L must have {n_x} columns");
        let h = linalg::symmetrize(&h);
        let cond = linalg::condition_number_sym(&h);
        if !(cond.is_finite() && cond <= MAX_H_CONDITION) || !linalg::is_positive_definite(&h) {
            return Err(Error::Numerical(format!(
                "H is not safely positive definite (condition {cond:e}, eigenvalues {:?})",
                linalg::sym_eigenvalues(&h).as_slice()
            )));
        }
        let chol = h
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("Cholesky factorization of H failed".into()))?;
        // F H = L  ⇔  H F ᵀ = Lᵀ.
        let f = chol.solve(&l.transpose()).transpose();
        let p = linalg::symmetrize(&(chol.inverse() * gamma));
        let gain_residual = (&f * &h - &l).norm();
        if gain_residual > 1e-6 * (1.0 + l.norm()) {
            return Err(Error::Numerical(format!("gain residual {gain_residual:e} too large")));
        }
        Ok(Self { gamma, h, l, alpha, lambda, f, p, gain_residual })
    }

    /// `xᵀ P x`.
    pub fn value(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.p * x))
    }

    pub fn input(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.f * x
    }

    /// `Φ = [M_R L; M_Q H]`.
    pub fn phi(&self, ing: &MpcIngredients) -> DMatrix<f64> {
        let n_x = self.h.nrows();
        let n_u = self.l.nrows();
        let mut phi = DMatrix::zeros(n_u + n_x, n_x);
        linalg::set_block(&mut phi, 0, 0, &(ing.m_r() * &self.l));
        linalg::set_block(&mut phi, n_u, 0, &(ing.m_q() * &self.h));
        phi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    NumericalFailure,
}

impl std::fmt::Display for SdpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SdpStatus::Optimal => "optimal",
            SdpStatus::Infeasible => "infeasible",
            SdpStatus::NumericalFailure => "numerical_failure",
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub status: SdpStatus,
    pub solution: Option<SdpSolution>,
    pub solver: SolverResult,
    /// Why a non-optimal status was assigned, if it was.
    pub diagnostics: String,
}

/// Solves `problem` and extracts the solution. Unbounded or stalled solves
/// are reported as numerical failures; the program is bounded below by `eps`.
pub fn solve_problem(problem: &SdpProblem) -> Result<StepOutcome> {
    if problem.infeasibility_certificate().is_some() {
        return Ok(StepOutcome {
            status: SdpStatus::Infeasible,
            solution: None,
            solver: SolverResult {
                status: SolveStatus::Infeasible,
                x: Vec::new(),
                objective: f64::NAN,
                solve_time: 0.0,
                iterations: 0,
                max_violation: f64::NAN,
                backend_status: "rank-one certificate".into(),
                retried: false,
                polished: false,
            },
            diagnostics: "regressors (x_i, u_i) do not span the state-input space; \
                          the strict decrease LMI is infeasible along the missing direction"
                .into(),
        });
    }
    let res = solver::solve(problem.request())?;
    let (status, solution, diagnostics) = match res.status {
        SolveStatus::Optimal => match problem.extract(&res.x) {
            Ok(sol) => (SdpStatus::Optimal, Some(sol), String::new()),
            Err(e) => (SdpStatus::NumericalFailure, None, e.to_string()),
        },
        SolveStatus::Infeasible => (SdpStatus::Infeasible, None, String::new()),
        other => (
            SdpStatus::NumericalFailure,
            None,
            format!("solver ended with {other} (backend {})", res.backend_status),
        ),
    };
    Ok(StepOutcome { status, solution, solver: res, diagnostics })
}

/// Assemble and solve in one call.
pub fn solve_step(
    x_t: &DVector<f64>,
    model: &DataDrivenModel,
    ing: &MpcIngredients,
    opts: &AssemblyOptions,
    solver_options: &SolverOptions,
) -> Result<StepOutcome> {
    solve_problem(&SdpProblem::assemble(x_t, model, ing, opts, solver_options)?)
}
