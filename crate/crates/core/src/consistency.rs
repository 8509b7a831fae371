//! Characterization of all `(A, B)` that explain the recorded data for some
//! admissible scheduling sequence.
//!
//! For a QMI set in a latent variable `Δ̃` and a full-row-rank `E`, the image
//! `{E Δ̃}` is again a QMI set with matrix
//!
//! ```text
//! Y = Rᵀ diag(G̃11 − G̃12 G̃22⁻¹ G̃12ᵀ, (E G̃22⁻¹ Eᵀ)⁻¹) R,   R = [I 0; E G̃22⁻¹ G̃12ᵀ I].
//! ```
//!
//! Applied with `Δ̃ = Δᵢᵀ` and `E = zᵢᵀ` this yields the per-sample matrix
//! `Nᵢ`, and substituting `Δᵢ zᵢ = x_{i+1} − A xᵢ − B uᵢ` turns it into a QMI
//! in `(A, B)` with the outer factor `[I x_{i+1}; 0 −xᵢ; 0 −uᵢ]`.

use nalgebra::{DMatrix, DVector};

use crate::data::{DataSet, Sample, Z_NORM_THRESHOLD};
use crate::error::{ensure_input, Error, Result};
use crate::linalg;
use crate::lpv_model::SchedulingBound;

/// Largest admissible ratio of extreme singular values of `E`.
pub const MAX_PROJECTION_CONDITION: f64 = 1e10;

/// The QMI matrix `Y` of a projected set, block-wise.
#[derive(Clone, Debug)]
pub struct ProjectedQmi {
    pub y11: DMatrix<f64>,
    pub y12: DMatrix<f64>,
    pub y22: DMatrix<f64>,
}

impl ProjectedQmi {
    pub fn y(&self) -> DMatrix<f64> {
        let (m, n) = (self.y11.nrows(), self.y22.nrows());
        let mut y = DMatrix::zeros(m + n, m + n);
        linalg::set_block(&mut y, 0, 0, &self.y11);
        linalg::set_sym_block(&mut y, 0, m, &self.y12);
        linalg::set_block(&mut y, m, m, &self.y22);
        y
    }

    /// The projected set as a bound object (for sampling and membership).
    pub fn to_bound(&self) -> Result<SchedulingBound> {
        SchedulingBound::new(self.y11.clone(), self.y12.clone(), self.y22.clone())
    }
}

/// Projects the QMI set `{Δ̃ : [I; Δ̃]ᵀ G̃ [I; Δ̃] ⪰ 0}` through `E`.
///
/// `gtilde` holds `G̃` in the bound's block layout, i.e. the latent variable is
/// `Δ̃ = Δᵀ` for the bound's `Δ`. `E` must have `gtilde.n_z()` columns.
pub fn project_qmi(e: &DMatrix<f64>, gtilde: &SchedulingBound) -> Result<ProjectedQmi> {
    ensure_input!(
        e.ncols() == gtilde.n_z(),
        "E has {} columns, expected {}",
        e.ncols(),
        gtilde.n_z()
    );
    ensure_input!(e.nrows() > 0, "E must have at least one row");
    ensure_input!(
        e.nrows() <= e.ncols(),
        "E with {} rows and {} columns cannot have full row rank",
        e.nrows(),
        e.ncols()
    );
    let sv = linalg::singular_values(e);
    let hi = sv.iter().copied().fold(0.0, f64::max);
    let lo = sv.iter().copied().fold(f64::INFINITY, f64::min);
    ensure_input!(
        hi > 0.0 && lo > 0.0 && hi / lo < MAX_PROJECTION_CONDITION,
        "E is rank deficient (singular values {:?})",
        sv.as_slice()
    );
    let g22_inv = gtilde.g22_inv();
    let k = linalg::inverse(&(e * g22_inv * e.transpose()))?;
    let k = linalg::symmetrize(&k);
    let j = e * g22_inv * gtilde.g12().transpose();
    let y11 = linalg::symmetrize(&(gtilde.schur() + j.transpose() * &k * &j));
    let y12 = j.transpose() * &k;
    Ok(ProjectedQmi { y11, y12, y22: k })
}

/// Orthonormal basis (as rows) of the kernel of a full-row-rank `E`.
pub fn kernel_rows(e: &DMatrix<f64>) -> DMatrix<f64> {
    let n = e.ncols();
    let r = e.nrows();
    if r >= n {
        return DMatrix::zeros(0, n);
    }
    // Eigenvectors of EᵀE with (near) zero eigenvalue span ker E.
    let eig = nalgebra::SymmetricEigen::new(e.transpose() * e);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let mut basis = DMatrix::zeros(n - r, n);
    for (row, &idx) in order.iter().take(n - r).enumerate() {
        basis.set_row(row, &eig.eigenvectors.column(idx).transpose());
    }
    basis
}

/// Lifts a point `Δ̂` of the projected set back to a latent `Δ̃` with
/// `E Δ̃ = Δ̂` that satisfies the original QMI:
/// `Δ̃ = G̃22⁻¹Eᵀ(E G̃22⁻¹ Eᵀ)⁻¹ Δ̂ + E⊥ᵀ(E⊥ G̃22 E⊥ᵀ)⁻¹ E⊥ G̃22 Δ̃₀`.
pub fn lift_projected(
    e: &DMatrix<f64>,
    gtilde: &SchedulingBound,
    delta_hat: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    linalg::check_shape("Δ̂", delta_hat, e.nrows(), gtilde.n_x())?;
    let g22 = gtilde.g22();
    let g22_inv = gtilde.g22_inv();
    let k = linalg::inverse(&(e * g22_inv * e.transpose()))?;
    let mut lifted = g22_inv * e.transpose() * k * delta_hat;
    let perp = kernel_rows(e);
    if perp.nrows() > 0 {
        let inner = linalg::inverse(&(&perp * g22 * perp.transpose()))?;
        // Δ̃₀ = −G̃22⁻¹ G̃12ᵀ is the bound's center.
        lifted += perp.transpose() * inner * &perp * g22 * gtilde.center();
    }
    Ok(lifted)
}

/// `[I x_{i+1}; 0 −xᵢ; 0 −uᵢ]`, of size `(2n_x + n_u) × (n_x + 1)`.
pub fn outer_factor(sample: &Sample) -> DMatrix<f64> {
    let n_x = sample.x.len();
    let n_u = sample.u.len();
    let mut o = DMatrix::zeros(2 * n_x + n_u, n_x + 1);
    linalg::set_block(&mut o, 0, 0, &DMatrix::identity(n_x, n_x));
    o.view_mut((0, n_x), (n_x, 1)).copy_from(&sample.x_next);
    o.view_mut((n_x, n_x), (n_x, 1)).copy_from(&(-&sample.x));
    o.view_mut((2 * n_x, n_x), (n_u, 1)).copy_from(&(-&sample.u));
    o
}

/// Per-sample QMI matrix `Nᵢ` from its closed form.
pub fn build_ni(z: &DVector<f64>, bound: &SchedulingBound) -> Result<DMatrix<f64>> {
    linalg::check_len("z", z, bound.n_z())?;
    let norm = z.norm();
    if norm <= Z_NORM_THRESHOLD {
        return Err(Error::Input(format!(
            "performance output has norm {norm:e}; every data sample needs z != 0"
        )));
    }
    let n_x = bound.n_x();
    let g22_inv = bound.g22_inv();
    let quad = (z.transpose() * g22_inv * z)[0];
    let s = 1.0 / quad;
    let r = z.transpose() * g22_inv * bound.g12().transpose();
    let mut n = DMatrix::zeros(n_x + 1, n_x + 1);
    linalg::set_block(&mut n, 0, 0, &linalg::symmetrize(&(bound.schur() + r.transpose() * &r * s)));
    linalg::set_sym_block(&mut n, 0, n_x, &DMatrix::from_column_slice(n_x, 1, (r.transpose() * s).as_slice()));
    n[(n_x, n_x)] = s;
    Ok(n)
}

/// Per-sample data needed by the consistency set, built once per dataset.
#[derive(Clone, Debug)]
pub struct ConsistencyCertificate {
    n_x: usize,
    n_u: usize,
    indices: Vec<usize>,
    outers: Vec<DMatrix<f64>>,
    ns: Vec<DMatrix<f64>>,
    terms: Vec<DMatrix<f64>>,
}

impl ConsistencyCertificate {
    pub fn new(ds: &DataSet, bound: &SchedulingBound) -> Result<Self> {
        ensure_input!(
            ds.n_x() == bound.n_x() && ds.n_z() == bound.n_z(),
            "dataset dimensions (n_x={}, n_z={}) do not match the bound ({}, {})",
            ds.n_x(),
            ds.n_z(),
            bound.n_x(),
            bound.n_z()
        );
        let mut indices = Vec::new();
        let mut outers = Vec::new();
        let mut ns = Vec::new();
        let mut terms = Vec::new();
        for s in ds.samples() {
            let n = build_ni(&s.z, bound)?;
            let o = outer_factor(&s);
            terms.push(linalg::symmetrize(&(&o * &n * o.transpose())));
            indices.push(s.index);
            outers.push(o);
            ns.push(n);
        }
        Ok(Self {
            n_x: ds.n_x(),
            n_u: ds.n_u(),
            indices,
            outers,
            ns,
            terms,
        })
    }

    /// Number of samples (length of the multiplier vector `α`).
    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Side length of `M(α)`: `2 n_x + n_u`.
    pub fn dim(&self) -> usize {
        2 * self.n_x + self.n_u
    }

    /// Dataset index of each term.
    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn outer(&self, k: usize) -> &DMatrix<f64> {
        &self.outers[k]
    }

    pub fn n_matrix(&self, k: usize) -> &DMatrix<f64> {
        &self.ns[k]
    }

    /// `outerₖ Nₖ outerₖᵀ`.
    pub fn term(&self, k: usize) -> &DMatrix<f64> {
        &self.terms[k]
    }

    pub fn build_m(&self, alpha: &[f64]) -> Result<DMatrix<f64>> {
        ensure_input!(
            alpha.len() == self.len(),
            "α has length {}, expected {}",
            alpha.len(),
            self.len()
        );
        ensure_input!(
            alpha.iter().all(|&a| a >= 0.0),
            "α must be elementwise nonnegative"
        );
        let mut m = DMatrix::zeros(self.dim(), self.dim());
        for (a, term) in alpha.iter().zip(&self.terms) {
            m += term * *a;
        }
        Ok(m)
    }

    /// Smallest eigenvalue of `[I; Aᵀ; Bᵀ]ᵀ termₖ [I; Aᵀ; Bᵀ]` for every sample.
    pub fn margins(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Vec<f64>> {
        let w = stacked_system(a, b, self.n_x, self.n_u)?;
        Ok(self
            .terms
            .iter()
            .map(|t| linalg::min_eigenvalue(&(w.transpose() * t * &w)))
            .collect())
    }

    /// Per-sample membership with absolute tolerance scaled by each term:
    /// sample `k` passes if its margin is at least `−tol·(1 + ‖termₖ‖)`.
    pub fn contains(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> Result<bool> {
        ensure_input!(tol >= 0.0, "tolerance must be nonnegative");
        let margins = self.margins(a, b)?;
        Ok(margins
            .iter()
            .zip(&self.terms)
            .all(|(m, t)| *m >= -tol * (1.0 + t.norm())))
    }

    /// Value of the aggregate QMI `[I; Aᵀ; Bᵀ]ᵀ M(α) [I; Aᵀ; Bᵀ]`.
    pub fn aggregate_form(&self, a: &DMatrix<f64>, b: &DMatrix<f64>, alpha: &[f64]) -> Result<DMatrix<f64>> {
        let w = stacked_system(a, b, self.n_x, self.n_u)?;
        Ok(linalg::symmetrize(&(w.transpose() * self.build_m(alpha)? * &w)))
    }
}

/// `[I; Aᵀ; Bᵀ]`, of size `(2 n_x + n_u) × n_x`.
pub fn stacked_system(a: &DMatrix<f64>, b: &DMatrix<f64>, n_x: usize, n_u: usize) -> Result<DMatrix<f64>> {
    linalg::check_shape("A", a, n_x, n_x)?;
    linalg::check_shape("B", b, n_x, n_u)?;
    let mut w = DMatrix::zeros(2 * n_x + n_u, n_x);
    linalg::set_block(&mut w, 0, 0, &DMatrix::identity(n_x, n_x));
    linalg::set_block(&mut w, n_x, 0, &a.transpose());
    linalg::set_block(&mut w, 2 * n_x, 0, &b.transpose());
    Ok(w)
}

/// Default relative tolerance for membership tests.
pub const SIGMA_RTOL: f64 = 1e-8;

pub fn build_m(ds: &DataSet, bound: &SchedulingBound, alpha: &[f64]) -> Result<DMatrix<f64>> {
    ConsistencyCertificate::new(ds, bound)?.build_m(alpha)
}

/// `(A, B) ∈ Σ`, tested sample by sample.
pub fn in_sigma(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    ds: &DataSet,
    bound: &SchedulingBound,
    tol: f64,
) -> Result<bool> {
    ConsistencyCertificate::new(ds, bound)?.contains(a, b, tol)
}
