//! LPV plant description `x⁺ = A x + B u + Δ (C x + D u)` and the quadratic
//! matrix inequality that bounds the unknown scheduling matrix `Δ`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::linalg;

/// Condition-number ceiling for the assembled QMI matrix `G`.
pub const MAX_BOUND_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dimensions {
    pub n_x: usize,
    pub n_u: usize,
    pub n_z: usize,
}

impl Dimensions {
    pub fn new(n_x: usize, n_u: usize, n_z: usize) -> Result<Self> {
        ensure_input!(
            n_x > 0 && n_u > 0 && n_z > 0,
            "dimensions must be positive, got n_x={n_x} n_u={n_u} n_z={n_z}"
        );
        Ok(Self { n_x, n_u, n_z })
    }
}

/// The scheduling set `Π = {Δ : [I; Δᵀ]ᵀ G [I; Δᵀ] ⪰ 0}`.
///
/// `G` is stored block-wise. Construction enforces `G22 ≺ 0`, a positive
/// definite Schur complement `G11 − G12 G22⁻¹ G12ᵀ`, and invertibility of the
/// assembled `G`. With these, `Π` is the matrix ellipsoid
/// `(Δᵀ − center)ᵀ (−G22) (Δᵀ − center) ⪯ schur`.
#[derive(Clone, Debug)]
pub struct SchedulingBound {
    g11: DMatrix<f64>,
    g12: DMatrix<f64>,
    g22: DMatrix<f64>,
    g22_inv: DMatrix<f64>,
    schur: DMatrix<f64>,
    center: DMatrix<f64>,
    schur_sqrt: DMatrix<f64>,
    neg_g22_inv_sqrt: DMatrix<f64>,
}

impl SchedulingBound {
    pub fn new(g11: DMatrix<f64>, g12: DMatrix<f64>, g22: DMatrix<f64>) -> Result<Self> {
        let n_x = g11.nrows();
        let n_z = g22.nrows();
        ensure_input!(n_x > 0 && n_z > 0, "empty QMI blocks");
        linalg::check_shape("G11", &g11, n_x, n_x)?;
        linalg::check_shape("G12", &g12, n_x, n_z)?;
        linalg::check_shape("G22", &g22, n_z, n_z)?;
        ensure_input!(
            (&g11 - g11.transpose()).amax() <= 1e-12 * (1.0 + g11.amax()),
            "G11 is not symmetric"
        );
        ensure_input!(
            (&g22 - g22.transpose()).amax() <= 1e-12 * (1.0 + g22.amax()),
            "G22 is not symmetric"
        );
        let g11 = linalg::symmetrize(&g11);
        let g22 = linalg::symmetrize(&g22);
        ensure_input!(
            linalg::is_negative_definite(&g22),
            "G22 must be negative definite (eigenvalues {:?})",
            linalg::sym_eigenvalues(&g22).as_slice()
        );
        let g22_inv = linalg::inverse(&g22)?;
        let g22_inv = linalg::symmetrize(&g22_inv);
        let schur = linalg::symmetrize(&(&g11 - &g12 * &g22_inv * g12.transpose()));
        ensure_input!(
            linalg::is_positive_definite(&schur),
            "Schur complement G11 - G12 G22^-1 G12' must be positive definite (eigenvalues {:?})",
            linalg::sym_eigenvalues(&schur).as_slice()
        );
        let mut full = DMatrix::zeros(n_x + n_z, n_x + n_z);
        linalg::set_block(&mut full, 0, 0, &g11);
        linalg::set_sym_block(&mut full, 0, n_x, &g12);
        linalg::set_block(&mut full, n_x, n_x, &g22);
        let cond = linalg::condition_number_sym(&full);
        ensure_input!(
            cond < MAX_BOUND_CONDITION,
            "QMI matrix G is numerically singular (condition number {cond:e})"
        );
        let center = -(&g22_inv * g12.transpose());
        let schur_sqrt = linalg::sqrt_psd(&schur);
        let neg_g22_inv_sqrt = linalg::inv_sqrt_pd(&(-&g22))?;
        Ok(Self {
            g11,
            g12,
            g22,
            g22_inv,
            schur,
            center,
            schur_sqrt,
            neg_g22_inv_sqrt,
        })
    }

    /// Bound on the largest singular value: `‖Δ‖₂ ≤ σ`.
    pub fn singular_value(sigma: f64, n_x: usize, n_z: usize) -> Result<Self> {
        ensure_input!(sigma > 0.0 && sigma.is_finite(), "sigma must be positive");
        Self::new(
            DMatrix::identity(n_x, n_x),
            DMatrix::zeros(n_x, n_z),
            DMatrix::identity(n_z, n_z) * (-1.0 / (sigma * sigma)),
        )
    }

    /// QMI for `Δ = a·I` with a scalar `a ∈ [low, high]`, multiplied by `scale`.
    ///
    /// Produces `G11 = −scale·low·high·I`, `G12 = scale·(low+high)/2·I`,
    /// `G22 = −scale·I`, so that for `Δ = a·I` the QMI evaluates to
    /// `scale·(a − low)(high − a)·I`. The set `Π` is then the spectral-norm ball
    /// of radius `(high − low)/2` around `(low + high)/2 · I`.
    /// Requires `n_x ≤ n_z` so that the Schur complement is definite.
    pub fn interval(low: f64, high: f64, scale: f64, n_x: usize, n_z: usize) -> Result<Self> {
        ensure_input!(low < high, "interval requires low < high, got [{low}, {high}]");
        ensure_input!(scale > 0.0, "scale must be positive");
        ensure_input!(
            n_x <= n_z,
            "interval bound needs n_x <= n_z (got n_x={n_x}, n_z={n_z})"
        );
        let eye = linalg::rect_identity(n_x, n_z);
        Self::new(
            DMatrix::identity(n_x, n_x) * (-scale * low * high),
            eye * (scale * (low + high) / 2.0),
            DMatrix::identity(n_z, n_z) * (-scale),
        )
    }

    pub fn n_x(&self) -> usize {
        self.g11.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.g22.nrows()
    }

    pub fn g11(&self) -> &DMatrix<f64> {
        &self.g11
    }

    pub fn g12(&self) -> &DMatrix<f64> {
        &self.g12
    }

    pub fn g22(&self) -> &DMatrix<f64> {
        &self.g22
    }

    pub fn g22_inv(&self) -> &DMatrix<f64> {
        &self.g22_inv
    }

    /// `G11 − G12 G22⁻¹ G12ᵀ`.
    pub fn schur(&self) -> &DMatrix<f64> {
        &self.schur
    }

    /// `−G22⁻¹ G12ᵀ` (an `n_z × n_x` matrix; the center of `Π` is its transpose).
    pub fn center(&self) -> &DMatrix<f64> {
        &self.center
    }

    /// The assembled `(n_x + n_z)` square matrix `G`.
    pub fn g(&self) -> DMatrix<f64> {
        let (n_x, n_z) = (self.n_x(), self.n_z());
        let mut full = DMatrix::zeros(n_x + n_z, n_x + n_z);
        linalg::set_block(&mut full, 0, 0, &self.g11);
        linalg::set_sym_block(&mut full, 0, n_x, &self.g12);
        linalg::set_block(&mut full, n_x, n_x, &self.g22);
        full
    }

    /// `G11 + G12 Δᵀ + Δ G12ᵀ + Δ G22 Δᵀ`.
    pub fn qmi_value(&self, delta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        linalg::check_shape("Δ", delta, self.n_x(), self.n_z())?;
        let cross = &self.g12 * delta.transpose();
        Ok(linalg::symmetrize(
            &(&self.g11 + &cross + cross.transpose() + delta * &self.g22 * delta.transpose()),
        ))
    }

    /// Smallest eigenvalue of the QMI at `delta`; nonnegative iff `delta ∈ Π`.
    pub fn margin(&self, delta: &DMatrix<f64>) -> Result<f64> {
        Ok(linalg::min_eigenvalue(&self.qmi_value(delta)?))
    }

    pub fn contains(&self, delta: &DMatrix<f64>, tol: f64) -> Result<bool> {
        Ok(self.margin(delta)? >= -tol)
    }

    /// Maps a contraction `W` (`n_z × n_x`, `‖W‖₂ ≤ 1`) onto `Π`:
    /// `Δᵀ = center + (−G22)^{−1/2} W schur^{1/2}`.
    pub fn delta_from_contraction(&self, w: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        linalg::check_shape("W", w, self.n_z(), self.n_x())?;
        let delta_t = &self.center + &self.neg_g22_inv_sqrt * w * &self.schur_sqrt;
        Ok(delta_t.transpose())
    }

    /// Draws `Δ ∈ Π`. See [`SampleMode`].
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, mode: SampleMode) -> DMatrix<f64> {
        let w = random_contraction(self.n_z(), self.n_x(), rng, mode);
        self.delta_from_contraction(&w)
            .expect("contraction has the bound's shape")
    }
}

/// `in_pi` check with an explicit tolerance.
pub fn in_pi(delta: &DMatrix<f64>, bound: &SchedulingBound, tol: f64) -> Result<bool> {
    ensure_input!(tol >= 0.0, "tolerance must be nonnegative");
    bound.contains(delta, tol)
}

/// How samples of `Π` are spread.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    /// Gaussian direction scaled to a uniformly drawn spectral norm in `[0, 1]`.
    Interior,
    /// Gaussian direction scaled to spectral norm exactly 1.
    Boundary,
}

/// Random `rows × cols` matrix with spectral norm drawn per `mode`.
pub fn random_contraction<R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
    mode: SampleMode,
) -> DMatrix<f64> {
    let g = DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let norm = linalg::spectral_norm(&g);
    let radius = match mode {
        SampleMode::Interior => rng.gen_range(0.0..=1.0),
        SampleMode::Boundary => 1.0,
    };
    if norm == 0.0 {
        return DMatrix::zeros(rows, cols);
    }
    g * (radius / norm)
}

/// The true plant. Only simulation and data generation see these matrices.
#[derive(Clone, Debug)]
pub struct LpvPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub bound: SchedulingBound,
}

impl LpvPlant {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        d: DMatrix<f64>,
        bound: SchedulingBound,
    ) -> Result<Self> {
        let n_x = a.nrows();
        let n_u = b.ncols();
        let n_z = c.nrows();
        Dimensions::new(n_x, n_u, n_z)?;
        linalg::check_shape("A", &a, n_x, n_x)?;
        linalg::check_shape("B", &b, n_x, n_u)?;
        linalg::check_shape("C", &c, n_z, n_x)?;
        linalg::check_shape("D", &d, n_z, n_u)?;
        ensure_input!(
            bound.n_x() == n_x && bound.n_z() == n_z,
            "bound is {}x{} but plant needs Δ of shape {n_x}x{n_z}",
            bound.n_x(),
            bound.n_z()
        );
        Ok(Self { a, b, c, d, bound })
    }

    /// Discrete-time angular positioning system with friction coefficient
    /// `a ∈ [0.05, 0.05 + 0.05c]`.
    pub fn angular_positioning(c: f64) -> Result<Self> {
        ensure_input!(c > 0.0, "c must be positive, got {c}");
        let (low, high) = angular_positioning_interval(c);
        Self::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]),
            DMatrix::from_row_slice(2, 1, &[0.0, 0.0787]),
            DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, -0.1]),
            DMatrix::zeros(2, 1),
            SchedulingBound::interval(low, high, 100.0, 2, 2)?,
        )
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions {
            n_x: self.a.nrows(),
            n_u: self.b.ncols(),
            n_z: self.c.nrows(),
        }
    }

    /// `z = C x + D u`.
    pub fn performance(&self, x: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        let dims = self.dims();
        linalg::check_len("x", x, dims.n_x)?;
        linalg::check_len("u", u, dims.n_u)?;
        Ok(&self.c * x + &self.d * u)
    }

    /// `A x + B u + Δ (C x + D u)`.
    pub fn step(
        &self,
        x: &DVector<f64>,
        u: &DVector<f64>,
        delta: &DMatrix<f64>,
    ) -> Result<DVector<f64>> {
        let dims = self.dims();
        linalg::check_shape("Δ", delta, dims.n_x, dims.n_z)?;
        let z = self.performance(x, u)?;
        Ok(&self.a * x + &self.b * u + delta * z)
    }
}

pub fn step(
    plant: &LpvPlant,
    x: &DVector<f64>,
    u: &DVector<f64>,
    delta: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    plant.step(x, u, delta)
}

pub fn angular_positioning_interval(c: f64) -> (f64, f64) {
    (0.05, 0.05 + 0.05 * c)
}

/// How the scheduling matrix evolves over time.
///
/// Scalar laws produce `Δ = a·I` (rectangular identity); the QMI laws sample
/// the full set `Π`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SchedulingLaw {
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Sinusoid { low: f64, high: f64, period: f64 },
    QmiInterior,
    QmiBoundary,
}

/// Stateful generator of scheduling matrices for a given bound.
pub struct Scheduler<'a, R: Rng> {
    law: SchedulingLaw,
    bound: &'a SchedulingBound,
    rng: R,
    tol: f64,
}

impl<'a, R: Rng> Scheduler<'a, R> {
    pub fn new(law: SchedulingLaw, bound: &'a SchedulingBound, rng: R) -> Result<Self> {
        match &law {
            SchedulingLaw::Uniform { low, high } | SchedulingLaw::Sinusoid { low, high, .. } => {
                ensure_input!(low <= high, "scheduling interval [{low}, {high}] is empty");
            }
            _ => {}
        }
        if let SchedulingLaw::Sinusoid { period, .. } = &law {
            ensure_input!(*period > 0.0, "sinusoid period must be positive");
        }
        let tol = 1e-10 * (1.0 + linalg::max_abs(&bound.g()));
        Ok(Self { law, bound, rng, tol })
    }

    /// Scheduling matrix at time `t`; errors if it falls outside `Π`.
    pub fn next(&mut self, t: usize) -> Result<DMatrix<f64>> {
        let (n_x, n_z) = (self.bound.n_x(), self.bound.n_z());
        let scalar = |a: f64| linalg::rect_identity(n_x, n_z) * a;
        let delta = match &self.law {
            SchedulingLaw::Constant { value } => scalar(*value),
            SchedulingLaw::Uniform { low, high } => {
                let a = if low == high { *low } else { self.rng.gen_range(*low..=*high) };
                scalar(a)
            }
            SchedulingLaw::Sinusoid { low, high, period } => {
                let phase = 2.0 * std::f64::consts::PI * t as f64 / period;
                scalar(0.5 * (low + high) + 0.5 * (high - low) * phase.sin())
            }
            SchedulingLaw::QmiInterior => self.bound.sample(&mut self.rng, SampleMode::Interior),
            SchedulingLaw::QmiBoundary => self.bound.sample(&mut self.rng, SampleMode::Boundary),
        };
        let margin = self.bound.margin(&delta)?;
        if margin < -self.tol {
            return Err(Error::Input(format!(
                "scheduling law {:?} produced Δ outside Π at t={t} (margin {margin:e})",
                self.law
            )));
        }
        Ok(delta)
    }
}
