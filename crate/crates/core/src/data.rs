//! Offline input-state data `(U, X)` and the derived performance outputs `Z`.
//!
//! Samples whose performance output is (numerically) zero carry no
//! information about the unknown matrices and are excluded from the
//! consistency set. The recorded matrices are kept intact; only the list of
//! active sample indices shrinks.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, Error, Result};
use crate::hexfloat;
use crate::linalg;
use crate::lpv_model::{LpvPlant, Scheduler, SchedulingLaw};

/// Samples with `‖z_i‖ ≤ Z_NORM_THRESHOLD` are excluded.
pub const Z_NORM_THRESHOLD: f64 = 1e-8;

const FORMAT_TAG: &str = "lpvmpc-dataset";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DataSet {
    u: DMatrix<f64>,
    x: DMatrix<f64>,
    z: DMatrix<f64>,
    active: Vec<usize>,
}

/// One transition `(x_i, u_i) → x_{i+1}` with its performance output `z_i`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub index: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub x_next: DVector<f64>,
    pub z: DVector<f64>,
}

impl DataSet {
    /// Builds a dataset from recorded `U` (`n_u × T`) and `X` (`n_x × (T+1)`),
    /// computing `Z = C X₋ + D U`.
    pub fn new(
        u: DMatrix<f64>,
        x: DMatrix<f64>,
        c: &DMatrix<f64>,
        d: &DMatrix<f64>,
    ) -> Result<Self> {
        let t = u.ncols();
        ensure_input!(x.ncols() == t + 1, "X needs T+1 = {} columns, has {}", t + 1, x.ncols());
        linalg::check_shape("C", c, c.nrows(), x.nrows())?;
        linalg::check_shape("D", d, c.nrows(), u.nrows())?;
        let z = compute_z(&u, &x, c, d);
        Self::from_recorded(u, x, z)
    }

    /// Builds a dataset from already-computed `Z` without re-deriving it.
    pub fn from_recorded(u: DMatrix<f64>, x: DMatrix<f64>, z: DMatrix<f64>) -> Result<Self> {
        let t = u.ncols();
        ensure_input!(x.ncols() == t + 1, "X needs T+1 = {} columns, has {}", t + 1, x.ncols());
        ensure_input!(z.ncols() == t, "Z needs T = {t} columns, has {}", z.ncols());
        ensure_input!(
            x.nrows() > 0 && u.nrows() > 0 && z.nrows() > 0,
            "dataset dimensions must be positive"
        );
        let mut active = Vec::with_capacity(t);
        for i in 0..t {
            let norm = z.column(i).norm();
            if norm > Z_NORM_THRESHOLD {
                active.push(i);
            } else {
                warn!("dropping data sample {i}: |z| = {norm:e} is below {Z_NORM_THRESHOLD:e}");
            }
        }
        Ok(Self { u, x, z, active })
    }

    pub fn u(&self) -> &DMatrix<f64> {
        &self.u
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn n_x(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.u.nrows()
    }

    pub fn n_z(&self) -> usize {
        self.z.nrows()
    }

    /// Recorded length `T`.
    pub fn len(&self) -> usize {
        self.u.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Indices of the samples that enter the consistency set.
    pub fn active_indices(&self) -> &[usize] {
        &self.active
    }

    /// Number of samples that enter the consistency set.
    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            index: i,
            x: self.x.column(i).into_owned(),
            u: self.u.column(i).into_owned(),
            x_next: self.x.column(i + 1).into_owned(),
            z: self.z.column(i).into_owned(),
        }
    }

    /// Active samples in index order.
    pub fn samples(&self) -> impl Iterator<Item = Sample> + '_ {
        self.active.iter().map(|&i| self.sample(i))
    }

    /// The first `len` recorded samples (a nested sub-dataset).
    pub fn prefix(&self, len: usize) -> Result<Self> {
        ensure_input!(len <= self.len(), "prefix {len} exceeds dataset length {}", self.len());
        Self::from_recorded(
            self.u.columns(0, len).into_owned(),
            self.x.columns(0, len + 1).into_owned(),
            self.z.columns(0, len).into_owned(),
        )
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "format,{FORMAT_TAG},{FORMAT_VERSION}");
        let _ = writeln!(out, "n_x,{}", self.n_x());
        let _ = writeln!(out, "n_u,{}", self.n_u());
        let _ = writeln!(out, "n_z,{}", self.n_z());
        let _ = writeln!(out, "T,{}", self.len());
        for (name, m) in [("U", &self.u), ("X", &self.x), ("Z", &self.z)] {
            let _ = writeln!(out, "section,{name},{},{}", m.nrows(), m.ncols());
            // Rows of an empty section are omitted.
            for r in (0..m.nrows()).filter(|_| m.ncols() > 0) {
                let row: Vec<String> = m.row(r).iter().map(|&v| hexfloat::format(v)).collect();
                let _ = writeln!(out, "{}", row.join(","));
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("dataset file ended before {what}")))
        };
        let header = next("format line")?;
        let expected = format!("format,{FORMAT_TAG},{FORMAT_VERSION}");
        if header != expected {
            return Err(Error::Parse(format!("unsupported dataset header `{header}`")));
        }
        let mut dim = |key: &str| -> Result<usize> {
            let line = next(key)?;
            let (k, v) = line
                .split_once(',')
                .ok_or_else(|| Error::Parse(format!("malformed line `{line}`")))?;
            if k != key {
                return Err(Error::Parse(format!("expected `{key}`, found `{k}`")));
            }
            v.parse()
                .map_err(|_| Error::Parse(format!("invalid value for {key}: `{v}`")))
        };
        let n_x = dim("n_x")?;
        let n_u = dim("n_u")?;
        let n_z = dim("n_z")?;
        let t = dim("T")?;
        let mut read_section = |name: &str, rows: usize, cols: usize| -> Result<DMatrix<f64>> {
            let line = next(name)?;
            let expected = format!("section,{name},{rows},{cols}");
            if line != expected {
                return Err(Error::Parse(format!("expected `{expected}`, found `{line}`")));
            }
            let mut m = DMatrix::zeros(rows, cols);
            for r in (0..rows).filter(|_| cols > 0) {
                let row = next(name)?;
                let values: Vec<&str> = row.split(',').collect();
                if values.len() != cols {
                    return Err(Error::Parse(format!(
                        "section {name} row {r} has {} values, expected {cols}",
                        values.len()
                    )));
                }
                for (c, v) in values.into_iter().enumerate() {
                    m[(r, c)] = hexfloat::parse(v)?;
                }
            }
            Ok(m)
        };
        let u = read_section("U", n_u, t)?;
        let x = read_section("X", n_x, t + 1)?;
        let z = read_section("Z", n_z, t)?;
        Self::from_recorded(u, x, z)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn compute_z(u: &DMatrix<f64>, x: &DMatrix<f64>, c: &DMatrix<f64>, d: &DMatrix<f64>) -> DMatrix<f64> {
    let t = u.ncols();
    let mut z = DMatrix::zeros(c.nrows(), t);
    for i in 0..t {
        let zi = c * x.column(i) + d * u.column(i);
        z.set_column(i, &zi);
    }
    z
}

/// Distribution of the excitation input during data collection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputLaw {
    /// Each component i.i.d. uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
    /// Each component i.i.d. Gaussian.
    Gaussian { std_dev: f64 },
    /// Constant input (mostly useful for degenerate test cases).
    Constant { value: f64 },
}

impl InputLaw {
    fn draw<R: Rng>(&self, n_u: usize, rng: &mut R) -> DVector<f64> {
        match self {
            InputLaw::Uniform { low, high } => {
                DVector::from_fn(n_u, |_, _| if low == high { *low } else { rng.gen_range(*low..=*high) })
            }
            InputLaw::Gaussian { std_dev } => DVector::from_fn(n_u, |_, _| {
                std_dev * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            InputLaw::Constant { value } => DVector::from_element(n_u, *value),
        }
    }
}

/// A generated dataset together with the hidden scheduling sequence that
/// produced it (for verification only; the controller never sees it).
#[derive(Clone, Debug)]
pub struct Generated {
    pub data: DataSet,
    pub deltas: Vec<DMatrix<f64>>,
}

/// Simulates the plant for `t_len` steps from `x0` under random excitation.
///
/// The input and scheduling streams draw from independent generators derived
/// from `seed`, so changing one law leaves the other stream unchanged.
pub fn generate(
    plant: &LpvPlant,
    t_len: usize,
    input_law: &InputLaw,
    sched_law: &SchedulingLaw,
    x0: &DVector<f64>,
    seed: u64,
) -> Result<Generated> {
    let dims = plant.dims();
    linalg::check_len("x0", x0, dims.n_x)?;
    let mut input_rng = ChaCha8Rng::seed_from_u64(seed);
    let sched_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ced_0000_0000_0001);
    let mut scheduler = Scheduler::new(sched_law.clone(), &plant.bound, sched_rng)?;
    let mut u = DMatrix::zeros(dims.n_u, t_len);
    let mut x = DMatrix::zeros(dims.n_x, t_len + 1);
    let mut deltas = Vec::with_capacity(t_len);
    x.set_column(0, x0);
    for i in 0..t_len {
        let ui = input_law.draw(dims.n_u, &mut input_rng);
        let delta = scheduler
            .next(i)
            .map_err(|e| Error::Internal(format!("data generation left Π: {e}")))?;
        let xi = x.column(i).into_owned();
        let next = plant.step(&xi, &ui, &delta)?;
        u.set_column(i, &ui);
        x.set_column(i + 1, &next);
        deltas.push(delta);
    }
    let data = DataSet::new(u, x, &plant.c, &plant.d)?;
    Ok(Generated { data, deltas })
}

/// Uniform draw from the ellipsoid `{x : xᵀ S x ≤ 1}` (`S ≻ 0`).
pub fn random_state_in_ellipsoid<R: Rng>(s: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let n = s.nrows();
    let dir = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
    let norm = dir.norm();
    if norm == 0.0 {
        return Ok(DVector::zeros(n));
    }
    let radius = rng.gen_range(0.0_f64..=1.0).powf(1.0 / n as f64);
    let ball = dir * (radius / norm);
    Ok(linalg::inv_sqrt_pd(s)? * ball)
}

/// Diagnostics for a dataset against the known output map `(C, D)`.
#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub z_norms: Vec<f64>,
    pub min_z_norm: f64,
    pub min_z_index: Option<usize>,
    /// Indices with `‖z_i‖ ≤ τ_z`.
    pub failing: Vec<usize>,
    pub threshold: f64,
    pub pass: bool,
    /// Largest absolute difference between stored `Z` and `C X₋ + D U`.
    pub z_residual: f64,
    /// Numerical rank of `[X₋; U]` (diagnostic only).
    pub excitation_rank: usize,
}

pub fn validate(ds: &DataSet, c: &DMatrix<f64>, d: &DMatrix<f64>) -> Result<ValidationReport> {
    linalg::check_shape("C", c, ds.n_z(), ds.n_x())?;
    linalg::check_shape("D", d, ds.n_z(), ds.n_u())?;
    let z_norms: Vec<f64> = (0..ds.len()).map(|i| ds.z.column(i).norm()).collect();
    let (min_z_index, min_z_norm) = z_norms
        .iter()
        .copied()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map_or((None, f64::INFINITY), |(i, v)| (Some(i), v));
    let failing: Vec<usize> = z_norms
        .iter()
        .enumerate()
        .filter(|(_, &n)| n <= Z_NORM_THRESHOLD)
        .map(|(i, _)| i)
        .collect();
    let recomputed = compute_z(&ds.u, &ds.x, c, d);
    let z_residual = if ds.is_empty() { 0.0 } else { (&recomputed - &ds.z).amax() };
    let t = ds.len();
    let mut stacked = DMatrix::zeros(ds.n_x() + ds.n_u(), t);
    linalg::set_block(&mut stacked, 0, 0, &ds.x.columns(0, t).into_owned());
    linalg::set_block(&mut stacked, ds.n_x(), 0, &ds.u);
    let sv = linalg::singular_values(&stacked);
    let top = sv.iter().copied().fold(0.0, f64::max);
    let excitation_rank = sv.iter().filter(|&&s| s > 1e-10 * top.max(f64::MIN_POSITIVE)).count();
    Ok(ValidationReport {
        pass: failing.is_empty(),
        z_norms,
        min_z_norm,
        min_z_index,
        failing,
        threshold: Z_NORM_THRESHOLD,
        z_residual,
        excitation_rank,
    })
}
