//! Experiment configuration, read from and written to TOML.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::InputLaw;
use crate::error::{ensure_input, Error, Result};
use crate::lpv_model::{angular_positioning_interval, LpvPlant, SchedulingBound, SchedulingLaw};
use crate::sdp::{AssemblyOptions, MpcIngredients};
use crate::solver::SolverOptions;

pub const SCHEMA_VERSION: u32 = 1;

/// TOML integers are signed, so seeds above this cannot be written back.
pub const MAX_SEED: u64 = i64::MAX as u64;

/// A matrix as a list of rows.
pub type Rows = Vec<Vec<f64>>;

pub fn matrix_from_rows(name: &str, rows: &Rows) -> Result<DMatrix<f64>> {
    ensure_input!(!rows.is_empty() && !rows[0].is_empty(), "{name} is empty");
    let cols = rows[0].len();
    ensure_input!(rows.iter().all(|r| r.len() == cols), "{name} has ragged rows");
    Ok(DMatrix::from_row_iterator(rows.len(), cols, rows.iter().flatten().copied()))
}

pub fn rows_from_matrix(m: &DMatrix<f64>) -> Rows {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    AngularPositioning,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantSpec {
    /// Named plant; `c` widens the friction interval to `[0.05, 0.05 + 0.05c]`.
    Preset { name: Preset, c: f64 },
    Matrices { a: Rows, b: Rows, c: Rows, d: Rows },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BoundSpec {
    Interval { low: f64, high: f64, scale: f64 },
    SingularValue { sigma: f64 },
    Qmi { g11: Rows, g12: Rows, g22: Rows },
}

/// Scheduling signal used for data collection or closed-loop simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SchedulingSpec {
    /// Uniform over the interval of the bound (interval bounds only).
    IntervalUniform,
    /// Sinusoid spanning the interval of the bound.
    IntervalSinusoid { period: f64 },
    Constant { value: f64 },
    Uniform { low: f64, high: f64 },
    Sinusoid { low: f64, high: f64, period: f64 },
    QmiInterior,
    QmiBoundary,
}

impl SchedulingSpec {
    pub fn resolve(&self, interval: Option<(f64, f64)>) -> Result<SchedulingLaw> {
        let need = || {
            interval.ok_or_else(|| Error::Input("interval scheduling needs an interval bound".into()))
        };
        Ok(match self {
            SchedulingSpec::IntervalUniform => {
                let (low, high) = need()?;
                SchedulingLaw::Uniform { low, high }
            }
            SchedulingSpec::IntervalSinusoid { period } => {
                let (low, high) = need()?;
                SchedulingLaw::Sinusoid { low, high, period: *period }
            }
            SchedulingSpec::Constant { value } => SchedulingLaw::Constant { value: *value },
            SchedulingSpec::Uniform { low, high } => SchedulingLaw::Uniform { low: *low, high: *high },
            SchedulingSpec::Sinusoid { low, high, period } => {
                SchedulingLaw::Sinusoid { low: *low, high: *high, period: *period }
            }
            SchedulingSpec::QmiInterior => SchedulingLaw::QmiInterior,
            SchedulingSpec::QmiBoundary => SchedulingLaw::QmiBoundary,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    /// Number of samples `T`.
    pub length: usize,
    pub input: InputLaw,
    pub scheduling: SchedulingSpec,
    pub seed: u64,
    /// Initial state of the experiment; drawn from the state-constraint
    /// ellipsoid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSpec {
    pub q: Rows,
    pub r: Rows,
    pub s_u: Rows,
    pub s_x: Rows,
    #[serde(default)]
    pub assembly: AssemblyOptions,
    #[serde(default)]
    pub solver: SolverOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub x0: Vec<f64>,
    pub steps: usize,
    pub scheduling: SchedulingSpec,
    /// Seeds for multi-run simulations; each seed regenerates the data.
    #[serde(default)]
    pub seeds: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    C,
    T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub plant: PlantSpec,
    /// Overrides the preset's bound; required for explicit matrices.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bound: Option<BoundSpec>,
    pub data: DataSpec,
    pub mpc: MpcSpec,
    pub run: RunSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
}

/// A configuration expanded into library objects.
#[derive(Clone, Debug)]
pub struct Resolved {
    pub plant: LpvPlant,
    pub ingredients: MpcIngredients,
    /// Scalar scheduling interval, when the bound is an interval.
    pub interval: Option<(f64, f64)>,
    pub data_law: SchedulingLaw,
    pub run_law: SchedulingLaw,
    pub run_x0: DVector<f64>,
}

impl ExperimentConfig {
    /// The angular positioning example with `c = 1` and `T = 20`.
    pub fn angular_positioning() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            plant: PlantSpec::Preset { name: Preset::AngularPositioning, c: 1.0 },
            bound: None,
            data: DataSpec {
                length: 20,
                input: InputLaw::Uniform { low: -1.0, high: 1.0 },
                scheduling: SchedulingSpec::IntervalUniform,
                seed: 0,
                x0: None,
            },
            mpc: MpcSpec {
                q: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
                r: vec![vec![0.01]],
                s_u: vec![vec![0.16]],
                s_x: vec![vec![4.0, 0.0], vec![0.0, 4.0]],
                assembly: AssemblyOptions::default(),
                solver: SolverOptions::default(),
            },
            run: RunSpec {
                x0: vec![0.05, 0.0],
                steps: 100,
                scheduling: SchedulingSpec::IntervalUniform,
                seeds: (0..10).collect(),
            },
            sweep: None,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        ensure_input!(
            cfg.schema_version == SCHEMA_VERSION,
            "unsupported schema_version {} (expected {SCHEMA_VERSION})",
            cfg.schema_version
        );
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Copy with the preset's `c` replaced.
    pub fn with_c(&self, c: f64) -> Result<Self> {
        let mut out = self.clone();
        match &mut out.plant {
            PlantSpec::Preset { c: current, .. } => *current = c,
            PlantSpec::Matrices { .. } => return Err(Error::Input("a c sweep needs a preset plant".into())),
        }
        Ok(out)
    }

    pub fn with_length(&self, length: usize) -> Self {
        let mut out = self.clone();
        out.data.length = length;
        out
    }

    pub fn resolve(&self) -> Result<Resolved> {
        ensure_input!(self.schema_version == SCHEMA_VERSION, "unsupported schema_version {}", self.schema_version);
        for seed in std::iter::once(&self.data.seed).chain(&self.run.seeds) {
            ensure_input!(*seed <= MAX_SEED, "seed {seed} exceeds the largest storable seed {MAX_SEED}");
        }
        let (mut plant, mut interval) = match &self.plant {
            PlantSpec::Preset { name: Preset::AngularPositioning, c } => {
                (LpvPlant::angular_positioning(*c)?, Some(angular_positioning_interval(*c)))
            }
            PlantSpec::Matrices { a, b, c, d } => {
                let spec = self.bound.as_ref().ok_or_else(|| Error::Input("explicit plants need a bound".into()))?;
                let (a, c) = (matrix_from_rows("A", a)?, matrix_from_rows("C", c)?);
                let bound = build_bound(spec, a.nrows(), c.nrows())?;
                let plant = LpvPlant::new(a, matrix_from_rows("B", b)?, c, matrix_from_rows("D", d)?, bound)?;
                (plant, None)
            }
        };
        if let Some(spec) = &self.bound {
            let dims = plant.dims();
            plant.bound = build_bound(spec, dims.n_x, dims.n_z)?;
            interval = match spec {
                BoundSpec::Interval { low, high, .. } => Some((*low, *high)),
                _ => None,
            };
        }
        let ingredients = MpcIngredients::new(
            matrix_from_rows("Q", &self.mpc.q)?,
            matrix_from_rows("R", &self.mpc.r)?,
            matrix_from_rows("S_u", &self.mpc.s_u)?,
            matrix_from_rows("S_x", &self.mpc.s_x)?,
        )?;
        let dims = plant.dims();
        ensure_input!(
            ingredients.n_x() == dims.n_x && ingredients.n_u() == dims.n_u,
            "cost weights do not match the plant dimensions"
        );
        ensure_input!(self.run.x0.len() == dims.n_x, "run.x0 must have {} entries", dims.n_x);
        if let Some(x0) = &self.data.x0 {
            ensure_input!(x0.len() == dims.n_x, "data.x0 must have {} entries", dims.n_x);
        }
        Ok(Resolved {
            data_law: self.data.scheduling.resolve(interval)?,
            run_law: self.run.scheduling.resolve(interval)?,
            run_x0: DVector::from_column_slice(&self.run.x0),
            plant,
            ingredients,
            interval,
        })
    }
}

fn build_bound(spec: &BoundSpec, n_x: usize, n_z: usize) -> Result<SchedulingBound> {
    match spec {
        BoundSpec::Interval { low, high, scale } => SchedulingBound::interval(*low, *high, *scale, n_x, n_z),
        BoundSpec::SingularValue { sigma } => SchedulingBound::singular_value(*sigma, n_x, n_z),
        BoundSpec::Qmi { g11, g12, g22 } => SchedulingBound::new(
            matrix_from_rows("G11", g11)?,
            matrix_from_rows("G12", g12)?,
            matrix_from_rows("G22", g22)?,
        ),
    }
}
