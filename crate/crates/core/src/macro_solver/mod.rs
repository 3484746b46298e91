//! Two-point finite-volume solver for the macroscale fracture system in
//! global-pressure / complementary-pressure form.
//!
//! One code path serves the thin-fissure model at level δ and the fully
//! homogenized limit; they differ only in their [`EffectiveCoefficients`].

mod pressure;
mod saturation;
mod simulate;
mod sweep;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::cell_problems::{effective_porosity, limit_permeability, CellProblemSolution};
use crate::constitutive::{matching_p, KirchhoffTable, RockParams, TwoRockSystem};
use crate::error::{Error, Result};
use crate::memory_kernel::{HistoryBuffer, KernelAmplitude};

pub use pressure::pressure_solve;
pub use saturation::{saturation_step, NewtonSettings, StepReport};
pub use simulate::{phase_fields, simulate, time_continuity, Diagnostics, PhaseFields, Trajectory};
pub use sweep::{
    delta_sweep, limit_coefficients, rescaled_level_coefficients, CoefficientSpec, space_time_distance, RunSummary, SweepLevel, SweepReport, SweepSetup,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "delta", rename_all = "lowercase")]
pub enum Level {
    Delta(f64),
    Limit,
}

/// Macroscale coefficient set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EffectiveCoefficients {
    pub porosity: f64,
    /// Row-major 2×2 permeability tensor in the simulation plane.
    pub permeability: [[f64; 2]; 2],
    pub kernel_amplitude: f64,
    pub level: Level,
}

impl EffectiveCoefficients {
    /// Homogenized limit: `Φ_f`, `k* I` and `C_m / d`.
    pub fn limit(fracture: &RockParams, dim: usize, amplitude: &KernelAmplitude) -> Self {
        let k = limit_permeability(dim, fracture.permeability);
        Self {
            porosity: fracture.porosity,
            permeability: [[k, 0.0], [0.0, k]],
            kernel_amplitude: amplitude.limit,
            level: Level::Limit,
        }
    }

    /// Level-δ coefficients `Φ^δ`, `K*,δ` and `D^δ` from a solved cell.
    pub fn at_level(fracture: &RockParams, cell: &CellProblemSolution, amplitude: &KernelAmplitude) -> Self {
        let k: &DMatrix<f64> = &cell.tensor;
        Self {
            porosity: effective_porosity(&cell.cell, fracture.porosity),
            permeability: [[k[(0, 0)], k[(0, 1)]], [k[(1, 0)], k[(1, 1)]]],
            kernel_amplitude: amplitude.d_delta,
            level: Level::Delta(cell.cell.delta()),
        }
    }

    /// All three coefficients multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        out.porosity *= factor;
        out.kernel_amplitude *= factor;
        for row in out.permeability.iter_mut() {
            for v in row.iter_mut() {
                *v *= factor;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.porosity > 0.0 && self.porosity.is_finite()) {
            return Err(Error::param("porosity", "effective porosity must be positive"));
        }
        if !(self.kernel_amplitude >= 0.0 && self.kernel_amplitude.is_finite()) {
            return Err(Error::param("kernel_amplitude", "must be non-negative"));
        }
        let k = &self.permeability;
        let det = k[0][0] * k[1][1] - k[0][1] * k[1][0];
        if !(k[0][0] > 0.0 && det > 0.0 && (k[0][1] - k[1][0]).abs() <= 1e-12 * k[0][0]) {
            return Err(Error::param("permeability", "tensor must be symmetric positive definite"));
        }
        if k[0][1].abs() > 1e-8 * k[0][0] {
            return Err(Error::param(
                "permeability",
                "two-point fluxes need an axis-aligned tensor",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeTag {
    Injection,
    Impermeable,
}

/// Edges in the order used by [`MacroGrid::tags`] and [`BoundaryData`].
pub const EDGE_NAMES: [&str; 4] = ["left", "right", "bottom", "top"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MacroGrid {
    pub lx: f64,
    pub ly: f64,
    pub nx: usize,
    pub ny: usize,
    /// Left, right, bottom, top.
    pub tags: [EdgeTag; 4],
}

impl MacroGrid {
    pub fn new(lx: f64, ly: f64, nx: usize, ny: usize, tags: [EdgeTag; 4]) -> Result<Self> {
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::param("grid", "domain lengths must be positive"));
        }
        if nx == 0 || ny == 0 {
            return Err(Error::param("grid", "need at least one cell per direction"));
        }
        Ok(Self { lx, ly, nx, ny, tags })
    }

    pub fn cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.dx() * self.dy()
    }

    pub fn has_dirichlet(&self) -> bool {
        self.tags.contains(&EdgeTag::Injection)
    }

    /// `(neighbour or edge, transmissibility geometry area/distance, axis)`
    /// for the four faces of cell `c`, in left, right, bottom, top order.
    pub(crate) fn faces(&self, c: usize) -> [(Face, f64, usize); 4] {
        let (i, j) = (c % self.nx, c / self.nx);
        let gx = self.dy() / self.dx();
        let gy = self.dx() / self.dy();
        let side = |inside: bool, nb: usize, edge: usize, g: f64| {
            if inside {
                (Face::Cell(nb), g)
            } else {
                (Face::Edge(edge), 2.0 * g)
            }
        };
        let l = side(i > 0, c.wrapping_sub(1), 0, gx);
        let r = side(i + 1 < self.nx, c + 1, 1, gx);
        let b = side(j > 0, c.wrapping_sub(self.nx), 2, gy);
        let t = side(j + 1 < self.ny, c + self.nx, 3, gy);
        [(l.0, l.1, 0), (r.0, r.1, 0), (b.0, b.1, 1), (t.0, t.1, 1)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Face {
    Cell(usize),
    Edge(usize),
}

/// Dirichlet values on the injection-tagged edges.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeValue {
    pub pressure: f64,
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundaryData {
    /// Left, right, bottom, top; read only on injection edges.
    pub edges: [EdgeValue; 4],
}

impl BoundaryData {
    pub fn uniform(pressure: f64, theta: f64) -> Self {
        Self {
            edges: [EdgeValue { pressure, theta }; 4],
        }
    }
}

/// Everything fixed during a simulation.
#[derive(Debug, Clone)]
pub struct MacroModel {
    pub coeffs: EffectiveCoefficients,
    pub grid: MacroGrid,
    pub boundary: BoundaryData,
    pub rocks: TwoRockSystem,
    pub table: Arc<KirchhoffTable>,
}

impl MacroModel {
    pub fn new(
        coeffs: EffectiveCoefficients,
        grid: MacroGrid,
        boundary: BoundaryData,
        rocks: TwoRockSystem,
        table: Arc<KirchhoffTable>,
    ) -> Result<Self> {
        coeffs.validate()?;
        let ts = table.theta_star();
        for (k, tag) in grid.tags.iter().enumerate() {
            if *tag == EdgeTag::Injection {
                let th = boundary.edges[k].theta;
                if !(0.0..=ts).contains(&th) {
                    return Err(Error::param(
                        format!("boundary.{}.theta", EDGE_NAMES[k]),
                        format!("must lie in [0, theta*] = [0, {ts}], got {th}"),
                    ));
                }
            }
        }
        Ok(Self {
            coeffs,
            grid,
            boundary,
            rocks,
            table,
        })
    }

    pub fn with_coefficients(&self, coeffs: EffectiveCoefficients) -> Result<Self> {
        Self::new(coeffs, self.grid.clone(), self.boundary.clone(), self.rocks.clone(), self.table.clone())
    }

    pub(crate) fn lambda_total(&self, s: f64) -> f64 {
        let law = &self.rocks.fracture.law;
        law.lambda_w(s) + law.lambda_n(s)
    }

    pub(crate) fn lambda_w(&self, s: f64) -> f64 {
        self.rocks.fracture.law.lambda_w(s)
    }

    pub(crate) fn edge_saturation(&self, edge: usize) -> f64 {
        self.table.inverse_clamped(self.boundary.edges[edge].theta)
    }
}

/// Cell fields of the fracture system.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroState {
    pub theta: Vec<f64>,
    pub saturation: Vec<f64>,
    pub pressure: Vec<f64>,
    /// `𝒫(S_f^0)` per cell.
    pub matched_initial: Vec<f64>,
    pub histories: Vec<HistoryBuffer>,
    pub step: usize,
    pub time: f64,
}

impl MacroState {
    /// Initial state from a per-cell fracture saturation.
    pub fn from_saturation(model: &MacroModel, s0: &[f64]) -> Result<Self> {
        let n = model.grid.cells();
        if s0.len() != n {
            return Err(Error::param("initial", format!("expected {n} values, got {}", s0.len())));
        }
        let theta: Vec<f64> = s0.iter().map(|&s| model.table.beta(s)).collect();
        let saturation: Vec<f64> = theta.iter().map(|&t| model.table.inverse_clamped(t)).collect();
        let matched_initial = saturation
            .iter()
            .map(|&s| matching_p(&model.rocks, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            theta,
            saturation,
            pressure: vec![0.0; n],
            matched_initial,
            histories: vec![HistoryBuffer::new(); n],
            step: 0,
            time: 0.0,
        })
    }

    pub fn uniform(model: &MacroModel, s0: f64) -> Result<Self> {
        Self::from_saturation(model, &vec![s0; model.grid.cells()])
    }
}
