use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::cell_problems::{effective_perm, WarrenRootCell};
use crate::error::{Error, Result};
use crate::memory_kernel::kernel_amplitude;

use crate::constitutive::TwoRockSystem;

use super::{simulate, time_continuity, Diagnostics, EffectiveCoefficients, MacroModel, MacroState, NewtonSettings, Trajectory};

/// Inputs that turn rock data into macroscale coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientSpec {
    pub dim: usize,
    pub sigma_d: f64,
    pub psi_m: f64,
    /// Cell-problem resolution per unit length.
    pub cell_resolution: usize,
}

/// Everything a δ-sweep needs besides the base model.
#[derive(Debug, Clone, Serialize)]
pub struct SweepSetup {
    pub spec: CoefficientSpec,
    pub initial_saturation: Vec<f64>,
    pub dt: f64,
    pub steps: usize,
    pub settings: NewtonSettings,
    /// Lags in steps for the time-continuity diagnostic of the limit run;
    /// empty to skip it.
    pub continuity_lags: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub coefficients: EffectiveCoefficients,
    pub grad_p_l2h1: f64,
    pub grad_theta_l2h1: f64,
    pub mass_balance_error: f64,
    pub max_projection: f64,
    pub final_mass: f64,
    #[serde(skip)]
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepLevel {
    pub requested_delta: f64,
    pub delta: f64,
    pub run: RunSummary,
    /// `‖S_f^δ − S_f‖` in `L²(Ω_T)` against the limit run.
    pub error: f64,
    pub grad_p_ratio: f64,
    pub grad_theta_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub limit: RunSummary,
    pub levels: Vec<SweepLevel>,
    /// `(h, M(h))` for the limit run.
    pub limit_continuity: Vec<(f64, f64)>,
    pub limit_continuity_exponent: Option<f64>,
}

impl SweepReport {
    pub fn strictly_decreasing(&self) -> bool {
        self.levels.windows(2).all(|w| w[1].error < w[0].error)
    }

    /// Largest deviation factor `max(r, 1/r)` of the gradient ratios.
    pub fn gradient_spread(&self) -> f64 {
        self.levels
            .iter()
            .flat_map(|l| [l.grad_p_ratio, l.grad_theta_ratio])
            .map(|r| r.max(1.0 / r))
            .fold(1.0, f64::max)
    }

    /// Log-log slope of `E(δ)` against δ; observational only.
    pub fn observed_rate(&self) -> Option<f64> {
        if self.levels.len() < 2 {
            return None;
        }
        let d: Vec<f64> = self.levels.iter().map(|l| l.delta).collect();
        let e: Vec<f64> = self.levels.iter().map(|l| l.error).collect();
        Some(crate::linalg::loglog_slope(&d, &e))
    }
}

/// `‖a − b‖` in the discrete `L²(Ω_T)` norm, summed over the time levels
/// after the initial one.
pub fn space_time_distance(a: &Trajectory, b: &Trajectory, dt: f64, area: f64) -> f64 {
    let mut acc = 0.0;
    for (sa, sb) in a.saturation.iter().zip(&b.saturation).skip(1) {
        acc += sa.iter().zip(sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    }
    (acc * dt * area).sqrt()
}

/// Coefficients of the homogenized limit model.
pub fn limit_coefficients(rocks: &TwoRockSystem, spec: &CoefficientSpec) -> Result<EffectiveCoefficients> {
    // the limit amplitude does not depend on the probe thickness
    let probe = WarrenRootCell::new(spec.dim, 0.1)?;
    let m = &rocks.matrix;
    let amp = kernel_amplitude(&probe, m.porosity, m.permeability, spec.psi_m, spec.sigma_d)?;
    Ok(EffectiveCoefficients::limit(&rocks.fracture, spec.dim, &amp))
}

/// Coefficients of the δ-model divided by `dδ`, with δ snapped to the
/// cell-problem grid.
pub fn rescaled_level_coefficients(
    rocks: &TwoRockSystem,
    spec: &CoefficientSpec,
    requested_delta: f64,
) -> Result<EffectiveCoefficients> {
    if spec.dim < 2 {
        return Err(Error::param("d", "macroscale coefficients need d >= 2"));
    }
    let cell = WarrenRootCell::new(spec.dim, requested_delta)?;
    let sol = effective_perm(&cell, rocks.fracture.permeability, spec.cell_resolution)?;
    let m = &rocks.matrix;
    let amp = kernel_amplitude(&sol.cell, m.porosity, m.permeability, spec.psi_m, spec.sigma_d)?;
    let raw = EffectiveCoefficients::at_level(&rocks.fracture, &sol, &amp);
    Ok(raw.scaled(1.0 / (spec.dim as f64 * sol.cell.delta())))
}

fn run(model: &MacroModel, coeffs: EffectiveCoefficients, setup: &SweepSetup) -> Result<(RunSummary, Trajectory)> {
    let m = model.with_coefficients(coeffs.clone())?;
    let init = MacroState::from_saturation(&m, &setup.initial_saturation)?;
    let (_, traj, diag) = simulate(&m, init, setup.dt, setup.steps, &setup.settings)?;
    Ok((
        RunSummary {
            coefficients: coeffs,
            grad_p_l2h1: diag.grad_p_l2h1,
            grad_theta_l2h1: diag.grad_theta_l2h1,
            mass_balance_error: diag.mass_balance_error,
            max_projection: diag.max_projection,
            final_mass: *diag.mass.last().unwrap(),
            diagnostics: diag,
        },
        traj,
    ))
}

/// Runs the limit model and each rescaled δ-model on the same grid and
/// step, concurrently, and tabulates `E(δ)`.
///
/// `model` supplies grid, boundary data and rocks; its coefficients are
/// replaced by the limit set.
pub fn delta_sweep(model: &MacroModel, setup: &SweepSetup, deltas: &[f64]) -> Result<SweepReport> {
    if deltas.is_empty() {
        return Err(Error::param("deltas", "need at least one level"));
    }
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("deltas", "levels must be strictly decreasing"));
    }
    let limit_coeffs = limit_coefficients(&model.rocks, &setup.spec)?;

    let mut jobs: Vec<Option<f64>> = vec![None];
    jobs.extend(deltas.iter().map(|&d| Some(d)));
    let results: Vec<Result<(RunSummary, Trajectory)>> = jobs
        .par_iter()
        .map(|job| {
            let coeffs = match job {
                None => limit_coeffs.clone(),
                Some(d) => rescaled_level_coefficients(&model.rocks, &setup.spec, *d)?,
            };
            let tag = match job {
                None => "limit".to_string(),
                Some(d) => format!("delta={d}"),
            };
            run(model, coeffs, setup).map_err(|e| e.context(tag))
        })
        .collect();
    let mut results = results.into_iter().collect::<Result<Vec<_>>>()?.into_iter();
    let (limit, limit_traj) = results.next().unwrap();
    let area = model.grid.cell_area();
    let (limit_continuity, limit_continuity_exponent) = if setup.continuity_lags.is_empty() {
        (Vec::new(), None)
    } else {
        let m = model.with_coefficients(limit.coefficients.clone())?;
        let (rows, exponent) = time_continuity(&m, &limit_traj, &setup.continuity_lags)?;
        (rows, Some(exponent))
    };
    let levels = deltas
        .iter()
        .zip(results)
        .map(|(&req, (summary, traj))| {
            let delta = match summary.coefficients.level {
                super::Level::Delta(d) => d,
                super::Level::Limit => req,
            };
            let error = space_time_distance(&traj, &limit_traj, setup.dt, area);
            info!("delta {delta}: E = {error:.6e}");
            SweepLevel {
                requested_delta: req,
                delta,
                error,
                grad_p_ratio: summary.grad_p_l2h1 / limit.grad_p_l2h1,
                grad_theta_ratio: summary.grad_theta_l2h1 / limit.grad_theta_l2h1,
                run: summary,
            }
        })
        .collect();
    Ok(SweepReport {
        limit,
        levels,
        limit_continuity,
        limit_continuity_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macro_solver::tests::model_with;
    use crate::macro_solver::{BoundaryData, EdgeTag, EdgeValue, Level};

    #[test]
    fn rescaled_coefficients_approach_the_limit() {
        let m = model_with(4, 4, [EdgeTag::Injection; 4], BoundaryData::uniform(0.0, 0.0), 0.0);
        let spec = CoefficientSpec {
            dim: 2,
            sigma_d: 4.0,
            psi_m: 0.2,
            cell_resolution: 160,
        };
        let a = rescaled_level_coefficients(&m.rocks, &spec, 0.2).unwrap();
        let b = rescaled_level_coefficients(&m.rocks, &spec, 0.1).unwrap();
        let lim = limit_coefficients(&m.rocks, &spec).unwrap();
        assert_eq!(lim.permeability[0][0], 0.5);
        assert!(b.kernel_amplitude < a.kernel_amplitude && b.kernel_amplitude > lim.kernel_amplitude);
        assert_eq!(a.level, Level::Delta(0.2));
        assert!(b.permeability[0][0] < a.permeability[0][0] && b.permeability[0][0] > 0.5);
        assert!(b.porosity < a.porosity && b.porosity > 0.4);
        assert!(a.permeability[0][1].abs() < 1e-12);
    }

    #[test]
    fn small_sweep_errors_decrease() {
        let probe = model_with(8, 4, [EdgeTag::Injection; 4], BoundaryData::uniform(0.0, 0.0), 0.0);
        let mut bd = BoundaryData::uniform(0.0, probe.table.beta(0.1));
        bd.edges[0] = EdgeValue {
            pressure: 1.0,
            theta: probe.table.theta_star(),
        };
        let tags = [EdgeTag::Injection, EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable];
        let m = model_with(8, 4, tags, bd, 0.0);
        let setup = SweepSetup {
            spec: CoefficientSpec {
                dim: 2,
                sigma_d: 4.0,
                psi_m: 0.2,
                cell_resolution: 80,
            },
            initial_saturation: vec![0.1; 32],
            dt: 0.01,
            steps: 20,
            settings: NewtonSettings::default(),
            continuity_lags: vec![2, 4, 8],
        };
        let rep = delta_sweep(&m, &setup, &[0.2, 0.1]).unwrap();
        assert!(rep.strictly_decreasing(), "{:?}", rep.levels.iter().map(|l| l.error).collect::<Vec<_>>());
        assert!(rep.gradient_spread() < 2.0);
        assert_eq!(rep.limit_continuity.len(), 3);
        assert!(rep.limit_continuity_exponent.unwrap() > 0.0);
        assert!(delta_sweep(&m, &setup, &[0.1, 0.2]).is_err());
    }
}
