use log::{debug, info};
use serde::Serialize;

use crate::constitutive::global_pressure_split;
use crate::error::{Error, Result};
use crate::linalg::loglog_slope;
use crate::memory_kernel::KernelQuadrature;

use super::{pressure_solve, saturation_step, EdgeTag, Face, MacroModel, MacroState, NewtonSettings};

/// Per-step records and run summaries.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub times: Vec<f64>,
    /// `Φ Σ S_f |cell|` after each step, starting with the initial state.
    pub mass: Vec<f64>,
    pub influx: Vec<f64>,
    pub source_total: Vec<f64>,
    /// Discrete `H¹` seminorms of `𝖯_f` and `θ_f` per step.
    pub grad_p_norm: Vec<f64>,
    pub grad_theta_norm: Vec<f64>,
    pub newton_iterations: Vec<usize>,
    pub grad_p_l2h1: f64,
    pub grad_theta_l2h1: f64,
    pub mass_balance_error: f64,
    pub max_projection: f64,
    pub max_newton_residual: f64,
}

/// Stored fields at every time level, initial state included.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub saturation: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
}

/// Discrete `H¹` seminorm of a cell field; Dirichlet edges contribute the
/// jump to `edge_value`.
fn h1_seminorm(model: &MacroModel, u: &[f64], edge_value: impl Fn(usize) -> f64) -> f64 {
    let grid = &model.grid;
    let mut acc = 0.0;
    for c in 0..grid.cells() {
        for (face, geom, _) in grid.faces(c) {
            match face {
                // each interior face once
                Face::Cell(nb) if nb > c => acc += geom * (u[nb] - u[c]).powi(2),
                Face::Edge(e) if grid.tags[e] == EdgeTag::Injection => acc += geom * (edge_value(e) - u[c]).powi(2),
                _ => {}
            }
        }
    }
    acc.sqrt()
}

fn total_mass(model: &MacroModel, s: &[f64]) -> f64 {
    model.coeffs.porosity * model.grid.cell_area() * s.iter().sum::<f64>()
}

/// Runs `steps` sequential pressure/saturation steps of length `dt`.
///
/// Returns the final state, the stored trajectory and the diagnostics.
pub fn simulate(
    model: &MacroModel,
    initial: MacroState,
    dt: f64,
    steps: usize,
    settings: &NewtonSettings,
) -> Result<(MacroState, Trajectory, Diagnostics)> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", "time step must be positive"));
    }
    let q = KernelQuadrature::new(dt, steps.max(1))?;
    let mut state = initial;
    let mut traj = Trajectory {
        times: vec![state.time],
        saturation: vec![state.saturation.clone()],
        theta: vec![state.theta.clone()],
    };
    let mut diag = Diagnostics {
        times: vec![state.time],
        mass: vec![total_mass(model, &state.saturation)],
        ..Default::default()
    };
    let passes = settings.coupling_passes.clamp(1, 3);
    let (mut sum_p, mut sum_t, mut transfer, mut magnitude) = (0.0, 0.0, 0.0, 0.0);

    for _ in 0..steps {
        let (theta_old, s_old, step_old, time_old) =
            (state.theta.clone(), state.saturation.clone(), state.step, state.time);
        let mut report = None;
        for pass in 0..passes {
            pressure_solve(model, &mut state).map_err(|e| e.context(format!("step {}", step_old + 1)))?;
            if pass > 0 {
                state.theta.clone_from(&theta_old);
                state.saturation.clone_from(&s_old);
                state.step = step_old;
                state.time = time_old;
                state.histories.iter_mut().for_each(|h| h.truncate(step_old));
            }
            report = Some(saturation_step(model, &mut state, &q, settings)?);
        }
        let report = report.expect("at least one pass");
        if let Some(c) = state.theta.iter().position(|t| !t.is_finite()) {
            return Err(Error::NonFinite {
                step: state.step,
                what: format!("theta in cell {c}"),
            });
        }

        let gp = h1_seminorm(model, &state.pressure, |e| model.boundary.edges[e].pressure);
        let gt = h1_seminorm(model, &state.theta, |e| model.boundary.edges[e].theta);
        sum_p += dt * gp * gp;
        sum_t += dt * gt * gt;
        transfer += dt * (report.influx + report.source_total);
        magnitude += dt * (report.influx.abs() + report.source_total.abs());

        diag.times.push(state.time);
        diag.mass.push(total_mass(model, &state.saturation));
        diag.influx.push(report.influx);
        diag.source_total.push(report.source_total);
        diag.grad_p_norm.push(gp);
        diag.grad_theta_norm.push(gt);
        diag.newton_iterations.push(report.newton_iterations);
        diag.max_projection = diag.max_projection.max(report.projection);
        diag.max_newton_residual = diag.max_newton_residual.max(report.residual);
        debug!(
            "step {} t={:.4e} newton={} residual={:.2e} influx={:.4e} source={:.4e}",
            state.step, state.time, report.newton_iterations, report.residual, report.influx, report.source_total
        );

        traj.times.push(state.time);
        traj.saturation.push(state.saturation.clone());
        traj.theta.push(state.theta.clone());
    }

    diag.grad_p_l2h1 = sum_p.sqrt();
    diag.grad_theta_l2h1 = sum_t.sqrt();
    let change = diag.mass.last().unwrap() - diag.mass[0];
    let denom = change.abs().max(magnitude).max(f64::MIN_POSITIVE);
    diag.mass_balance_error = if steps == 0 { 0.0 } else { (change - transfer).abs() / denom };
    info!(
        "simulated {steps} steps: mass balance {:.2e}, max projection {:.2e}",
        diag.mass_balance_error, diag.max_projection
    );
    Ok((state, traj, diag))
}

/// `M(h) = ∫_h^T ∫_Ω (S(t) − S(t−h)) (θ(t) − θ(t−h))` for `h = lag · Δt`.
///
/// Returns `(h, M(h))` per lag and the fitted log-log exponent.
pub fn time_continuity(model: &MacroModel, traj: &Trajectory, lags: &[usize]) -> Result<(Vec<(f64, f64)>, f64)> {
    let levels = traj.saturation.len();
    if levels < 2 {
        return Err(Error::domain("trajectory has no steps"));
    }
    let dt = traj.times[1] - traj.times[0];
    let area = model.grid.cell_area();
    let mut out = Vec::with_capacity(lags.len());
    for &k in lags {
        if k == 0 || k >= levels {
            return Err(Error::param("lags", format!("lag {k} outside 1..{levels}")));
        }
        let mut m = 0.0;
        for n in k..levels {
            let (s1, s0) = (&traj.saturation[n], &traj.saturation[n - k]);
            let (t1, t0) = (&traj.theta[n], &traj.theta[n - k]);
            let inner: f64 = (0..s1.len()).map(|c| (s1[c] - s0[c]) * (t1[c] - t0[c])).sum();
            m += dt * area * inner;
        }
        out.push((k as f64 * dt, m));
    }
    let (h, v): (Vec<f64>, Vec<f64>) = out.iter().copied().unzip();
    let exponent = if out.len() > 1 { loglog_slope(&h, &v) } else { f64::NAN };
    Ok((out, exponent))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseFields {
    pub p_w: Vec<f64>,
    pub p_n: Vec<f64>,
    pub s_f: Vec<f64>,
}

/// Phase pressures recovered cell-wise from `(𝖯_f, S_f)`.
pub fn phase_fields(model: &MacroModel, state: &MacroState) -> Result<PhaseFields> {
    let rock = &model.rocks.fracture;
    let n = state.saturation.len();
    let (mut p_w, mut p_n) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (&s, &p) in state.saturation.iter().zip(&state.pressure) {
        let (w, nw) = global_pressure_split(rock, s.max(f64::MIN_POSITIVE), p)?;
        p_w.push(w);
        p_n.push(nw);
    }
    Ok(PhaseFields {
        p_w,
        p_n,
        s_f: state.saturation.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::pc;
    use crate::macro_solver::tests::model_with;
    use crate::macro_solver::{BoundaryData, EdgeValue};

    const TAGS: [EdgeTag; 4] = [EdgeTag::Injection, EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable];

    fn flood(n: usize) -> MacroModel {
        let probe = model_with(n, n, TAGS, BoundaryData::uniform(0.0, 0.0), 0.0);
        let mut bd = BoundaryData::uniform(0.0, probe.table.beta(0.1));
        bd.edges[0] = EdgeValue {
            pressure: 1.0,
            theta: probe.table.theta_star(),
        };
        model_with(n, n, TAGS, bd, 0.2)
    }

    #[test]
    fn zero_steps_return_initial_data() {
        let m = flood(5);
        let st = MacroState::uniform(&m, 0.1).unwrap();
        let (end, traj, diag) = simulate(&m, st.clone(), 0.01, 0, &NewtonSettings::default()).unwrap();
        assert_eq!(end, st);
        assert_eq!(traj.saturation.len(), 1);
        assert_eq!(diag.mass_balance_error, 0.0);
    }

    #[test]
    fn phase_pressures_differ_by_capillary_pressure() {
        let m = flood(6);
        let st = MacroState::uniform(&m, 0.1).unwrap();
        let (end, _, _) = simulate(&m, st, 0.01, 5, &NewtonSettings::default()).unwrap();
        let ph = phase_fields(&m, &end).unwrap();
        for c in 0..m.grid.cells() {
            let want = pc(&m.rocks.fracture, end.saturation[c]).unwrap();
            assert!((ph.p_n[c] - ph.p_w[c] - want).abs() < 1e-9 * want.max(1.0));
        }
        let mut full = end.clone();
        full.saturation.iter_mut().for_each(|s| *s = 1.0);
        let ph = phase_fields(&m, &full).unwrap();
        for c in 0..m.grid.cells() {
            assert_eq!(ph.p_w[c], full.pressure[c]);
            assert_eq!(ph.p_n[c], full.pressure[c]);
        }
    }

    #[test]
    fn boundary_phase_pressures_round_trip() {
        let m = flood(4);
        let e = m.boundary.edges[1];
        let s = m.table.inverse_clamped(e.theta);
        let (pw, pn) = global_pressure_split(&m.rocks.fracture, s, e.pressure).unwrap();
        assert!((m.table.beta(s) - e.theta).abs() < 1e-12);
        assert!((pn - pw - pc(&m.rocks.fracture, s).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn time_continuity_is_superlinear_for_smooth_runs() {
        let m = flood(8);
        let st = MacroState::uniform(&m, 0.1).unwrap();
        let (_, traj, _) = simulate(&m, st, 5e-3, 40, &NewtonSettings::default()).unwrap();
        let (rows, exponent) = time_continuity(&m, &traj, &[2, 4, 8]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].1 > w[0].1));
        assert!(exponent >= 0.5, "{exponent}");
        assert!(time_continuity(&m, &traj, &[41]).is_err());
    }

    #[test]
    fn reruns_are_bit_identical() {
        let m = flood(6);
        let run = || simulate(&m, MacroState::uniform(&m, 0.1).unwrap(), 0.01, 6, &NewtonSettings::default()).unwrap();
        let (a, _, da) = run();
        let (b, _, db) = run();
        assert_eq!(a, b);
        assert_eq!(da.mass, db.mass);
    }
}
