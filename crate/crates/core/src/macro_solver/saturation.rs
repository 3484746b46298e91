use log::debug;
use serde::{Deserialize, Serialize};

use crate::constitutive::{matching_p, matching_p_derivative};
use crate::error::{Error, Result};
use crate::linalg::{bicgstab, BandedMatrix};
use crate::memory_kernel::{split_implicit_coefficient, KernelQuadrature};

use super::{EdgeTag, Face, MacroModel, MacroState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonSettings {
    /// Convergence threshold on `‖R‖∞ / (φ |cell| / Δt)`.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub fraction_to_boundary: f64,
    /// Pressure/saturation passes per time step.
    pub coupling_passes: usize,
    /// Step halvings allowed after a Newton failure when the memory term is off.
    pub max_halvings: usize,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iter: 40,
            fraction_to_boundary: 0.995,
            coupling_passes: 1,
            max_halvings: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepReport {
    pub newton_iterations: usize,
    pub linear_iterations: usize,
    /// Final `‖R‖∞` divided by the residual scale.
    pub residual: f64,
    /// Largest bound violation of θ removed by the projection onto `[0, θ*]`.
    pub projection: f64,
    /// Wetting inflow rate through Dirichlet edges.
    pub influx: f64,
    /// `Σ |cell| Q_w` over all cells.
    pub source_total: f64,
    pub substeps: usize,
}

/// Implicit split of the memory source in each cell: `history + coef · g`.
pub(crate) struct MemorySplit {
    pub history: Vec<f64>,
    pub coefficient: f64,
}

struct Stencil {
    /// Per face: (other side, `K · area/distance`).
    faces: Vec<[(Face, f64); 4]>,
}

struct Eval {
    residual: Vec<f64>,
    influx: f64,
    source_total: f64,
}

/// Five-point Jacobian: diagonal then the four faces in stencil order.
struct Jacobian {
    rows: Vec<[f64; 5]>,
}

fn derivative<F: Fn(f64) -> f64>(f: F, s: f64) -> f64 {
    let h = 1e-7;
    let (a, b) = ((s - h).max(0.0), (s + h).min(1.0));
    (f(b) - f(a)) / (b - a)
}

struct Assembler<'a> {
    model: &'a MacroModel,
    stencil: Stencil,
    pressure: &'a [f64],
    s_old: &'a [f64],
    m0: &'a [f64],
    memory: Option<&'a MemorySplit>,
    accumulation: f64,
    area: f64,
}

impl Assembler<'_> {
    fn edge_values(&self, e: usize) -> (f64, f64, f64) {
        let ev = self.model.boundary.edges[e];
        (ev.theta, self.model.edge_saturation(e), ev.pressure)
    }

    fn evaluate(&self, theta: &[f64], jac: Option<&mut Jacobian>) -> Result<Eval> {
        let model = self.model;
        let n = theta.len();
        let s: Vec<f64> = theta.iter().map(|&t| model.table.inverse_clamped(t)).collect();
        let mut residual = vec![0.0; n];
        let mut influx = 0.0;
        let mut source_total = 0.0;
        let want_jac = jac.is_some();
        let (mut db, mut dlam, mut dlw) = (Vec::new(), Vec::new(), Vec::new());
        if want_jac {
            db = theta.iter().map(|&t| model.table.inverse_derivative(t)).collect();
            dlam = s.iter().map(|&x| derivative(|y| model.lambda_total(y), x)).collect();
            dlw = s.iter().map(|&x| derivative(|y| model.lambda_w(y), x)).collect();
        }
        let mut rows = jac;
        for c in 0..n {
            let mut r = self.accumulation * (s[c] - self.s_old[c]);
            let mut row = [0.0; 5];
            if want_jac {
                row[0] = self.accumulation * db[c];
            }
            let lam_c = model.lambda_total(s[c]);
            for (f, &(face, t)) in self.stencil.faces[c].iter().enumerate() {
                if t == 0.0 {
                    continue;
                }
                let (th_o, s_o, p_o) = match face {
                    Face::Cell(nb) => (theta[nb], s[nb], self.pressure[nb]),
                    Face::Edge(e) => self.edge_values(e),
                };
                let lam_bar = 0.5 * (lam_c + model.lambda_total(s_o));
                let dp = p_o - self.pressure[c];
                let upstream_is_other = dp > 0.0;
                let lw = if upstream_is_other { model.lambda_w(s_o) } else { model.lambda_w(s[c]) };
                let dth = th_o - theta[c];
                let flux_out = -t * (lam_bar * dth + lw * dp);
                r += flux_out;
                if let Face::Edge(_) = face {
                    influx -= flux_out;
                }
                if want_jac {
                    let mut dc = t * lam_bar - t * dth * 0.5 * dlam[c] * db[c];
                    if !upstream_is_other {
                        dc -= t * dp * dlw[c] * db[c];
                    }
                    row[0] += dc;
                    if let Face::Cell(nb) = face {
                        let mut dn = -t * lam_bar - t * dth * 0.5 * dlam[nb] * db[nb];
                        if upstream_is_other {
                            dn -= t * dp * dlw[nb] * db[nb];
                        }
                        row[f + 1] = dn;
                    }
                }
            }
            if let Some(mem) = self.memory {
                let g = matching_p(&model.rocks, s[c])? - self.m0[c];
                let q = mem.history[c] + mem.coefficient * g;
                source_total += self.area * q;
                r -= self.area * q;
                if want_jac {
                    row[0] -= self.area * mem.coefficient * matching_p_derivative(&model.rocks, s[c]) * db[c];
                }
            }
            if !r.is_finite() {
                return Err(Error::NonFinite {
                    step: 0,
                    what: format!("saturation residual in cell {c}"),
                });
            }
            residual[c] = r;
            if let Some(j) = rows.as_deref_mut() {
                j.rows[c] = row;
            }
        }
        Ok(Eval {
            residual,
            influx,
            source_total,
        })
    }
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn solve_linear(model: &MacroModel, stencil: &Stencil, jac: &Jacobian, rhs: &[f64]) -> Result<(Vec<f64>, usize)> {
    let n = rhs.len();
    let diag: Vec<f64> = jac.rows.iter().map(|r| r[0]).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        for c in 0..n {
            let row = &jac.rows[c];
            let mut acc = row[0] * x[c];
            for (f, &(face, _)) in stencil.faces[c].iter().enumerate() {
                if let Face::Cell(nb) = face {
                    acc += row[f + 1] * x[nb];
                }
            }
            y[c] = acc;
        }
    };
    let mut x = vec![0.0; n];
    match bicgstab(apply, &diag, rhs, &mut x, 1e-13, 4 * n.max(250)) {
        Ok(rep) => Ok((x, rep.iterations)),
        Err(_) => {
            debug!("BiCGSTAB failed, falling back to banded LU");
            let mut m = BandedMatrix::zeros(n, model.grid.nx);
            for c in 0..n {
                m.add(c, c, jac.rows[c][0]);
                for (f, &(face, _)) in stencil.faces[c].iter().enumerate() {
                    if let Face::Cell(nb) = face {
                        m.add(c, nb, jac.rows[c][f + 1]);
                    }
                }
            }
            Ok((m.solve(rhs)?, 0))
        }
    }
}

fn build_stencil(model: &MacroModel) -> Stencil {
    let grid = &model.grid;
    let k = &model.coeffs.permeability;
    let faces = (0..grid.cells())
        .map(|c| {
            grid.faces(c).map(|(face, geom, axis)| {
                let t = match face {
                    Face::Edge(e) if grid.tags[e] == EdgeTag::Impermeable => 0.0,
                    _ => k[axis][axis] * geom,
                };
                (face, t)
            })
        })
        .collect();
    Stencil { faces }
}

/// One backward-Euler solve for θ over `dt` from `state`, which is left
/// untouched. Returns the new θ (projected onto `[0, θ*]`) and the report.
pub(crate) fn solve_theta(
    model: &MacroModel,
    state: &MacroState,
    dt: f64,
    memory: Option<&MemorySplit>,
    settings: &NewtonSettings,
) -> Result<(Vec<f64>, StepReport)> {
    let theta_star = model.table.theta_star();
    let asm = Assembler {
        model,
        stencil: build_stencil(model),
        pressure: &state.pressure,
        s_old: &state.saturation,
        m0: &state.matched_initial,
        memory,
        accumulation: model.coeffs.porosity * model.grid.cell_area() / dt,
        area: model.grid.cell_area(),
    };
    let scale = asm.accumulation;
    let n = state.theta.len();
    let mut theta = state.theta.clone();
    let mut jac = Jacobian { rows: vec![[0.0; 5]; n] };
    let mut eval = asm.evaluate(&theta, Some(&mut jac))?;
    let mut norm = inf_norm(&eval.residual) / scale;
    let mut history = vec![norm];
    let mut report = StepReport::default();

    while norm > settings.rel_tol {
        if report.newton_iterations >= settings.max_iter {
            return Err(Error::Newton {
                iterations: report.newton_iterations,
                history,
            });
        }
        report.newton_iterations += 1;
        let rhs: Vec<f64> = eval.residual.iter().map(|r| -r).collect();
        let (step, lin_it) = solve_linear(model, &asm.stencil, &jac, &rhs)?;
        report.linear_iterations += lin_it;

        let mut alpha: f64 = 1.0;
        for (t, d) in theta.iter().zip(&step) {
            if *d > 0.0 {
                alpha = alpha.min(settings.fraction_to_boundary * (theta_star - t) / d);
            } else if *d < 0.0 {
                alpha = alpha.min(settings.fraction_to_boundary * t / -d);
            }
        }
        alpha = alpha.max(0.0);

        let mut accepted = None;
        for _ in 0..30 {
            let trial: Vec<f64> = theta.iter().zip(&step).map(|(t, d)| t + alpha * d).collect();
            let e = asm.evaluate(&trial, None)?;
            let trial_norm = inf_norm(&e.residual) / scale;
            if trial_norm < (1.0 - 1e-4 * alpha) * norm {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(trial) = accepted else {
            history.push(norm);
            return Err(Error::Newton {
                iterations: report.newton_iterations,
                history,
            });
        };
        theta = trial;
        eval = asm.evaluate(&theta, Some(&mut jac))?;
        norm = inf_norm(&eval.residual) / scale;
        history.push(norm);
    }

    let mut violation = 0.0f64;
    for t in theta.iter_mut() {
        let v = (-*t).max(*t - theta_star).max(0.0);
        violation = violation.max(v);
        *t = t.clamp(0.0, theta_star);
    }
    if violation > 0.0 {
        debug!("theta projection removed a violation of {violation:.3e}");
        eval = asm.evaluate(&theta, None)?;
    }
    report.residual = norm;
    report.projection = violation;
    report.influx = eval.influx;
    report.source_total = eval.source_total;
    report.substeps = 1;
    Ok((theta, report))
}

/// Advances θ by one backward-Euler step of length `q.dt()` with the memory
/// source, using the pressure already stored in `state`.
///
/// On success `state` holds the new θ and `S_f`, the memory history gains
/// one sample per cell and the step counter advances; on failure it is
/// unchanged. With a zero kernel amplitude a failed Newton solve is retried
/// on halved sub-steps.
pub fn saturation_step(
    model: &MacroModel,
    state: &mut MacroState,
    q: &KernelQuadrature,
    settings: &NewtonSettings,
) -> Result<StepReport> {
    let dt = q.dt();
    let n_next = state.step + 1;
    let amplitude = model.coeffs.kernel_amplitude;
    let split = if amplitude > 0.0 {
        let mut history = Vec::with_capacity(state.theta.len());
        let mut coefficient = 0.0;
        for h in &state.histories {
            let (hist, coef) = split_implicit_coefficient(q, h, amplitude, n_next)?;
            history.push(hist);
            coefficient = coef;
        }
        Some(MemorySplit { history, coefficient })
    } else {
        None
    };

    let (theta, report) = match solve_theta(model, state, dt, split.as_ref(), settings) {
        Ok(v) => v,
        Err(e @ Error::Newton { .. }) if split.is_none() && settings.max_halvings > 0 => {
            debug!("Newton failed at step {n_next}, halving the step");
            substep(model, state, dt, settings, 1).map_err(|_| e)?
        }
        Err(e) => return Err(e.context(format!("saturation step {n_next}"))),
    };

    state.saturation = theta.iter().map(|&t| model.table.inverse_clamped(t)).collect();
    state.theta = theta;
    for (c, h) in state.histories.iter_mut().enumerate() {
        h.push(matching_p(&model.rocks, state.saturation[c])? - state.matched_initial[c]);
    }
    state.step = n_next;
    state.time += dt;
    Ok(report)
}

fn substep(
    model: &MacroModel,
    state: &MacroState,
    dt: f64,
    settings: &NewtonSettings,
    depth: usize,
) -> Result<(Vec<f64>, StepReport)> {
    let half = 0.5 * dt;
    let mut work = state.clone();
    let mut total = StepReport::default();
    for _ in 0..2 {
        let (theta, rep) = match solve_theta(model, &work, half, None, settings) {
            Ok(v) => v,
            Err(Error::Newton { .. }) if depth < settings.max_halvings => substep(model, &work, half, settings, depth + 1)?,
            Err(e) => return Err(e),
        };
        work.saturation = theta.iter().map(|&t| model.table.inverse_clamped(t)).collect();
        work.theta = theta;
        total.newton_iterations += rep.newton_iterations;
        total.linear_iterations += rep.linear_iterations;
        total.residual = total.residual.max(rep.residual);
        total.projection = total.projection.max(rep.projection);
        // rates averaged over the full step
        total.influx += 0.5 * rep.influx;
        total.substeps += rep.substeps;
    }
    Ok((work.theta, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macro_solver::tests::model_with;
    use crate::macro_solver::{pressure_solve, simulate, BoundaryData, EdgeValue};

    const WATERFLOOD: [EdgeTag; 4] = [EdgeTag::Injection, EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable];

    fn flood(nx: usize, ny: usize, amplitude: f64) -> MacroModel {
        let probe = model_with(nx, ny, WATERFLOOD, BoundaryData::uniform(0.0, 0.0), 0.0);
        let mut bd = BoundaryData::uniform(0.0, probe.table.beta(0.1));
        bd.edges[0] = EdgeValue {
            pressure: 1.0,
            theta: probe.table.theta_star(),
        };
        model_with(nx, ny, WATERFLOOD, bd, amplitude)
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let probe = model_with(6, 5, WATERFLOOD, BoundaryData::uniform(0.3, 0.0), 0.0);
        let th = probe.table.beta(0.35);
        let m = model_with(6, 5, WATERFLOOD, BoundaryData::uniform(0.3, th), 0.0);
        let st = MacroState::uniform(&m, 0.35).unwrap();
        let (end, _, diag) = simulate(&m, st.clone(), 0.01, 5, &NewtonSettings::default()).unwrap();
        for c in 0..m.grid.cells() {
            assert!((end.theta[c] - st.theta[c]).abs() < 1e-14);
            assert!((end.pressure[c] - 0.3).abs() < 1e-12);
        }
        assert!(diag.newton_iterations.iter().all(|&k| k == 0));
    }

    #[test]
    fn waterflood_conserves_mass_and_respects_bounds() {
        let m = flood(16, 8, 0.25);
        let st = MacroState::uniform(&m, 0.1).unwrap();
        let (end, _, diag) = simulate(&m, st, 5e-3, 40, &NewtonSettings::default()).unwrap();
        assert!(diag.mass_balance_error < 1e-8, "{}", diag.mass_balance_error);
        assert!(diag.max_projection <= 1e-8 * m.table.theta_star());
        assert!(end.theta.iter().all(|&t| (0.0..=m.table.theta_star()).contains(&t)));
        assert!(diag.source_total.iter().all(|&q| q <= 0.0));
        assert!(diag.mass.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn memory_term_delays_the_front() {
        let with = flood(16, 4, 0.25);
        let without = flood(16, 4, 0.0);
        let s = NewtonSettings::default();
        let (a, _, _) = simulate(&with, MacroState::uniform(&with, 0.1).unwrap(), 5e-3, 40, &s).unwrap();
        let (b, _, _) = simulate(&without, MacroState::uniform(&without, 0.1).unwrap(), 5e-3, 40, &s).unwrap();
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        assert!(sum(&a.saturation) < sum(&b.saturation));
        // monotone profile away from the injection edge in each row
        for row in 0..4 {
            let r = &b.saturation[row * 16..(row + 1) * 16];
            assert!(r.windows(2).all(|w| w[1] <= w[0] + 1e-12));
            assert!(r[0] > 0.5 && r[15] < r[0]);
        }
    }

    #[test]
    fn failed_state_is_left_untouched() {
        let m = flood(6, 2, 0.2);
        let mut st = MacroState::uniform(&m, 0.1).unwrap();
        pressure_solve(&m, &mut st).unwrap();
        let before = st.clone();
        let q = KernelQuadrature::new(0.01, 4).unwrap();
        let tight = NewtonSettings {
            max_iter: 0,
            ..Default::default()
        };
        assert!(saturation_step(&m, &mut st, &q, &tight).is_err());
        assert_eq!(st, before);
        saturation_step(&m, &mut st, &q, &NewtonSettings::default()).unwrap();
        assert_eq!(st.step, 1);
        assert_eq!(st.histories[0].steps(), 1);
    }
}
