use std::collections::BTreeMap;
use std::sync::Arc;

use rayon::prelude::*;
use serde_json::{json, Value};

use crate::cell_problems::{asymptote_study, WarrenRootCell};
use crate::constitutive::KirchhoffTable;
use crate::error::Result;
use crate::macro_solver::{
    delta_sweep, limit_coefficients, rescaled_level_coefficients, simulate, time_continuity, BoundaryData,
    CoefficientSpec, EdgeTag, EdgeValue, MacroGrid, MacroModel, MacroState, NewtonSettings, SweepSetup,
};
use crate::matrix_block::{
    block_asymptote_study, compare_sources, laplace_block_integral_refined, BlockProblem, DEFAULT_STRETCH,
};
use crate::memory_kernel::{kernel_amplitude, kernel_check};
use crate::reference::{block_integral_1d, block_integral_cube};

use super::checks::constitutive_suite;
use super::config::{resolve_psi, ExperimentConfig, LevelConfig};
use super::output::{csv, num, snapshot_csv, snapshot_name, timeseries_csv, OutputSet};
use super::CriterionResult;

/// Lags, in steps, of the time-continuity diagnostic.
pub const CONTINUITY_LAGS: [usize; 3] = [2, 4, 8];

#[derive(Debug, Default)]
pub(crate) struct Outcome {
    pub metrics: BTreeMap<String, f64>,
    pub criteria: BTreeMap<String, CriterionResult>,
    pub details: serde_json::Map<String, Value>,
    pub files: OutputSet,
}

impl Outcome {
    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }

    /// Records a criterion whose headline value is the metric `metric`.
    fn criterion(&mut self, name: &str, metric: &str, threshold: &str, passed: bool) {
        let value = self.metrics.get(metric).copied().unwrap_or(f64::NAN);
        self.criteria.insert(
            name.into(),
            CriterionResult {
                metric: metric.into(),
                value,
                threshold: threshold.into(),
                passed,
            },
        );
    }
}

/// Fracture model, initial saturation and coefficient inputs described by
/// the configuration.
pub fn build_model(cfg: &ExperimentConfig) -> Result<(MacroModel, CoefficientSpec)> {
    let rocks = cfg.rocks.build()?;
    let table = Arc::new(KirchhoffTable::build(&rocks.fracture)?);
    let spec = CoefficientSpec {
        dim: cfg.model.d,
        sigma_d: cfg.model.sigma(),
        psi_m: resolve_psi(cfg, &rocks, &table)?,
        cell_resolution: cfg.model.cell_resolution,
    };
    let coeffs = match cfg.model.level {
        LevelConfig::Limit => limit_coefficients(&rocks, &spec)?,
        LevelConfig::Delta(d) => rescaled_level_coefficients(&rocks, &spec, d)?,
    };
    let g = &cfg.grid;
    let grid = MacroGrid::new(g.lx, g.ly, g.nx, g.ny, g.tags.as_array())?;
    let mut boundary = BoundaryData::uniform(0.0, 0.0);
    for (k, entry) in cfg.boundary.edges().into_iter().enumerate() {
        if let Some(e) = entry {
            let theta = match (e.theta_gamma, e.s_gamma) {
                (Some(t), _) => t,
                (None, Some(s)) => table.beta(s),
                (None, None) => 0.0,
            };
            boundary.edges[k] = EdgeValue {
                pressure: e.p_gamma,
                theta,
            };
        }
    }
    Ok((MacroModel::new(coeffs, grid, boundary, rocks, table)?, spec))
}

/// Largest `|θ − θ⁰| / θ*` after a few steps from uniform data whose
/// boundary values match the interior.
pub fn equilibrium_drift(model: &MacroModel, s0: f64, dt: f64, settings: &NewtonSettings) -> Result<f64> {
    let mut m = model.clone();
    let theta = m.table.beta(s0);
    for (k, tag) in m.grid.tags.iter().enumerate() {
        if *tag == EdgeTag::Injection {
            m.boundary.edges[k] = EdgeValue { pressure: 0.0, theta };
        }
    }
    let start = MacroState::uniform(&m, s0)?;
    let (end, _, _) = simulate(&m, start.clone(), dt, 3, settings)?;
    let drift = end
        .theta
        .iter()
        .zip(&start.theta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(drift / m.table.theta_star())
}

fn bookkeeping(out: &mut Outcome, mass_balance: f64, projection: f64, drift: f64, theta_star: f64) {
    out.metric("mass_balance_error", mass_balance);
    out.metric("max_projection", projection);
    out.metric("equilibrium_drift", drift);
    let passed = mass_balance <= 1e-8 && projection <= 1e-8 * theta_star && drift <= 1e-10;
    out.criterion(
        "weak_form_bookkeeping",
        "mass_balance_error",
        "mass balance <= 1e-8; projection <= 1e-8 theta*; equilibrium drift <= 1e-10",
        passed,
    );
}

fn continuity(out: &mut Outcome, rows: &[(f64, f64)], exponent: f64) {
    out.metric("time_continuity_exponent", exponent);
    out.details.insert("time_continuity".into(), json!(rows));
    out.criterion("time_continuity", "time_continuity_exponent", ">= 0.4", exponent >= 0.4);
}

pub(crate) fn run_simulate(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (model, spec) = build_model(cfg)?;
    let init = MacroState::uniform(&model, cfg.initial.s_f0)?;
    let (end, traj, diag) = simulate(&model, init, cfg.time.dt, cfg.time.nsteps, &cfg.newton)?;
    let drift = equilibrium_drift(&model, cfg.initial.s_f0, cfg.time.dt, &cfg.newton)?;

    let mut out = Outcome::default();
    out.metric("final_mass", *diag.mass.last().unwrap());
    out.metric("grad_p_l2h1", diag.grad_p_l2h1);
    out.metric("grad_theta_l2h1", diag.grad_theta_l2h1);
    out.metric("max_newton_residual", diag.max_newton_residual);
    out.metric("max_newton_iterations", diag.newton_iterations.iter().copied().max().unwrap_or(0) as f64);
    out.metric("kernel_amplitude", model.coeffs.kernel_amplitude);
    out.metric("psi_m", spec.psi_m);
    bookkeeping(&mut out, diag.mass_balance_error, diag.max_projection, drift, model.table.theta_star());
    if traj.saturation.len() > CONTINUITY_LAGS[2] {
        let (rows, exponent) = time_continuity(&model, &traj, &CONTINUITY_LAGS)?;
        continuity(&mut out, &rows, exponent);
    }
    out.details.insert("coefficients".into(), json!(model.coeffs));
    out.details.insert("final_step".into(), json!(end.step));

    let (nx, ny) = (model.grid.nx, model.grid.ny);
    let every = cfg.snapshots.snapshot_every.max(1);
    let last = traj.saturation.len() - 1;
    for (step, s) in traj.saturation.iter().enumerate() {
        if step % every == 0 || step == last {
            out.files.add(snapshot_name(step), snapshot_csv(s, nx, ny, traj.times[step]));
        }
    }
    out.files.add("timeseries.csv", timeseries_csv(&diag));
    Ok(out)
}

pub(crate) fn run_delta_sweep(cfg: &ExperimentConfig) -> Result<Outcome> {
    let (model, spec) = build_model(cfg)?;
    let setup = SweepSetup {
        spec,
        initial_saturation: vec![cfg.initial.s_f0; model.grid.cells()],
        dt: cfg.time.dt,
        steps: cfg.time.nsteps,
        settings: cfg.newton,
        continuity_lags: if cfg.time.nsteps >= CONTINUITY_LAGS[2] {
            CONTINUITY_LAGS.to_vec()
        } else {
            Vec::new()
        },
    };
    let rep = delta_sweep(&model, &setup, &cfg.delta_sweep.deltas)?;
    let drift = equilibrium_drift(&model, cfg.initial.s_f0, cfg.time.dt, &cfg.newton)?;

    let mut out = Outcome::default();
    let mut worst_ratio = 0.0f64;
    for w in rep.levels.windows(2) {
        worst_ratio = worst_ratio.max(w[1].error / w[0].error);
    }
    if rep.levels.len() < 2 {
        worst_ratio = f64::NAN;
    }
    for l in &rep.levels {
        out.metric(format!("error_delta_{}", l.requested_delta), l.error);
    }
    out.metric("max_error_ratio", worst_ratio);
    out.metric("gradient_spread", rep.gradient_spread());
    out.metric("observed_rate", rep.observed_rate().unwrap_or(f64::NAN));
    out.metric("limit_grad_p_l2h1", rep.limit.grad_p_l2h1);
    out.metric("limit_grad_theta_l2h1", rep.limit.grad_theta_l2h1);
    out.metric("limit_final_mass", rep.limit.final_mass);
    out.criterion(
        "delta_convergence",
        "max_error_ratio",
        "E(delta) strictly decreasing",
        rep.levels.len() >= 2 && rep.strictly_decreasing(),
    );
    out.criterion(
        "uniform_estimates",
        "gradient_spread",
        "<= 2",
        rep.gradient_spread() <= 2.0,
    );
    let runs = std::iter::once(&rep.limit).chain(rep.levels.iter().map(|l| &l.run));
    let (mb, proj) = runs.fold((0.0f64, 0.0f64), |(a, b), r| (a.max(r.mass_balance_error), b.max(r.max_projection)));
    bookkeeping(&mut out, mb, proj, drift, model.table.theta_star());
    if let Some(e) = rep.limit_continuity_exponent {
        continuity(&mut out, &rep.limit_continuity, e);
    }

    let rows = rep.levels.iter().map(|l| {
        vec![
            num(l.requested_delta),
            num(l.delta),
            num(l.error),
            num(l.grad_p_ratio),
            num(l.grad_theta_ratio),
            num(l.run.mass_balance_error),
        ]
    });
    out.files.add(
        "sweep.csv",
        csv(&["delta", "delta_snapped", "error", "grad_P_ratio", "grad_theta_ratio", "mass_balance"], rows),
    );
    out.files.add("limit/timeseries.csv", timeseries_csv(&rep.limit.diagnostics));
    for l in &rep.levels {
        out.files.add(format!("delta_{}/timeseries.csv", l.requested_delta), timeseries_csv(&l.run.diagnostics));
    }
    out.details.insert("sweep".into(), serde_json::to_value(&rep)?);
    Ok(out)
}

pub(crate) fn run_cell_perm(cfg: &ExperimentConfig) -> Result<Outcome> {
    let c = &cfg.cell_perm;
    let kf = c.kf.unwrap_or(cfg.rocks.fracture.k);
    let rep = asymptote_study(c.d, kf, &c.deltas, c.n)?;
    let mut out = Outcome::default();
    let max_off = rep.rows.iter().map(|r| r.max_offdiag_ratio).fold(0.0, f64::max);
    let band = rep.k_hat_upper / rep.k_hat_lower;
    out.metric("k_star", rep.k_star);
    out.metric("extrapolated_limit", rep.extrapolated_limit);
    out.metric("limit_relative_gap", rep.limit_relative_gap());
    out.metric("max_offdiag_ratio", max_off);
    out.metric("residual_decay_exponent", rep.decay_exponent);
    out.metric("k_hat_lower", rep.k_hat_lower);
    out.metric("k_hat_upper", rep.k_hat_upper);
    out.metric("k_hat_ratio", band);
    out.criterion(
        "permeability_asymptote",
        "limit_relative_gap",
        "<= 0.02; off-diagonal <= 1e-8 K11; residual decreasing",
        rep.limit_relative_gap() <= 0.02 && max_off <= 1e-8 && rep.residual_monotone(),
    );
    out.criterion("ellipticity_band", "k_hat_ratio", "<= 10", band <= 10.0);

    let d = c.d;
    let mut header = vec!["delta".to_string(), "n".to_string()];
    for i in 0..d {
        for j in i..d {
            header.push(format!("K{}{}", i + 1, j + 1));
        }
    }
    header.extend(["Yf_measure", "K11_over_Yf", "requested_delta"].map(String::from));
    let rows = rep.rows.iter().map(|r| {
        let mut row = vec![num(r.delta), r.n.to_string()];
        for i in 0..d {
            for j in i..d {
                row.push(num(r.tensor[i * d + j]));
            }
        }
        row.extend([num(r.fracture_measure), num(r.k11_over_yf), num(r.requested_delta)]);
        row
    });
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    out.files.add("cellperm.csv", csv(&header, rows));
    out.details.insert("asymptote".into(), serde_json::to_value(&rep)?);
    Ok(out)
}

/// Closed-form or series value of the block integral where one exists.
fn block_oracle(cell: &WarrenRootCell, mu: f64) -> Option<f64> {
    match cell.dim() {
        1 => Some(block_integral_1d(cell.block_edge(), mu)),
        3 => Some(block_integral_cube(cell.block_edge(), mu)),
        _ => None,
    }
}

pub(crate) fn run_block_asymptotics(cfg: &ExperimentConfig) -> Result<Outcome> {
    let b = &cfg.block_asymptotics;
    let (phi, k) = (cfg.rocks.matrix.phi, cfg.rocks.matrix.k);
    let sigma = b.sigma_d.unwrap_or(2.0 * b.d as f64);
    let mu = |cell: &WarrenRootCell, lambda: f64| (lambda * phi / (cell.delta().powi(2) * k * b.psi_m)).sqrt();
    let fd = |cell: &WarrenRootCell, lambda: f64| -> Result<f64> {
        let block = BlockProblem::new(*cell, phi, k, b.psi_m, b.n)?;
        Ok(laplace_block_integral_refined(&block, lambda)?.extrapolated)
    };
    let rows = block_asymptote_study(b.d, &b.deltas, &b.lambdas, phi, k, b.psi_m, sigma, |cell, lambda| {
        match block_oracle(cell, mu(cell, lambda)) {
            Some(v) => Ok(v),
            None => fd(cell, lambda),
        }
    })?;
    let fd_values: Vec<f64> = rows
        .par_iter()
        .map(|r| fd(&WarrenRootCell::new(b.d, r.delta)?, r.lambda))
        .collect::<Result<_>>()?;
    let has_oracle = b.d != 2;
    let fd_err: Vec<f64> = rows
        .iter()
        .zip(&fd_values)
        .map(|(r, v)| if has_oracle { ((v - r.integral) / r.integral).abs() } else { f64::NAN })
        .collect();

    let mut slab = Vec::new();
    if b.slab_n > 0 {
        for &delta in &b.deltas {
            for &lambda in &b.lambdas {
                let cell = WarrenRootCell::new(1, delta)?;
                let block = BlockProblem::with_grid(cell, phi, k, b.psi_m, (b.psi_m, b.psi_m), b.slab_n, DEFAULT_STRETCH)?;
                let got = laplace_block_integral_refined(&block, lambda)?.extrapolated;
                let exact = block_integral_1d(cell.block_edge(), mu(&cell, lambda));
                slab.push(json!({"delta": delta, "lambda": lambda, "fd": got, "exact": exact,
                    "rel_error": ((got - exact) / exact).abs()}));
            }
        }
    }
    let slab_err = slab
        .iter()
        .map(|v| v["rel_error"].as_f64().unwrap_or(f64::NAN))
        .fold(0.0, f64::max);

    let mut out = Outcome::default();
    let dev = rows.iter().map(|r| (r.ratio - 1.0).abs()).fold(0.0, f64::max);
    let fd_max = fd_err.iter().copied().fold(0.0, f64::max);
    out.metric("ratio_max_deviation", dev);
    for r in &rows {
        out.metric(format!("ratio_delta_{}_lambda_{}", r.delta, r.lambda), r.ratio);
    }
    out.metric("fd_oracle_max_rel_error", if has_oracle { fd_max } else { f64::NAN });
    if b.slab_n > 0 {
        out.metric("slab_max_rel_error", slab_err);
    }
    out.criterion(
        "block_asymptote",
        "ratio_max_deviation",
        "ratio within 0.05 of 1; FD vs oracle <= 1e-6; slab vs tanh <= 1e-8",
        dev <= 0.05 && has_oracle && fd_max <= 1e-6 && (b.slab_n == 0 || slab_err <= 1e-8),
    );
    let table = rows.iter().zip(fd_values.iter().zip(&fd_err)).map(|(r, (v, e))| {
        vec![num(r.delta), num(r.lambda), num(r.integral), num(r.ratio), num(*v), num(*e)]
    });
    out.files.add(
        "block_asym.csv",
        csv(&["delta", "lambda", "integral", "ratio", "fd_integral", "fd_rel_error"], table),
    );
    out.details.insert("rows".into(), serde_json::to_value(&rows)?);
    out.details.insert("slab".into(), Value::Array(slab));
    Ok(out)
}

pub(crate) fn run_kernel_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let dts = &cfg.kernel_check.dts;
    let rows = kernel_check(dts)?;
    let linear = rows.iter().filter(|r| r.case == "linear").map(|r| r.max_rel_error).fold(0.0, f64::max);
    let quad: Vec<_> = rows.iter().filter(|r| r.case == "quadratic").collect();
    let finest = quad
        .iter()
        .min_by(|a, b| a.dt.total_cmp(&b.dt))
        .map(|r| r.max_rel_error)
        .unwrap_or(f64::NAN);
    let order = quad.first().and_then(|r| r.observed_order).unwrap_or(f64::NAN);

    let mut out = Outcome::default();
    out.metric("linear_max_rel_error", linear);
    out.metric("quadratic_error_finest", finest);
    out.metric("quadratic_observed_order", order);
    out.criterion(
        "kernel_exactness",
        "quadratic_observed_order",
        "linear <= 1e-13; quadratic at finest dt <= 1e-3; order >= 1.4",
        linear <= 1e-13 && finest <= 1e-3 && order >= 1.4,
    );
    let table = rows.iter().map(|r| {
        vec![
            num(r.dt),
            r.case.clone(),
            num(r.max_rel_error),
            r.observed_order.map(num).unwrap_or_default(),
        ]
    });
    out.files.add("kernel_check.csv", csv(&["dt", "test_case", "max_rel_error", "observed_order"], table));
    out.details.insert("rows".into(), serde_json::to_value(&rows)?);
    Ok(out)
}

pub(crate) fn run_subgrid_compare(cfg: &ExperimentConfig) -> Result<Outcome> {
    let c = &cfg.subgrid_compare;
    let (phi, k) = (cfg.rocks.matrix.phi, cfg.rocks.matrix.k);
    let sigma = c.sigma_d.unwrap_or(2.0 * c.d as f64);
    let dt = c.t_end / c.nt as f64;
    let trace: Vec<f64> = (0..=c.nt)
        .map(|i| c.trace_start + (c.trace_end - c.trace_start) * i as f64 / c.nt as f64)
        .collect();
    let results = c
        .deltas
        .par_iter()
        .map(|&delta| {
            let cell = WarrenRootCell::new(c.d, delta)?;
            let block = BlockProblem::new(cell, phi, k, c.psi_m, c.n)?;
            let amp = kernel_amplitude(&block.cell, phi, k, c.psi_m, sigma)?;
            compare_sources(&block, &trace, dt, amp.d_delta).map_err(|e| e.context(format!("delta={delta}")))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut out = Outcome::default();
    for r in &results {
        out.metric(format!("relative_l2_delta_{}", r.delta), r.relative_l2);
    }
    let worst_ratio = if results.len() < 2 {
        f64::NAN
    } else {
        results
            .windows(2)
            .map(|w| w[1].relative_l2 / w[0].relative_l2)
            .fold(0.0, f64::max)
    };
    out.metric("max_discrepancy_ratio", worst_ratio);
    out.criterion(
        "kernel_reduction",
        "max_discrepancy_ratio",
        "discrepancy strictly decreasing in delta",
        results.len() >= 2 && worst_ratio < 1.0,
    );
    let mb = results.iter().map(|r| r.subgrid.mass_balance).fold(0.0, f64::max);
    out.metric("mass_balance_error", mb);
    out.criterion("weak_form_bookkeeping", "mass_balance_error", "sub-grid mass balance <= 1e-8", mb <= 1e-8);

    let mut rows = Vec::new();
    for r in &results {
        for (i, t) in r.subgrid.times.iter().enumerate() {
            rows.push(vec![num(r.delta), num(*t), num(r.subgrid.wetting[i]), num(r.kernel[i])]);
        }
    }
    out.files.add("source_compare.csv", csv(&["delta", "t", "Q_subgrid", "Q_kernel"], rows));
    let summary: Vec<Value> = results
        .iter()
        .map(|r| json!({"delta": r.delta, "relative_l2": r.relative_l2, "mass_balance": r.subgrid.mass_balance}))
        .collect();
    out.details.insert("comparisons".into(), Value::Array(summary));
    Ok(out)
}

pub(crate) fn run_constitutive_check(cfg: &ExperimentConfig) -> Result<Outcome> {
    let rocks = cfg.rocks.build()?;
    let checks = constitutive_suite(&rocks, cfg.seed, cfg.constitutive_check.samples)?;
    let mut out = Outcome::default();
    let failures = checks.iter().filter(|c| !c.passed).count();
    for c in &checks {
        out.metric(format!("worst_{}", c.name), c.worst);
    }
    out.metric("constitutive_failures", failures as f64);
    out.criterion("constitutive_suite", "constitutive_failures", "0 failed properties", failures == 0);
    let rows = checks.iter().map(|c| vec![c.name.clone(), num(c.worst), num(c.tolerance), c.passed.to_string()]);
    out.files.add("constitutive_check.csv", csv(&["check", "worst", "tolerance", "passed"], rows));
    out.details.insert("checks".into(), serde_json::to_value(&checks)?);
    Ok(out)
}
