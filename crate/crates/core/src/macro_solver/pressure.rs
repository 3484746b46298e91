use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, CgOptions, CgReport};

use super::{EdgeTag, Face, MacroModel, MacroState};

fn harmonic(a: f64, b: f64) -> f64 {
    2.0 * a * b / (a + b)
}

/// Face transmissibilities `K · λ̄ · area/distance` in left, right, bottom,
/// top order; impermeable edges get zero.
pub(crate) fn pressure_transmissibilities(model: &MacroModel, saturation: &[f64]) -> Vec<[f64; 4]> {
    let grid = &model.grid;
    let k = &model.coeffs.permeability;
    let lam: Vec<f64> = saturation.iter().map(|&s| model.lambda_total(s)).collect();
    (0..grid.cells())
        .map(|c| {
            let mut t = [0.0; 4];
            for (f, (face, geom, axis)) in grid.faces(c).into_iter().enumerate() {
                let kk = k[axis][axis] * geom;
                t[f] = match face {
                    Face::Cell(nb) => kk * harmonic(lam[c], lam[nb]),
                    Face::Edge(e) if grid.tags[e] == EdgeTag::Injection => {
                        kk * harmonic(lam[c], model.lambda_total(model.edge_saturation(e)))
                    }
                    Face::Edge(_) => 0.0,
                };
            }
            t
        })
        .collect()
}

/// Two-point finite-volume solve of `div(λ_f K ∇𝖯) = 0` with Dirichlet
/// data on injection edges and no flux elsewhere.
///
/// The current pressure in `state` is the initial guess and is overwritten.
pub fn pressure_solve(model: &MacroModel, state: &mut MacroState) -> Result<CgReport> {
    let grid = &model.grid;
    if !grid.has_dirichlet() {
        return Err(Error::Config(
            "pressure problem is singular: no injection edge carries Dirichlet data".into(),
        ));
    }
    let n = grid.cells();
    let trans = pressure_transmissibilities(model, &state.saturation);
    let neighbours: Vec<[Face; 4]> = (0..n).map(|c| grid.faces(c).map(|f| f.0)).collect();

    let diag: Vec<f64> = trans.iter().map(|t| t.iter().sum()).collect();
    let mut rhs = vec![0.0; n];
    for c in 0..n {
        for f in 0..4 {
            if let Face::Edge(e) = neighbours[c][f] {
                rhs[c] += trans[c][f] * model.boundary.edges[e].pressure;
            }
        }
    }
    let apply = |x: &[f64], y: &mut [f64]| {
        for c in 0..n {
            let mut acc = diag[c] * x[c];
            for f in 0..4 {
                if let Face::Cell(nb) = neighbours[c][f] {
                    acc -= trans[c][f] * x[nb];
                }
            }
            y[c] = acc;
        }
    };
    let opts = CgOptions {
        rel_tol: 1e-12,
        max_iter: 50 * n.max(100),
        project_mean: false,
    };
    let report = conjugate_gradient(apply, &diag, &rhs, &mut state.pressure, opts)
        .map_err(|e| e.context("pressure solve"))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::macro_solver::tests::model_with;
    use crate::macro_solver::{BoundaryData, EdgeValue};

    #[test]
    fn uniform_data_gives_constant_pressure() {
        let m = model_with(8, 6, [EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable, EdgeTag::Impermeable], BoundaryData::uniform(2.5, 0.1), 0.0);
        let mut st = MacroState::uniform(&m, 0.4).unwrap();
        pressure_solve(&m, &mut st).unwrap();
        assert!(st.pressure.iter().all(|p| (p - 2.5).abs() < 1e-12));
    }

    #[test]
    fn linear_profile_between_dirichlet_edges() {
        let mut bd = BoundaryData::uniform(0.0, 0.1);
        bd.edges[0] = EdgeValue { pressure: 1.0, theta: 0.1 };
        let m = model_with(
            20,
            3,
            [EdgeTag::Injection, EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable],
            bd,
            0.0,
        );
        let s = 0.3;
        let mut st = MacroState::uniform(&m, s).unwrap();
        // uniform saturation inside and on both edges
        let th = m.table.beta(s);
        let mut m2 = m.clone();
        m2.boundary.edges[0].theta = th;
        m2.boundary.edges[1].theta = th;
        pressure_solve(&m2, &mut st).unwrap();
        let dx = m2.grid.dx();
        for c in 0..m2.grid.cells() {
            let x = (c % 20) as f64 * dx + 0.5 * dx;
            assert!((st.pressure[c] - (1.0 - x)).abs() < 1e-10, "{c}");
        }
    }

    #[test]
    fn interior_flux_divergence_vanishes() {
        let mut bd = BoundaryData::uniform(0.0, 0.05);
        bd.edges[0] = EdgeValue { pressure: 1.0, theta: 0.1 };
        let m = model_with(
            12,
            9,
            [EdgeTag::Injection, EdgeTag::Injection, EdgeTag::Impermeable, EdgeTag::Impermeable],
            bd,
            0.0,
        );
        let s0: Vec<f64> = (0..m.grid.cells()).map(|c| 0.1 + 0.8 * ((c * 37) % 101) as f64 / 101.0).collect();
        let mut st = MacroState::from_saturation(&m, &s0).unwrap();
        pressure_solve(&m, &mut st).unwrap();
        let t = pressure_transmissibilities(&m, &st.saturation);
        for c in 0..m.grid.cells() {
            let mut div = 0.0;
            for (f, (face, _, _)) in m.grid.faces(c).into_iter().enumerate() {
                let other = match face {
                    Face::Cell(nb) => st.pressure[nb],
                    Face::Edge(e) => m.boundary.edges[e].pressure,
                };
                div += t[c][f] * (st.pressure[c] - other);
            }
            assert!(div.abs() < 1e-10, "{c}: {div}");
        }
    }

    #[test]
    fn all_impermeable_is_rejected() {
        let m = model_with(4, 4, [EdgeTag::Impermeable; 4], BoundaryData::uniform(0.0, 0.1), 0.0);
        let mut st = MacroState::uniform(&m, 0.4).unwrap();
        assert!(matches!(pressure_solve(&m, &mut st), Err(Error::Config(_))));
    }
}
