//! Product-integration realization of the half-order memory source
//! `−∂_t[g ∗ D t^{−1/2}]` with full history storage.

use std::f64::consts::PI;

use serde::Serialize;

use crate::cell_problems::WarrenRootCell;
use crate::error::{Error, Result};
use crate::linalg::loglog_slope;
use crate::reference::power_convolution_rate;

/// Kernel moments `w_j = ∫_{(j−1)Δt}^{jΔt} s^{−1/2} ds` for a fixed step.
#[derive(Debug, Clone)]
pub struct KernelQuadrature {
    dt: f64,
    weights: Vec<f64>,
}

impl KernelQuadrature {
    pub fn new(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::param("dt", "time step must be positive"));
        }
        // rationalized form avoids the cancellation in √j − √(j−1)
        let root = dt.sqrt();
        let weights = (1..=steps.max(1))
            .map(|j| 2.0 * root / ((j as f64).sqrt() + ((j - 1) as f64).sqrt()))
            .collect();
        Ok(Self { dt, weights })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.weights.len()
    }

    /// `w_j` for `1 ≤ j ≤ steps`.
    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j - 1]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Samples `g^0, g^1, …` of the convolution argument for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    values: Vec<f64>,
}

impl Default for HistoryBuffer {
    fn default() -> Self {
        Self::new()
    }
}

impl HistoryBuffer {
    /// A fresh buffer holding `g^0 = 0`.
    pub fn new() -> Self {
        Self { values: vec![0.0] }
    }

    pub fn with_capacity(steps: usize) -> Self {
        let mut values = Vec::with_capacity(steps + 1);
        values.push(0.0);
        Self { values }
    }

    pub fn push(&mut self, g: f64) {
        self.values.push(g);
    }

    /// Number of completed steps.
    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn last(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn truncate(&mut self, steps: usize) {
        self.values.truncate(steps + 1);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelAmplitude {
    /// `σ_d √(Φ_m k_m ψ_m) / √π`.
    pub c_m: f64,
    /// `δ C_m / |Y_m|`, the amplitude at level δ.
    pub d_delta: f64,
    /// `C_m / d`, the amplitude of the homogenized model.
    pub limit: f64,
}

pub fn kernel_amplitude(
    cell: &WarrenRootCell,
    phi_m: f64,
    k_m: f64,
    psi_m: f64,
    sigma_d: f64,
) -> Result<KernelAmplitude> {
    for (name, v) in [("phi_m", phi_m), ("k_m", k_m), ("psi_m", psi_m), ("sigma_d", sigma_d)] {
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::param(name, "must be positive"));
        }
    }
    let c_m = sigma_d * (phi_m * k_m * psi_m).sqrt() / PI.sqrt();
    Ok(KernelAmplitude {
        c_m,
        d_delta: cell.delta() * c_m / cell.matrix_measure(),
        limit: c_m / cell.dim() as f64,
    })
}

fn check_history(q: &KernelQuadrature, h: &HistoryBuffer, n: usize) -> Result<()> {
    if h.values.is_empty() {
        return Err(Error::domain("empty history buffer"));
    }
    if n > h.steps() {
        return Err(Error::domain(format!(
            "step {n} requested but history holds {} steps",
            h.steps()
        )));
    }
    if n > q.steps() {
        return Err(Error::domain(format!(
            "step {n} beyond quadrature length {}",
            q.steps()
        )));
    }
    Ok(())
}

/// `−D Σ_{j=0}^{n−1} (g^{j+1} − g^j)/Δt · w_{n−j}`.
pub fn memory_source(q: &KernelQuadrature, h: &HistoryBuffer, amplitude: f64, n: usize) -> Result<f64> {
    check_history(q, h, n)?;
    let g = &h.values;
    let mut acc = 0.0;
    for j in 0..n {
        acc += (g[j + 1] - g[j]) * q.weights[n - j - 1];
    }
    Ok(-amplitude * acc / q.dt)
}

/// Splits the source at step `n` as `history + coefficient · g^n`.
///
/// Only `g^0..g^{n−1}` are read, so `h` may hold exactly `n` completed
/// steps.
pub fn split_implicit_coefficient(
    q: &KernelQuadrature,
    h: &HistoryBuffer,
    amplitude: f64,
    n: usize,
) -> Result<(f64, f64)> {
    if n == 0 {
        return Err(Error::domain("implicit split needs n ≥ 1"));
    }
    check_history(q, h, n - 1)?;
    if n > q.steps() {
        return Err(Error::domain(format!("step {n} beyond quadrature length {}", q.steps())));
    }
    let g = &h.values;
    let mut acc = 0.0;
    for j in 0..n - 1 {
        acc += (g[j + 1] - g[j]) * q.weights[n - j - 1];
    }
    acc -= g[n - 1] * q.weights[0];
    let coefficient = -amplitude * q.weights[0] / q.dt;
    Ok((-amplitude * acc / q.dt, coefficient))
}

#[derive(Debug, Clone, Serialize)]
pub struct KernelCheckRow {
    pub dt: f64,
    pub case: String,
    pub max_rel_error: f64,
    pub observed_order: Option<f64>,
}

/// Compares the discrete operator on `g = t^p` against the Beta-function
/// closed form at every step up to `horizon`.
pub fn power_law_error(p: u32, dt: f64, horizon: f64) -> Result<(f64, f64)> {
    let steps = (horizon / dt).round() as usize;
    let q = KernelQuadrature::new(dt, steps)?;
    let mut h = HistoryBuffer::with_capacity(steps);
    let mut max_rel = 0.0f64;
    let mut last = 0.0;
    for n in 1..=steps {
        let t = n as f64 * dt;
        h.push(t.powi(p as i32));
        let exact = -power_convolution_rate(p, t);
        let got = memory_source(&q, &h, 1.0, n)?;
        let rel = ((got - exact) / exact).abs();
        max_rel = max_rel.max(rel);
        last = rel;
    }
    Ok((max_rel, last))
}

/// Analytic-convolution validation suite: `g = t` (exact) and `g = t²`
/// (order about 3/2) on each step in `dts`, horizon `T = 1`.
pub fn kernel_check(dts: &[f64]) -> Result<Vec<KernelCheckRow>> {
    let mut rows = Vec::new();
    for &dt in dts {
        let (max_rel, _) = power_law_error(1, dt, 1.0)?;
        rows.push(KernelCheckRow {
            dt,
            case: "linear".into(),
            max_rel_error: max_rel,
            observed_order: None,
        });
    }
    let mut finals = Vec::new();
    for &dt in dts {
        let (_, at_t) = power_law_error(2, dt, 1.0)?;
        finals.push(at_t);
    }
    let order = if dts.len() > 1 {
        Some(loglog_slope(dts, &finals))
    } else {
        None
    };
    for (&dt, &e) in dts.iter().zip(&finals) {
        rows.push(KernelCheckRow {
            dt,
            case: "quadratic".into(),
            max_rel_error: e,
            observed_order: order,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_telescope() {
        let q = KernelQuadrature::new(0.01, 500).unwrap();
        let w = q.weights();
        assert!(w.windows(2).all(|p| p[0] > p[1] && p[1] > 0.0));
        let sum: f64 = w.iter().sum();
        assert!((sum - 2.0 * (500.0f64 * 0.01).sqrt()).abs() < 1e-13);
    }

    #[test]
    fn linear_argument_is_exact() {
        let (max_rel, _) = power_law_error(1, 1e-3, 1.0).unwrap();
        assert!(max_rel < 1e-13, "{max_rel}");
    }

    #[test]
    fn quadratic_argument_converges_at_three_halves() {
        let rows = kernel_check(&[4e-3, 2e-3, 1e-3]).unwrap();
        let quad: Vec<_> = rows.iter().filter(|r| r.case == "quadratic").collect();
        let order = quad[0].observed_order.unwrap();
        assert!(order > 1.4 && order < 1.6, "{order}");
        assert!(quad[2].max_rel_error < 1e-3);
    }

    #[test]
    fn zero_history_gives_zero() {
        let q = KernelQuadrature::new(0.1, 4).unwrap();
        let mut h = HistoryBuffer::new();
        for n in 1..=4 {
            h.push(0.0);
            assert_eq!(memory_source(&q, &h, 3.0, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn split_reassembles() {
        let q = KernelQuadrature::new(0.05, 6).unwrap();
        let mut h = HistoryBuffer::new();
        for (n, g) in [0.3, -0.1, 0.7, 0.2, 0.9, 0.4].into_iter().enumerate() {
            let (hist, c) = split_implicit_coefficient(&q, &h, 1.7, n + 1).unwrap();
            assert!(c < 0.0);
            assert!((c + 2.0 * 1.7 / 0.05f64.sqrt()).abs() < 1e-12);
            h.push(g);
            let full = memory_source(&q, &h, 1.7, n + 1).unwrap();
            assert!((hist + c * g - full).abs() < 1e-13 * full.abs().max(1.0));
        }
    }

    #[test]
    fn amplitude_of_reference_matrix() {
        let cell = WarrenRootCell::new(3, 0.02).unwrap();
        let a = kernel_amplitude(&cell, 0.2, 1.0, 1.0, 6.0).unwrap();
        assert!((a.c_m - 6.0 * 0.2f64.sqrt() / PI.sqrt()).abs() < 1e-15);
        assert!((a.c_m - 1.5139).abs() < 1e-4);
        assert!(a.d_delta <= 2.0 * 0.02 * a.c_m);
        assert!((a.limit - a.c_m / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_window_is_rejected() {
        let q = KernelQuadrature::new(0.1, 2).unwrap();
        let h = HistoryBuffer::new();
        assert!(memory_source(&q, &h, 1.0, 1).is_err());
        assert!(split_implicit_coefficient(&q, &h, 1.0, 0).is_err());
    }

    mod properties {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn linear_histories_are_exact(dt in 1e-3f64..0.5, slope in -5.0f64..5.0, amp in 0.1f64..3.0, steps in 1usize..60) {
                let q = KernelQuadrature::new(dt, steps).unwrap();
                let mut h = HistoryBuffer::new();
                for n in 1..=steps {
                    let t = n as f64 * dt;
                    h.push(slope * t);
                    let got = memory_source(&q, &h, amp, n).unwrap();
                    let want = -amp * slope * 2.0 * t.sqrt();
                    prop_assert!((got - want).abs() <= 1e-12 * want.abs().max(1e-300), "{} vs {}", got, want);
                }
            }

            #[test]
            fn increasing_histories_give_nonpositive_sources(
                increments in proptest::collection::vec(0.0f64..1.0, 1..40),
                dt in 1e-3f64..0.1,
            ) {
                let q = KernelQuadrature::new(dt, increments.len()).unwrap();
                let mut h = HistoryBuffer::new();
                let mut g = 0.0;
                for (n, inc) in increments.iter().enumerate() {
                    g += inc;
                    h.push(g);
                    prop_assert!(memory_source(&q, &h, 1.0, n + 1).unwrap() <= 0.0);
                }
            }

            #[test]
            fn split_matches_full_source(values in proptest::collection::vec(-1.0f64..1.0, 1..40), dt in 1e-3f64..0.1) {
                let q = KernelQuadrature::new(dt, values.len()).unwrap();
                let mut h = HistoryBuffer::new();
                for (n, &g) in values.iter().enumerate() {
                    let (hist, c) = split_implicit_coefficient(&q, &h, 0.8, n + 1).unwrap();
                    h.push(g);
                    let full = memory_source(&q, &h, 0.8, n + 1).unwrap();
                    prop_assert!((hist + c * g - full).abs() <= 1e-11 * full.abs().max(1.0 / dt.sqrt()));
                }
            }
        }
    }
}
