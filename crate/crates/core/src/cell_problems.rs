//! Periodic corrector problems on the Warren–Root cell and the effective
//! permeability of the fracture network.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{conjugate_gradient, extrapolate_to_zero, loglog_slope, CgOptions};

/// Minimum number of grid cells across the full fracture thickness.
pub const MIN_FRACTURE_CELLS: usize = 8;

/// Unit cell `Y = (0,1)^d` holding a centred matrix cube of edge `1 − δ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WarrenRootCell {
    dim: usize,
    delta: f64,
}

impl WarrenRootCell {
    pub fn new(dim: usize, delta: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::param("d", format!("dimension {dim} not in 1..=3")));
        }
        if !(delta > 0.0 && delta < 1.0) {
            return Err(Error::param("delta", "fracture thickness must lie in (0, 1)"));
        }
        Ok(Self { dim, delta })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Edge length `1 − δ` of the matrix block.
    pub fn block_edge(&self) -> f64 {
        1.0 - self.delta
    }

    /// `|Y_m| = (1 − δ)^d`.
    pub fn matrix_measure(&self) -> f64 {
        self.block_edge().powi(self.dim as i32)
    }

    /// `|Y_f| = 1 − (1 − δ)^d`.
    pub fn fracture_measure(&self) -> f64 {
        1.0 - self.matrix_measure()
    }

    /// The nearest thickness whose fracture band is made of whole grid cells
    /// at resolution `n`, together with the band width in cells.
    pub fn snapped(&self, n: usize) -> Result<(Self, usize)> {
        let band = (n as f64 * self.delta / 2.0).round() as usize;
        if 2 * band < MIN_FRACTURE_CELLS {
            return Err(Error::Resolution(format!(
                "delta = {} spans {:.2} cells at n = {n}; need at least {MIN_FRACTURE_CELLS}",
                self.delta,
                n as f64 * self.delta
            )));
        }
        let snapped = Self::new(self.dim, 2.0 * band as f64 / n as f64)?;
        Ok((snapped, band))
    }
}

/// `Φ^δ = Φ_f |Y_f| / |Y_m|`.
pub fn effective_porosity(cell: &WarrenRootCell, phi_f: f64) -> f64 {
    phi_f * cell.fracture_measure() / cell.matrix_measure()
}

/// Compact indexing of the fracture cells of an `n^d` grid.
#[derive(Debug, Clone)]
struct FractureGrid {
    dim: usize,
    n: usize,
    /// `neighbors[c * 2d + 2m + s]`: neighbour of unknown `c` across its
    /// low (`s = 0`) or high (`s = 1`) face in direction `m`, if open.
    neighbors: Vec<u32>,
    degree: Vec<f64>,
    count: usize,
}

const CLOSED: u32 = u32::MAX;

impl FractureGrid {
    fn build(dim: usize, n: usize, band: usize) -> Self {
        let total = n.pow(dim as u32);
        let in_band = |i: usize| i < band || i >= n - band;
        let coords = |lin: usize| {
            let mut c = [0usize; 3];
            let mut r = lin;
            for item in c.iter_mut().take(dim) {
                *item = r % n;
                r /= n;
            }
            c
        };
        let mut index = vec![CLOSED; total];
        let mut count = 0usize;
        for (lin, slot) in index.iter_mut().enumerate() {
            let c = coords(lin);
            if c[..dim].iter().any(|&i| in_band(i)) {
                *slot = count as u32;
                count += 1;
            }
        }
        let stride: Vec<usize> = (0..dim).map(|m| n.pow(m as u32)).collect();
        let mut neighbors = vec![CLOSED; count * 2 * dim];
        let mut degree = vec![0.0; count];
        for lin in 0..total {
            let me = index[lin];
            if me == CLOSED {
                continue;
            }
            let c = coords(lin);
            for m in 0..dim {
                let lo = if c[m] == 0 { lin + (n - 1) * stride[m] } else { lin - stride[m] };
                let hi = if c[m] == n - 1 { lin - (n - 1) * stride[m] } else { lin + stride[m] };
                for (s, nb) in [lo, hi].into_iter().enumerate() {
                    let other = index[nb];
                    if other != CLOSED {
                        neighbors[me as usize * 2 * dim + 2 * m + s] = other;
                        degree[me as usize] += 1.0;
                    }
                }
            }
        }
        Self {
            dim,
            n,
            neighbors,
            degree,
            count,
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let w = 2 * self.dim;
        for (c, yc) in y.iter_mut().enumerate() {
            let mut acc = self.degree[c] * x[c];
            for &nb in &self.neighbors[c * w..(c + 1) * w] {
                if nb != CLOSED {
                    acc -= x[nb as usize];
                }
            }
            *yc = acc;
        }
    }

    /// Right-hand side `h Σ_{open faces} (e_j · normal)`.
    fn rhs(&self, axis: usize) -> Vec<f64> {
        let h = 1.0 / self.n as f64;
        let w = 2 * self.dim;
        (0..self.count)
            .map(|c| {
                let lo = self.neighbors[c * w + 2 * axis] != CLOSED;
                let hi = self.neighbors[c * w + 2 * axis + 1] != CLOSED;
                h * (hi as i32 - lo as i32) as f64
            })
            .collect()
    }
}

/// Periodic correctors and the assembled tensor for one cell and resolution.
#[derive(Debug, Clone)]
pub struct CellProblemSolution {
    /// Cell actually solved (thickness snapped to the grid).
    pub cell: WarrenRootCell,
    pub requested_delta: f64,
    pub n: usize,
    pub k_f: f64,
    /// `ξ_j` on the fracture cells, mean zero.
    pub correctors: Vec<Vec<f64>>,
    pub tensor: DMatrix<f64>,
    pub residuals: Vec<f64>,
    pub iterations: Vec<usize>,
}

impl CellProblemSolution {
    pub fn k_over_fracture_measure(&self, i: usize, j: usize) -> f64 {
        self.tensor[(i, j)] / self.cell.fracture_measure()
    }

    /// Extreme eigenvalues of `K / δ`, i.e. the range of
    /// `(1/δ) K ξ·ξ / |ξ|²`.
    pub fn ellipticity_range(&self) -> (f64, f64) {
        let eig = SymmetricEigen::new(self.tensor.clone() / self.cell.delta());
        let lo = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn is_positive_definite(&self) -> bool {
        self.tensor.clone().cholesky().is_some()
    }
}

fn check_args(cell: &WarrenRootCell, k_f: f64, n: usize) -> Result<(WarrenRootCell, usize)> {
    if cell.dim() < 2 {
        return Err(Error::param("d", "cell problems need d ≥ 2"));
    }
    if !(k_f > 0.0 && k_f.is_finite()) {
        return Err(Error::param("k_f", "must be positive"));
    }
    cell.snapped(n)
}

fn solve_on(grid: &FractureGrid, axis: usize) -> Result<(Vec<f64>, f64, usize)> {
    let b = grid.rhs(axis);
    let mut x = vec![0.0; grid.count];
    let opts = CgOptions {
        rel_tol: 1e-12,
        max_iter: 50 * grid.n + 10_000,
        project_mean: true,
    };
    let report = conjugate_gradient(|v, out| grid.apply(v, out), &grid.degree, &b, &mut x, opts)
        .map_err(|e| e.context(format!("corrector {axis} at n = {}", grid.n)))?;
    Ok((x, report.relative_residual, report.iterations))
}

/// Solves `−Δ ξ_j = 0` in the fracture part with no flux through the
/// matrix boundary and periodicity on `∂Y`, for `j` in `0..d`.
pub fn solve_corrector(cell: &WarrenRootCell, axis: usize, k_f: f64, n: usize) -> Result<Vec<f64>> {
    let (snapped, band) = check_args(cell, k_f, n)?;
    if axis >= snapped.dim() {
        return Err(Error::param("j", format!("axis {axis} out of range")));
    }
    let grid = FractureGrid::build(snapped.dim(), n, band);
    Ok(solve_on(&grid, axis)?.0)
}

/// Assembles `K_ij = (k_f/|Y_m|) ∫_{Y_f} (∇ξ_i + e_i)·(∇ξ_j + e_j)` by
/// face-midpoint quadrature.
pub fn effective_perm(cell: &WarrenRootCell, k_f: f64, n: usize) -> Result<CellProblemSolution> {
    let (snapped, band) = check_args(cell, k_f, n)?;
    let d = snapped.dim();
    let grid = FractureGrid::build(d, n, band);
    let solved: Vec<_> = (0..d)
        .into_par_iter()
        .map(|axis| solve_on(&grid, axis))
        .collect::<Result<_>>()?;
    let h = 1.0 / n as f64;
    let vol = h.powi(d as i32);
    let w = 2 * d;
    let mut tensor = DMatrix::zeros(d, d);
    let mut grad = vec![0.0; d];
    for c in 0..grid.count {
        for m in 0..d {
            let nb = grid.neighbors[c * w + 2 * m + 1];
            if nb == CLOSED {
                continue;
            }
            for (i, g) in grad.iter_mut().enumerate() {
                let xi = &solved[i].0;
                *g = (xi[nb as usize] - xi[c]) / h + if i == m { 1.0 } else { 0.0 };
            }
            for i in 0..d {
                for j in 0..d {
                    tensor[(i, j)] += vol * grad[i] * grad[j];
                }
            }
        }
    }
    tensor *= k_f / snapped.matrix_measure();
    let tensor = (&tensor + tensor.transpose()) * 0.5;
    let (correctors, stats): (Vec<_>, Vec<_>) = solved.into_iter().map(|(x, r, it)| (x, (r, it))).unzip();
    Ok(CellProblemSolution {
        cell: snapped,
        requested_delta: cell.delta(),
        n,
        k_f,
        correctors,
        tensor,
        residuals: stats.iter().map(|s| s.0).collect(),
        iterations: stats.iter().map(|s| s.1).collect(),
    })
}

/// Mesh-refinement extrapolation of `K_11` from three resolutions in ratio
/// two, all at the same snapped thickness.
#[derive(Debug, Clone, Serialize)]
pub struct RichardsonK11 {
    pub delta: f64,
    pub ns: Vec<usize>,
    pub values: Vec<f64>,
    /// Convergence order estimated from the three values.
    pub observed_order: f64,
    pub extrapolated: f64,
}

pub fn richardson_k11(cell: &WarrenRootCell, k_f: f64, ns: [usize; 3]) -> Result<RichardsonK11> {
    if ns[1] != 2 * ns[0] || ns[2] != 2 * ns[1] {
        return Err(Error::param("n", "resolutions must double"));
    }
    let sols: Vec<CellProblemSolution> = ns
        .par_iter()
        .map(|&n| effective_perm(cell, k_f, n))
        .collect::<Result<_>>()?;
    let d0 = sols[0].cell.delta();
    if sols.iter().any(|s| (s.cell.delta() - d0).abs() > 1e-14) {
        return Err(Error::Resolution(
            "resolutions snap the fracture thickness to different values".into(),
        ));
    }
    let v: Vec<f64> = sols.iter().map(|s| s.tensor[(0, 0)]).collect();
    // re-entrant corners of the fracture cross limit the order below two
    let ratio = (v[1] - v[0]) / (v[2] - v[1]);
    let order = ratio.log2();
    Ok(RichardsonK11 {
        delta: d0,
        ns: ns.to_vec(),
        observed_order: order,
        extrapolated: v[2] + (v[2] - v[1]) / (ratio - 1.0),
        values: v,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoteRow {
    pub requested_delta: f64,
    pub delta: f64,
    pub n: usize,
    /// Row-major `d × d` tensor.
    pub tensor: Vec<f64>,
    pub fracture_measure: f64,
    pub k11_over_yf: f64,
    /// Frobenius norm of `K/|Y_f| − k* I`.
    pub residual_norm: f64,
    pub ellipticity_min: f64,
    pub ellipticity_max: f64,
    pub max_offdiag_ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoteReport {
    pub dim: usize,
    pub k_f: f64,
    /// `(d − 1)/d · k_f`.
    pub k_star: f64,
    pub rows: Vec<AsymptoteRow>,
    /// Polynomial extrapolation of `K_11/|Y_f|` to `δ = 0`.
    pub extrapolated_limit: f64,
    pub decay_exponent: f64,
    pub k_hat_lower: f64,
    pub k_hat_upper: f64,
}

impl AsymptoteReport {
    pub fn residual_monotone(&self) -> bool {
        self.rows.windows(2).all(|w| w[1].residual_norm < w[0].residual_norm)
    }

    pub fn limit_relative_gap(&self) -> f64 {
        (self.extrapolated_limit - self.k_star).abs() / self.k_star
    }
}

pub fn limit_permeability(dim: usize, k_f: f64) -> f64 {
    (dim as f64 - 1.0) / dim as f64 * k_f
}

/// Effective permeability over a decreasing family of thicknesses.
pub fn asymptote_study(dim: usize, k_f: f64, deltas: &[f64], n: usize) -> Result<AsymptoteReport> {
    if deltas.is_empty() || deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("deltas", "must be non-empty and strictly decreasing"));
    }
    let cells: Vec<WarrenRootCell> = deltas
        .iter()
        .map(|&d| WarrenRootCell::new(dim, d))
        .collect::<Result<_>>()?;
    let sols: Vec<CellProblemSolution> = cells
        .par_iter()
        .map(|c| effective_perm(c, k_f, n))
        .collect::<Result<_>>()?;
    let k_star = limit_permeability(dim, k_f);
    let rows: Vec<AsymptoteRow> = sols
        .iter()
        .map(|s| {
            let yf = s.cell.fracture_measure();
            let resid = &s.tensor / yf - DMatrix::identity(dim, dim) * k_star;
            let (lo, hi) = s.ellipticity_range();
            let k11 = s.tensor[(0, 0)];
            let mut off = 0.0f64;
            for i in 0..dim {
                for j in 0..dim {
                    if i != j {
                        off = off.max(s.tensor[(i, j)].abs() / k11);
                    }
                }
            }
            AsymptoteRow {
                requested_delta: s.requested_delta,
                delta: s.cell.delta(),
                n,
                tensor: s.tensor.transpose().iter().cloned().collect(),
                fracture_measure: yf,
                k11_over_yf: k11 / yf,
                residual_norm: resid.norm(),
                ellipticity_min: lo,
                ellipticity_max: hi,
                max_offdiag_ratio: off,
            }
        })
        .collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.delta).collect();
    let ks: Vec<f64> = rows.iter().map(|r| r.k11_over_yf).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.residual_norm).collect();
    let decay = if rows.len() > 1 { loglog_slope(&ds, &norms) } else { f64::NAN };
    Ok(AsymptoteReport {
        dim,
        k_f,
        k_star,
        extrapolated_limit: extrapolate_to_zero(&ds, &ks),
        decay_exponent: decay,
        k_hat_lower: rows.iter().map(|r| r.ellipticity_min).fold(f64::INFINITY, f64::min),
        k_hat_upper: rows.iter().map(|r| r.ellipticity_max).fold(f64::NEG_INFINITY, f64::max),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn measures_partition_the_cell() {
        for d in 1..=3 {
            let c = WarrenRootCell::new(d, 0.1).unwrap();
            assert!((c.fracture_measure() + c.matrix_measure() - 1.0).abs() < 1e-15);
            let gap = (c.fracture_measure() - d as f64 * 0.1).abs();
            assert!(gap <= (d * (d - 1)) as f64 * 0.01 / 2.0 + 1e-12);
        }
    }

    #[test]
    fn porosity_closed_form() {
        let c = WarrenRootCell::new(2, 0.1).unwrap();
        assert!((effective_porosity(&c, 0.4) - 0.4 * 0.19 / 0.81).abs() < 1e-15);
        let thin = WarrenRootCell::new(3, 1e-4).unwrap();
        assert!((effective_porosity(&thin, 0.3) / 1e-4 - 0.9).abs() < 1e-3);
    }

    #[test]
    fn snapping_and_resolution() {
        let c = WarrenRootCell::new(2, 0.1).unwrap();
        let (s, band) = c.snapped(80).unwrap();
        assert_eq!(band, 4);
        assert!((s.delta() - 0.1).abs() < 1e-15);
        assert!(matches!(c.snapped(40), Err(Error::Resolution(_))));
    }

    #[test]
    fn operator_columns_sum_to_zero() {
        let g = FractureGrid::build(2, 16, 2);
        let mut col_sum = vec![0.0; g.count];
        let mut e = vec![0.0; g.count];
        let mut y = vec![0.0; g.count];
        for k in 0..g.count {
            e[k] = 1.0;
            g.apply(&e, &mut y);
            e[k] = 0.0;
            col_sum[k] = y.iter().sum();
        }
        assert!(col_sum.iter().all(|v| v.abs() < 1e-14));
        assert!(g.rhs(0).iter().sum::<f64>().abs() < 1e-14);
    }

    #[test]
    fn symmetric_cross_tensor() {
        let c = WarrenRootCell::new(2, 0.2).unwrap();
        let s = effective_perm(&c, 1.0, 40).unwrap();
        assert!(s.tensor[(0, 1)].abs() <= 1e-8 * s.tensor[(0, 0)]);
        assert!((s.tensor[(0, 0)] - s.tensor[(1, 1)]).abs() <= 1e-8 * s.tensor[(0, 0)]);
        assert!(s.is_positive_definite());
        assert!(s.residuals.iter().all(|&r| r <= 1e-10));
        for xi in &s.correctors {
            assert!(xi.iter().sum::<f64>().abs() / (xi.len() as f64) < 1e-12);
        }
    }

    #[test]
    fn matches_independent_sparse_solve() {
        // same discrete functional assembled with a direct sparse solver
        let c = WarrenRootCell::new(2, 0.2).unwrap();
        let s = effective_perm(&c, 1.0, 40).unwrap();
        assert!((s.tensor[(0, 0)] - 0.3291914147927313).abs() < 1e-10);
    }

    #[test]
    fn rejects_under_resolved_fracture() {
        let c = WarrenRootCell::new(2, 0.05).unwrap();
        assert!(matches!(solve_corrector(&c, 0, 1.0, 64), Err(Error::Resolution(_))));
    }
}
