//! Matrix-block physics on the cube of edge `1 − δ`: imbibition steps,
//! the Laplace-domain block problem and the sub-grid exchange source.
//!
//! Blocks are discretized with cell-centred finite volumes on a
//! tensor-product grid whose cells cluster towards the block surface, where
//! the thin-fissure boundary layers live. Separable linear problems are
//! solved exactly by fast diagonalization.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::cell_problems::WarrenRootCell;
use crate::constitutive::KirchhoffTable;
use crate::error::{Error, Result};
use crate::linalg::{bicgstab, dot, extrapolate_to_zero, solve_tridiagonal};
use crate::memory_kernel::{memory_source, HistoryBuffer, KernelQuadrature};

/// Default cells per block edge for sub-grid runs.
pub const DEFAULT_SUBGRID_CELLS: usize = 32;
/// Default clustering strength of the block grid (`0` is uniform).
pub const DEFAULT_STRETCH: f64 = 5.0;

/// One-dimensional factor of the tensor-product block grid.
#[derive(Debug, Clone)]
pub struct BlockGrid {
    dim: usize,
    n: usize,
    edge: f64,
    pub faces: Vec<f64>,
    pub widths: Vec<f64>,
    /// Tridiagonal stiffness `T` including the Dirichlet half-cell links.
    t_diag: Vec<f64>,
    t_off: Vec<f64>,
    /// Dirichlet coupling of each cell to the boundary (`0` inside).
    t_boundary: Vec<f64>,
    /// Generalized eigenpairs `T v = λ W v`, `Vᵀ W V = I` (only for `d ≥ 2`).
    eigenvalues: Vec<f64>,
    eigenvectors: Option<DMatrix<f64>>,
}

fn mapped_faces(n: usize, edge: f64, stretch: f64) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            let xi = i as f64 / n as f64;
            let f = if stretch > 0.0 {
                0.5 * (1.0 + (stretch * (xi - 0.5)).tanh() / (0.5 * stretch).tanh())
            } else {
                xi
            };
            edge * f
        })
        .collect()
}

impl BlockGrid {
    pub fn new(dim: usize, n: usize, edge: f64, stretch: f64) -> Result<Self> {
        if !(1..=3).contains(&dim) {
            return Err(Error::param("d", "block dimension must be 1, 2 or 3"));
        }
        if n < 2 {
            return Err(Error::param("n", "need at least two cells per edge"));
        }
        if !(stretch >= 0.0 && stretch.is_finite()) {
            return Err(Error::param("stretch", "must be non-negative"));
        }
        let mut faces = mapped_faces(n, edge, stretch);
        faces[0] = 0.0;
        faces[n] = edge;
        let widths: Vec<f64> = faces.windows(2).map(|w| w[1] - w[0]).collect();
        let centers: Vec<f64> = faces.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        let mut t_diag = vec![0.0; n];
        let mut t_off = vec![0.0; n - 1];
        for i in 0..n - 1 {
            let k = 1.0 / (centers[i + 1] - centers[i]);
            t_diag[i] += k;
            t_diag[i + 1] += k;
            t_off[i] = -k;
        }
        let mut t_boundary = vec![0.0; n];
        t_boundary[0] = 1.0 / (centers[0] - faces[0]);
        t_boundary[n - 1] += 1.0 / (faces[n] - centers[n - 1]);
        for i in 0..n {
            t_diag[i] += t_boundary[i];
        }
        let (eigenvalues, eigenvectors) = if dim >= 2 {
            let mut a = DMatrix::zeros(n, n);
            let s: Vec<f64> = widths.iter().map(|w| 1.0 / w.sqrt()).collect();
            for i in 0..n {
                a[(i, i)] = t_diag[i] * s[i] * s[i];
                if i + 1 < n {
                    a[(i, i + 1)] = t_off[i] * s[i] * s[i + 1];
                    a[(i + 1, i)] = a[(i, i + 1)];
                }
            }
            let eig = SymmetricEigen::new(a);
            let mut v = eig.eigenvectors;
            for i in 0..n {
                for j in 0..n {
                    v[(i, j)] *= s[i];
                }
            }
            (eig.eigenvalues.iter().cloned().collect(), Some(v))
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            dim,
            n,
            edge,
            faces,
            widths,
            t_diag,
            t_off,
            t_boundary,
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge(&self) -> f64 {
        self.edge
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell volumes in storage order.
    pub fn volumes(&self) -> Vec<f64> {
        let mut v = vec![1.0; self.len()];
        for axis in 0..self.dim {
            let w = &self.widths;
            for_each_line(self.n, self.dim, axis, &mut v, |line| {
                line.iter_mut().zip(w).for_each(|(x, wi)| *x *= wi);
            });
        }
        v
    }

    pub fn integral(&self, field: &[f64]) -> f64 {
        dot(&self.volumes(), field)
    }

    /// `K x = Σ_a (T along a, widths along the other axes) x`.
    pub fn apply_stiffness(&self, x: &[f64], y: &mut [f64]) {
        y.iter_mut().for_each(|v| *v = 0.0);
        let mut work = vec![0.0; x.len()];
        let mut line_out = vec![0.0; self.n];
        for a in 0..self.dim {
            work.copy_from_slice(x);
            for b in 0..self.dim {
                if b != a {
                    let w = &self.widths;
                    for_each_line(self.n, self.dim, b, &mut work, |line| {
                        line.iter_mut().zip(w).for_each(|(x, wi)| *x *= wi);
                    });
                }
            }
            for_each_line(self.n, self.dim, a, &mut work, |line| {
                tridiag_mul(&self.t_diag, &self.t_off, line, &mut line_out);
                line.copy_from_slice(&line_out);
            });
            y.iter_mut().zip(&work).for_each(|(o, w)| *o += w);
        }
    }

    /// Coupling of each cell to a unit Dirichlet value on the block surface.
    pub fn boundary_coupling(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.len()];
        for a in 0..self.dim {
            let mut work = vec![1.0; self.len()];
            for b in 0..self.dim {
                let w: &[f64] = if b == a { &self.t_boundary } else { &self.widths };
                for_each_line(self.n, self.dim, b, &mut work, |line| {
                    line.iter_mut().zip(w).for_each(|(x, wi)| *x *= wi);
                });
            }
            total.iter_mut().zip(&work).for_each(|(o, w)| *o += w);
        }
        total
    }

    /// Solves `(σ W + τ K) x = r` with homogeneous Dirichlet data, where `W`
    /// is the diagonal of cell volumes.
    pub fn solve_shifted(&self, sigma: f64, tau: f64, rhs: &[f64]) -> Vec<f64> {
        if self.dim == 1 {
            let diag: Vec<f64> = (0..self.n)
                .map(|i| sigma * self.widths[i] + tau * self.t_diag[i])
                .collect();
            let mut lower = vec![0.0; self.n];
            let mut upper = vec![0.0; self.n];
            for i in 0..self.n - 1 {
                upper[i] = tau * self.t_off[i];
                lower[i + 1] = tau * self.t_off[i];
            }
            return solve_tridiagonal(&lower, &diag, &upper, rhs);
        }
        // eigenvectors of the stretched grid carry errors of order ε‖T‖, so
        // polish with a few steps of iterative refinement
        let vol = self.volumes();
        let mut x = self.diagonalized_solve(sigma, tau, rhs);
        let r_norm = rhs.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut kx = vec![0.0; x.len()];
        for _ in 0..4 {
            self.apply_stiffness(&x, &mut kx);
            let r: Vec<f64> = (0..x.len())
                .map(|i| rhs[i] - sigma * vol[i] * x[i] - tau * kx[i])
                .collect();
            if r.iter().fold(0.0f64, |a, v| a.max(v.abs())) <= 1e-15 * r_norm {
                break;
            }
            let dx = self.diagonalized_solve(sigma, tau, &r);
            x.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
        }
        x
    }

    fn diagonalized_solve(&self, sigma: f64, tau: f64, rhs: &[f64]) -> Vec<f64> {
        let v = self.eigenvectors.as_ref().expect("eigenvectors for d >= 2");
        let vt = v.transpose();
        let mut x = rhs.to_vec();
        for axis in 0..self.dim {
            apply_dense_along(&vt, self.n, self.dim, axis, &mut x);
        }
        let lam = &self.eigenvalues;
        let n = self.n;
        for (idx, xv) in x.iter_mut().enumerate() {
            let mut s = 0.0;
            let mut r = idx;
            for _ in 0..self.dim {
                s += lam[r % n];
                r /= n;
            }
            *xv /= sigma + tau * s;
        }
        for axis in 0..self.dim {
            apply_dense_along(v, self.n, self.dim, axis, &mut x);
        }
        x
    }
}

fn tridiag_mul(diag: &[f64], off: &[f64], x: &[f64], y: &mut [f64]) {
    let n = diag.len();
    for i in 0..n {
        let mut acc = diag[i] * x[i];
        if i > 0 {
            acc += off[i - 1] * x[i - 1];
        }
        if i + 1 < n {
            acc += off[i] * x[i + 1];
        }
        y[i] = acc;
    }
}

/// Calls `f` on every grid line along `axis`, writing the result back.
fn for_each_line<F: FnMut(&mut [f64])>(n: usize, dim: usize, axis: usize, data: &mut [f64], mut f: F) {
    let stride = n.pow(axis as u32);
    let lines = n.pow(dim as u32 - 1);
    let mut buf = vec![0.0; n];
    for line in 0..lines {
        let lo = line % stride;
        let hi = line / stride;
        let base = lo + hi * stride * n;
        for k in 0..n {
            buf[k] = data[base + k * stride];
        }
        f(&mut buf);
        for k in 0..n {
            data[base + k * stride] = buf[k];
        }
    }
}

fn apply_dense_along(m: &DMatrix<f64>, n: usize, dim: usize, axis: usize, data: &mut [f64]) {
    let mut out = vec![0.0; n];
    for_each_line(n, dim, axis, data, |line| {
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, l) in line.iter().enumerate() {
                acc += m[(i, k)] * l;
            }
            *o = acc;
        }
        line.copy_from_slice(&out);
    });
}

/// Matrix-block data at one fissure thickness.
#[derive(Debug, Clone)]
pub struct BlockProblem {
    pub cell: WarrenRootCell,
    pub phi_m: f64,
    pub k_m: f64,
    pub psi_m: f64,
    pub psi_bounds: (f64, f64),
    grid: BlockGrid,
}

impl BlockProblem {
    pub fn new(cell: WarrenRootCell, phi_m: f64, k_m: f64, psi_m: f64, n: usize) -> Result<Self> {
        Self::with_grid(cell, phi_m, k_m, psi_m, (psi_m, psi_m), n, DEFAULT_STRETCH)
    }

    pub fn with_grid(
        cell: WarrenRootCell,
        phi_m: f64,
        k_m: f64,
        psi_m: f64,
        psi_bounds: (f64, f64),
        n: usize,
        stretch: f64,
    ) -> Result<Self> {
        if !(phi_m > 0.0 && phi_m < 1.0) {
            return Err(Error::param("phi_m", "matrix porosity must lie in (0, 1)"));
        }
        if !(k_m > 0.0 && k_m.is_finite()) {
            return Err(Error::param("k_m", "matrix permeability must be positive"));
        }
        let (lo, hi) = psi_bounds;
        if !(lo > 0.0 && lo <= psi_m && psi_m <= hi && hi.is_finite()) {
            return Err(Error::param(
                "psi_m",
                format!("need 0 < psi_min <= psi_m <= psi_max, got {lo} <= {psi_m} <= {hi}"),
            ));
        }
        let grid = BlockGrid::new(cell.dim(), n, cell.block_edge(), stretch)?;
        Ok(Self {
            cell,
            phi_m,
            k_m,
            psi_m,
            psi_bounds,
            grid,
        })
    }

    pub fn grid(&self) -> &BlockGrid {
        &self.grid
    }

    /// `δ² k_m ψ_m`, the diffusivity of the linearized block equation.
    pub fn diffusivity(&self) -> f64 {
        self.cell.delta().powi(2) * self.k_m * self.psi_m
    }

    /// Same block at a different resolution.
    pub fn refined(&self, n: usize) -> Result<Self> {
        let stretch = self.stretch();
        Self::with_grid(self.cell, self.phi_m, self.k_m, self.psi_m, self.psi_bounds, n, stretch)
    }

    fn stretch(&self) -> f64 {
        // recover the clustering parameter from the first face
        let g = &self.grid;
        let target = g.faces[1] / g.edge;
        let f = |s: f64| {
            if s == 0.0 {
                1.0 / g.n as f64
            } else {
                0.5 * (1.0 + (s * (1.0 / g.n as f64 - 0.5)).tanh() / (0.5 * s).tanh())
            }
        };
        let (mut a, mut b) = (0.0, 50.0);
        if (f(0.0) - target).abs() < 1e-15 {
            return 0.0;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if f(m) > target {
                a = m;
            } else {
                b = m;
            }
        }
        0.5 * (a + b)
    }
}

/// Saturation field of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub saturation: Vec<f64>,
    pub time: f64,
    pub trace: f64,
}

impl BlockState {
    pub fn uniform(block: &BlockProblem, s0: f64) -> Self {
        Self {
            saturation: vec![s0; block.grid.len()],
            time: 0.0,
            trace: s0,
        }
    }

    /// Volume average over the block.
    pub fn mean(&self, block: &BlockProblem) -> f64 {
        block.grid.integral(&self.saturation) / block.cell.matrix_measure()
    }
}

fn check_step(g_b: f64, dt: f64) -> Result<()> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::param("dt", "time step must be positive"));
    }
    if !(0.0..=1.0).contains(&g_b) {
        return Err(Error::domain(format!("boundary trace {g_b} outside [0, 1]")));
    }
    Ok(())
}

/// Backward-Euler step of `Φ_m ∂_t S − δ² k_m ψ_m Δ S = 0` with `S = g_b`
/// on the block surface.
pub fn imbibition_step_linear(block: &BlockProblem, state: &BlockState, g_b: f64, dt: f64) -> Result<BlockState> {
    check_step(g_b, dt)?;
    let grid = &block.grid;
    let sigma = block.phi_m / dt;
    let vol = grid.volumes();
    let rhs: Vec<f64> = state
        .saturation
        .iter()
        .zip(&vol)
        .map(|(s, v)| sigma * v * (s - g_b))
        .collect();
    let w = grid.solve_shifted(sigma, block.diffusivity(), &rhs);
    Ok(BlockState {
        saturation: w.iter().map(|x| x + g_b).collect(),
        time: state.time + dt,
        trace: g_b,
    })
}

/// Wetting flux into the block through its surface for the current field.
pub fn boundary_flux(block: &BlockProblem, state: &BlockState) -> f64 {
    let c = block.grid.boundary_coupling();
    block.diffusivity() * c.iter().zip(&state.saturation).map(|(ci, s)| ci * (state.trace - s)).sum::<f64>()
}

/// Newton settings for the nonlinear imbibition step.
#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 50,
        }
    }
}

/// Backward-Euler step of `Φ_m ∂_t S − δ² k_m Δ β_m(S) = 0` with
/// `S = g_b` on the block surface, by Newton's method in `S`.
///
/// Iterates are kept inside the interval spanned by the old field and the
/// trace, where the discrete solution lies.
pub fn imbibition_step_nonlinear(
    block: &BlockProblem,
    table: &KirchhoffTable,
    state: &BlockState,
    g_b: f64,
    dt: f64,
    opts: NewtonOptions,
) -> Result<BlockState> {
    check_step(g_b, dt)?;
    let grid = &block.grid;
    let m = grid.len();
    let vol = grid.volumes();
    let coupling = grid.boundary_coupling();
    let sigma = block.phi_m / dt;
    let kappa = block.cell.delta().powi(2) * block.k_m;
    let b_trace = table.beta(g_b);
    let lo = state.saturation.iter().cloned().fold(g_b, f64::min);
    let hi = state.saturation.iter().cloned().fold(g_b, f64::max);
    let scale = sigma * vol.iter().cloned().fold(0.0, f64::max);

    let residual = |s: &[f64], out: &mut [f64]| {
        let b: Vec<f64> = s.iter().map(|&x| table.beta(x)).collect();
        let mut kb = vec![0.0; m];
        grid.apply_stiffness(&b, &mut kb);
        for i in 0..m {
            out[i] = sigma * vol[i] * (s[i] - state.saturation[i]) + kappa * (kb[i] - coupling[i] * b_trace);
        }
    };

    let mut s = state.saturation.clone();
    let mut r = vec![0.0; m];
    let mut history = Vec::new();
    for _ in 0..opts.max_iter {
        residual(&s, &mut r);
        let norm = r.iter().fold(0.0f64, |a, v| a.max(v.abs())) / scale;
        history.push(norm);
        if norm <= opts.tol {
            return Ok(BlockState {
                saturation: s,
                time: state.time + dt,
                trace: g_b,
            });
        }
        let a: Vec<f64> = s.iter().map(|&x| table.beta_derivative(x)).collect();
        let mut e = vec![0.0; m];
        let mut diag = vec![0.0; m];
        // diagonal of K from a unit probe per cell is too costly; use the
        // separable structure instead
        let kdiag = stiffness_diagonal(grid);
        for i in 0..m {
            diag[i] = sigma * vol[i] + kappa * kdiag[i] * a[i];
        }
        let jac = |x: &[f64], y: &mut [f64]| {
            let ax: Vec<f64> = x.iter().zip(&a).map(|(u, w)| u * w).collect();
            let mut k = vec![0.0; x.len()];
            grid.apply_stiffness(&ax, &mut k);
            for i in 0..x.len() {
                y[i] = sigma * vol[i] * x[i] + kappa * k[i];
            }
        };
        let rhs: Vec<f64> = r.iter().map(|v| -v).collect();
        bicgstab(jac, &diag, &rhs, &mut e, 1e-13, 20 * m + 100)?;
        // backtrack on the residual norm; the full step can overshoot where
        // β_m flattens out
        let current = norm * scale;
        let mut step = 1.0;
        let mut trial = vec![0.0; m];
        let mut accepted = false;
        for _ in 0..30 {
            for i in 0..m {
                trial[i] = (s[i] + step * e[i]).clamp(lo, hi);
            }
            residual(&trial, &mut r);
            let next = r.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if next < (1.0 - 1e-4 * step) * current || next <= opts.tol * scale {
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        std::mem::swap(&mut s, &mut trial);
    }
    Err(Error::Newton {
        iterations: opts.max_iter,
        history,
    })
}

fn stiffness_diagonal(grid: &BlockGrid) -> Vec<f64> {
    let mut total = vec![0.0; grid.len()];
    for a in 0..grid.dim {
        let mut work = vec![1.0; grid.len()];
        for b in 0..grid.dim {
            let w: &[f64] = if b == a { &grid.t_diag } else { &grid.widths };
            for_each_line(grid.n, grid.dim, b, &mut work, |line| {
                line.iter_mut().zip(w).for_each(|(x, wi)| *x *= wi);
            });
        }
        total.iter_mut().zip(&work).for_each(|(o, w)| *o += w);
    }
    total
}

/// `∫_{Y_m} u` for `λ Φ_m u − δ² k_m ψ_m Δ u = 0`, `u = 1` on the block
/// surface, on the block's own grid.
pub fn laplace_block_integral(block: &BlockProblem, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::domain("Laplace frequency must be positive"));
    }
    let grid = &block.grid;
    let sigma = lambda * block.phi_m;
    let vol = grid.volumes();
    let rhs: Vec<f64> = vol.iter().map(|v| sigma * v).collect();
    // v = 1 − u vanishes on the surface
    let v = grid.solve_shifted(sigma, block.diffusivity(), &rhs);
    Ok(block.cell.matrix_measure() - dot(&vol, &v))
}

#[derive(Debug, Clone, Serialize)]
pub struct RefinedIntegral {
    pub ns: Vec<usize>,
    pub values: Vec<f64>,
    /// Two-level Richardson extrapolation in `h²`.
    pub extrapolated: f64,
}

/// Block integral on the grids `n/4`, `n/2`, `n` with Richardson
/// extrapolation; `n` must be divisible by four.
pub fn laplace_block_integral_refined(block: &BlockProblem, lambda: f64) -> Result<RefinedIntegral> {
    let n = block.grid.n;
    if !n.is_multiple_of(4) || n < 8 {
        return Err(Error::param("n", "refinement needs n divisible by 4 and n >= 8"));
    }
    let ns = vec![n / 4, n / 2, n];
    let values: Vec<f64> = ns
        .par_iter()
        .map(|&k| {
            if k == n {
                laplace_block_integral(block, lambda)
            } else {
                laplace_block_integral(&block.refined(k)?, lambda)
            }
        })
        .collect::<Result<_>>()?;
    let h2: Vec<f64> = ns.iter().map(|&k| (k as f64).powi(-2)).collect();
    Ok(RefinedIntegral {
        extrapolated: extrapolate_to_zero(&h2, &values),
        ns,
        values,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockAsymptoteRow {
    pub delta: f64,
    pub lambda: f64,
    pub integral: f64,
    pub ratio: f64,
}

/// `σ_d δ √(k_m ψ_m / (Φ_m λ))`, the leading-order block integral.
pub fn block_asymptote(delta: f64, lambda: f64, phi_m: f64, k_m: f64, psi_m: f64, sigma_d: f64) -> f64 {
    sigma_d * delta * (k_m * psi_m / (phi_m * lambda)).sqrt()
}

/// Ratio of the block integral to its thin-fissure asymptote for each
/// `(δ, λ)`; `integral` supplies `∫ u` for a given block and frequency.
pub fn block_asymptote_study<F>(
    dim: usize,
    deltas: &[f64],
    lambdas: &[f64],
    phi_m: f64,
    k_m: f64,
    psi_m: f64,
    sigma_d: f64,
    integral: F,
) -> Result<Vec<BlockAsymptoteRow>>
where
    F: Fn(&WarrenRootCell, f64) -> Result<f64> + Sync,
{
    if deltas.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::param("deltas", "must be strictly decreasing"));
    }
    let jobs: Vec<(f64, f64)> = deltas
        .iter()
        .flat_map(|&d| lambdas.iter().map(move |&l| (d, l)))
        .collect();
    jobs.par_iter()
        .map(|&(delta, lambda)| {
            let cell = WarrenRootCell::new(dim, delta)?;
            let value = integral(&cell, lambda)?;
            Ok(BlockAsymptoteRow {
                delta,
                lambda,
                integral: value,
                ratio: value / block_asymptote(delta, lambda, phi_m, k_m, psi_m, sigma_d),
            })
        })
        .collect()
}

/// Exchange source computed by resolving the block.
#[derive(Debug, Clone, Serialize)]
pub struct SubgridSource {
    pub times: Vec<f64>,
    /// `Q_w` after each step.
    pub wetting: Vec<f64>,
    pub nonwetting: Vec<f64>,
    /// Largest per-step [`balance_error`].
    pub mass_balance: f64,
}

/// Mismatch between storage change and surface flux, relative to the flux.
///
/// Fluxes below `1e−5` of the pore-volume rate `Φ_m |Y_m| / Δt` are
/// compared against that floor instead, since both sides then carry
/// rounding errors of the stored mass.
pub fn balance_error(block: &BlockProblem, storage: f64, flux: f64, dt: f64) -> f64 {
    let floor = 1e-5 * block.phi_m * block.cell.matrix_measure() / dt;
    (storage - flux).abs() / flux.abs().max(floor)
}

/// Runs the linear imbibition step along the trace history `trace[0..=N]`
/// (sampled at `t_k = kΔt`) and returns `Q_w = −Φ_m d/dt ⟨S_m⟩` per step.
pub fn source_from_subgrid(block: &BlockProblem, trace: &[f64], dt: f64) -> Result<SubgridSource> {
    if trace.len() < 2 {
        return Err(Error::param("trace", "need at least one step"));
    }
    let mut state = BlockState::uniform(block, trace[0]);
    let measure = block.cell.matrix_measure();
    let vol = block.grid.volumes();
    let mut times = Vec::with_capacity(trace.len() - 1);
    let mut wetting = Vec::with_capacity(trace.len() - 1);
    let mut worst = 0.0f64;
    for (k, &g) in trace.iter().enumerate().skip(1) {
        let next = imbibition_step_linear(block, &state, g, dt)?;
        let change: f64 = vol
            .iter()
            .zip(next.saturation.iter().zip(&state.saturation))
            .map(|(v, (a, b))| v * (a - b))
            .sum();
        let storage = block.phi_m * change / dt;
        let flux = boundary_flux(block, &next);
        worst = worst.max(balance_error(block, storage, flux, dt));
        wetting.push(-storage / measure);
        times.push(k as f64 * dt);
        state = next;
    }
    Ok(SubgridSource {
        nonwetting: wetting.iter().map(|q| -q).collect(),
        times,
        wetting,
        mass_balance: worst,
    })
}

/// Kernel-reduced source for the same trace history.
pub fn source_from_kernel(trace: &[f64], dt: f64, amplitude: f64) -> Result<Vec<f64>> {
    let steps = trace.len() - 1;
    let q = KernelQuadrature::new(dt, steps)?;
    let mut h = HistoryBuffer::with_capacity(steps);
    let mut out = Vec::with_capacity(steps);
    for (n, g) in trace.iter().enumerate().skip(1) {
        h.push(g - trace[0]);
        out.push(memory_source(&q, &h, amplitude, n)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SourceComparison {
    pub delta: f64,
    pub subgrid: SubgridSource,
    pub kernel: Vec<f64>,
    /// `‖Q_sub − Q_kernel‖ / ‖Q_sub‖` in discrete `L²(0, T)`.
    pub relative_l2: f64,
}

pub fn compare_sources(block: &BlockProblem, trace: &[f64], dt: f64, amplitude: f64) -> Result<SourceComparison> {
    let subgrid = source_from_subgrid(block, trace, dt)?;
    let kernel = source_from_kernel(trace, dt, amplitude)?;
    let num: f64 = subgrid.wetting.iter().zip(&kernel).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = subgrid.wetting.iter().map(|a| a * a).sum();
    Ok(SourceComparison {
        delta: block.cell.delta(),
        relative_l2: if den > 0.0 { (num / den).sqrt() } else { num.sqrt() },
        subgrid,
        kernel,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::{Medium, RockParams};
    use crate::reference::{block_integral_1d, heat_slab};

    fn block(dim: usize, delta: f64, n: usize) -> BlockProblem {
        BlockProblem::new(WarrenRootCell::new(dim, delta).unwrap(), 0.2, 1.0, 1.0, n).unwrap()
    }

    #[test]
    fn fast_solver_matches_operator() {
        let b = block(3, 0.1, 6);
        let g = b.grid();
        let r: Vec<f64> = (0..g.len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let x = g.solve_shifted(2.0, 0.3, &r);
        let mut kx = vec![0.0; g.len()];
        g.apply_stiffness(&x, &mut kx);
        let vol = g.volumes();
        for i in 0..g.len() {
            let lhs = 2.0 * vol[i] * x[i] + 0.3 * kx[i];
            assert!((lhs - r[i]).abs() < 1e-11, "{lhs} {}", r[i]);
        }
    }

    #[test]
    fn constant_trace_is_steady() {
        let b = block(2, 0.1, 12);
        let s = BlockState::uniform(&b, 0.4);
        let next = imbibition_step_linear(&b, &s, 0.4, 0.1).unwrap();
        assert!(next.saturation.iter().all(|v| (v - 0.4).abs() < 1e-14));
    }

    #[test]
    fn linear_step_obeys_maximum_principle_and_balance() {
        let b = block(3, 0.1, 10);
        let mut s = BlockState::uniform(&b, 0.1);
        let mut mean = s.mean(&b);
        for _ in 0..20 {
            let next = imbibition_step_linear(&b, &s, 0.9, 0.5).unwrap();
            assert!(next.saturation.iter().all(|&v| (0.1 - 1e-13..=0.9 + 1e-13).contains(&v)));
            let m = next.mean(&b);
            assert!(m >= mean);
            let vol = b.grid().volumes();
            let change: f64 = (0..vol.len()).map(|i| vol[i] * (next.saturation[i] - s.saturation[i])).sum();
            let storage = 0.2 * change / 0.5;
            let flux = boundary_flux(&b, &next);
            assert!(balance_error(&b, storage, flux, 0.5) <= 1e-10, "{storage} {flux}");
            mean = m;
            s = next;
        }
    }

    #[test]
    fn slab_matches_series_solution() {
        let delta = 0.1;
        let b = BlockProblem::with_grid(WarrenRootCell::new(1, delta).unwrap(), 0.2, 1.0, 1.0, (1.0, 1.0), 256, 0.0)
            .unwrap();
        let kappa = b.diffusivity() / b.phi_m;
        let t_end = 0.1 * b.phi_m / b.diffusivity();
        let steps = 4000;
        let dt = t_end / steps as f64;
        let mut s = BlockState::uniform(&b, 0.2);
        for _ in 0..steps {
            s = imbibition_step_linear(&b, &s, 0.8, dt).unwrap();
        }
        let faces = &b.grid().faces;
        let err = s
            .saturation
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = 0.5 * (faces[i] + faces[i + 1]);
                (v - heat_slab(x, t_end, b.cell.block_edge(), kappa, 0.2, 0.8)).abs()
            })
            .fold(0.0, f64::max);
        assert!(err <= 1e-4, "{err}");
    }

    #[test]
    fn slab_laplace_integral_matches_tanh() {
        let delta = 0.02;
        let b = BlockProblem::with_grid(WarrenRootCell::new(1, delta).unwrap(), 0.2, 1.0, 1.0, (1.0, 1.0), 2048, 5.0)
            .unwrap();
        let mu = (0.2f64).sqrt() / delta;
        let exact = block_integral_1d(b.cell.block_edge(), mu);
        let r = laplace_block_integral_refined(&b, 1.0).unwrap();
        assert!(((r.extrapolated - exact) / exact).abs() < 1e-8, "{r:?} {exact}");
    }

    #[test]
    fn laplace_solution_is_between_zero_and_one() {
        let b = block(2, 0.05, 16);
        let i = laplace_block_integral(&b, 1.0).unwrap();
        assert!(i > 0.0 && i < b.cell.matrix_measure());
        let big = laplace_block_integral(&b, 1e8).unwrap();
        assert!(big < 1e-2 * i);
        assert!(laplace_block_integral(&b, 0.0).is_err());
    }

    #[test]
    fn nonlinear_step_steady_and_monotone() {
        let rock = RockParams::with_power_law(Medium::Matrix, 0.2, 1.0, 1.0).unwrap();
        let table = KirchhoffTable::build(&rock).unwrap();
        let b = block(2, 0.1, 12);
        let s = BlockState::uniform(&b, 0.3);
        let same = imbibition_step_nonlinear(&b, &table, &s, 0.3, 0.5, NewtonOptions::default()).unwrap();
        assert!(same.saturation.iter().all(|v| (v - 0.3).abs() < 1e-12));
        let mut st = BlockState::uniform(&b, 0.05);
        let mut mean = st.mean(&b);
        for _ in 0..10 {
            st = imbibition_step_nonlinear(&b, &table, &st, 1.0, 2.0, NewtonOptions::default()).unwrap();
            let m = st.mean(&b);
            assert!(m >= mean - 1e-14);
            assert!(st.saturation.iter().all(|&v| (0.05..=1.0).contains(&v)));
            mean = m;
        }
    }

    #[test]
    fn constant_trace_gives_zero_source() {
        let b = block(3, 0.1, 8);
        let src = source_from_subgrid(&b, &[0.3; 6], 0.1).unwrap();
        assert!(src.wetting.iter().all(|q| q.abs() < 1e-14));
    }

    mod properties {
        use proptest::prelude::*;

        use super::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn rising_traces_imbibe_and_phases_balance(
                start in 0.0f64..0.5,
                increments in proptest::collection::vec(0.0f64..0.05, 1..12),
                dt in 1e-3f64..0.1,
            ) {
                let b = block(2, 0.1, 8);
                let mut trace = vec![start];
                for inc in &increments {
                    let next = trace.last().unwrap() + inc;
                    trace.push(next);
                }
                let src = source_from_subgrid(&b, &trace, dt).unwrap();
                for (w, n) in src.wetting.iter().zip(&src.nonwetting) {
                    prop_assert!(*w <= 1e-14);
                    prop_assert_eq!(w + n, 0.0);
                }
            }
        }
    }
}
