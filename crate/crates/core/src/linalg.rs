//! Small sparse linear-algebra kernels shared by the grid solvers.

use crate::error::{Error, Result};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn remove_mean(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Settings for [`conjugate_gradient`].
#[derive(Debug, Clone, Copy)]
pub struct CgOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
    /// Project iterates and residuals onto the mean-zero subspace. Used for
    /// pure-Neumann/periodic operators whose kernel is the constants.
    pub project_mean: bool,
}

impl Default for CgOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-12,
            max_iter: 20_000,
            project_mean: false,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Jacobi-preconditioned conjugate gradient for a symmetric positive
/// (semi-)definite operator given as a matrix-free `apply`.
///
/// `x` holds the initial guess on entry and the solution on exit.
pub fn conjugate_gradient<F>(
    apply: F,
    diag: &[f64],
    b: &[f64],
    x: &mut [f64],
    opts: CgOptions,
) -> Result<CgReport>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let mut rhs = b.to_vec();
    if opts.project_mean {
        remove_mean(&mut rhs);
        remove_mean(x);
    }
    let b_norm = norm2(&rhs);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }

    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 })
        .collect();
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    if opts.project_mean {
        remove_mean(&mut r);
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    if opts.project_mean {
        remove_mean(&mut z);
    }
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r) / b_norm;

    for it in 0..opts.max_iter {
        if res <= opts.rel_tol {
            return Ok(CgReport {
                iterations: it,
                relative_residual: res,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            break;
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        if opts.project_mean {
            remove_mean(&mut r);
        }
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        if opts.project_mean {
            remove_mean(&mut z);
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        res = norm2(&r) / b_norm;
    }

    // Recompute the true residual before giving up: the recursive one drifts.
    apply(x, &mut ap);
    let mut true_r: Vec<f64> = rhs.iter().zip(&ap).map(|(a, b)| a - b).collect();
    if opts.project_mean {
        remove_mean(&mut true_r);
        remove_mean(x);
    }
    let true_res = norm2(&true_r) / b_norm;
    if true_res <= opts.rel_tol {
        return Ok(CgReport {
            iterations: opts.max_iter,
            relative_residual: true_res,
        });
    }
    Err(Error::LinearSolver {
        iterations: opts.max_iter,
        residual: true_res,
    })
}

/// Jacobi-preconditioned BiCGSTAB for a nonsymmetric operator.
pub fn bicgstab<F>(apply: F, diag: &[f64], b: &[f64], x: &mut [f64], rel_tol: f64, max_iter: usize) -> Result<CgReport>
where
    F: Fn(&[f64], &mut [f64]),
{
    let n = b.len();
    let b_norm = norm2(b);
    if b_norm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(CgReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv: Vec<f64> = diag.iter().map(|&d| if d != 0.0 { 1.0 / d } else { 1.0 }).collect();
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let r_hat = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 0..max_iter {
        let res = norm2(&r) / b_norm;
        if res <= rel_tol {
            return Ok(CgReport {
                iterations: it,
                relative_residual: res,
            });
        }
        let rho_new = dot(&r_hat, &r);
        if rho_new == 0.0 || omega == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            y[i] = p[i] * inv[i];
        }
        apply(&y, &mut v);
        alpha = rho / dot(&r_hat, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if norm2(&s) / b_norm <= rel_tol {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
            return Ok(CgReport {
                iterations: it + 1,
                relative_residual: norm2(&s) / b_norm,
            });
        }
        for i in 0..n {
            z[i] = s[i] * inv[i];
        }
        apply(&z, &mut t);
        let tt = dot(&t, &t);
        omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
        for i in 0..n {
            x[i] += alpha * y[i] + omega * z[i];
            r[i] = s[i] - omega * t[i];
        }
    }
    apply(x, &mut t);
    let res = b.iter().zip(&t).map(|(a, c)| (a - c) * (a - c)).sum::<f64>().sqrt() / b_norm;
    if res <= rel_tol {
        return Ok(CgReport {
            iterations: max_iter,
            relative_residual: res,
        });
    }
    Err(Error::LinearSolver {
        iterations: max_iter,
        residual: res,
    })
}

/// Banded matrix with LU factorization without pivoting.
///
/// Adequate for the diagonally dominant M-matrix Jacobians produced by the
/// upwinded finite-volume saturation step.
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    bw: usize,
    // row-major, row i stores columns i-bw ..= i+bw
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, bandwidth: usize) -> Self {
        Self {
            n,
            bw: bandwidth,
            data: vec![0.0; n * (2 * bandwidth + 1)],
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.bw >= i && j <= i + self.bw, "entry outside band");
        i * (2 * self.bw + 1) + (j + self.bw - i)
    }

    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.bw < i || j > i + self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            let hi = (i + self.bw).min(self.n - 1);
            y[i] = (lo..=hi).map(|j| self.get(i, j) * x[j]).sum();
        }
    }

    /// In-place LU factorization followed by a solve; the matrix is consumed.
    pub fn solve(mut self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        let bw = self.bw;
        for k in 0..n {
            let pivot = self.data[self.idx(k, k)];
            if pivot.abs() < 1e-300 || !pivot.is_finite() {
                return Err(Error::LinearSolver {
                    iterations: k,
                    residual: f64::NAN,
                });
            }
            let hi = (k + bw).min(n - 1);
            for i in (k + 1)..=hi {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                if l == 0.0 {
                    continue;
                }
                self.data[ik] = l;
                for j in (k + 1)..=hi {
                    let kj = self.data[self.idx(k, j)];
                    if kj != 0.0 {
                        let ij = self.idx(i, j);
                        self.data[ij] -= l * kj;
                    }
                }
            }
        }
        let mut x = rhs.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for j in lo..i {
                s -= self.data[self.idx(i, j)] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let hi = (i + bw).min(n - 1);
            let mut s = x[i];
            for j in (i + 1)..=hi {
                s -= self.data[self.idx(i, j)] * x[j];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
        Ok(x)
    }
}

/// Thomas algorithm for a tridiagonal system (`lower[0]` and
/// `upper[n-1]` are ignored).
pub fn solve_tridiagonal(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = upper[0] / diag[0];
    d[0] = rhs[0] / diag[0];
    for i in 1..n {
        let m = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / m } else { 0.0 };
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}

/// Polynomial extrapolation to `h = 0` through the points `(h_i, v_i)`
/// (Neville's scheme). With `h_i = n_i^{-p}` this is Richardson extrapolation.
pub fn extrapolate_to_zero(h: &[f64], v: &[f64]) -> f64 {
    assert_eq!(h.len(), v.len());
    let mut p = v.to_vec();
    let m = p.len();
    for k in 1..m {
        for i in 0..(m - k) {
            p[i] = (h[i + k] * p[i] - h[i] * p[i + 1]) / (h[i + k] - h[i]);
        }
    }
    p[0]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
