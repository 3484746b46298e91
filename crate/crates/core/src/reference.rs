//! Closed-form and series reference solutions used to validate the
//! discrete solvers.

use std::f64::consts::PI;

use crate::linalg::extrapolate_to_zero;

/// `B(p + 1, 1/2)` for integer `p ≥ 0`.
pub fn beta_half(p: u32) -> f64 {
    let mut b = 2.0;
    for n in 1..=p {
        let n = n as f64;
        b *= n / (n + 0.5);
    }
    b
}

/// Exact value of `d/dt (t^p * s^{-1/2})(t)` for integer `p ≥ 1`.
///
/// The convolution equals `B(p+1, 1/2) t^{p+1/2}`.
pub fn power_convolution_rate(p: u32, t: f64) -> f64 {
    let p_f = p as f64;
    (p_f + 0.5) * beta_half(p) * t.powf(p_f - 0.5)
}

/// `∫ u` over `(0, L)` for `μ² u − u'' = 0`, `u = 1` at both ends.
pub fn block_integral_1d(edge: f64, mu: f64) -> f64 {
    2.0 / mu * (0.5 * mu * edge).tanh()
}

/// Sum over odd `k ≥ 1` of `1 / (k² (k² + a))`.
fn odd_inner_sum(a: f64) -> f64 {
    let r = a.sqrt();
    (PI * PI / 8.0 - PI / (4.0 * r) * (0.5 * PI * r).tanh()) / a
}

fn cube_series_partial(edge: f64, mu: f64, max_index: usize) -> f64 {
    let c0 = mu * mu * edge * edge / (PI * PI);
    let mut total = 0.0;
    // symmetric in (i, j): sum the strict lower triangle twice
    let mut i = 1usize;
    while i <= max_index {
        let fi = (i * i) as f64;
        let mut row = 0.0;
        let mut j = 1usize;
        while j < i {
            let fj = (j * j) as f64;
            row += odd_inner_sum(c0 + fi + fj) / fj;
            j += 2;
        }
        total += (2.0 * row + odd_inner_sum(c0 + 2.0 * fi) / fi) / fi;
        i += 2;
    }
    let l3 = edge * edge * edge;
    l3 - 512.0 * l3 / PI.powi(6) * c0 * total
}

/// `∫ u` over the cube `(0, L)³` for `μ² u − Δu = 0` with `u = 1` on the
/// boundary, from the sine-series expansion of `1 − u`.
///
/// The innermost index is summed in closed form; the remaining double sum
/// has an `O(M⁻³)` tail and is extrapolated from truncations `M`, `2M`, `4M`.
pub fn block_integral_cube(edge: f64, mu: f64) -> f64 {
    let m = 1001;
    let cuts = [m, 2 * m + 1, 4 * m + 3];
    let h: Vec<f64> = cuts.iter().map(|&c| (c as f64).powi(-3)).collect();
    let v: Vec<f64> = cuts.iter().map(|&c| cube_series_partial(edge, mu, c)).collect();
    extrapolate_to_zero(&h[1..], &v[1..])
}

/// Solution of `u_t = κ u_xx` on `(0, L)` with `u = g` at both ends and
/// uniform initial value `u0`.
pub fn heat_slab(x: f64, t: f64, edge: f64, kappa: f64, u0: f64, g: f64) -> f64 {
    let mut acc = 0.0;
    let mut k = 1usize;
    loop {
        let kf = k as f64;
        let decay = (-kappa * (kf * PI / edge).powi(2) * t).exp();
        let term = 4.0 / (kf * PI) * (kf * PI * x / edge).sin() * decay;
        acc += term;
        if decay < 1e-18 && k > 5 {
            break;
        }
        k += 2;
        if k > 200_001 {
            break;
        }
    }
    g + (u0 - g) * acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn beta_values() {
        assert!((beta_half(1) - 4.0 / 3.0).abs() < 1e-15);
        assert!((beta_half(2) - 16.0 / 15.0).abs() < 1e-15);
        assert!((power_convolution_rate(1, 0.49) - 2.0 * 0.7).abs() < 1e-15);
        assert!((power_convolution_rate(2, 1.0) - 8.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn odd_sum_closed_form_matches_direct_sum() {
        let a = 7.3;
        let direct: f64 = (0..200_000)
            .rev()
            .map(|n| {
                let k = (2 * n + 1) as f64;
                1.0 / (k * k * (k * k + a))
            })
            .sum();
        assert!((direct - odd_inner_sum(a)).abs() < 1e-15, "{direct} {}", odd_inner_sum(a));
    }

    #[test]
    fn cube_series_regression() {
        let edge = 0.98;
        let mu = (0.2f64).sqrt() / 0.02;
        let v = block_integral_cube(edge, mu);
        assert!((v - 0.2291223521979).abs() < 1e-11, "{v}");
        let v4 = block_integral_cube(edge, 2.0 * mu);
        assert!((v4 - 0.1215353556228).abs() < 1e-11, "{v4}");
    }

    #[test]
    fn heat_slab_limits() {
        assert!((heat_slab(0.3, 0.0, 1.0, 1.0, 0.2, 0.9) - 0.2).abs() < 1e-3);
        assert!((heat_slab(0.3, 50.0, 1.0, 1.0, 0.2, 0.9) - 0.9).abs() < 1e-14);
        assert!((heat_slab(0.0, 0.1, 1.0, 1.0, 0.2, 0.9) - 0.9).abs() < 1e-14);
    }
}
