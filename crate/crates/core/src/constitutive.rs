//! Capillary pressure, phase mobilities and the saturation transforms built
//! on them: the Kirchhoff (complementary-pressure) map, the global-pressure
//! split and the fracture-to-matrix matching function.
//!
//! Laws are pluggable through [`SaturationLaw`]. The default [`PowerLaw`] is
//!
//! ```text
//! Pc(s) = a (s^-e - 1),   λw(s) = s^nw,   λn(s) = (1 - s)^nn
//! ```
//!
//! with `e = 1/2` and `nw = nn = 2`, which gives `Pc(0+) = ∞`, `Pc(1) = 0`
//! and a total mobility bounded below by `L0 = 1/2`.

use std::fmt::Debug;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which continuum a set of rock parameters describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Medium {
    Fracture,
    Matrix,
}

/// Saturation-dependent curves of one medium.
///
/// Implementors provide the four curve evaluations; everything else has a
/// generic default that may be overridden with a closed form.
pub trait SaturationLaw: Debug + Send + Sync {
    /// Capillary pressure `Pc(s)` for `s ∈ (0, 1]`.
    fn pc(&self, s: f64) -> f64;
    /// Derivative `Pc'(s)` for `s ∈ (0, 1]`; must be negative.
    fn dpc(&self, s: f64) -> f64;
    fn lambda_w(&self, s: f64) -> f64;
    fn lambda_n(&self, s: f64) -> f64;

    /// Limit `Pc(0+)`, possibly infinite.
    fn pc_at_zero(&self) -> f64 {
        f64::INFINITY
    }

    /// Inverse of `pc` on `[0, Pc(0+))`. The default bisects on `(0, 1]`.
    fn pc_inverse(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return 1.0;
        }
        if p >= self.pc_at_zero() {
            return 0.0;
        }
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= 0.0 || self.pc(mid) > p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= f64::EPSILON * hi {
                break;
            }
        }
        0.5 * (lo + hi)
    }

    /// Capillary diffusivity `λw λn |Pc'| / λ`, continuously extended at the
    /// end points.
    fn alpha(&self, s: f64) -> f64 {
        if s <= 0.0 || s >= 1.0 {
            return 0.0;
        }
        let (w, n) = (self.lambda_w(s), self.lambda_n(s));
        let v = w * n * self.dpc(s).abs() / (w + n);
        if v.is_finite() {
            v
        } else {
            0.0
        }
    }
}

/// Power-type capillary law with Corey mobilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLaw {
    /// Capillary entry coefficient `a`.
    pub entry: f64,
    /// Exponent `e` in `s^-e`.
    pub pc_exponent: f64,
    pub wetting_exponent: f64,
    pub nonwetting_exponent: f64,
}

impl PowerLaw {
    pub fn new(entry: f64) -> Result<Self> {
        Self::with_exponents(entry, 0.5, 2.0, 2.0)
    }

    pub fn with_exponents(entry: f64, pc_exponent: f64, nw: f64, nn: f64) -> Result<Self> {
        if !(entry > 0.0 && entry.is_finite()) {
            return Err(Error::param("a", format!("capillary entry coefficient must be > 0, got {entry}")));
        }
        if !(pc_exponent > 0.0) {
            return Err(Error::param("pc_exponent", "must be > 0"));
        }
        if !(nw >= 1.0 && nn >= 1.0) {
            return Err(Error::param("mobility exponents", "must be >= 1"));
        }
        // keeps the capillary diffusivity bounded at s = 0
        if nw < pc_exponent + 1.0 {
            return Err(Error::param(
                "wetting exponent",
                format!("must be >= pc_exponent + 1 = {}", pc_exponent + 1.0),
            ));
        }
        Ok(Self {
            entry,
            pc_exponent,
            wetting_exponent: nw,
            nonwetting_exponent: nn,
        })
    }
}

impl SaturationLaw for PowerLaw {
    fn pc(&self, s: f64) -> f64 {
        self.entry * (s.powf(-self.pc_exponent) - 1.0)
    }

    fn dpc(&self, s: f64) -> f64 {
        -self.entry * self.pc_exponent * s.powf(-self.pc_exponent - 1.0)
    }

    fn lambda_w(&self, s: f64) -> f64 {
        s.powf(self.wetting_exponent)
    }

    fn lambda_n(&self, s: f64) -> f64 {
        (1.0 - s).powf(self.nonwetting_exponent)
    }

    fn pc_inverse(&self, p: f64) -> f64 {
        if p <= 0.0 {
            1.0
        } else if p.is_infinite() {
            0.0
        } else {
            (p / self.entry + 1.0).powf(-1.0 / self.pc_exponent)
        }
    }

    fn alpha(&self, s: f64) -> f64 {
        if s >= 1.0 {
            return 0.0;
        }
        let total = self.lambda_w(s) + self.lambda_n(s);
        let sing = self.wetting_exponent - self.pc_exponent - 1.0;
        let lead = if s <= 0.0 {
            if sing == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            s.powf(sing)
        };
        self.entry * self.pc_exponent * lead * self.lambda_n(s.max(0.0)) / total
    }
}

/// Porosity, permeability and saturation law of one medium.
#[derive(Debug, Clone)]
pub struct RockParams {
    pub medium: Medium,
    pub porosity: f64,
    pub permeability: f64,
    pub law: Arc<dyn SaturationLaw>,
}

impl RockParams {
    pub fn new(
        medium: Medium,
        porosity: f64,
        permeability: f64,
        law: Arc<dyn SaturationLaw>,
    ) -> Result<Self> {
        if !(porosity > 0.0 && porosity < 1.0) {
            return Err(Error::param("phi", format!("porosity must lie in (0, 1), got {porosity}")));
        }
        if !(permeability > 0.0 && permeability.is_finite()) {
            return Err(Error::param("k", format!("permeability must be > 0, got {permeability}")));
        }
        Ok(Self {
            medium,
            porosity,
            permeability,
            law,
        })
    }

    /// Rock with the default power law and entry coefficient `a`.
    pub fn with_power_law(medium: Medium, porosity: f64, permeability: f64, a: f64) -> Result<Self> {
        Self::new(medium, porosity, permeability, Arc::new(PowerLaw::new(a)?))
    }
}

/// Fracture and matrix media of a double-porosity rock.
#[derive(Debug, Clone)]
pub struct TwoRockSystem {
    pub fracture: RockParams,
    pub matrix: RockParams,
}

impl TwoRockSystem {
    pub fn new(fracture: RockParams, matrix: RockParams) -> Result<Self> {
        let (pf, pm) = (fracture.law.pc_at_zero(), matrix.law.pc_at_zero());
        let same = (pf.is_infinite() && pm.is_infinite()) || (pf - pm).abs() <= 1e-12 * pf.abs().max(1.0);
        if !same {
            return Err(Error::param(
                "rocks",
                format!("capillary entry limits must agree: Pc_f(0+) = {pf}, Pc_m(0+) = {pm}"),
            ));
        }
        Ok(Self { fracture, matrix })
    }
}

fn check_saturation(s: f64, open_at_zero: bool) -> Result<()> {
    let ok = if open_at_zero {
        s > 0.0 && s <= 1.0
    } else {
        (0.0..=1.0).contains(&s)
    };
    if ok {
        Ok(())
    } else if open_at_zero {
        Err(Error::domain(format!("saturation {s} outside (0, 1]")))
    } else {
        Err(Error::domain(format!("saturation {s} outside [0, 1]")))
    }
}

pub fn pc(rock: &RockParams, s: f64) -> Result<f64> {
    check_saturation(s, true)?;
    Ok(rock.law.pc(s))
}

pub fn pc_inverse(rock: &RockParams, p: f64) -> Result<f64> {
    if !(p >= 0.0) {
        return Err(Error::domain(format!("capillary pressure {p} must be >= 0")));
    }
    Ok(rock.law.pc_inverse(p))
}

/// Wetting, non-wetting and total mobility at one saturation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mobilities {
    pub wetting: f64,
    pub nonwetting: f64,
    pub total: f64,
}

pub fn mobilities(rock: &RockParams, s: f64) -> Result<Mobilities> {
    check_saturation(s, false)?;
    let wetting = rock.law.lambda_w(s);
    let nonwetting = rock.law.lambda_n(s);
    Ok(Mobilities {
        wetting,
        nonwetting,
        total: wetting + nonwetting,
    })
}

/// Lower bound `L0` of the total mobility on `[0, 1]`, found by dense
/// sampling followed by golden-section refinement.
pub fn total_mobility_floor(rock: &RockParams) -> f64 {
    let law = &rock.law;
    let total = |s: f64| law.lambda_w(s) + law.lambda_n(s);
    let m = 4096;
    let (mut best_i, mut best) = (0usize, f64::INFINITY);
    for i in 0..=m {
        let v = total(i as f64 / m as f64);
        if v < best {
            best = v;
            best_i = i;
        }
    }
    let mut a = (best_i.saturating_sub(1)) as f64 / m as f64;
    let mut b = ((best_i + 1).min(m)) as f64 / m as f64;
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if total(c) < total(d) {
            b = d;
        } else {
            a = c;
        }
    }
    best.min(total(0.5 * (a + b)))
}

/// Matching function `P = Pc_m^-1 ∘ Pc_f`: the matrix saturation in
/// capillary equilibrium with fracture saturation `s`.
pub fn matching_p(system: &TwoRockSystem, s: f64) -> Result<f64> {
    check_saturation(s, false)?;
    if s == 0.0 {
        return Ok(0.0);
    }
    if s == 1.0 {
        return Ok(1.0);
    }
    let p = system.fracture.law.pc(s);
    Ok(system.matrix.law.pc_inverse(p).clamp(0.0, 1.0))
}

/// Derivative `P'(s) = Pc_f'(s) / Pc_m'(P(s))`.
pub fn matching_p_derivative(system: &TwoRockSystem, s: f64) -> f64 {
    // the ratio has a finite limit at s = 0; evaluate just inside
    let s = s.clamp(1e-9, 1.0);
    let m = system.matrix.law.pc_inverse(system.fracture.law.pc(s)).clamp(1e-300, 1.0);
    let v = system.fracture.law.dpc(s) / system.matrix.law.dpc(m);
    if v.is_finite() {
        v
    } else {
        0.0
    }
}

/// Capillary diffusivity `α(s)`; `α(0)` is the continuous extension.
pub fn alpha(rock: &RockParams, s: f64) -> f64 {
    rock.law.alpha(s.clamp(0.0, 1.0))
}

fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    quadrature::double_exponential::integrate(f, a, b, tol).integral
}

/// Global-pressure split: the phase pressures `(Pw, Pn)` that correspond to
/// saturation `s` and global pressure `p_global`.
///
/// `Pw = P + ∫_s^1 (λn/λ) Pc' dξ` and `Pn = P - ∫_s^1 (λw/λ) Pc' dξ`, so
/// that `Pn - Pw = Pc(s)`.
pub fn global_pressure_split(rock: &RockParams, s: f64, p_global: f64) -> Result<(f64, f64)> {
    check_saturation(s, true)?;
    let law = &rock.law;
    let fn_dpc = |x: f64| {
        let (w, n) = (law.lambda_w(x), law.lambda_n(x));
        n / (w + n) * law.dpc(x)
    };
    let fw_dpc = |x: f64| {
        let (w, n) = (law.lambda_w(x), law.lambda_n(x));
        w / (w + n) * law.dpc(x)
    };
    let scale = law.pc(s).abs().max(1.0);
    let iw = integrate(fn_dpc, s, 1.0, 1e-13 * scale);
    let in_ = integrate(fw_dpc, s, 1.0, 1e-13 * scale);
    Ok((p_global + iw, p_global - in_))
}

/// Number of Chebyshev-spaced nodes in a [`KirchhoffTable`].
pub const KIRCHHOFF_NODES: usize = 1024;

/// Tabulated Kirchhoff transform `β(s) = ∫_0^s α` with monotone cubic
/// Hermite interpolation and its inverse `ℬ = β^-1`.
///
/// The lower half of the table stores `β` accumulated from `s = 0`; the upper
/// half stores the gap `θ* - β` accumulated from `s = 1`. Near `s = 1` the
/// increments of `β` fall below one ulp of `θ*`, so only the gap form keeps
/// the nodes strictly ordered and the inverse accurate there.
#[derive(Debug, Clone)]
pub struct KirchhoffTable {
    pub medium: Medium,
    nodes: Vec<f64>,
    /// `β(s_i)` for `i <= mid`.
    lower: Vec<f64>,
    /// `θ* - β(s_i)` for `i >= mid`, indexed by `i - mid`.
    upper: Vec<f64>,
    slopes: Vec<f64>,
    mid: usize,
    theta_star: f64,
}

impl KirchhoffTable {
    pub fn build(rock: &RockParams) -> Result<Self> {
        Self::with_nodes(rock, KIRCHHOFF_NODES)
    }

    pub fn with_nodes(rock: &RockParams, count: usize) -> Result<Self> {
        if count < 4 {
            return Err(Error::param("nodes", "need at least 4 table nodes"));
        }
        let law = rock.law.clone();
        let nodes: Vec<f64> = (0..count)
            .map(|i| {
                let t = std::f64::consts::PI * i as f64 / (count - 1) as f64;
                0.5 * (1.0 - t.cos())
            })
            .collect();
        let pieces: Vec<f64> = nodes
            .windows(2)
            .map(|w| integrate(|x| law.alpha(x), w[0], w[1], 1e-16))
            .collect();
        for (i, p) in pieces.iter().enumerate() {
            if !(*p > 0.0) {
                return Err(Error::domain(format!(
                    "Kirchhoff transform not strictly increasing on [{}, {}]",
                    nodes[i],
                    nodes[i + 1]
                )));
            }
        }
        let mid = count / 2;
        let mut lower = vec![0.0; mid + 1];
        for i in 0..mid {
            lower[i + 1] = lower[i] + pieces[i];
        }
        let mut upper = vec![0.0; count - mid];
        for i in (mid..count - 1).rev() {
            upper[i - mid] = upper[i - mid + 1] + pieces[i];
        }
        let theta_star = lower[mid] + upper[0];

        let mut slopes: Vec<f64> = nodes.iter().map(|&s| law.alpha(s)).collect();
        // Fritsch–Carlson limiter
        for i in 0..count - 1 {
            let secant = pieces[i] / (nodes[i + 1] - nodes[i]);
            let (a, b) = (slopes[i] / secant, slopes[i + 1] / secant);
            let r = a * a + b * b;
            if r > 9.0 {
                let t = 3.0 / r.sqrt();
                slopes[i] = t * a * secant;
                slopes[i + 1] = t * b * secant;
            }
        }
        Ok(Self {
            medium: rock.medium,
            nodes,
            lower,
            upper,
            slopes,
            mid,
            theta_star,
        })
    }

    /// `θ* = β(1)`.
    pub fn theta_star(&self) -> f64 {
        self.theta_star
    }

    fn segment(&self, s: f64) -> usize {
        let k = self.nodes.partition_point(|&x| x <= s);
        k.clamp(1, self.nodes.len() - 1) - 1
    }

    /// Hermite interpolant on segment `i` in the stored representation:
    /// `β` on the lower half, `θ* - β` on the upper half. Returns value and
    /// derivative with respect to `s`.
    fn hermite(&self, i: usize, s: f64) -> (f64, f64) {
        let (x0, x1) = (self.nodes[i], self.nodes[i + 1]);
        let h = x1 - x0;
        let t = (s - x0) / h;
        let (y0, y1, sign) = if i < self.mid {
            (self.lower[i], self.lower[i + 1], 1.0)
        } else {
            (self.upper[i - self.mid], self.upper[i + 1 - self.mid], -1.0)
        };
        let (m0, m1) = (sign * self.slopes[i] * h, sign * self.slopes[i + 1] * h);
        let t2 = t * t;
        let t3 = t2 * t;
        let v = (2.0 * t3 - 3.0 * t2 + 1.0) * y0
            + (t3 - 2.0 * t2 + t) * m0
            + (-2.0 * t3 + 3.0 * t2) * y1
            + (t3 - t2) * m1;
        let dv = ((6.0 * t2 - 6.0 * t) * y0
            + (3.0 * t2 - 4.0 * t + 1.0) * m0
            + (-6.0 * t2 + 6.0 * t) * y1
            + (3.0 * t2 - 2.0 * t) * m1)
            / h;
        (v, dv)
    }

    /// `β(s)`; `s` is clamped to `[0, 1]`.
    pub fn beta(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        let i = self.segment(s);
        let v = self.hermite(i, s).0;
        if i < self.mid {
            v
        } else {
            self.theta_star - v
        }
    }

    /// Derivative of the interpolant, `dβ/ds`.
    pub fn beta_derivative(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, 1.0);
        let i = self.segment(s);
        let d = self.hermite(i, s).1;
        if i < self.mid {
            d
        } else {
            -d
        }
    }

    /// `ℬ(θ) = β^-1(θ)`. Values within `1e-10 θ*` outside `[0, θ*]` are
    /// clamped; anything further out is a domain error.
    pub fn beta_inverse(&self, theta: f64) -> Result<f64> {
        let ts = self.theta_star;
        let tol = 1e-10 * ts;
        if !(theta >= -tol && theta <= ts + tol) {
            return Err(Error::domain(format!(
                "complementary pressure {theta} outside [0, {ts}]"
            )));
        }
        Ok(self.inverse_clamped(theta))
    }

    /// Inverse with unconditional clamping to `[0, θ*]`.
    pub fn inverse_clamped(&self, theta: f64) -> f64 {
        let ts = self.theta_star;
        if theta <= 0.0 {
            return 0.0;
        }
        if theta >= ts {
            return 1.0;
        }
        // target and segment in the stored representation
        let (i, target) = if theta <= self.lower[self.mid] {
            let k = self.lower.partition_point(|&v| v <= theta);
            (k.clamp(1, self.mid) - 1, theta)
        } else {
            let gap = ts - theta;
            // upper is decreasing
            let k = self.upper.partition_point(|&v| v > gap);
            (self.mid + k.clamp(1, self.upper.len() - 1) - 1, gap)
        };
        let increasing = i < self.mid;
        let (mut lo, mut hi) = (self.nodes[i], self.nodes[i + 1]);
        let (y0, y1) = self.hermite_ends(i);
        let mut s = lo + (hi - lo) * ((target - y0) / (y1 - y0)).clamp(0.0, 1.0);
        for _ in 0..100 {
            let (v, dv) = self.hermite(i, s);
            let f = v - target;
            let past = if increasing { f > 0.0 } else { f < 0.0 };
            if past {
                hi = s;
            } else {
                lo = s;
            }
            let mut next = if dv != 0.0 { s - f / dv } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - s).abs() <= 4.0 * f64::EPSILON * s.max(f64::MIN_POSITIVE)
                || hi - lo <= f64::EPSILON * hi
            {
                return next;
            }
            s = next;
        }
        s
    }

    fn hermite_ends(&self, i: usize) -> (f64, f64) {
        if i < self.mid {
            (self.lower[i], self.lower[i + 1])
        } else {
            (self.upper[i - self.mid], self.upper[i + 1 - self.mid])
        }
    }

    /// `dℬ/dθ = 1 / β'(ℬ(θ))`, capped where `β'` vanishes.
    pub fn inverse_derivative(&self, theta: f64) -> f64 {
        let s = self.inverse_clamped(theta);
        1.0 / self.beta_derivative(s).max(1e-10)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn rock(a: f64) -> RockParams {
        RockParams::with_power_law(Medium::Fracture, 0.4, 1.0, a).unwrap()
    }

    #[test]
    fn pc_examples() {
        assert_eq!(pc(&rock(1.0), 1.0).unwrap(), 0.0);
        assert_relative_eq!(pc(&rock(1.0), 0.25).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(pc(&rock(2.0), 0.25).unwrap(), 2.0, epsilon = 1e-15);
        assert!(pc(&rock(1.0), 0.0).is_err());
        assert!(pc(&rock(1.0), 1.1).is_err());
    }

    #[test]
    fn pc_inverse_examples() {
        let r = rock(1.0);
        assert_eq!(pc_inverse(&r, 0.0).unwrap(), 1.0);
        assert_relative_eq!(pc_inverse(&r, 1.0).unwrap(), 0.25, epsilon = 1e-15);
        assert!(pc_inverse(&r, -0.1).is_err());
        for s in [0.1, 0.5, 0.9] {
            let back = pc_inverse(&r, pc(&r, s).unwrap()).unwrap();
            assert!((back - s).abs() < 1e-12);
        }
    }

    #[test]
    fn generic_inverse_agrees_with_closed_form() {
        #[derive(Debug)]
        struct Wrapped(PowerLaw);
        impl SaturationLaw for Wrapped {
            fn pc(&self, s: f64) -> f64 {
                self.0.pc(s)
            }
            fn dpc(&self, s: f64) -> f64 {
                self.0.dpc(s)
            }
            fn lambda_w(&self, s: f64) -> f64 {
                self.0.lambda_w(s)
            }
            fn lambda_n(&self, s: f64) -> f64 {
                self.0.lambda_n(s)
            }
        }
        let law = PowerLaw::new(1.3).unwrap();
        let w = Wrapped(law);
        for p in [0.0, 0.01, 0.7, 3.0, 50.0] {
            assert!((w.pc_inverse(p) - law.pc_inverse(p)).abs() < 1e-13);
        }
        for s in [0.05, 0.3, 0.77] {
            assert!((w.alpha(s) - law.alpha(s)).abs() < 1e-14);
        }
    }

    #[test]
    fn mobility_examples() {
        let r = rock(1.0);
        let m0 = mobilities(&r, 0.0).unwrap();
        assert_eq!((m0.wetting, m0.nonwetting, m0.total), (0.0, 1.0, 1.0));
        let mh = mobilities(&r, 0.5).unwrap();
        assert_eq!((mh.wetting, mh.nonwetting, mh.total), (0.25, 0.25, 0.5));
        let m1 = mobilities(&r, 1.0).unwrap();
        assert_eq!((m1.wetting, m1.nonwetting, m1.total), (1.0, 0.0, 1.0));
        assert!(mobilities(&r, -0.01).is_err());
        assert_relative_eq!(total_mobility_floor(&r), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn matching_examples() {
        let f = rock(1.0);
        let m = RockParams::with_power_law(Medium::Matrix, 0.2, 0.01, 2.0).unwrap();
        let sys = TwoRockSystem::new(f.clone(), m).unwrap();
        assert_relative_eq!(matching_p(&sys, 0.25).unwrap(), 4.0 / 9.0, epsilon = 1e-14);
        assert_eq!(matching_p(&sys, 1.0).unwrap(), 1.0);
        assert_eq!(matching_p(&sys, 0.0).unwrap(), 0.0);
        let same = TwoRockSystem::new(
            f.clone(),
            RockParams::with_power_law(Medium::Matrix, 0.2, 0.01, 1.0).unwrap(),
        )
        .unwrap();
        for s in [0.0, 0.013, 0.5, 0.999, 1.0] {
            assert!((matching_p(&same, s).unwrap() - s).abs() <= 1e-12);
            assert!((matching_p_derivative(&same, s) - 1.0).abs() <= 1e-9);
        }
        for s in [0.05, 0.3, 0.8] {
            let h = 1e-6;
            let fd = (matching_p(&sys, s + h).unwrap() - matching_p(&sys, s - h).unwrap()) / (2.0 * h);
            assert_relative_eq!(matching_p_derivative(&sys, s), fd, max_relative = 1e-6);
        }
    }

    #[test]
    fn alpha_examples() {
        let r = rock(1.0);
        assert_eq!(alpha(&r, 1.0), 0.0);
        assert_eq!(alpha(&r, 0.0), 0.0);
        assert!(alpha(&r, 1e-12) < 1e-5);
        assert_relative_eq!(alpha(&r, 0.5), 0.25 / 2f64.sqrt(), epsilon = 1e-15);
    }

    #[test]
    fn kirchhoff_table_examples() {
        let r = rock(1.0);
        let t = KirchhoffTable::build(&r).unwrap();
        assert_eq!(t.beta(0.0), 0.0);
        // mpmath quadrature of α to 30 digits
        assert_relative_eq!(t.theta_star(), 0.124275982204213115, max_relative = 1e-10);
        assert_relative_eq!(t.beta(0.5), 0.094265159107842148, max_relative = 1e-9);
        assert!(t.beta(0.5) < t.beta(0.7));
        assert_eq!(t.beta_inverse(0.0).unwrap(), 0.0);
        assert_eq!(t.beta_inverse(t.theta_star()).unwrap(), 1.0);
        for s in [0.2, 0.5, 0.8] {
            assert!((t.beta_inverse(t.beta(s)).unwrap() - s).abs() < 1e-8);
        }
        assert!(t.beta_inverse(-1e-3).is_err());
        assert!(t.beta_inverse(t.theta_star() * 1.01).is_err());
        assert_eq!(t.beta_inverse(t.theta_star() * (1.0 + 1e-12)).unwrap(), 1.0);
    }

    #[test]
    fn phase_split_examples() {
        let r = rock(1.0);
        let (pw, pn) = global_pressure_split(&r, 1.0, 3.5).unwrap();
        assert_eq!((pw, pn), (3.5, 3.5));
        // mpmath quadrature at 30 digits
        let (pw, pn) = global_pressure_split(&r, 0.5, 0.0).unwrap();
        assert_relative_eq!(pw, -0.082421766172010927, max_relative = 1e-10);
        assert_relative_eq!(pn, 0.33179179620108412, max_relative = 1e-10);
        assert_relative_eq!(pn - pw, pc(&r, 0.5).unwrap(), max_relative = 1e-10);
        assert!(global_pressure_split(&r, 0.0, 0.0).is_err());
    }

    #[test]
    fn parameter_validation() {
        assert!(RockParams::with_power_law(Medium::Fracture, 1.2, 1.0, 1.0).is_err());
        assert!(RockParams::with_power_law(Medium::Fracture, 0.3, 0.0, 1.0).is_err());
        assert!(RockParams::with_power_law(Medium::Fracture, 0.3, 1.0, -1.0).is_err());
        assert!(PowerLaw::with_exponents(1.0, 0.5, 1.2, 2.0).is_err());
    }

    mod properties {
        use std::sync::OnceLock;

        use proptest::prelude::*;

        use super::*;

        fn system(af: f64, am: f64) -> TwoRockSystem {
            let f = RockParams::with_power_law(Medium::Fracture, 0.4, 1.0, af).unwrap();
            let m = RockParams::with_power_law(Medium::Matrix, 0.2, 1.0, am).unwrap();
            TwoRockSystem::new(f, m).unwrap()
        }

        fn table() -> &'static KirchhoffTable {
            static T: OnceLock<KirchhoffTable> = OnceLock::new();
            T.get_or_init(|| KirchhoffTable::build(&rock(1.0)).unwrap())
        }

        fn ordered(s: f64, t: f64) -> (f64, f64) {
            (s.min(t), s.max(t))
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn curves_are_monotone(a in 0.1f64..5.0, s in 0.01f64..=1.0, t in 0.01f64..=1.0) {
                let (lo, hi) = ordered(s, t);
                prop_assume!(hi > lo);
                let r = rock(a);
                prop_assert!(pc(&r, hi).unwrap() < pc(&r, lo).unwrap());
                let (ml, mh) = (mobilities(&r, lo).unwrap(), mobilities(&r, hi).unwrap());
                prop_assert!(mh.wetting >= ml.wetting);
                prop_assert!(mh.nonwetting <= ml.nonwetting);
                prop_assert!(table().beta(hi) >= table().beta(lo));
            }

            #[test]
            fn pc_round_trip(a in 0.1f64..5.0, s in 0.01f64..=1.0) {
                let r = rock(a);
                let back = pc_inverse(&r, pc(&r, s).unwrap()).unwrap();
                prop_assert!((back - s).abs() <= 1e-8, "{} vs {}", back, s);
            }

            #[test]
            fn kirchhoff_round_trip(s in 0.01f64..=1.0) {
                let back = table().beta_inverse(table().beta(s)).unwrap();
                prop_assert!((back - s).abs() <= 1e-8, "{} vs {}", back, s);
            }

            #[test]
            fn total_mobility_stays_above_floor(s in 0.0f64..=1.0) {
                let r = rock(1.0);
                let floor = total_mobility_floor(&r);
                prop_assert!((floor - 0.5).abs() < 1e-12);
                prop_assert!(mobilities(&r, s).unwrap().total >= floor - 1e-15);
            }

            #[test]
            fn matching_is_consistent_and_increasing(
                af in 0.2f64..5.0,
                am in 0.2f64..5.0,
                s in 0.01f64..=1.0,
                t in 0.01f64..=1.0,
            ) {
                let sys = system(af, am);
                let sm = matching_p(&sys, s).unwrap();
                let (pf, pm) = (sys.fracture.law.pc(s), sys.matrix.law.pc(sm));
                prop_assert!((pf - pm).abs() <= 1e-10 * pf.abs().max(1.0), "{} vs {}", pf, pm);
                let (lo, hi) = ordered(s, t);
                prop_assert!(matching_p(&sys, hi).unwrap() >= matching_p(&sys, lo).unwrap());
            }

            #[test]
            fn equal_laws_match_identically(a in 0.1f64..5.0, s in 0.0f64..=1.0) {
                let sys = system(a, a);
                prop_assert!((matching_p(&sys, s).unwrap() - s).abs() <= 1e-12);
            }

            #[test]
            fn phase_split_reproduces_capillary_pressure(s in 0.01f64..=1.0, p in -10.0f64..10.0) {
                let r = rock(1.0);
                let (pw, pn) = global_pressure_split(&r, s, p).unwrap();
                let want = pc(&r, s).unwrap();
                prop_assert!((pn - pw - want).abs() <= 1e-9 * want.max(1.0));
            }
        }
    }
}
