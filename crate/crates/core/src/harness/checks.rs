use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::constitutive::{
    global_pressure_split, matching_p, mobilities, pc, pc_inverse, total_mobility_floor, KirchhoffTable, RockParams,
    TwoRockSystem,
};
use crate::error::Result;

/// Outcome of one property over the sample set.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyCheck {
    pub name: String,
    /// Largest violation; zero for order checks that hold.
    pub worst: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl PropertyCheck {
    fn new(name: &str, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            worst,
            tolerance,
            passed: worst <= tolerance,
        }
    }
}

/// Sorted saturations drawn uniformly from `[0.01, 1]`.
pub fn sample_saturations(seed: u64, count: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s: Vec<f64> = (0..count).map(|_| rng.random_range(0.01..=1.0)).collect();
    s.sort_by(f64::total_cmp);
    s
}

/// Largest amount by which `f` fails to be non-decreasing along sorted `s`
/// (`sign = 1`) or non-increasing (`sign = -1`).
fn order_violation(s: &[f64], sign: f64, f: impl Fn(f64) -> f64) -> f64 {
    let v: Vec<f64> = s.iter().map(|&x| sign * f(x)).collect();
    v.windows(2).map(|w| (w[0] - w[1]).max(0.0)).fold(0.0, f64::max)
}

fn rock_checks(rock: &RockParams, label: &str, s: &[f64], out: &mut Vec<PropertyCheck>) -> Result<()> {
    let law = &rock.law;
    let table = KirchhoffTable::build(rock)?;
    // strictly decreasing Pc: non-increasing plus no repeated values on distinct samples
    let mut pc_viol = order_violation(s, -1.0, |x| law.pc(x));
    for w in s.windows(2) {
        if w[1] > w[0] && w[0] < 1.0 && law.pc(w[1]) >= law.pc(w[0]) {
            pc_viol = pc_viol.max(f64::MIN_POSITIVE);
        }
    }
    out.push(PropertyCheck::new(&format!("{label}.pc_decreasing"), pc_viol, 0.0));
    out.push(PropertyCheck::new(
        &format!("{label}.lambda_w_increasing"),
        order_violation(s, 1.0, |x| law.lambda_w(x)),
        0.0,
    ));
    out.push(PropertyCheck::new(
        &format!("{label}.lambda_n_decreasing"),
        order_violation(s, -1.0, |x| law.lambda_n(x)),
        0.0,
    ));
    out.push(PropertyCheck::new(
        &format!("{label}.beta_increasing"),
        order_violation(s, 1.0, |x| table.beta(x)),
        0.0,
    ));

    let mut pc_rt = 0.0f64;
    let mut beta_rt = 0.0f64;
    let mut floor_gap = 0.0f64;
    let l0 = total_mobility_floor(rock);
    for &x in s {
        let p = pc(rock, x)?;
        pc_rt = pc_rt.max((pc_inverse(rock, p)? - x).abs());
        beta_rt = beta_rt.max((table.beta_inverse(table.beta(x))? - x).abs());
        floor_gap = floor_gap.max(l0 - mobilities(rock, x)?.total);
    }
    out.push(PropertyCheck::new(&format!("{label}.pc_round_trip"), pc_rt, 1e-8));
    out.push(PropertyCheck::new(&format!("{label}.beta_round_trip"), beta_rt, 1e-8));
    out.push(PropertyCheck::new(&format!("{label}.total_mobility_floor"), floor_gap.max(0.0), 1e-14));
    Ok(())
}

/// Monotonicity, round-trip, `L0`, matching-consistency, identity and
/// phase-split checks on `count` seeded samples.
pub fn constitutive_suite(rocks: &TwoRockSystem, seed: u64, count: usize) -> Result<Vec<PropertyCheck>> {
    let s = sample_saturations(seed, count);
    let mut out = Vec::new();
    rock_checks(&rocks.fracture, "fracture", &s, &mut out)?;
    rock_checks(&rocks.matrix, "matrix", &s, &mut out)?;

    out.push(PropertyCheck::new(
        "matching_increasing",
        order_violation(&s, 1.0, |x| matching_p(rocks, x).unwrap_or(f64::NAN)),
        0.0,
    ));
    let mut a3 = 0.0f64;
    for &x in &s {
        let sm = matching_p(rocks, x)?;
        let (pf, pm) = (pc(&rocks.fracture, x)?, rocks.matrix.law.pc(sm));
        a3 = a3.max((pf - pm).abs() / pf.abs().max(1.0));
    }
    out.push(PropertyCheck::new("matching_consistency", a3, 1e-10));

    let twin = RockParams::new(
        rocks.matrix.medium,
        rocks.matrix.porosity,
        rocks.matrix.permeability,
        Arc::clone(&rocks.fracture.law),
    )?;
    let same = TwoRockSystem::new(rocks.fracture.clone(), twin)?;
    let mut id = 0.0f64;
    for &x in &s {
        id = id.max((matching_p(&same, x)? - x).abs());
    }
    out.push(PropertyCheck::new("matching_identity", id, 1e-12));

    let mut split = 0.0f64;
    let stride = (s.len() / 100).max(1);
    for (i, &x) in s.iter().step_by(stride).take(100).enumerate() {
        let p = i as f64 * 0.37 - 10.0;
        let (pw, pn) = global_pressure_split(&rocks.fracture, x, p)?;
        let want = pc(&rocks.fracture, x)?;
        split = split.max((pn - pw - want).abs() / want.max(1.0));
    }
    out.push(PropertyCheck::new("phase_split_identity", split, 1e-9));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constitutive::Medium;

    #[test]
    fn samples_are_reproducible_and_in_range() {
        let a = sample_saturations(7, 50);
        assert_eq!(a, sample_saturations(7, 50));
        assert_ne!(a, sample_saturations(8, 50));
        assert!(a.iter().all(|s| (0.01..=1.0).contains(s)));
        assert!(a.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn reference_rocks_pass_the_suite() {
        let f = RockParams::with_power_law(Medium::Fracture, 0.4, 1.0, 1.0).unwrap();
        let m = RockParams::with_power_law(Medium::Matrix, 0.2, 1.0, 2.0).unwrap();
        let rocks = TwoRockSystem::new(f, m).unwrap();
        let checks = constitutive_suite(&rocks, 0, 200).unwrap();
        for c in &checks {
            assert!(c.passed, "{c:?}");
        }
        assert!(checks.iter().any(|c| c.name == "matching_identity"));
    }

    #[test]
    fn order_violation_detects_a_dip() {
        let s = [0.1, 0.2, 0.3];
        assert_eq!(order_violation(&s, 1.0, |x| x), 0.0);
        assert!((order_violation(&s, 1.0, |x| if x == 0.2 { 1.0 } else { x }) - 0.7).abs() < 1e-15);
    }
}
