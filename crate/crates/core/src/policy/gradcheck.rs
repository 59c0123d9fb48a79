//! Central finite-difference verification of analytic gradients.

use rand::Rng as _;

use super::params::{GradVector, PolicyParams};
use crate::rng;

/// Gradients whose magnitude is below this floor are compared absolutely.
pub const ABS_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub coords: Vec<usize>,
    pub max_rel_err: f64,
    pub worst: Option<(usize, f64, f64)>,
}

/// Relative error `|a - n| / max(|a|, |n|, ABS_FLOOR)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Compares `analytic` against `(f(θ + h e_i) - f(θ - h e_i)) / 2h` on `n_coords`
/// coordinates drawn uniformly with the given seed.
pub fn check<F>(params: &PolicyParams, analytic: &GradVector, n_coords: usize, h: f64, seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut r = rng::stream(seed, "gradcheck", 0);
    let coords: Vec<usize> = (0..n_coords).map(|_| r.gen_range(0..params.len())).collect();
    check_coords(params, analytic, &coords, h, f)
}

pub fn check_coords<F>(params: &PolicyParams, analytic: &GradVector, coords: &[usize], h: f64, f: F) -> GradCheckReport
where
    F: Fn(&PolicyParams) -> f64,
{
    let mut probe = params.clone();
    let mut max_rel_err = 0.0;
    let mut worst = None;
    for &i in coords {
        let orig = probe.values[i];
        probe.values[i] = orig + h;
        let up = f(&probe);
        probe.values[i] = orig - h;
        let down = f(&probe);
        probe.values[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic.values[i], numeric);
        if e > max_rel_err || worst.is_none() {
            max_rel_err = f64::max(max_rel_err, e);
            worst = Some((i, analytic.values[i], numeric));
        }
    }
    GradCheckReport {
        coords: coords.to_vec(),
        max_rel_err,
        worst,
    }
}

/// Coordinates split evenly across the parameter blocks, so every layer is probed.
pub fn stratified_coords(params: &PolicyParams, per_block: usize, seed: u64) -> Vec<usize> {
    let l = params.config.layout();
    let mut r = rng::stream(seed, "gradcheck-strata", 0);
    let mut out = Vec::new();
    for block in [l.emb, l.w1, l.b1, l.w2, l.b2] {
        for _ in 0..per_block {
            out.push(r.gen_range(block.clone()));
        }
    }
    out
}
