//! Closed-form flows and solutions used as oracles. Nothing here calls the
//! integrator or the transport code.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Rigid rotation at angular speed `omega`: `X(t, s, y) = Rot(omega (t - s)) y`.
pub fn rotation_flow(omega: f64, t: f64, s: f64, y: &[f64]) -> [f64; 2] {
    let (sn, cs) = (omega * (t - s)).sin_cos();
    [cs * y[0] - sn * y[1], sn * y[0] + cs * y[1]]
}

/// `b = A x` with `A = diag(a0, a1)`.
pub fn diagonal_flow(a: [f64; 2], t: f64, s: f64, y: &[f64]) -> [f64; 2] {
    [y[0] * (a[0] * (t - s)).exp(), y[1] * (a[1] * (t - s)).exp()]
}

pub fn translation_flow(c: [f64; 2], t: f64, s: f64, y: &[f64]) -> [f64; 2] {
    [y[0] + c[0] * (t - s), y[1] + c[1] * (t - s)]
}

/// `b = (1 + alpha) |x|^(alpha - 1) (-x2, x1)`: circles of constant radius
/// traversed at angular speed `(1 + alpha) r^(alpha - 1)`.
pub fn swirl_flow(alpha: f64, t: f64, s: f64, y: &[f64]) -> [f64; 2] {
    let r = (y[0] * y[0] + y[1] * y[1]).sqrt();
    if r == 0.0 {
        return [0.0, 0.0];
    }
    let theta = y[1].atan2(y[0]) + (1.0 + alpha) * r.powf(alpha - 1.0) * (t - s);
    [r * theta.cos(), r * theta.sin()]
}

pub fn gaussian(center: [f64; 2], sigma: f64, x: &[f64]) -> f64 {
    let dx = x[0] - center[0];
    let dy = x[1] - center[1];
    (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
}

/// Uniform samples in the disc of radius `r` with `|y| >= r_min`.
pub fn disc_samples(n: usize, r_min: f64, r: f64, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = [rng.gen_range(-r..r), rng.gen_range(-r..r)];
        let q = (p[0] * p[0] + p[1] * p[1]).sqrt();
        if q <= r && q >= r_min {
            out.push(p);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
