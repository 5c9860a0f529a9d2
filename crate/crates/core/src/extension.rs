//! Flow-tube test functions and their McShane extensions under `d_lambda`.
//!
//! On the tube swept by a Lusin set `K`, `psi(t, X(t, 0, y)) = Psi(t, y)`.
//! [`mcshane_extend`] extends `psi` to every node of a [`SpaceTimeGraph`] by
//! `psi_eps(p) = min_q [psi(q) + L_lambda d_lambda(q, p)]`, optionally clamped
//! to the range of `psi`. [`pullback_extension`] brings the result back to the
//! `(t, y)` lattice.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{fmt_f64, FlowGrid, LusinSet};
use crate::geometry::dist;
use crate::metric::{pair_scan, sample_nodes, to_length, PairScan, SpaceTimeGraph, TubeSample};
use crate::transport::DensityField;
use crate::weakform::{lagrangian_residual_sampled, sample_on_grid, TestFunction};

/// Relative roundoff allowed when comparing floating-point Lipschitz
/// quotients against a certified constant.
pub const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct TubeFunction {
    pub members: Vec<usize>,
    /// One sample per member and slice.
    pub samples: Vec<TubeSample>,
    /// `Lip(Psi)` of the generating test function.
    pub directional_lip: f64,
    /// Largest time difference quotient along member trajectories.
    pub measured_directional: f64,
    /// Largest `|psi(p) - psi(q)| / |p - q|` over sampled tube pairs.
    pub euclid_lip: f64,
}

fn space_time_distance(grid: &FlowGrid, a: (usize, usize), b: (usize, usize)) -> f64 {
    let dt = grid.times()[a.0] - grid.times()[b.0];
    let dx = dist(grid.position(a.0, a.1), grid.position(b.0, b.1));
    (dt * dt + dx * dx).sqrt()
}

/// Samples `Psi(t_j, y_i)` on the tube of `lusin`.
pub fn build_tube_function(
    psi: &TestFunction,
    grid: &FlowGrid,
    lusin: &LusinSet,
    pair_budget: usize,
    seed: u64,
) -> Result<TubeFunction> {
    if lusin.members.is_empty() {
        return Err(Error::Degenerate("Lusin set is empty".into()));
    }
    if psi.dim() != grid.dim() {
        return Err(Error::Config("test function and grid dimensions differ".into()));
    }
    if let Some(&i) = lusin.members.iter().find(|&&i| i >= grid.count() || !grid.is_active(i)) {
        return Err(Error::Config(format!("Lusin member {i} is not an active trajectory of the grid")));
    }
    let mut samples = Vec::with_capacity(lusin.members.len() * grid.time_count());
    for (j, &t) in grid.times().iter().enumerate() {
        for &i in &lusin.members {
            samples.push(TubeSample {
                slice: j,
                particle: i,
                value: psi.eval(t, grid.base_point(i)),
            });
        }
    }
    let measured_directional = crate::metric::directional_constant(&samples, grid.times());

    let n = samples.len();
    let quotient = |a: &TubeSample, b: &TubeSample| {
        let d = space_time_distance(grid, (a.slice, a.particle), (b.slice, b.particle));
        if d > 0.0 {
            (a.value - b.value).abs() / d
        } else {
            0.0
        }
    };
    let euclid_lip = if n.saturating_mul(n) <= pair_budget {
        (0..n)
            .into_par_iter()
            .map(|a| {
                samples[a + 1..]
                    .iter()
                    .map(|b| quotient(&samples[a], b))
                    .fold(0.0, f64::max)
            })
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0, f64::max)
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs: Vec<(usize, usize)> = (0..pair_budget)
            .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
            .collect();
        pairs
            .par_iter()
            .map(|&(a, b)| quotient(&samples[a], &samples[b]))
            .collect::<Vec<f64>>()
            .into_iter()
            .fold(0.0, f64::max)
    };
    Ok(TubeFunction {
        members: lusin.members.clone(),
        samples,
        directional_lip: psi.lip(),
        measured_directional,
        euclid_lip,
    })
}

#[derive(Debug, Clone)]
pub struct ExtendedFunction {
    pub lambda: f64,
    pub clamp: bool,
    /// One value per graph node.
    pub values: Vec<f64>,
    pub on_tube: Vec<bool>,
    /// `L_lambda` of the tube function, the constant used in the extension.
    pub l_lambda: f64,
    /// `(min psi, max psi)` over the tube.
    pub range: (f64, f64),
    /// Largest amount by which another anchor undercut a tube value in the
    /// minimization (roundoff only; zero in exact arithmetic).
    pub anchor_defect: f64,
}

/// McShane extension of `tube` to every node of `g`. Tube nodes keep their
/// value; elsewhere the minimum over all tube anchors is taken.
pub fn mcshane_extend(tube: &TubeFunction, g: &SpaceTimeGraph, clamp: bool, pair_budget: usize, seed: u64) -> Result<ExtendedFunction> {
    let (nodes, values) = sample_nodes(g, &tube.samples)?;
    let l = if nodes.len() >= 2 {
        pair_scan(g, &nodes, &values, pair_budget, seed)?.lip_lambda
    } else {
        0.0
    };
    if !l.is_finite() {
        return Err(Error::Internal("tube Lipschitz constant is not finite".into()));
    }
    let n = g.node_count();
    let best = inf_convolution(g, &nodes, &values, l);
    let mut on_tube = vec![false; n];
    let mut out = best;
    let mut anchor_defect = 0.0f64;
    for (&q, &v) in nodes.iter().zip(&values) {
        on_tube[q] = true;
        anchor_defect = anchor_defect.max(v - out[q]);
        out[q] = v;
    }
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if anchor_defect > ROUNDOFF * scale {
        return Err(Error::Internal(format!(
            "McShane minimum undercuts a tube value by {anchor_defect}"
        )));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if clamp {
        for v in out.iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }
    Ok(ExtendedFunction {
        lambda: g.lambda(),
        clamp,
        values: out,
        on_tube,
        l_lambda: l,
        range: (lo, hi),
        anchor_defect,
    })
}

/// `min_q [values[q] + l d(q, p)]` for every node `p`, evaluated per anchor
/// exactly as `v + l * to_length(units)`. Anchors run in increasing value; an
/// anchor's search stops expanding at nodes where it trails the running
/// minimum by more than roundoff, since by the triangle inequality it cannot
/// win anywhere past them.
fn inf_convolution(g: &SpaceTimeGraph, nodes: &[usize], values: &[f64], l: f64) -> Vec<f64> {
    let n = g.node_count();
    let mut best = vec![f64::INFINITY; n];
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|a, b| values[*a].total_cmp(&values[*b]).then(a.cmp(b)));
    let mut dist = vec![u64::MAX; n];
    let mut touched = Vec::new();
    let mut heap = BinaryHeap::new();
    for k in order {
        let (q, v) = (nodes[k], values[k]);
        for t in touched.drain(..) {
            dist[t] = u64::MAX;
        }
        dist[q] = 0;
        touched.push(q);
        heap.push(Reverse((0u64, q)));
        while let Some(Reverse((du, u))) = heap.pop() {
            if du > dist[u] {
                continue;
            }
            let cand = v + l * to_length(du);
            if cand < best[u] {
                best[u] = cand;
            } else if cand - best[u] > 1e-9 * (cand.abs() + best[u].abs()) {
                continue;
            }
            for (x, w) in g.edges(u) {
                let d = du + w;
                if d < dist[x] {
                    if dist[x] == u64::MAX {
                        touched.push(x);
                    }
                    dist[x] = d;
                    heap.push(Reverse((d, x)));
                }
            }
        }
    }
    best
}

/// `L' = max |f(t_j, X_j) - f(t_k, X_k)| / |t_j - t_k|` over every trajectory
/// of the graph, tube member or not.
pub fn verify_directional_lipschitz(f: &ExtendedFunction, g: &SpaceTimeGraph) -> f64 {
    let m = g.trajectory_count();
    let nt = g.time_count();
    (0..m)
        .into_par_iter()
        .map(|k| {
            let mut best = 0.0f64;
            for j in 0..nt {
                for l in j + 1..nt {
                    let a = j * m + k;
                    let b = l * m + k;
                    let q = (f.values[a] - f.values[b]).abs() / (g.time_of(b) - g.time_of(a));
                    best = best.max(q);
                }
            }
            best
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(0.0, f64::max)
}

/// Pair scan of the extension over all graph nodes: `lip_lambda` is
/// `Lip(psi_eps; d_lambda)`, `lip_euclid` and `c2` give the Euclidean bound.
pub fn verify_mcshane(f: &ExtendedFunction, g: &SpaceTimeGraph, pair_budget: usize, seed: u64) -> Result<PairScan> {
    let nodes: Vec<usize> = (0..g.node_count()).collect();
    pair_scan(g, &nodes, &f.values, pair_budget, seed)
}

/// `Psi_eps(t_j, y_i) = psi_eps(t_j, X(t_j, 0, y_i))` on the flow-grid
/// lattice; escaped trajectories get zero.
pub fn pullback_extension(f: &ExtendedFunction, g: &SpaceTimeGraph, grid: &FlowGrid) -> Result<DensityField> {
    DensityField::on_trajectories(grid, pullback_values(f, g, grid))
}

pub fn pullback_values(f: &ExtendedFunction, g: &SpaceTimeGraph, grid: &FlowGrid) -> Vec<Vec<f64>> {
    (0..grid.time_count())
        .map(|j| {
            (0..grid.count())
                .map(|i| g.trajectory_node(j, i).map_or(0.0, |n| f.values[n]))
                .collect()
        })
        .collect()
}

/// Certified constants of one extension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Certificate {
    pub epsilon: f64,
    pub lambda: f64,
    /// `Lip(Psi)`.
    pub l: f64,
    pub l_lambda: f64,
    /// Measured `Lip(psi_eps; d_lambda)` on sampled node pairs.
    pub mcshane_lip: f64,
    /// `L'`.
    pub l_prime: f64,
    pub euclid_lip: f64,
    pub c2: f64,
}

impl Certificate {
    pub fn write_csv<W: Write>(rows: &[Certificate], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epsilon", "lambda", "l", "l_lambda", "mcshane_lip", "l_prime", "euclid_lip", "c2"])?;
        for r in rows {
            w.write_record(
                [r.epsilon, r.lambda, r.l, r.l_lambda, r.mcshane_lip, r.l_prime, r.euclid_lip, r.c2].map(fmt_f64),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

impl ExtendedFunction {
    /// Rows `(t, x.., value, on_tube)` for every graph node.
    pub fn write_csv<W: Write>(&self, g: &SpaceTimeGraph, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..g.dim()).map(|d| format!("x{d}")));
        header.push("value".into());
        header.push("on_tube".into());
        w.write_record(&header)?;
        for n in 0..g.node_count() {
            let mut row = vec![fmt_f64(g.time_of(n))];
            row.extend(g.point_of(n).iter().map(|v| fmt_f64(*v)));
            row.push(fmt_f64(self.values[n]));
            row.push((self.on_tube[n] as u8).to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Error of replacing `Psi` by `Psi_eps` in the Lagrangian interior term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeErrorEstimate {
    pub epsilon: f64,
    pub complement_measure: f64,
    /// `|int int (U / R) d_t Psi|`.
    pub lhs: f64,
    /// `|int int (U / R) d_t (Psi - Psi_eps)|`.
    pub error_term: f64,
    /// `C (L + L') int int_{B_R \ K} |U|`.
    pub bound: f64,
    pub c: f64,
    pub l: f64,
    pub l_prime: f64,
    /// `int int_{B_R \ K} |U|`, trapezoidal in time.
    pub complement_mass: f64,
}

impl TubeErrorEstimate {
    pub fn write_csv<W: Write>(rows: &[TubeErrorEstimate], out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epsilon", "complement_measure", "lhs", "error_term", "bound", "c", "l", "l_prime", "complement_mass",
        ])?;
        for r in rows {
            w.write_record(
                [
                    r.epsilon,
                    r.complement_measure,
                    r.lhs,
                    r.error_term,
                    r.bound,
                    r.c,
                    r.l,
                    r.l_prime,
                    r.complement_mass,
                ]
                .map(fmt_f64),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Compares the interior Lagrangian terms for `Psi` and its tube
/// approximation `Psi_eps` (given on the lattice) with the bound
/// `C (L + L') int int_{B_R \ K} |U|`, where `C` bounds `1 / R`.
#[allow(clippy::too_many_arguments)]
pub fn tube_error_estimate(
    grid: &FlowGrid,
    big_u: &DensityField,
    big_r: &DensityField,
    psi: &TestFunction,
    psi_eps: &[Vec<f64>],
    lusin: &LusinSet,
    l_prime: f64,
    c: f64,
    floor: f64,
) -> Result<TubeErrorEstimate> {
    let exact = lagrangian_residual_sampled(big_u, big_r, &sample_on_grid(psi, grid), grid, floor)?;
    let approx = lagrangian_residual_sampled(big_u, big_r, psi_eps, grid, floor)?;
    let inside = lusin.membership(grid.count());
    let times = grid.times();
    let per: Vec<f64> = (0..grid.count())
        .filter(|&i| !inside[i] && grid.is_active(i))
        .map(|i| {
            (0..times.len() - 1)
                .map(|j| 0.5 * (big_u.slice(j)[i].abs() + big_u.slice(j + 1)[i].abs()) * (times[j + 1] - times[j]))
                .sum::<f64>()
        })
        .collect();
    let complement_mass = grid.cell_volume() * per.iter().sum::<f64>();
    let l = psi.lip();
    Ok(TubeErrorEstimate {
        epsilon: lusin.epsilon,
        complement_measure: lusin.complement_measure,
        lhs: exact.interior.abs(),
        error_term: (exact.interior - approx.interior).abs(),
        bound: c * (l + l_prime) * complement_mass,
        c,
        l,
        l_prime,
        complement_mass,
    })
}
