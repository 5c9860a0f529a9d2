//! Regular Lagrangian flows by fixed-step RK4 over particle ensembles,
//! trajectory-wise push-forward densities, the compressibility constant, and
//! empirical Lusin-type Lipschitz subsets of the base lattice.

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ball_volume, dist, norm, BoxRegion};
use crate::spatial::KdTree;
use crate::transport::DensityField;
use crate::vectorfield::VectorField;

/// Fixed-step classical RK4 with an escape ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Integrator {
    pub step: f64,
    /// Trajectories leaving `B_{escape_radius}(0)` are reported as escaped.
    pub escape_radius: f64,
}

impl Integrator {
    pub fn new(step: f64) -> Self {
        Self {
            step,
            escape_radius: 1e3,
        }
    }

    pub fn with_escape_radius(mut self, r: f64) -> Self {
        self.escape_radius = r;
        self
    }

    fn check(&self, field: &VectorField, s: f64, t: f64) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(Error::Config(format!("integrator step must be positive, got {}", self.step)));
        }
        let horizon = field.horizon();
        for v in [s, t] {
            if !(v >= 0.0 && v <= horizon) {
                return Err(Error::TimeOutOfRange { t: v, horizon });
            }
        }
        Ok(())
    }

    /// `X(t, s, x0)`: solves `dX/dtau = b(tau, X)`, `X(s) = x0`, forward or
    /// backward in time.
    pub fn flow(&self, field: &VectorField, s: f64, t: f64, x0: &[f64]) -> Result<Vec<f64>> {
        self.flow_with_divergence(field, s, t, x0).map(|(x, _)| x)
    }

    /// Like [`Integrator::flow`], also returning `int_s^t div b(tau, X(tau)) dtau`
    /// (signed; trapezoidal accumulation at the RK4 nodes).
    pub fn flow_with_divergence(
        &self,
        field: &VectorField,
        s: f64,
        t: f64,
        x0: &[f64],
    ) -> Result<(Vec<f64>, f64)> {
        self.check(field, s, t)?;
        let mut x = x0.to_vec();
        let mut scratch = Rk4Scratch::new(field.dim());
        let div = self.advance(field, s, t, &mut x, &mut scratch)?;
        Ok((x, div))
    }

    fn advance(
        &self,
        field: &VectorField,
        s: f64,
        t: f64,
        x: &mut [f64],
        sc: &mut Rk4Scratch,
    ) -> Result<f64> {
        if t == s {
            return Ok(0.0);
        }
        let span = t - s;
        let nsub = ((span.abs() / self.step) - 1e-9).ceil().max(1.0) as usize;
        let h = span / nsub as f64;
        let n = x.len();
        let mut acc = 0.0;
        let mut div_prev = field.divergence(s, x);
        for k in 0..nsub {
            let tk = s + h * k as f64;
            field.eval(tk, x, &mut sc.k1);
            for d in 0..n {
                sc.tmp[d] = x[d] + 0.5 * h * sc.k1[d];
            }
            field.eval(tk + 0.5 * h, &sc.tmp, &mut sc.k2);
            for d in 0..n {
                sc.tmp[d] = x[d] + 0.5 * h * sc.k2[d];
            }
            field.eval(tk + 0.5 * h, &sc.tmp, &mut sc.k3);
            for d in 0..n {
                sc.tmp[d] = x[d] + h * sc.k3[d];
            }
            let tn = if k + 1 == nsub { t } else { s + h * (k + 1) as f64 };
            field.eval(tn, &sc.tmp, &mut sc.k4);
            for d in 0..n {
                x[d] += h / 6.0 * (sc.k1[d] + 2.0 * sc.k2[d] + 2.0 * sc.k3[d] + sc.k4[d]);
            }
            if !(norm(x) <= self.escape_radius) {
                return Err(Error::Escape {
                    time: tn,
                    radius: self.escape_radius,
                });
            }
            let div_next = field.divergence(tn, x);
            acc += 0.5 * h * (div_prev + div_next);
            div_prev = div_next;
        }
        Ok(acc)
    }
}

struct Rk4Scratch {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4Scratch {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }
}

pub fn integrate_flow(field: &VectorField, s: f64, t: f64, x0: &[f64], step: f64) -> Result<Vec<f64>> {
    Integrator::new(step).flow(field, s, t, x0)
}

/// `X(0, t, x)`, the inverse of `X(t, 0, .)`.
pub fn inverse_flow(field: &VectorField, t: f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    Integrator::new(step).flow(field, t, 0.0, x)
}

/// Flow sampled on a lattice of base points `y_i` in `B_R(0)` at times `t_j`.
#[derive(Debug, Clone)]
pub struct FlowGrid {
    dim: usize,
    radius: f64,
    spacing: f64,
    step: f64,
    times: Vec<f64>,
    base_points: Vec<f64>,
    lattice_index: Vec<i64>,
    /// `forward[(j * count + i) * dim ..]` holds `X(t_j, 0, y_i)`.
    forward: Vec<f64>,
    /// `div_integrals[j * count + i] = int_0^{t_j} div b(tau, X(tau, 0, y_i)) dtau`.
    div_integrals: Vec<f64>,
    active: Vec<bool>,
    tree: Arc<KdTree>,
}

impl FlowGrid {
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    /// Lattice spacing `dy` of the base points.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }
    pub fn step(&self) -> f64 {
        self.step
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn time_count(&self) -> usize {
        self.times.len()
    }
    pub fn count(&self) -> usize {
        self.active.len()
    }
    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim as i32)
    }
    pub fn base_point(&self, i: usize) -> &[f64] {
        &self.base_points[i * self.dim..(i + 1) * self.dim]
    }
    pub fn base_points(&self) -> &[f64] {
        &self.base_points
    }
    pub fn base_tree(&self) -> Arc<KdTree> {
        Arc::clone(&self.tree)
    }
    pub fn lattice_index(&self, i: usize) -> &[i64] {
        &self.lattice_index[i * self.dim..(i + 1) * self.dim]
    }
    /// `X(t_j, 0, y_i)`; NaN for escaped particles.
    pub fn position(&self, j: usize, i: usize) -> &[f64] {
        let k = (j * self.count() + i) * self.dim;
        &self.forward[k..k + self.dim]
    }
    pub fn div_integral(&self, j: usize, i: usize) -> f64 {
        self.div_integrals[j * self.count() + i]
    }
    /// `R(t_j, y_i) = exp(-D[j][i])`.
    pub fn density_ratio(&self, j: usize, i: usize) -> f64 {
        (-self.div_integral(j, i)).exp()
    }
    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }
    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }
    pub fn excluded(&self) -> impl Iterator<Item = usize> + '_ {
        self.active
            .iter()
            .enumerate()
            .filter(|(_, a)| !**a)
            .map(|(i, _)| i)
    }

    /// Measure of `B_R(0)`.
    pub fn ball_measure(&self) -> f64 {
        ball_volume(self.dim, self.radius)
    }

    /// Index of the time slice closest to `t`.
    pub fn nearest_slice(&self, t: f64) -> usize {
        let mut best = 0;
        for (j, tj) in self.times.iter().enumerate() {
            if (tj - t).abs() < (self.times[best] - t).abs() {
                best = j;
            }
        }
        best
    }

    /// Lattice neighbours (axis-adjacent base points) of particle `i`.
    pub fn neighbors(&self, i: usize, lookup: &HashMap<Vec<i64>, usize>) -> Vec<usize> {
        let mut key = self.lattice_index(i).to_vec();
        let mut out = Vec::with_capacity(2 * self.dim);
        for d in 0..self.dim {
            for off in [-1i64, 1] {
                key[d] += off;
                if let Some(&k) = lookup.get(&key) {
                    out.push(k);
                }
                key[d] -= off;
            }
        }
        out
    }

    pub fn index_lookup(&self) -> HashMap<Vec<i64>, usize> {
        (0..self.count())
            .map(|i| (self.lattice_index(i).to_vec(), i))
            .collect()
    }

    /// Axis-aligned box containing every active trajectory point.
    pub fn tube_bounds(&self) -> BoxRegion {
        let mut lo = vec![f64::INFINITY; self.dim];
        let mut hi = vec![f64::NEG_INFINITY; self.dim];
        for j in 0..self.time_count() {
            for i in (0..self.count()).filter(|i| self.active[*i]) {
                for (d, v) in self.position(j, i).iter().enumerate() {
                    lo[d] = lo[d].min(*v);
                    hi[d] = hi[d].max(*v);
                }
            }
        }
        BoxRegion { lo, hi }
    }

    /// One row per `(j, i)`: `j, i, t, y.., x.., D, active`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["j".to_string(), "i".to_string(), "t".to_string()];
        header.extend((0..self.dim).map(|d| format!("y{d}")));
        header.extend((0..self.dim).map(|d| format!("x{d}")));
        header.push("div_integral".into());
        header.push("active".into());
        w.write_record(&header)?;
        for j in 0..self.time_count() {
            for i in 0..self.count() {
                let mut row = vec![j.to_string(), i.to_string(), fmt_f64(self.times[j])];
                row.extend(self.base_point(i).iter().map(|v| fmt_f64(*v)));
                row.extend(self.position(j, i).iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(self.div_integral(j, i)));
                row.push((self.active[i] as u8).to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest decimal representation that round-trips the value.
pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Base points `k * dy`, `k` integer, inside the closed ball of radius `radius`.
pub fn ball_lattice(dim: usize, radius: f64, spacing: f64) -> (Vec<f64>, Vec<i64>) {
    let kmax = (radius / spacing + 1e-9).floor() as i64;
    let side = (2 * kmax + 1) as usize;
    let total = side.pow(dim as u32);
    let mut pts = Vec::new();
    let mut idx = Vec::new();
    let mut k = vec![0i64; dim];
    let mut y = vec![0.0; dim];
    for flat in 0..total {
        let mut rem = flat;
        for d in (0..dim).rev() {
            k[d] = (rem % side) as i64 - kmax;
            rem /= side;
        }
        for d in 0..dim {
            y[d] = k[d] as f64 * spacing;
        }
        if norm(&y) <= radius * (1.0 + 1e-12) {
            pts.extend_from_slice(&y);
            idx.extend_from_slice(&k);
        }
    }
    (pts, idx)
}

/// Integrates every base point of the `dy`-lattice in `B_R(0)` through the
/// time list, recording positions and divergence integrals. Escaping particles
/// are marked inactive.
pub fn build_flow_grid(
    field: &VectorField,
    radius: f64,
    spacing: f64,
    times: &[f64],
    integrator: &Integrator,
) -> Result<FlowGrid> {
    if !(spacing > 0.0) || !(radius > 0.0) {
        return Err(Error::Config(format!(
            "flow grid needs positive radius and spacing, got R = {radius}, dy = {spacing}"
        )));
    }
    if times.is_empty() || times[0] != 0.0 {
        return Err(Error::Config("flow grid times must start at 0".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("flow grid times must be strictly increasing".into()));
    }
    integrator.check(field, 0.0, *times.last().unwrap())?;
    let dim = field.dim();
    let (base_points, lattice_index) = ball_lattice(dim, radius, spacing);
    let count = base_points.len() / dim;
    if count == 0 {
        return Err(Error::Config("flow grid lattice is empty".into()));
    }

    let traces: Vec<(Vec<f64>, Vec<f64>, bool)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let y = &base_points[i * dim..(i + 1) * dim];
            let mut x = y.to_vec();
            let mut pos = Vec::with_capacity(times.len() * dim);
            let mut divs = Vec::with_capacity(times.len());
            pos.extend_from_slice(y);
            divs.push(0.0);
            let mut sc = Rk4Scratch::new(dim);
            let mut acc = 0.0;
            for w in times.windows(2) {
                match integrator.advance(field, w[0], w[1], &mut x, &mut sc) {
                    Ok(d) => {
                        acc += d;
                        pos.extend_from_slice(&x);
                        divs.push(acc);
                    }
                    Err(_) => {
                        pos.resize(times.len() * dim, f64::NAN);
                        divs.resize(times.len(), f64::NAN);
                        return (pos, divs, false);
                    }
                }
            }
            (pos, divs, true)
        })
        .collect();

    let nt = times.len();
    let mut forward = vec![0.0; nt * count * dim];
    let mut div_integrals = vec![0.0; nt * count];
    let mut active = vec![true; count];
    for (i, (pos, divs, ok)) in traces.into_iter().enumerate() {
        active[i] = ok;
        for j in 0..nt {
            let k = (j * count + i) * dim;
            forward[k..k + dim].copy_from_slice(&pos[j * dim..(j + 1) * dim]);
            div_integrals[j * count + i] = divs[j];
        }
    }
    let tree = Arc::new(KdTree::new(dim, base_points.clone()));
    Ok(FlowGrid {
        dim,
        radius,
        spacing,
        step: integrator.step,
        times: times.to_vec(),
        base_points,
        lattice_index,
        forward,
        div_integrals,
        active,
        tree,
    })
}

/// `rho(t_j, .)` sampled at the trajectory points `X(t_j, 0, y_i)` with value
/// `exp(-D[j][i])`; nearest-trajectory interpolation.
pub fn pushforward_density(grid: &FlowGrid, j: usize) -> Result<DensityField> {
    if j >= grid.time_count() {
        return Err(Error::Config(format!(
            "time index {j} outside the grid ({} slices)",
            grid.time_count()
        )));
    }
    let dim = grid.dim();
    let mut pts = Vec::new();
    let mut vals = Vec::new();
    for i in (0..grid.count()).filter(|i| grid.is_active(*i)) {
        pts.extend_from_slice(grid.position(j, i));
        vals.push(grid.density_ratio(j, i));
    }
    let support = bounding_box(dim, &pts, grid.spacing());
    DensityField::scattered(dim, vec![grid.times()[j]], vec![pts], vec![vals], support)
}

pub(crate) fn bounding_box(dim: usize, pts: &[f64], margin: f64) -> BoxRegion {
    let mut lo = vec![f64::INFINITY; dim];
    let mut hi = vec![f64::NEG_INFINITY; dim];
    for p in pts.chunks(dim) {
        for d in 0..dim {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    if pts.is_empty() {
        lo = vec![-margin; dim];
        hi = vec![margin; dim];
    }
    BoxRegion {
        lo: lo.into_iter().map(|v| v - margin).collect(),
        hi: hi.into_iter().map(|v| v + margin).collect(),
    }
}

/// `max_{j,i} max(exp(D), exp(-D))` over active trajectories.
pub fn estimate_compressibility(grid: &FlowGrid) -> f64 {
    let mut c = 1.0f64;
    for j in 0..grid.time_count() {
        for i in (0..grid.count()).filter(|i| grid.is_active(*i)) {
            c = c.max(grid.div_integral(j, i).abs().exp());
        }
    }
    c
}

/// Subset `K` of base-point indices on which the flow is certified Lipschitz.
#[derive(Debug, Clone)]
pub struct LusinSet {
    pub epsilon: f64,
    pub threshold: f64,
    pub members: Vec<usize>,
    pub lip_constant: f64,
    /// `(a, b, j)`: the member pair and slice attaining `lip_constant`.
    pub witness: Option<(usize, usize, usize)>,
    pub complement_measure: f64,
}

impl LusinSet {
    pub fn contains(&self, i: usize) -> bool {
        self.members.binary_search(&i).is_ok()
    }

    pub fn membership(&self, count: usize) -> Vec<bool> {
        let mut m = vec![false; count];
        for &i in &self.members {
            m[i] = true;
        }
        m
    }

    /// Member indices, one per row, followed by a summary row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["kind", "index", "epsilon", "threshold", "lip_constant", "complement_measure"])?;
        for i in &self.members {
            w.write_record(["member", &i.to_string(), "", "", "", ""])?;
        }
        w.write_record([
            "summary".to_string(),
            self.members.len().to_string(),
            fmt_f64(self.epsilon),
            fmt_f64(self.threshold),
            fmt_f64(self.lip_constant),
            fmt_f64(self.complement_measure),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Badness score of each base point: for the worst lattice neighbour, the
/// accumulated variation of `log |X(t, 0, y_i) - X(t, 0, y_i')|` along the
/// time slices, starting from `log |y_i - y_i'|`. Zero for isometries;
/// `+inf` for escaped particles.
pub fn stretching_scores(grid: &FlowGrid) -> Vec<f64> {
    let lookup = grid.index_lookup();
    (0..grid.count())
        .into_par_iter()
        .map(|i| {
            if !grid.is_active(i) {
                return f64::INFINITY;
            }
            let mut worst = 0.0f64;
            for k in grid.neighbors(i, &lookup) {
                if !grid.is_active(k) {
                    continue;
                }
                let mut prev = dist(grid.base_point(i), grid.base_point(k)).ln();
                let mut total = 0.0;
                for j in 1..grid.time_count() {
                    let cur = dist(grid.position(j, i), grid.position(j, k)).ln();
                    total += (cur - prev).abs();
                    prev = cur;
                }
                worst = worst.max(total);
            }
            worst
        })
        .collect()
}

/// Thresholds `{0} U {1e-9 * 10^(k/20)}` up to `1e3`.
pub fn default_thresholds() -> Vec<f64> {
    let mut out = vec![0.0];
    for k in 0..=240 {
        out.push(1e-9 * 10f64.powf(k as f64 / 20.0));
    }
    out
}

fn check_budget(grid: &FlowGrid, epsilon: f64) -> Result<()> {
    let ball = grid.ball_measure();
    if !(epsilon > 0.0 && epsilon < ball) {
        return Err(Error::Config(format!(
            "Lusin budget must lie in (0, |B_R|) = (0, {ball}), got {epsilon}"
        )));
    }
    Ok(())
}

/// Sublevel set `{g <= theta}` of [`stretching_scores`] at the smallest
/// threshold whose excluded lattice measure fits in `epsilon`.
pub fn lusin_lipschitz_set(grid: &FlowGrid, epsilon: f64, thresholds: &[f64]) -> Result<LusinSet> {
    check_budget(grid, epsilon)?;
    let scores = stretching_scores(grid);
    let mut sorted = thresholds.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cell = grid.cell_volume();
    let mut best = f64::INFINITY;
    for &theta in &sorted {
        let excluded = scores.iter().filter(|g| !(**g <= theta)).count();
        let measure = cell * excluded as f64;
        best = best.min(measure);
        if measure <= epsilon {
            let members: Vec<usize> = (0..grid.count()).filter(|i| scores[*i] <= theta).collect();
            return Ok(finish_lusin(grid, epsilon, theta, members));
        }
    }
    Err(Error::LusinInfeasible { epsilon, best })
}

/// Budget-saturating variant: excludes base points in decreasing score order
/// (escaped particles first) while the excluded measure stays within
/// `epsilon`. Scores equal to within `1e-9` are ordered by a seeded random key,
/// so sets for decreasing budgets are nested.
pub fn lusin_budget_set(grid: &FlowGrid, epsilon: f64, seed: u64) -> Result<LusinSet> {
    check_budget(grid, epsilon)?;
    let scores = stretching_scores(grid);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keys: Vec<u64> = (0..grid.count()).map(|_| rng.gen()).collect();
    let bucket = |g: f64| if g.is_finite() { (g / 1e-9).round() } else { f64::INFINITY };
    let mut order: Vec<usize> = (0..grid.count()).collect();
    order.sort_by(|&a, &b| {
        bucket(scores[b])
            .total_cmp(&bucket(scores[a]))
            .then(keys[a].cmp(&keys[b]))
    });
    let cell = grid.cell_volume();
    let max_excluded = ((epsilon / cell) + 1e-9).floor() as usize;
    let inactive = grid.count() - grid.active_count();
    if inactive > max_excluded {
        return Err(Error::LusinInfeasible {
            epsilon,
            best: inactive as f64 * cell,
        });
    }
    let mut keep = vec![true; grid.count()];
    for &i in order.iter().take(max_excluded.min(grid.count())) {
        keep[i] = false;
    }
    let members: Vec<usize> = (0..grid.count()).filter(|i| keep[*i]).collect();
    let threshold = members
        .iter()
        .map(|i| scores[*i])
        .fold(0.0f64, f64::max);
    Ok(finish_lusin(grid, epsilon, threshold, members))
}

fn finish_lusin(grid: &FlowGrid, epsilon: f64, threshold: f64, members: Vec<usize>) -> LusinSet {
    let (lip_constant, witness) = member_lipschitz(grid, &members);
    let complement_measure = grid.cell_volume() * (grid.count() - members.len()) as f64;
    LusinSet {
        epsilon,
        threshold,
        members,
        lip_constant,
        witness,
        complement_measure,
    }
}

/// `max |X(t_j,0,y_a) - X(t_j,0,y_b)| / |y_a - y_b|` over member pairs and
/// slices, with the attaining `(a, b, j)`.
pub fn member_lipschitz(grid: &FlowGrid, members: &[usize]) -> (f64, Option<(usize, usize, usize)>) {
    type Row = (f64, Option<(usize, usize, usize)>);
    let rows: Vec<Row> = (0..members.len())
        .into_par_iter()
        .map(|ai| {
            let a = members[ai];
            let mut best = (0.0f64, None);
            for &b in &members[ai + 1..] {
                let base = dist(grid.base_point(a), grid.base_point(b));
                for j in 0..grid.time_count() {
                    let r = dist(grid.position(j, a), grid.position(j, b)) / base;
                    if r > best.0 {
                        best = (r, Some((a, b, j)));
                    }
                }
            }
            best
        })
        .collect();
    rows.into_iter()
        .fold((0.0, None), |acc, r| if r.0 > acc.0 { r } else { acc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_is_identity() {
        let f = VectorField::zero(2, 1.0).unwrap();
        let x = integrate_flow(&f, 0.2, 0.9, &[0.3, -0.4], 1e-3).unwrap();
        assert_eq!(x, vec![0.3, -0.4]);
        assert_eq!(inverse_flow(&f, 0.7, &[0.3, -0.4], 1e-3).unwrap(), vec![0.3, -0.4]);
    }

    #[test]
    fn constant_field_translates_exactly() {
        let f = VectorField::constant(vec![0.5, -1.25], 2.0).unwrap();
        let x = integrate_flow(&f, 1.5, 0.25, &[1.0, 2.0], 1e-3).unwrap();
        assert!((x[0] - (1.0 - 1.25 * 0.5)).abs() < 1e-12);
        assert!((x[1] - (2.0 + 1.25 * 1.25)).abs() < 1e-12);
    }

    #[test]
    fn times_outside_horizon_are_rejected() {
        let f = VectorField::zero(2, 1.0).unwrap();
        assert!(matches!(
            integrate_flow(&f, 0.0, 1.5, &[0.0, 0.0], 1e-3),
            Err(Error::TimeOutOfRange { .. })
        ));
    }

    #[test]
    fn escape_is_reported() {
        let f = VectorField::linear(vec![3.0, 0.0, 0.0, 3.0], 2.0).unwrap();
        let integ = Integrator::new(1e-2).with_escape_radius(5.0);
        assert!(matches!(integ.flow(&f, 0.0, 2.0, &[1.0, 0.0]), Err(Error::Escape { .. })));
        let grid = build_flow_grid(&f, 1.0, 0.25, &[0.0, 1.0, 2.0], &integ).unwrap();
        // Points within 5 e^-6 of the origin stay inside; only the origin here.
        assert_eq!(grid.active_count(), 1);
        assert!(grid.position(2, 0)[0].is_nan());
    }

    #[test]
    fn grid_starts_at_base_points() {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let grid = build_flow_grid(&f, 1.0, 0.25, &[0.0, 0.5, 1.0], &Integrator::new(1e-2)).unwrap();
        for i in 0..grid.count() {
            assert_eq!(grid.position(0, i), grid.base_point(i));
            assert_eq!(grid.div_integral(0, i), 0.0);
        }
        assert!(matches!(
            build_flow_grid(&f, 1.0, 0.25, &[0.1, 0.5], &Integrator::new(1e-2)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn ball_lattice_counts() {
        let (pts, idx) = ball_lattice(2, 1.0, 0.5);
        // (0,0), 4 axis points at 0.5, 4 at 1.0, 4 diagonals at 0.707.
        assert_eq!(pts.len() / 2, 13);
        assert_eq!(idx.len(), pts.len());
    }

    #[test]
    fn zero_field_lusin_selects_everything() {
        let f = VectorField::zero(2, 1.0).unwrap();
        let grid = build_flow_grid(&f, 1.0, 0.2, &[0.0, 0.5, 1.0], &Integrator::new(1e-2)).unwrap();
        let k = lusin_lipschitz_set(&grid, 0.1, &default_thresholds()).unwrap();
        assert_eq!(k.members.len(), grid.count());
        assert_eq!(k.lip_constant, 1.0);
        assert_eq!(k.complement_measure, 0.0);
        assert!(lusin_lipschitz_set(&grid, 10.0, &[0.0]).is_err());
    }

    #[test]
    fn budget_sets_are_nested() {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let grid = build_flow_grid(&f, 1.0, 0.1, &[0.0, 0.5, 1.0], &Integrator::new(1e-2)).unwrap();
        let ball = grid.ball_measure();
        let sets: Vec<LusinSet> = [0.2, 0.1, 0.05]
            .iter()
            .map(|e| lusin_budget_set(&grid, e * ball, 11).unwrap())
            .collect();
        for w in sets.windows(2) {
            assert!(w[0].members.iter().all(|i| w[1].contains(*i)));
            assert!(w[0].complement_measure <= w[0].epsilon);
            assert!(w[0].complement_measure > w[1].complement_measure);
        }
    }
}
