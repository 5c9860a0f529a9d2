//! Flow-penalized distances on a space-time graph.
//!
//! Nodes are the trajectory samples `(t_j, X(t_j, 0, y_i))` of a [`FlowGrid`]
//! plus a background lattice on every time slice. Flow edges join consecutive
//! samples of one trajectory with weight `|t_{j+1} - t_j|`; transverse edges
//! (lattice neighbours and snap edges from a trajectory node to the corners of
//! its lattice cell) cost `lambda^-1` times their Euclidean length. `d_lambda`
//! is the shortest-path distance and `d_0` is `|t - t'|` along a common
//! trajectory, infinite otherwise.
//!
//! Weights are stored as integer multiples of [`QUANTUM`], so shortest paths
//! are exact: symmetry, the triangle inequality and monotonicity in `lambda`
//! hold without rounding slack.

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{fmt_f64, FlowGrid};
use crate::geometry::{dist, Lattice};

/// Length represented by one weight unit, `2^-40`.
pub const QUANTUM: f64 = 1.0 / (1u64 << 40) as f64;

/// Default number of pairs examined by the Lipschitz scans.
pub const DEFAULT_PAIR_BUDGET: usize = 2_000_000;

fn units(w: f64) -> u64 {
    ((w / QUANTUM).round() as u64).max(1)
}

pub fn to_length(d: u64) -> f64 {
    d as f64 * QUANTUM
}

#[derive(Debug, Clone)]
pub struct SpaceTimeGraph {
    dim: usize,
    lambda: f64,
    lattice_dx: f64,
    times: Vec<f64>,
    /// Grid indices of the active trajectories, in increasing order.
    trajectories: Vec<usize>,
    /// `slot[i]` is the position of grid particle `i` in `trajectories`.
    slot: Vec<Option<usize>>,
    lattice: Lattice,
    coords: Vec<f64>,
    offsets: Vec<usize>,
    targets: Vec<u32>,
    weights: Vec<u64>,
    interval_weights: Vec<u64>,
    max_snap: f64,
}

/// Graph parameters shared by the scans.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricConfig {
    pub lattice_dx: f64,
    pub pair_budget: usize,
    pub seed: u64,
}

impl MetricConfig {
    pub fn new(lattice_dx: f64) -> Self {
        Self {
            lattice_dx,
            pair_budget: DEFAULT_PAIR_BUDGET,
            seed: 0,
        }
    }
}

/// Builds the graph for penalty `lambda` in `(0, 1]`.
pub fn build_graph(grid: &FlowGrid, lattice_dx: f64, lambda: f64) -> Result<SpaceTimeGraph> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("lambda must lie in (0, 1], got {lambda}")));
    }
    if !(lattice_dx > 0.0) {
        return Err(Error::Config(format!("lattice spacing must be positive, got {lattice_dx}")));
    }
    let trajectories: Vec<usize> = (0..grid.count()).filter(|i| grid.is_active(*i)).collect();
    if trajectories.is_empty() {
        return Err(Error::Config("flow grid has no active trajectory".into()));
    }
    let dim = grid.dim();
    let nt = grid.time_count();
    let m = trajectories.len();
    let mut slot = vec![None; grid.count()];
    for (k, &i) in trajectories.iter().enumerate() {
        slot[i] = Some(k);
    }

    // Lattice nodes sit at half-integer multiples of the spacing, which keeps
    // them off the base-point lattice and its images under the zero field.
    let bounds = grid.tube_bounds();
    let origin: Vec<f64> = bounds
        .lo
        .iter()
        .map(|l| ((l / lattice_dx).floor() - 0.5) * lattice_dx)
        .collect();
    let shape: Vec<usize> = bounds
        .hi
        .iter()
        .zip(&origin)
        .map(|(h, o)| ((h - o) / lattice_dx).ceil() as usize + 1)
        .collect();
    let lattice = Lattice {
        origin,
        spacing: lattice_dx,
        shape,
    };
    let lsize = lattice.len();
    let n = nt * m + nt * lsize;

    let mut coords = vec![0.0; n * dim];
    for j in 0..nt {
        for (k, &i) in trajectories.iter().enumerate() {
            let node = j * m + k;
            coords[node * dim..(node + 1) * dim].copy_from_slice(grid.position(j, i));
        }
    }
    let lattice_pts = lattice.points();
    for j in 0..nt {
        let base = nt * m + j * lsize;
        coords[base * dim..(base + lsize) * dim].copy_from_slice(&lattice_pts);
    }

    let interval_weights: Vec<u64> = grid.times().windows(2).map(|w| units(w[1] - w[0])).collect();
    let transverse = units(lattice_dx / lambda);
    let mut adj: Vec<Vec<(u32, u64)>> = vec![Vec::new(); n];
    let mut max_snap = 0.0f64;
    for j in 0..nt {
        for k in 0..m {
            let a = j * m + k;
            if j + 1 < nt {
                let b = (j + 1) * m + k;
                adj[a].push((b as u32, interval_weights[j]));
                adj[b].push((a as u32, interval_weights[j]));
            }
            let x = &coords[a * dim..(a + 1) * dim];
            for l in lattice.enclosing_nodes(x) {
                let b = nt * m + j * lsize + l;
                let s = dist(x, &lattice_pts[l * dim..(l + 1) * dim]);
                max_snap = max_snap.max(s);
                let w = units(s / lambda);
                adj[a].push((b as u32, w));
                adj[b].push((a as u32, w));
            }
        }
        for l in 0..lsize {
            let a = nt * m + j * lsize + l;
            for nb in lattice.neighbors(l) {
                adj[a].push(((nt * m + j * lsize + nb) as u32, transverse));
            }
        }
    }
    let mut offsets = Vec::with_capacity(n + 1);
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    offsets.push(0);
    for mut list in adj {
        list.sort_unstable();
        for (t, w) in list {
            targets.push(t);
            weights.push(w);
        }
        offsets.push(targets.len());
    }
    Ok(SpaceTimeGraph {
        dim,
        lambda,
        lattice_dx,
        times: grid.times().to_vec(),
        trajectories,
        slot,
        lattice,
        coords,
        offsets,
        targets,
        weights,
        interval_weights,
        max_snap,
    })
}

impl SpaceTimeGraph {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn lattice_dx(&self) -> f64 {
        self.lattice_dx
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn node_count(&self) -> usize {
        self.offsets.len() - 1
    }
    pub fn edge_count(&self) -> usize {
        self.targets.len() / 2
    }
    pub fn time_count(&self) -> usize {
        self.times.len()
    }
    pub fn trajectory_count(&self) -> usize {
        self.trajectories.len()
    }
    pub fn trajectory_node_count(&self) -> usize {
        self.times.len() * self.trajectories.len()
    }
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }
    /// Largest snap-edge length.
    pub fn max_snap(&self) -> f64 {
        self.max_snap
    }

    /// Node of grid particle `i` at slice `j`; `None` for escaped particles.
    pub fn trajectory_node(&self, j: usize, i: usize) -> Option<usize> {
        self.slot
            .get(i)
            .copied()
            .flatten()
            .map(|k| j * self.trajectories.len() + k)
    }

    pub fn lattice_node(&self, j: usize, l: usize) -> usize {
        self.trajectory_node_count() + j * self.lattice.len() + l
    }

    pub fn is_trajectory_node(&self, node: usize) -> bool {
        node < self.trajectory_node_count()
    }

    /// Grid particle index of a trajectory node.
    pub fn particle_of(&self, node: usize) -> Option<usize> {
        if self.is_trajectory_node(node) {
            Some(self.trajectories[node % self.trajectories.len()])
        } else {
            None
        }
    }

    pub fn slice_of(&self, node: usize) -> usize {
        let tn = self.trajectory_node_count();
        if node < tn {
            node / self.trajectories.len()
        } else {
            (node - tn) / self.lattice.len()
        }
    }

    pub fn time_of(&self, node: usize) -> f64 {
        self.times[self.slice_of(node)]
    }

    pub fn point_of(&self, node: usize) -> &[f64] {
        &self.coords[node * self.dim..(node + 1) * self.dim]
    }

    pub fn edges(&self, node: usize) -> impl Iterator<Item = (usize, u64)> + '_ {
        let r = self.offsets[node]..self.offsets[node + 1];
        self.targets[r.clone()]
            .iter()
            .zip(&self.weights[r])
            .map(|(t, w)| (*t as usize, *w))
    }

    /// Single-source shortest paths in weight units; `u64::MAX` marks nodes
    /// beyond `cutoff` or unreachable.
    pub fn shortest_paths(&self, src: usize, cutoff: Option<u64>) -> Vec<u64> {
        let mut d = vec![u64::MAX; self.node_count()];
        let mut heap = BinaryHeap::new();
        d[src] = 0;
        heap.push(Reverse((0u64, src)));
        while let Some(Reverse((du, u))) = heap.pop() {
            if du > d[u] {
                continue;
            }
            for (v, w) in self.edges(u) {
                let nd = du + w;
                if cutoff.is_some_and(|c| nd > c) {
                    continue;
                }
                if nd < d[v] {
                    d[v] = nd;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        d
    }

    /// Exact `d_lambda` between nodes, in weight units.
    pub fn node_distance_units(&self, a: usize, b: usize) -> Result<u64> {
        let d = self.shortest_paths(a, None)[b];
        if d == u64::MAX {
            return Err(Error::Internal(format!("node {b} unreachable from {a}")));
        }
        Ok(d)
    }

    pub fn node_distance(&self, a: usize, b: usize) -> Result<f64> {
        self.node_distance_units(a, b).map(to_length)
    }

    /// Distance between two samples of one trajectory, in weight units. Every
    /// path between slices `j` and `k` crosses each intermediate time interval
    /// on a flow edge, and all flow edges of an interval weigh the same, so the
    /// straight flow path is a shortest path.
    pub fn same_trajectory_units(&self, j: usize, k: usize) -> u64 {
        let (a, b) = if j <= k { (j, k) } else { (k, j) };
        self.interval_weights[a..b].iter().sum()
    }

    /// Nearest node to `(t, x)` on the slice closest to `t`, with the spatial
    /// snap distance.
    pub fn snap(&self, t: f64, x: &[f64]) -> (usize, f64) {
        let j = self
            .times
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
            .map(|(j, _)| j)
            .unwrap_or(0);
        let m = self.trajectories.len();
        let mut best = (usize::MAX, f64::INFINITY);
        for k in 0..m {
            let node = j * m + k;
            let d = dist(self.point_of(node), x);
            if d < best.1 {
                best = (node, d);
            }
        }
        for l in self.lattice.enclosing_nodes(x) {
            let node = self.lattice_node(j, l);
            let d = dist(self.point_of(node), x);
            if d < best.1 {
                best = (node, d);
            }
        }
        best
    }

    /// `d_lambda` between arbitrary space-time points via their snapped nodes.
    pub fn distance(&self, p: (f64, &[f64]), q: (f64, &[f64])) -> Result<MetricQuery> {
        let (a, sa) = self.snap(p.0, p.1);
        let (b, sb) = self.snap(q.0, q.1);
        Ok(MetricQuery {
            source: a,
            target: b,
            source_snap: sa,
            target_snap: sb,
            distance: self.node_distance(a, b)?,
        })
    }

    /// Euclidean space-time distance between nodes.
    pub fn euclidean(&self, a: usize, b: usize) -> f64 {
        let dt = self.time_of(a) - self.time_of(b);
        let dx = dist(self.point_of(a), self.point_of(b));
        (dt * dt + dx * dx).sqrt()
    }

    pub fn write_stats<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "lattice_dx", "nodes", "edges", "trajectory_nodes", "lattice_nodes_per_slice", "max_snap"])?;
        w.write_record([
            fmt_f64(self.lambda),
            fmt_f64(self.lattice_dx),
            self.node_count().to_string(),
            self.edge_count().to_string(),
            self.trajectory_node_count().to_string(),
            self.lattice.len().to_string(),
            fmt_f64(self.max_snap),
        ])?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricQuery {
    pub source: usize,
    pub target: usize,
    pub source_snap: f64,
    pub target_snap: f64,
    pub distance: f64,
}

/// The degenerate distance: finite only along a common trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum D0 {
    Finite(f64),
    Infinite,
}

impl D0 {
    pub fn is_finite(&self) -> bool {
        matches!(self, D0::Finite(_))
    }
}

/// `|t - t'|` when `p` and `q` lie within `tube_tol` of the same trajectory on
/// their nearest slices, [`D0::Infinite`] otherwise.
pub fn d0_distance(grid: &FlowGrid, p: (f64, &[f64]), q: (f64, &[f64]), tube_tol: f64) -> D0 {
    let near = |t: f64, x: &[f64]| -> Vec<usize> {
        let j = grid.nearest_slice(t);
        (0..grid.count())
            .filter(|&i| grid.is_active(i) && dist(grid.position(j, i), x) <= tube_tol)
            .collect()
    };
    let a = near(p.0, p.1);
    let b = near(q.0, q.1);
    if a.iter().any(|i| b.binary_search(i).is_ok()) {
        D0::Finite((p.0 - q.0).abs())
    } else {
        D0::Infinite
    }
}

/// Result of a pair scan over a node subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScan {
    /// `max |v(p) - v(q)| / d_lambda(p, q)`.
    pub lip_lambda: f64,
    pub witness: Option<(usize, usize)>,
    /// `max |v(p) - v(q)| / d_1(p, q)` with `d_1` the Euclidean space-time distance.
    pub lip_euclid: f64,
    /// `min d_lambda / d_1` and `max d_lambda / d_1`.
    pub c1: f64,
    pub c2: f64,
    pub pairs: usize,
    pub exhaustive: bool,
}

impl PairScan {
    fn empty(exhaustive: bool) -> Self {
        Self {
            lip_lambda: 0.0,
            witness: None,
            lip_euclid: 0.0,
            c1: f64::INFINITY,
            c2: 0.0,
            pairs: 0,
            exhaustive,
        }
    }

    fn record(&mut self, g: &SpaceTimeGraph, a: usize, b: usize, va: f64, vb: f64, d: u64) {
        let dv = (va - vb).abs();
        let dl = to_length(d);
        let r = dv / dl;
        if r > self.lip_lambda {
            self.lip_lambda = r;
            self.witness = Some((a, b));
        }
        let d1 = g.euclidean(a, b);
        if d1 > 0.0 {
            self.lip_euclid = self.lip_euclid.max(dv / d1);
            self.c1 = self.c1.min(dl / d1);
            self.c2 = self.c2.max(dl / d1);
        }
        self.pairs += 1;
    }

    fn merge(&mut self, o: &PairScan) {
        if o.lip_lambda > self.lip_lambda {
            self.lip_lambda = o.lip_lambda;
            self.witness = o.witness;
        }
        self.lip_euclid = self.lip_euclid.max(o.lip_euclid);
        self.c1 = self.c1.min(o.c1);
        self.c2 = self.c2.max(o.c2);
        self.pairs += o.pairs;
    }
}

/// Scans pairs of `nodes` carrying `values`. All pairs are used when
/// `|S|^2 <= pair_budget`; otherwise one random source per stratum of
/// consecutive nodes is compared with every other node, and all pairs on a
/// common trajectory are added. The sample depends only on `seed` and the
/// node list, so scans on graphs with different `lambda` see the same pairs.
pub fn pair_scan(g: &SpaceTimeGraph, nodes: &[usize], values: &[f64], pair_budget: usize, seed: u64) -> Result<PairScan> {
    if nodes.len() != values.len() {
        return Err(Error::Config("node and value lists differ in length".into()));
    }
    if nodes.len() < 2 {
        return Err(Error::Degenerate("Lipschitz scan needs at least two nodes".into()));
    }
    if let Some(&bad) = nodes.iter().find(|&&n| n >= g.node_count()) {
        return Err(Error::Config(format!("node {bad} is not in the graph")));
    }
    let s = nodes.len();
    let exhaustive = s.saturating_mul(s) <= pair_budget;
    let sources: Vec<usize> = if exhaustive {
        (0..s).collect()
    } else {
        let m = (pair_budget / s).clamp(1, s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|k| {
                let lo = k * s / m;
                let hi = ((k + 1) * s / m).max(lo + 1);
                rng.gen_range(lo..hi)
            })
            .collect()
    };
    let mut is_source = vec![false; s];
    for &k in &sources {
        is_source[k] = true;
    }

    let per_source: Vec<Result<PairScan>> = sources
        .par_iter()
        .map(|&ka| {
            let a = nodes[ka];
            let d = g.shortest_paths(a, None);
            let mut scan = PairScan::empty(exhaustive);
            for (kb, &b) in nodes.iter().enumerate() {
                // Each unordered pair once: among sources only the later one
                // is compared from the earlier.
                if kb == ka || (is_source[kb] && kb < ka) {
                    continue;
                }
                if d[b] == u64::MAX {
                    return Err(Error::Internal(format!("node {b} unreachable from {a}")));
                }
                scan.record(g, a, b, values[ka], values[kb], d[b]);
            }
            Ok(scan)
        })
        .collect();
    let mut total = PairScan::empty(exhaustive);
    for r in per_source {
        total.merge(&r?);
    }

    if !exhaustive {
        // Same-trajectory pairs not already covered by a source.
        let m = g.trajectory_count();
        let mut by_traj: Vec<Vec<usize>> = vec![Vec::new(); m];
        for (k, &n) in nodes.iter().enumerate() {
            if g.is_trajectory_node(n) {
                by_traj[n % m].push(k);
            }
        }
        let extra: Vec<PairScan> = by_traj
            .par_iter()
            .map(|list| {
                let mut scan = PairScan::empty(false);
                for (x, &ka) in list.iter().enumerate() {
                    for &kb in &list[x + 1..] {
                        if is_source[ka] || is_source[kb] {
                            continue;
                        }
                        let (a, b) = (nodes[ka], nodes[kb]);
                        let d = g.same_trajectory_units(g.slice_of(a), g.slice_of(b));
                        scan.record(g, a, b, values[ka], values[kb], d);
                    }
                }
                scan
            })
            .collect();
        for e in &extra {
            total.merge(e);
        }
    }
    Ok(total)
}

/// `L_lambda = Lip(v; d_lambda)` over the sampled pairs of `nodes`.
pub fn lipschitz_constant(g: &SpaceTimeGraph, nodes: &[usize], values: &[f64], pair_budget: usize, seed: u64) -> Result<f64> {
    pair_scan(g, nodes, values, pair_budget, seed).map(|s| s.lip_lambda)
}

/// Measured equivalence constants `c1 d_1 <= d_lambda <= c2 d_1` over
/// sampled node pairs of the whole graph.
pub fn equivalence_constants(g: &SpaceTimeGraph, pair_budget: usize, seed: u64) -> Result<(f64, f64)> {
    let nodes: Vec<usize> = (0..g.node_count()).collect();
    let zeros = vec![0.0; nodes.len()];
    let s = pair_scan(g, &nodes, &zeros, pair_budget, seed)?;
    Ok((s.c1, s.c2))
}

/// Value attached to the sample of particle `particle` at slice `slice`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeSample {
    pub slice: usize,
    pub particle: usize,
    pub value: f64,
}

/// Nodes and values of trajectory samples on `g`.
pub fn sample_nodes(g: &SpaceTimeGraph, samples: &[TubeSample]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut nodes = Vec::with_capacity(samples.len());
    let mut values = Vec::with_capacity(samples.len());
    for s in samples {
        let n = g.trajectory_node(s.slice, s.particle).ok_or_else(|| {
            Error::Config(format!("particle {} is not an active trajectory of the graph", s.particle))
        })?;
        nodes.push(n);
        values.push(s.value);
    }
    Ok((nodes, values))
}

/// `Lip(v; d_0)`: the largest time difference quotient along a common
/// trajectory.
pub fn directional_constant(samples: &[TubeSample], times: &[f64]) -> f64 {
    let mut by_particle: std::collections::BTreeMap<usize, Vec<(usize, f64)>> = Default::default();
    for s in samples {
        by_particle.entry(s.particle).or_default().push((s.slice, s.value));
    }
    let mut best = 0.0f64;
    for list in by_particle.values() {
        for (x, &(j, v)) in list.iter().enumerate() {
            for &(k, w) in &list[x + 1..] {
                if j != k {
                    best = best.max((v - w).abs() / (times[j] - times[k]).abs());
                }
            }
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanRow {
    pub lambda: f64,
    pub l_lambda: f64,
    pub pairs: usize,
    pub exhaustive: bool,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScanTable {
    pub rows: Vec<ScanRow>,
    /// `L = Lip(v; d_0)`.
    pub directional: f64,
    pub nonincreasing: bool,
}

impl ScanTable {
    /// Largest `lambda` with `L_lambda <= factor * L`.
    pub fn select_lambda(&self, factor: f64) -> Option<f64> {
        self.rows
            .iter()
            .filter(|r| r.l_lambda <= factor * self.directional)
            .map(|r| r.lambda)
            .fold(None, |acc, l| Some(acc.map_or(l, |a: f64| a.max(l))))
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["lambda", "l_lambda", "directional_l", "pairs", "exhaustive", "nodes"])?;
        for r in &self.rows {
            w.write_record([
                fmt_f64(r.lambda),
                fmt_f64(r.l_lambda),
                fmt_f64(self.directional),
                r.pairs.to_string(),
                r.exhaustive.to_string(),
                r.nodes.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `(lambda, L_lambda)` for a decreasing `lambdas` list, with the directional
/// constant against `d_0`.
pub fn convergence_scan(samples: &[TubeSample], grid: &FlowGrid, cfg: &MetricConfig, lambdas: &[f64]) -> Result<ScanTable> {
    if lambdas.is_empty() || lambdas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Config("lambda list must be nonempty and strictly decreasing".into()));
    }
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let g = build_graph(grid, cfg.lattice_dx, lambda)?;
        let (nodes, values) = sample_nodes(&g, samples)?;
        let s = pair_scan(&g, &nodes, &values, cfg.pair_budget, cfg.seed)?;
        rows.push(ScanRow {
            lambda,
            l_lambda: s.lip_lambda,
            pairs: s.pairs,
            exhaustive: s.exhaustive,
            nodes: g.node_count(),
        });
    }
    let nonincreasing = rows.windows(2).all(|w| w[1].l_lambda <= w[0].l_lambda);
    Ok(ScanTable {
        rows,
        directional: directional_constant(samples, grid.times()),
        nonincreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_flow_grid, Integrator};
    use crate::vectorfield::VectorField;

    fn zero_grid() -> FlowGrid {
        let f = VectorField::zero(2, 1.0).unwrap();
        build_flow_grid(&f, 0.5, 0.25, &[0.0, 0.25, 0.5, 0.75, 1.0], &Integrator::new(0.05)).unwrap()
    }

    #[test]
    fn quantum_is_dyadic() {
        assert_eq!(QUANTUM, 2f64.powi(-40));
        assert_eq!(to_length(units(0.25)), 0.25);
    }

    #[test]
    fn zero_field_flow_edges_are_vertical() {
        let grid = zero_grid();
        let g = build_graph(&grid, 0.25, 0.5).unwrap();
        for i in 0..grid.count() {
            let a = g.trajectory_node(0, i).unwrap();
            let b = g.trajectory_node(1, i).unwrap();
            assert_eq!(g.point_of(a), g.point_of(b));
            assert!(g.edges(a).any(|(t, w)| t == b && to_length(w) == 0.25));
        }
    }

    #[test]
    fn same_trajectory_distance_is_time_gap() {
        let grid = zero_grid();
        let g = build_graph(&grid, 0.25, 0.2).unwrap();
        let a = g.trajectory_node(1, 3).unwrap();
        let b = g.trajectory_node(4, 3).unwrap();
        assert_eq!(g.node_distance(a, b).unwrap(), 0.75);
        assert_eq!(g.node_distance_units(a, b).unwrap(), g.same_trajectory_units(1, 4));
        assert_eq!(g.node_distance(a, a).unwrap(), 0.0);
    }

    #[test]
    fn d0_examples() {
        let grid = zero_grid();
        let y = grid.base_point(2).to_vec();
        assert_eq!(d0_distance(&grid, (0.25, &y), (0.75, &y), 1e-9), D0::Finite(0.5));
        let z = grid.base_point(5).to_vec();
        assert_eq!(d0_distance(&grid, (0.25, &y), (0.25, &z), 1e-9), D0::Infinite);
    }

    #[test]
    fn time_function_has_unit_constant() {
        let grid = zero_grid();
        let g = build_graph(&grid, 0.25, 0.3).unwrap();
        let nodes: Vec<usize> = (0..grid.time_count()).map(|j| g.trajectory_node(j, 0).unwrap()).collect();
        let values: Vec<f64> = (0..grid.time_count()).map(|j| grid.times()[j]).collect();
        assert_eq!(lipschitz_constant(&g, &nodes, &values, DEFAULT_PAIR_BUDGET, 0).unwrap(), 1.0);
        assert!(matches!(
            lipschitz_constant(&g, &nodes[..1], &values[..1], DEFAULT_PAIR_BUDGET, 0),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn sampled_scan_matches_exhaustive_on_same_trajectory_pairs() {
        let grid = zero_grid();
        let g = build_graph(&grid, 0.25, 0.1).unwrap();
        let mut samples = Vec::new();
        for j in 0..grid.time_count() {
            for i in 0..grid.count() {
                let t = grid.times()[j];
                samples.push(TubeSample { slice: j, particle: i, value: t * t + grid.base_point(i)[0] });
            }
        }
        let (nodes, values) = sample_nodes(&g, &samples).unwrap();
        let full = pair_scan(&g, &nodes, &values, usize::MAX, 0).unwrap();
        let part = pair_scan(&g, &nodes, &values, 4 * nodes.len(), 0).unwrap();
        assert!(full.exhaustive && !part.exhaustive);
        assert!(part.lip_lambda <= full.lip_lambda);
        // The sup is attained on the last time interval of some trajectory.
        assert_eq!(part.lip_lambda, full.lip_lambda);
    }

    #[test]
    fn rejects_bad_lambda() {
        let grid = zero_grid();
        assert!(build_graph(&grid, 0.25, 0.0).is_err());
        assert!(build_graph(&grid, 0.25, 1.5).is_err());
    }
}
