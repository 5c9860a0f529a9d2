//! Density fields and Lagrangian solutions of the continuity equation.
//!
//! A [`DensityField`] is a sampled scalar `u(t, .)` on a list of time slices,
//! either on a regular lattice (multilinear interpolation) or on scattered
//! points (nearest-sample interpolation). Values outside the support box are
//! zero. Between slices, values are interpolated linearly in time.

use std::io::{Read, Write};
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::{bounding_box, fmt_f64, FlowGrid, Integrator};
use crate::geometry::{BoxRegion, Lattice};
use crate::spatial::KdTree;
use crate::vectorfield::VectorField;

/// `x -> u0(x)`.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Anything that can be evaluated as a space-time density `u(t, x)` with an
/// initial datum.
pub trait SpaceTimeDensity: Sync {
    fn dim(&self) -> usize;
    fn value(&self, t: f64, x: &[f64]) -> f64;
    fn initial_value(&self, x: &[f64]) -> f64;
    /// Box outside which the density is known to vanish; `None` when the
    /// density is defined everywhere.
    fn data_box(&self) -> Option<BoxRegion>;
}

/// Built-in initial data.
#[derive(Debug, Clone, PartialEq)]
pub enum Datum {
    Zero,
    Constant(f64),
    Gaussian {
        center: Vec<f64>,
        sigma: f64,
        amplitude: f64,
    },
    /// `amplitude (1 - |x - c|^2 / r^2)^3` inside the ball, zero outside.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
    },
}

impl Datum {
    pub fn to_fn(&self) -> ScalarFn {
        match self.clone() {
            Datum::Zero => Arc::new(|_| 0.0),
            Datum::Constant(c) => Arc::new(move |_| c),
            Datum::Gaussian {
                center,
                sigma,
                amplitude,
            } => Arc::new(move |x: &[f64]| {
                let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                amplitude * (-0.5 * r2 / (sigma * sigma)).exp()
            }),
            Datum::Bump {
                center,
                radius,
                amplitude,
            } => Arc::new(move |x: &[f64]| {
                let r2: f64 = x.iter().zip(&center).map(|(a, b)| (a - b) * (a - b)).sum();
                let s = 1.0 - r2 / (radius * radius);
                if s > 0.0 {
                    amplitude * s * s * s
                } else {
                    0.0
                }
            }),
        }
    }
}

#[derive(Clone)]
pub enum Layout {
    Lattice(Lattice),
    /// One tree per time slice; the tree owns the sample points.
    Scattered(Vec<Arc<KdTree>>),
}

#[derive(Clone)]
pub struct DensityField {
    dim: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
    layout: Layout,
    support: BoxRegion,
    initial: Option<ScalarFn>,
}

impl std::fmt::Debug for DensityField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DensityField")
            .field("dim", &self.dim)
            .field("times", &self.times)
            .field("lattice", &matches!(self.layout, Layout::Lattice(_)))
            .field("support", &self.support)
            .finish()
    }
}

fn check_times(times: &[f64], slices: usize) -> Result<()> {
    if times.is_empty() || times.len() != slices {
        return Err(Error::Config(format!(
            "density field has {} times but {} value slices",
            times.len(),
            slices
        )));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("density field times must be strictly increasing".into()));
    }
    Ok(())
}

impl DensityField {
    pub fn on_lattice(
        lattice: Lattice,
        support: BoxRegion,
        times: Vec<f64>,
        values: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_times(&times, values.len())?;
        if values.iter().any(|v| v.len() != lattice.len()) {
            return Err(Error::Config("lattice value slice has the wrong length".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("density values must be finite".into()));
        }
        Ok(Self {
            dim: lattice.dim(),
            times,
            values,
            layout: Layout::Lattice(lattice),
            support,
            initial: None,
        })
    }

    pub fn scattered(
        dim: usize,
        times: Vec<f64>,
        points: Vec<Vec<f64>>,
        values: Vec<Vec<f64>>,
        support: BoxRegion,
    ) -> Result<Self> {
        let trees = points
            .into_iter()
            .map(|p| Arc::new(KdTree::new(dim, p)))
            .collect();
        Self::scattered_trees(dim, times, trees, values, support)
    }

    pub fn scattered_trees(
        dim: usize,
        times: Vec<f64>,
        trees: Vec<Arc<KdTree>>,
        values: Vec<Vec<f64>>,
        support: BoxRegion,
    ) -> Result<Self> {
        check_times(&times, values.len())?;
        if trees.len() != values.len() || trees.iter().zip(&values).any(|(t, v)| t.len() != v.len()) {
            return Err(Error::Config("scattered points and values disagree in length".into()));
        }
        if values.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("density values must be finite".into()));
        }
        Ok(Self {
            dim,
            times,
            values,
            layout: Layout::Scattered(trees),
            support,
            initial: None,
        })
    }

    /// Field on the `(t_j, y_i)` lattice of a flow grid; slice `j` holds one
    /// value per base point.
    pub fn on_trajectories(grid: &FlowGrid, values: Vec<Vec<f64>>) -> Result<Self> {
        let tree = grid.base_tree();
        let trees = vec![tree; grid.time_count()];
        let r = grid.radius() + grid.spacing();
        Self::scattered_trees(
            grid.dim(),
            grid.times().to_vec(),
            trees,
            values,
            BoxRegion::centered(grid.dim(), r),
        )
    }

    pub fn with_initial(mut self, u0: ScalarFn) -> Self {
        self.initial = Some(u0);
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn slice(&self, j: usize) -> &[f64] {
        &self.values[j]
    }
    pub fn slices(&self) -> &[Vec<f64>] {
        &self.values
    }
    pub fn layout(&self) -> &Layout {
        &self.layout
    }
    pub fn support(&self) -> &BoxRegion {
        &self.support
    }
    pub fn is_lattice(&self) -> bool {
        matches!(self.layout, Layout::Lattice(_))
    }

    /// Sample points of slice `j`, flat.
    pub fn points(&self, j: usize) -> Vec<f64> {
        match &self.layout {
            Layout::Lattice(l) => l.points(),
            Layout::Scattered(trees) => (0..trees[j].len())
                .flat_map(|k| trees[j].point(k).to_vec())
                .collect(),
        }
    }

    /// Value of slice `j` at `x` (zero outside the support box).
    pub fn slice_value(&self, j: usize, x: &[f64]) -> f64 {
        if !self.support.contains(x) {
            return 0.0;
        }
        match &self.layout {
            Layout::Lattice(l) => {
                let nb = l.node_box();
                let clamped: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(d, v)| v.clamp(nb.lo[d], nb.hi[d]))
                    .collect();
                l.interpolate(&self.values[j], &clamped).unwrap_or(0.0)
            }
            Layout::Scattered(trees) => match trees[j].nearest(x) {
                Some((k, _)) => self.values[j][k],
                None => 0.0,
            },
        }
    }

    /// Same-layout linear combination `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &DensityField, b: f64) -> Result<DensityField> {
        if self.times != other.times
            || self.values.iter().map(Vec::len).ne(other.values.iter().map(Vec::len))
        {
            return Err(Error::Config("cannot combine density fields with different layouts".into()));
        }
        let mut out = self.clone();
        for (s, o) in out.values.iter_mut().zip(&other.values) {
            for (v, w) in s.iter_mut().zip(o) {
                *v = a * *v + b * w;
            }
        }
        out.initial = match (&self.initial, &other.initial) {
            (Some(f), Some(g)) => {
                let (f, g) = (Arc::clone(f), Arc::clone(g));
                Some(Arc::new(move |x: &[f64]| a * f(x) + b * g(x)))
            }
            _ => None,
        };
        Ok(out)
    }

    /// Rows `(t, x.., value)` for every slice and sample, full precision.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim).map(|d| format!("x{d}")));
        header.push("value".into());
        w.write_record(&header)?;
        for j in 0..self.times.len() {
            let pts = self.points(j);
            for (k, p) in pts.chunks(self.dim).enumerate() {
                let mut row = vec![fmt_f64(self.times[j])];
                row.extend(p.iter().map(|v| fmt_f64(*v)));
                row.push(fmt_f64(self.values[j][k]));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads the [`DensityField::write_csv`] layout back as a scattered field
    /// whose support is the sample bounding box.
    pub fn read_csv<R: Read>(input: R) -> Result<DensityField> {
        let mut r = csv::Reader::from_reader(input);
        let headers = r.headers()?.clone();
        if headers.len() < 3 || &headers[0] != "t" || &headers[headers.len() - 1] != "value" {
            return Err(Error::Config("density CSV needs columns t, x0.., value".into()));
        }
        let dim = headers.len() - 2;
        let mut times: Vec<f64> = Vec::new();
        let mut points: Vec<Vec<f64>> = Vec::new();
        let mut values: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let nums: Vec<f64> = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("density CSV row {}: {e}", line + 2)))?;
            let t = nums[0];
            if times.last() != Some(&t) {
                times.push(t);
                points.push(Vec::new());
                values.push(Vec::new());
            }
            points.last_mut().unwrap().extend_from_slice(&nums[1..=dim]);
            values.last_mut().unwrap().push(nums[dim + 1]);
        }
        let all: Vec<f64> = points.iter().flatten().copied().collect();
        let support = bounding_box(dim, &all, 0.0);
        DensityField::scattered(dim, times, points, values, support)
    }
}

impl SpaceTimeDensity for DensityField {
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, t: f64, x: &[f64]) -> f64 {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.slice_value(0, x);
        }
        if t >= self.times[n - 1] {
            return self.slice_value(n - 1, x);
        }
        let j = self.times.partition_point(|s| *s <= t) - 1;
        let (t0, t1) = (self.times[j], self.times[j + 1]);
        let w = (t - t0) / (t1 - t0);
        if w == 0.0 {
            return self.slice_value(j, x);
        }
        (1.0 - w) * self.slice_value(j, x) + w * self.slice_value(j + 1, x)
    }

    fn initial_value(&self, x: &[f64]) -> f64 {
        match &self.initial {
            Some(f) => {
                if self.support.contains(x) {
                    f(x)
                } else {
                    0.0
                }
            }
            None => self.value(0.0, x),
        }
    }

    fn data_box(&self) -> Option<BoxRegion> {
        Some(self.support.clone())
    }
}

/// Eulerian view of the Lagrangian solution,
/// `u(t, x) = u0(X(0, t, x)) exp(-int_0^t div b)` by backward integration.
/// Points whose backward trajectory escapes evaluate to zero.
#[derive(Clone)]
pub struct LagrangianView {
    pub field: VectorField,
    pub datum: ScalarFn,
    pub integrator: Integrator,
    pub data_box: Option<BoxRegion>,
}

impl LagrangianView {
    pub fn new(field: VectorField, datum: ScalarFn, integrator: Integrator) -> Self {
        Self {
            field,
            datum,
            integrator,
            data_box: None,
        }
    }

    /// Samples `u(t, .)` on lattice nodes for each time.
    pub fn sample_lattice(&self, lattice: &Lattice, support: BoxRegion, times: &[f64]) -> Result<DensityField> {
        let pts = lattice.points();
        let dim = lattice.dim();
        let values: Vec<Vec<f64>> = times
            .iter()
            .map(|&t| {
                pts.par_chunks(dim)
                    .map(|p| self.value(t, p))
                    .collect::<Vec<f64>>()
            })
            .collect();
        Ok(DensityField::on_lattice(lattice.clone(), support, times.to_vec(), values)?
            .with_initial(Arc::clone(&self.datum)))
    }
}

impl SpaceTimeDensity for LagrangianView {
    fn dim(&self) -> usize {
        self.field.dim()
    }

    fn value(&self, t: f64, x: &[f64]) -> f64 {
        match self.integrator.flow_with_divergence(&self.field, t, 0.0, x) {
            // The backward integral is -int_0^t div b along the trajectory.
            Ok((y, back)) => (self.datum)(&y) * back.exp(),
            Err(_) => 0.0,
        }
    }

    fn initial_value(&self, x: &[f64]) -> f64 {
        (self.datum)(x)
    }

    fn data_box(&self) -> Option<BoxRegion> {
        self.data_box.clone()
    }
}

/// Closed-form density, used for exact solutions and explicit non-solutions.
#[derive(Clone)]
pub struct AnalyticDensity {
    pub dim: usize,
    pub eval: crate::weakform::SpaceTimeFn,
    pub initial: ScalarFn,
    pub data_box: Option<BoxRegion>,
}

impl SpaceTimeDensity for AnalyticDensity {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, t: f64, x: &[f64]) -> f64 {
        (self.eval)(t, x)
    }
    fn initial_value(&self, x: &[f64]) -> f64 {
        (self.initial)(x)
    }
    fn data_box(&self) -> Option<BoxRegion> {
        self.data_box.clone()
    }
}

/// `u(t_j, X[j][i]) = u0(y_i) exp(-D[j][i])` on every active trajectory, as
/// a scattered field with nearest-trajectory interpolation.
pub fn lagrangian_solution(field: &VectorField, grid: &FlowGrid, u0: ScalarFn) -> Result<DensityField> {
    if field.dim() != grid.dim() {
        return Err(Error::Config(format!(
            "field dimension {} does not match grid dimension {}",
            field.dim(),
            grid.dim()
        )));
    }
    let dim = grid.dim();
    let active: Vec<usize> = (0..grid.count()).filter(|i| grid.is_active(*i)).collect();
    let datum: Vec<f64> = active.iter().map(|&i| u0(grid.base_point(i))).collect();
    let mut points = Vec::with_capacity(grid.time_count());
    let mut values = Vec::with_capacity(grid.time_count());
    let mut all = Vec::new();
    for j in 0..grid.time_count() {
        let mut p = Vec::with_capacity(active.len() * dim);
        let mut v = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            p.extend_from_slice(grid.position(j, i));
            v.push(datum[k] * grid.density_ratio(j, i));
        }
        all.extend_from_slice(&p);
        points.push(p);
        values.push(v);
    }
    let support = bounding_box(dim, &all, grid.spacing());
    Ok(DensityField::scattered(dim, grid.times().to_vec(), points, values, support)?.with_initial(u0))
}

/// `U(t_j, y_i) = u(t_j, X(t_j, 0, y_i))` on the flow-grid lattice; escaped
/// trajectories get zero.
pub fn pullback_along_flow(u: &dyn SpaceTimeDensity, grid: &FlowGrid) -> Result<DensityField> {
    if u.dim() != grid.dim() {
        return Err(Error::Config("density and grid dimensions differ".into()));
    }
    let values: Vec<Vec<f64>> = (0..grid.time_count())
        .map(|j| {
            let t = grid.times()[j];
            (0..grid.count())
                .into_par_iter()
                .map(|i| {
                    if grid.is_active(i) {
                        u.value(t, grid.position(j, i))
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    DensityField::on_trajectories(grid, values)
}

fn check_on_grid(f: &DensityField, grid: &FlowGrid, what: &str) -> Result<()> {
    if f.times() != grid.times() || f.slices().iter().any(|s| s.len() != grid.count()) {
        return Err(Error::Config(format!("{what} is not sampled on the flow-grid lattice")));
    }
    Ok(())
}

/// `max_i (max_j - min_j) U[j][i] / R[j][i]`; zero exactly when `U / R` is
/// constant along every trajectory.
pub fn check_lagrangian_property(u_lag: &DensityField, grid: &FlowGrid) -> Result<f64> {
    check_on_grid(u_lag, grid, "U")?;
    let mut worst = 0.0f64;
    for i in (0..grid.count()).filter(|i| grid.is_active(*i)) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..grid.time_count() {
            let w = u_lag.slice(j)[i] / grid.density_ratio(j, i);
            lo = lo.min(w);
            hi = hi.max(w);
        }
        worst = worst.max(hi - lo);
    }
    Ok(worst)
}

/// `R(t_j, y_i) = exp(-D[j][i])` as a trajectory-lattice field (1 on escaped
/// trajectories).
pub fn density_ratio_field(grid: &FlowGrid) -> Result<DensityField> {
    let values = (0..grid.time_count())
        .map(|j| {
            (0..grid.count())
                .map(|i| if grid.is_active(i) { grid.density_ratio(j, i) } else { 1.0 })
                .collect()
        })
        .collect();
    DensityField::on_trajectories(grid, values)
}

/// `Delta y^n sum_i u0(y_i)`: the mass of `u(t, .)` by change of variables.
pub fn lagrangian_mass(grid: &FlowGrid, u0: &ScalarFn) -> f64 {
    let terms: Vec<f64> = (0..grid.count())
        .filter(|i| grid.is_active(*i))
        .map(|i| u0(grid.base_point(i)))
        .collect();
    grid.cell_volume() * terms.iter().sum::<f64>()
}

/// Midpoint-rule integral of `u(t, .)` over `region` at spacing `h`.
pub fn eulerian_mass(u: &dyn SpaceTimeDensity, t: f64, region: &BoxRegion, h: f64) -> Result<f64> {
    let lattice = Lattice::cell_centered(region, h)?;
    let pts = lattice.points();
    let vals: Vec<f64> = pts.par_chunks(u.dim()).map(|p| u.value(t, p)).collect();
    let cell: f64 = region
        .lo
        .iter()
        .zip(&region.hi)
        .zip(&lattice.shape)
        .map(|((l, h), n)| (h - l) / *n as f64)
        .product();
    Ok(cell * vals.iter().sum::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::build_flow_grid;

    fn grid(field: &VectorField, dy: f64) -> FlowGrid {
        build_flow_grid(field, 1.0, dy, &[0.0, 0.25, 0.5, 0.75, 1.0], &Integrator::new(1e-2)).unwrap()
    }

    #[test]
    fn unit_datum_under_divergence_free_field_stays_one() {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let g = grid(&f, 0.2);
        let u = lagrangian_solution(&f, &g, Datum::Constant(1.0).to_fn()).unwrap();
        for s in u.slices() {
            assert!(s.iter().all(|v| (*v - 1.0).abs() < 1e-14));
        }
    }

    #[test]
    fn zero_field_keeps_datum() {
        let f = VectorField::zero(2, 1.0).unwrap();
        let g = grid(&f, 0.2);
        let u0 = Datum::Gaussian {
            center: vec![0.1, 0.0],
            sigma: 0.3,
            amplitude: 2.0,
        }
        .to_fn();
        let u = lagrangian_solution(&f, &g, Arc::clone(&u0)).unwrap();
        for (j, &t) in g.times().iter().enumerate() {
            for i in 0..g.count() {
                let y = g.base_point(i);
                assert_eq!(u.value(t, y), u0(y));
                assert_eq!(u.slice_value(j, y), u0(y));
            }
        }
        let big = pullback_along_flow(&u, &g).unwrap();
        assert_eq!(big.slice(3)[5], u0(g.base_point(5)));
    }

    #[test]
    fn lagrangian_output_has_zero_defect_and_non_solution_is_detected() {
        let f = VectorField::linear(vec![1.0, 0.0, 0.0, 2.0], 1.0).unwrap();
        let g = grid(&f, 0.2);
        let u = lagrangian_solution(&f, &g, Datum::Bump { center: vec![0.0, 0.0], radius: 0.8, amplitude: 1.0 }.to_fn()).unwrap();
        let big_u = pullback_along_flow(&u, &g).unwrap();
        assert!(check_lagrangian_property(&big_u, &g).unwrap() <= 1e-12);

        let z = VectorField::zero(2, 1.0).unwrap();
        let gz = grid(&z, 0.2);
        let phi = Datum::Bump { center: vec![0.0, 0.0], radius: 0.8, amplitude: 1.0 }.to_fn();
        let non = AnalyticDensity {
            dim: 2,
            eval: Arc::new(move |t, x| t * phi(x)),
            initial: Arc::new(|_| 0.0),
            data_box: None,
        };
        let big_u = pullback_along_flow(&non, &gz).unwrap();
        let defect = check_lagrangian_property(&big_u, &gz).unwrap();
        assert!((defect - 1.0).abs() < 1e-12, "{defect}");
    }

    #[test]
    fn out_of_support_reads_zero() {
        let lat = Lattice::covering(&BoxRegion::centered(2, 1.0), 0.5).unwrap();
        let vals = vec![vec![1.0; lat.len()]];
        let f = DensityField::on_lattice(lat, BoxRegion::centered(2, 1.0), vec![0.0], vals).unwrap();
        assert_eq!(f.value(0.0, &[0.2, 0.3]), 1.0);
        assert_eq!(f.value(0.0, &[1.2, 0.3]), 0.0);
    }

    #[test]
    fn csv_round_trip_is_bitwise() {
        let pts = vec![vec![0.1, 0.2, -1.0 / 3.0, 1e-17], vec![0.5, 0.25]];
        let vals = vec![vec![std::f64::consts::PI, -2.5e-300], vec![1.0 / 7.0]];
        let f = DensityField::scattered(2, vec![0.0, 0.125], pts, vals, BoxRegion::centered(2, 2.0)).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let back = DensityField::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.times(), f.times());
        assert_eq!(back.slices(), f.slices());
        assert_eq!(back.points(0), f.points(0));
    }

    #[test]
    fn mismatched_shapes_are_config_errors() {
        let lat = Lattice::covering(&BoxRegion::centered(2, 1.0), 0.5).unwrap();
        assert!(DensityField::on_lattice(lat.clone(), BoxRegion::centered(2, 1.0), vec![0.0], vec![vec![0.0; 3]]).is_err());
        assert!(DensityField::on_lattice(lat, BoxRegion::centered(2, 1.0), vec![0.0, 0.0], vec![]).is_err());
    }
}
