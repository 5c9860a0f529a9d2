//! Weak formulations of the continuity equation.
//!
//! * [`eulerian_residual`]: `int int u (d_t phi + b . grad phi) + int u0 phi(0)`.
//! * [`lagrangian_residual`]: `int int (U / R) d_t Psi + int (U / R)(0) Psi(0)`
//!   on the flow-grid lattice.
//! * [`change_of_variables_check`]: the two sides above for `phi` and its
//!   pullback `Psi(t, y) = phi(t, X(t, 0, y))`.
//! * [`FvSolver`]: first-order upwind finite volumes, an Eulerian solver that
//!   shares no code with the Lagrangian construction.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::flow::FlowGrid;
use crate::geometry::{BoxRegion, Lattice};
use crate::transport::{DensityField, ScalarFn, SpaceTimeDensity};
use crate::vectorfield::VectorField;

/// `max_{s in [0,1]} |d/ds (1 - s^2)^3| = 96 / (25 sqrt 5)`.
pub const BUMP_SLOPE: f64 = 1.717_300_206_719_838_4;

fn profile(s: f64) -> f64 {
    let q = 1.0 - s * s;
    if q > 0.0 {
        q * q * q
    } else {
        0.0
    }
}

fn profile_slope(s: f64) -> f64 {
    let q = 1.0 - s * s;
    if q > 0.0 {
        -6.0 * s * q * q
    } else {
        0.0
    }
}

/// Time factor of a separable test function.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeProfile {
    One,
    /// `(1 - ((t - center) / radius)^2)^3` on `|t - center| < radius`.
    Bump { center: f64, radius: f64 },
}

impl TimeProfile {
    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeProfile::One => 1.0,
            TimeProfile::Bump { center, radius } => profile((t - center) / radius),
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match self {
            TimeProfile::One => 0.0,
            TimeProfile::Bump { center, radius } => profile_slope((t - center) / radius) / radius,
        }
    }

    fn slope_bound(&self) -> f64 {
        match self {
            TimeProfile::One => 0.0,
            TimeProfile::Bump { radius, .. } => BUMP_SLOPE / radius,
        }
    }

    /// Last time at which the profile can be nonzero.
    fn end(&self) -> f64 {
        match self {
            TimeProfile::One => f64::INFINITY,
            TimeProfile::Bump { center, radius } => center + radius,
        }
    }
}

/// Space factor of a separable test function.
#[derive(Debug, Clone, PartialEq)]
pub enum SpaceProfile {
    One,
    /// `(1 - |y - center|^2 / radius^2)^3` inside the ball.
    Bump { center: Vec<f64>, radius: f64 },
}

impl SpaceProfile {
    pub fn eval(&self, y: &[f64]) -> f64 {
        match self {
            SpaceProfile::One => 1.0,
            SpaceProfile::Bump { center, radius } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                let q = 1.0 - r2 / (radius * radius);
                if q > 0.0 {
                    q * q * q
                } else {
                    0.0
                }
            }
        }
    }

    pub fn gradient(&self, y: &[f64], out: &mut [f64]) {
        match self {
            SpaceProfile::One => out.iter_mut().for_each(|v| *v = 0.0),
            SpaceProfile::Bump { center, radius } => {
                let r2: f64 = y.iter().zip(center).map(|(a, c)| (a - c) * (a - c)).sum();
                let q = 1.0 - r2 / (radius * radius);
                let s = if q > 0.0 { -6.0 * q * q / (radius * radius) } else { 0.0 };
                for (d, o) in out.iter_mut().enumerate() {
                    *o = s * (y[d] - center[d]);
                }
            }
        }
    }

    fn slope_bound(&self) -> f64 {
        match self {
            SpaceProfile::One => 0.0,
            SpaceProfile::Bump { radius, .. } => BUMP_SLOPE / radius,
        }
    }

    fn support(&self) -> Option<BoxRegion> {
        match self {
            SpaceProfile::One => None,
            SpaceProfile::Bump { center, radius } => Some(BoxRegion {
                lo: center.iter().map(|c| c - radius).collect(),
                hi: center.iter().map(|c| c + radius).collect(),
            }),
        }
    }
}

pub type SpaceTimeFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;
pub type GradientFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

#[derive(Clone)]
enum Kind {
    Tensor {
        amplitude: f64,
        time: TimeProfile,
        space: SpaceProfile,
    },
    Custom {
        eval: SpaceTimeFn,
        dt: Option<SpaceTimeFn>,
        grad: Option<GradientFn>,
    },
}

/// Lipschitz test function `phi(t, x)` with a known constant and support.
#[derive(Clone)]
pub struct TestFunction {
    dim: usize,
    kind: Kind,
    lip: f64,
    /// Supremum of the time support; `phi(t, .) = 0` for `t >= t_end`.
    t_end: f64,
    support: Option<BoxRegion>,
}

impl std::fmt::Debug for TestFunction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut s = f.debug_struct("TestFunction");
        if let Kind::Tensor { amplitude, time, space } = &self.kind {
            s.field("amplitude", amplitude).field("time", time).field("space", space);
        }
        s.field("lip", &self.lip)
            .field("t_end", &self.t_end)
            .field("support", &self.support)
            .finish()
    }
}

impl TestFunction {
    /// `amplitude * time(t) * space(y)`.
    pub fn tensor(dim: usize, amplitude: f64, time: TimeProfile, space: SpaceProfile) -> Result<Self> {
        if let TimeProfile::Bump { radius, .. } = &time {
            if !(*radius > 0.0) {
                return Err(Error::Config("time bump radius must be positive".into()));
            }
        }
        if let SpaceProfile::Bump { center, radius } = &space {
            if center.len() != dim || !(*radius > 0.0) {
                return Err(Error::Config(
                    "space bump needs a center of the right dimension and a positive radius".into(),
                ));
            }
        }
        let (a, b) = (time.slope_bound(), space.slope_bound());
        let lip = amplitude.abs() * (a * a + b * b).sqrt();
        Ok(Self {
            dim,
            t_end: time.end(),
            support: space.support(),
            kind: Kind::Tensor {
                amplitude,
                time,
                space,
            },
            lip,
        })
    }

    /// Smooth bump in `(t, y)`, the default built-in.
    pub fn bump(amplitude: f64, t_center: f64, t_radius: f64, center: Vec<f64>, radius: f64) -> Result<Self> {
        Self::tensor(
            center.len(),
            amplitude,
            TimeProfile::Bump {
                center: t_center,
                radius: t_radius,
            },
            SpaceProfile::Bump { center, radius },
        )
    }

    pub fn constant(dim: usize, c: f64) -> Self {
        Self::tensor(dim, c, TimeProfile::One, SpaceProfile::One).expect("constant test function")
    }

    /// User-supplied function. Derivatives fall back to central differences
    /// when absent.
    pub fn custom(
        dim: usize,
        eval: SpaceTimeFn,
        dt: Option<SpaceTimeFn>,
        grad: Option<GradientFn>,
        lip: f64,
        t_end: f64,
        support: Option<BoxRegion>,
    ) -> Self {
        Self {
            dim,
            kind: Kind::Custom { eval, dt, grad },
            lip,
            t_end,
            support,
        }
    }

    /// `a * self + b * other`, with the triangle-inequality constant.
    pub fn combine(&self, a: f64, other: &TestFunction, b: f64) -> TestFunction {
        let (f, g) = (self.clone(), other.clone());
        let (f1, g1) = (self.clone(), other.clone());
        let (f2, g2) = (self.clone(), other.clone());
        let support = match (&self.support, &other.support) {
            (Some(p), Some(q)) => Some(BoxRegion {
                lo: p.lo.iter().zip(&q.lo).map(|(x, y)| x.min(*y)).collect(),
                hi: p.hi.iter().zip(&q.hi).map(|(x, y)| x.max(*y)).collect(),
            }),
            _ => None,
        };
        let dim = self.dim;
        TestFunction::custom(
            dim,
            Arc::new(move |t, x| a * f.eval(t, x) + b * g.eval(t, x)),
            Some(Arc::new(move |t, x| a * f1.time_derivative(t, x) + b * g1.time_derivative(t, x))),
            Some(Arc::new(move |t, x, out: &mut [f64]| {
                let mut tmp = vec![0.0; dim];
                f2.gradient(t, x, out);
                g2.gradient(t, x, &mut tmp);
                for (o, v) in out.iter_mut().zip(&tmp) {
                    *o = a * *o + b * v;
                }
            })),
            a.abs() * self.lip + b.abs() * other.lip,
            self.t_end.max(other.t_end),
            support,
        )
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lip(&self) -> f64 {
        self.lip
    }
    pub fn t_end(&self) -> f64 {
        self.t_end
    }
    /// Spatial support box; `None` for functions that do not vanish in space.
    pub fn support(&self) -> Option<&BoxRegion> {
        self.support.as_ref()
    }

    /// `(amplitude, time factor, space factor)` for separable built-ins.
    pub fn tensor_factors(&self) -> Option<(f64, &TimeProfile, &SpaceProfile)> {
        match &self.kind {
            Kind::Tensor { amplitude, time, space } => Some((*amplitude, time, space)),
            Kind::Custom { .. } => None,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Tensor { amplitude, time, space } => {
                let a = time.eval(t);
                if a == 0.0 {
                    0.0
                } else {
                    amplitude * a * space.eval(x)
                }
            }
            Kind::Custom { eval, .. } => eval(t, x),
        }
    }

    pub fn time_derivative(&self, t: f64, x: &[f64]) -> f64 {
        match &self.kind {
            Kind::Tensor { amplitude, time, space } => amplitude * time.derivative(t) * space.eval(x),
            Kind::Custom { dt: Some(d), .. } => d(t, x),
            Kind::Custom { eval, .. } => {
                let h = 1e-6 * (1.0 + t.abs());
                (eval(t + h, x) - eval(t - h, x)) / (2.0 * h)
            }
        }
    }

    pub fn gradient(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            Kind::Tensor { amplitude, time, space } => {
                let a = amplitude * time.eval(t);
                space.gradient(x, out);
                out.iter_mut().for_each(|v| *v *= a);
            }
            Kind::Custom { grad: Some(g), .. } => g(t, x, out),
            Kind::Custom { eval, .. } => {
                let mut p = x.to_vec();
                for d in 0..x.len() {
                    let h = 1e-6 * (1.0 + x[d].abs());
                    p[d] = x[d] + h;
                    let up = eval(t, &p);
                    p[d] = x[d] - h;
                    let down = eval(t, &p);
                    p[d] = x[d];
                    out[d] = (up - down) / (2.0 * h);
                }
            }
        }
    }
}

/// Space-time quadrature spacings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub dx: f64,
    pub dt: f64,
}

impl Quadrature {
    pub fn new(dx: f64, dt: f64) -> Result<Self> {
        if !(dx > 0.0 && dt > 0.0) {
            return Err(Error::Config(format!("quadrature spacings must be positive, got dx = {dx}, dt = {dt}")));
        }
        Ok(Self { dx, dt })
    }

    pub fn halved(&self) -> Self {
        Self {
            dx: 0.5 * self.dx,
            dt: 0.5 * self.dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residual {
    /// `interior + initial`.
    pub value: f64,
    pub interior: f64,
    pub initial: f64,
    pub dt: f64,
    pub dx: f64,
}

impl Residual {
    fn new(interior: f64, initial: f64, dt: f64, dx: f64) -> Self {
        Self {
            value: interior + initial,
            interior,
            initial,
            dt,
            dx,
        }
    }
}

fn describe(b: &BoxRegion) -> String {
    format!("{:?}..{:?}", b.lo, b.hi)
}

/// Eulerian residual by the product-midpoint rule: on each space-time cell,
/// `u(t_mid, x_c) [phi(t_{k+1}, x_c) - phi(t_k, x_c) + dt b(t_mid, x_c) . grad phi(t_mid, x_c)] h^n`,
/// plus `sum_c u0(x_c) phi(0, x_c) h^n`. The time increment of `phi` is taken
/// exactly per cell, so densities constant in time are integrated by parts
/// without quadrature error.
///
/// The space region is the test-function support, and time runs over
/// `[0, min(T, t_end)]`.
pub fn eulerian_residual(
    u: &dyn SpaceTimeDensity,
    field: &VectorField,
    phi: &TestFunction,
    quad: Quadrature,
) -> Result<Residual> {
    let dim = field.dim();
    if u.dim() != dim || phi.dim() != dim {
        return Err(Error::Config("density, field and test function dimensions differ".into()));
    }
    let region = match (phi.support(), u.data_box()) {
        (Some(s), Some(d)) => {
            if !d.contains_box(s) {
                return Err(Error::Coverage {
                    support: describe(s),
                    data: describe(&d),
                });
            }
            s.clone()
        }
        (Some(s), None) => s.clone(),
        (None, Some(d)) => {
            return Err(Error::Coverage {
                support: "unbounded".into(),
                data: describe(&d),
            })
        }
        (None, None) => {
            return Err(Error::Config("test function without spatial support needs a bounded density".into()))
        }
    };
    let t_stop = phi.t_end().min(field.horizon());
    let lattice = Lattice::cell_centered(&region, quad.dx)?;
    let cell: f64 = region
        .lo
        .iter()
        .zip(&region.hi)
        .zip(&lattice.shape)
        .map(|((l, h), n)| (h - l) / *n as f64)
        .product();
    let h_eff = cell.powf(1.0 / dim as f64);
    let nt = if t_stop > 0.0 {
        ((t_stop / quad.dt) - 1e-9).ceil().max(1.0) as usize
    } else {
        0
    };
    let dt = if nt > 0 { t_stop / nt as f64 } else { 0.0 };
    let pts = lattice.points();
    let cells: Vec<(f64, f64)> = pts
        .par_chunks(dim)
        .map(|x| {
            let mut b = vec![0.0; dim];
            let mut g = vec![0.0; dim];
            let mut acc = 0.0;
            let mut phi_prev = phi.eval(0.0, x);
            for k in 0..nt {
                let t0 = k as f64 * dt;
                let t1 = if k + 1 == nt { t_stop } else { (k + 1) as f64 * dt };
                let tm = 0.5 * (t0 + t1);
                let phi_next = phi.eval(t1, x);
                let uv = u.value(tm, x);
                if uv != 0.0 {
                    field.eval(tm, x, &mut b);
                    phi.gradient(tm, x, &mut g);
                    let adv: f64 = b.iter().zip(&g).map(|(p, q)| p * q).sum();
                    acc += uv * ((phi_next - phi_prev) + (t1 - t0) * adv);
                }
                phi_prev = phi_next;
            }
            (acc, u.initial_value(x) * phi.eval(0.0, x))
        })
        .collect();
    let interior = cell * cells.iter().map(|c| c.0).sum::<f64>();
    let initial = cell * cells.iter().map(|c| c.1).sum::<f64>();
    Ok(Residual::new(interior, initial, dt, h_eff))
}

/// `Psi(t_j, y_i)` on the flow-grid lattice.
pub fn sample_on_grid(psi: &TestFunction, grid: &FlowGrid) -> Vec<Vec<f64>> {
    grid.times()
        .iter()
        .map(|&t| (0..grid.count()).map(|i| psi.eval(t, grid.base_point(i))).collect())
        .collect()
}

/// `Psi(t_j, y_i) = phi(t_j, X(t_j, 0, y_i))` on active trajectories, zero on
/// escaped ones.
pub fn pullback_test_values(phi: &TestFunction, grid: &FlowGrid) -> Vec<Vec<f64>> {
    grid.times()
        .iter()
        .enumerate()
        .map(|(j, &t)| {
            (0..grid.count())
                .map(|i| if grid.is_active(i) { phi.eval(t, grid.position(j, i)) } else { 0.0 })
                .collect()
        })
        .collect()
}

/// Lagrangian residual with `Psi` given as samples on the flow-grid lattice.
///
/// With `w = U / R`, the interior term is
/// `dy^n sum_i sum_j (w_j + w_{j+1}) / 2 (Psi_{j+1} - Psi_j)` on the grid's
/// own time slices and the initial term is `dy^n sum_i w_0 Psi_0`. Escaped
/// trajectories are skipped. `R` below `floor` (up to relative roundoff) is
/// rejected.
pub fn lagrangian_residual_sampled(
    big_u: &DensityField,
    big_r: &DensityField,
    psi: &[Vec<f64>],
    grid: &FlowGrid,
    floor: f64,
) -> Result<Residual> {
    let nt = grid.time_count();
    let n = grid.count();
    for (what, f) in [("U", big_u), ("R", big_r)] {
        if f.times() != grid.times() || f.slices().iter().any(|s| s.len() != n) {
            return Err(Error::Config(format!("{what} is not sampled on the flow-grid lattice")));
        }
    }
    if psi.len() != nt || psi.iter().any(|s| s.len() != n) {
        return Err(Error::Config("test values are not sampled on the flow-grid lattice".into()));
    }
    for i in (0..n).filter(|i| grid.is_active(*i)) {
        for j in 0..nt {
            let r = big_r.slice(j)[i];
            if !(r >= floor * (1.0 - 1e-12)) {
                return Err(Error::DensityBound { value: r, floor });
            }
        }
    }
    let per: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            if !grid.is_active(i) {
                return (0.0, 0.0);
            }
            let w = |j: usize| big_u.slice(j)[i] / big_r.slice(j)[i];
            let mut acc = 0.0;
            for j in 0..nt - 1 {
                acc += 0.5 * (w(j) + w(j + 1)) * (psi[j + 1][i] - psi[j][i]);
            }
            (acc, w(0) * psi[0][i])
        })
        .collect();
    let vol = grid.cell_volume();
    let interior = vol * per.iter().map(|p| p.0).sum::<f64>();
    let initial = vol * per.iter().map(|p| p.1).sum::<f64>();
    let dt = grid.times().windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    Ok(Residual::new(interior, initial, dt, grid.spacing()))
}

/// Lagrangian residual for a test function in the `(t, y)` variables.
pub fn lagrangian_residual(
    big_u: &DensityField,
    big_r: &DensityField,
    psi: &TestFunction,
    grid: &FlowGrid,
    floor: f64,
) -> Result<Residual> {
    lagrangian_residual_sampled(big_u, big_r, &sample_on_grid(psi, grid), grid, floor)
}

/// Both sides of the change of variables `x = X(t, 0, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChangeOfVariables {
    pub lagrangian: Residual,
    pub eulerian: Residual,
    /// `|lagrangian.value - eulerian.value|`.
    pub difference: f64,
}

/// Compares the Lagrangian residual of `U = u o X`, `R` and the pullback
/// `Psi = phi(t, X(t, 0, y))` with the Eulerian residual of `u` against `phi`.
pub fn change_of_variables_check(
    u: &dyn SpaceTimeDensity,
    field: &VectorField,
    grid: &FlowGrid,
    phi: &TestFunction,
    quad: Quadrature,
    floor: f64,
) -> Result<ChangeOfVariables> {
    let big_u = crate::transport::pullback_along_flow(u, grid)?;
    let big_r = crate::transport::density_ratio_field(grid)?;
    let psi = pullback_test_values(phi, grid);
    let lagrangian = lagrangian_residual_sampled(&big_u, &big_r, &psi, grid, floor)?;
    let eulerian = eulerian_residual(u, field, phi, quad)?;
    Ok(ChangeOfVariables {
        lagrangian,
        eulerian,
        difference: (lagrangian.value - eulerian.value).abs(),
    })
}

/// Stability limit on `dt / dx * max_cell sum_d max |b_d|` over cell faces.
pub const CFL_LIMIT: f64 = 0.9;

/// First-order upwind finite volumes on a cell-centred lattice of a box.
/// Inflow faces on the boundary carry zero, outflow faces are free.
pub struct FvSolver {
    field: VectorField,
    lattice: Lattice,
    region: BoxRegion,
    dx: f64,
    dt_max: f64,
    time: f64,
    values: Vec<f64>,
    /// `face_velocity[c * dim + d]`: normal velocity on the upper face of
    /// cell `c` along axis `d`; lower faces of the first layer live in
    /// `lower_velocity`.
    face_velocity: Vec<f64>,
    lower_velocity: Vec<f64>,
    cached_at: Option<f64>,
    outflow: f64,
}

impl FvSolver {
    pub fn new(field: VectorField, u0: &ScalarFn, region: BoxRegion, dx: f64, dt: f64) -> Result<Self> {
        if region.dim() != field.dim() {
            return Err(Error::Config("finite-volume box and field dimensions differ".into()));
        }
        if !(dx > 0.0 && dt > 0.0) {
            return Err(Error::Config(format!("finite volumes need positive dx and dt, got {dx}, {dt}")));
        }
        let widths: Vec<f64> = region.lo.iter().zip(&region.hi).map(|(l, h)| h - l).collect();
        if widths.iter().any(|w| ((w / dx) - (w / dx).round()).abs() > 1e-9) {
            return Err(Error::Config(format!(
                "finite-volume spacing {dx} does not tile the box {:?}..{:?}",
                region.lo, region.hi
            )));
        }
        let lattice = Lattice::cell_centered(&region, dx)?;
        let pts = lattice.points();
        let values: Vec<f64> = pts.chunks(region.dim()).map(|p| u0(p)).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("initial datum is not finite on the lattice".into()));
        }
        let n = lattice.len() * field.dim();
        let mut s = Self {
            field,
            lattice,
            region,
            dx,
            dt_max: dt,
            time: 0.0,
            values,
            face_velocity: vec![0.0; n],
            lower_velocity: vec![0.0; n],
            cached_at: None,
            outflow: 0.0,
        };
        s.faces(0.0);
        s.check_cfl(dt)?;
        Ok(s)
    }

    pub fn time(&self) -> f64 {
        self.time
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn lattice(&self) -> &Lattice {
        &self.lattice
    }

    pub fn mass(&self) -> f64 {
        self.lattice.cell_volume() * self.values.iter().sum::<f64>()
    }

    /// Mass that has left through the boundary so far.
    pub fn boundary_outflow(&self) -> f64 {
        self.outflow
    }

    fn faces(&mut self, t: f64) {
        if self.cached_at.is_some() && (self.field.is_autonomous() || self.cached_at == Some(t)) {
            return;
        }
        let dim = self.field.dim();
        let half = 0.5 * self.dx;
        let pts = self.lattice.points();
        let field = &self.field;
        let rows: Vec<(Vec<f64>, Vec<f64>)> = pts
            .par_chunks(dim)
            .map(|c| {
                let mut up = vec![0.0; dim];
                let mut down = vec![0.0; dim];
                let mut p = c.to_vec();
                let mut b = vec![0.0; dim];
                for d in 0..dim {
                    p[d] = c[d] + half;
                    field.eval(t, &p, &mut b);
                    up[d] = b[d];
                    p[d] = c[d] - half;
                    field.eval(t, &p, &mut b);
                    down[d] = b[d];
                    p[d] = c[d];
                }
                (up, down)
            })
            .collect();
        for (c, (up, down)) in rows.into_iter().enumerate() {
            self.face_velocity[c * dim..(c + 1) * dim].copy_from_slice(&up);
            self.lower_velocity[c * dim..(c + 1) * dim].copy_from_slice(&down);
        }
        self.cached_at = Some(t);
    }

    /// `dt / dx * max_c sum_d max(|b| on the two faces of c along d)`.
    pub fn cfl_number(&self, dt: f64) -> f64 {
        let dim = self.field.dim();
        let worst = (0..self.lattice.len())
            .map(|c| {
                (0..dim)
                    .map(|d| {
                        self.face_velocity[c * dim + d]
                            .abs()
                            .max(self.lower_velocity[c * dim + d].abs())
                    })
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
        dt / self.dx * worst
    }

    fn check_cfl(&self, dt: f64) -> Result<()> {
        let cfl = self.cfl_number(dt);
        if cfl > CFL_LIMIT {
            return Err(Error::Cfl { cfl, limit: CFL_LIMIT });
        }
        Ok(())
    }

    /// One explicit step of size `dt`; returns the mass leaving the box.
    pub fn step(&mut self, dt: f64) -> Result<f64> {
        self.faces(self.time);
        self.check_cfl(dt)?;
        let dim = self.field.dim();
        let shape = self.lattice.shape.clone();
        let mut strides = vec![1usize; dim];
        for d in (0..dim.saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * shape[d + 1];
        }
        let ratio = dt / self.dx;
        let u = &self.values;
        let fv = &self.face_velocity;
        let lv = &self.lower_velocity;
        let results: Vec<(f64, f64)> = (0..u.len())
            .into_par_iter()
            .map(|c| {
                let mut delta = 0.0;
                let mut out = 0.0;
                for d in 0..dim {
                    let k = (c / strides[d]) % shape[d];
                    let v_up = fv[c * dim + d];
                    let flux_up = if k + 1 < shape[d] {
                        let r = u[c + strides[d]];
                        v_up.max(0.0) * u[c] + v_up.min(0.0) * r
                    } else {
                        let f = v_up.max(0.0) * u[c];
                        out += f;
                        f
                    };
                    let v_dn = lv[c * dim + d];
                    let flux_dn = if k > 0 {
                        let l = u[c - strides[d]];
                        v_dn.max(0.0) * l + v_dn.min(0.0) * u[c]
                    } else {
                        let f = v_dn.min(0.0) * u[c];
                        out -= f;
                        f
                    };
                    delta += flux_up - flux_dn;
                }
                (u[c] - ratio * delta, out)
            })
            .collect();
        let face = self.dx.powi(dim as i32 - 1);
        let mut leaving = 0.0;
        for (c, (v, o)) in results.into_iter().enumerate() {
            self.values[c] = v;
            leaving += o;
        }
        let leaving = dt * face * leaving;
        self.outflow += leaving;
        self.time += dt;
        Ok(leaving)
    }

    /// Steps to time `t` with equal substeps no longer than the configured `dt`.
    pub fn advance_to(&mut self, t: f64) -> Result<()> {
        if t < self.time - 1e-12 || t > self.field.horizon() * (1.0 + 1e-12) {
            return Err(Error::TimeOutOfRange {
                t,
                horizon: self.field.horizon(),
            });
        }
        let span = t - self.time;
        if span <= 0.0 {
            return Ok(());
        }
        let n = ((span / self.dt_max) - 1e-9).ceil().max(1.0) as usize;
        let start = self.time;
        for k in 0..n {
            let target = if k + 1 == n { t } else { start + span * (k + 1) as f64 / n as f64 };
            let dt = target - self.time;
            self.step(dt)?;
            self.time = target;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<f64> {
        self.values.clone()
    }

    pub fn region(&self) -> &BoxRegion {
        &self.region
    }
}

/// Runs [`FvSolver`] and records the solution at each requested time
/// (`times` increasing, starting at or after 0).
pub fn fv_solve(
    field: &VectorField,
    u0: &ScalarFn,
    region: &BoxRegion,
    dx: f64,
    dt: f64,
    times: &[f64],
) -> Result<DensityField> {
    if times.is_empty() || times[0] < 0.0 || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Config("snapshot times must be nonnegative and strictly increasing".into()));
    }
    let mut solver = FvSolver::new(field.clone(), u0, region.clone(), dx, dt)?;
    let mut slices = Vec::with_capacity(times.len());
    for &t in times {
        solver.advance_to(t)?;
        slices.push(solver.snapshot());
    }
    Ok(DensityField::on_lattice(solver.lattice.clone(), region.clone(), times.to_vec(), slices)?
        .with_initial(Arc::clone(u0)))
}

/// Midpoint-rule `int_region |a(t, .) - b(t, .)|` on a cell-centred lattice of
/// spacing `h`.
pub fn l1_distance(
    a: &dyn SpaceTimeDensity,
    b: &dyn SpaceTimeDensity,
    t: f64,
    region: &BoxRegion,
    h: f64,
) -> Result<f64> {
    let lattice = Lattice::cell_centered(region, h)?;
    let cell: f64 = region
        .lo
        .iter()
        .zip(&region.hi)
        .zip(&lattice.shape)
        .map(|((l, hi), n)| (hi - l) / *n as f64)
        .product();
    let pts = lattice.points();
    let terms: Vec<f64> = pts
        .par_chunks(region.dim())
        .map(|x| (a.value(t, x) - b.value(t, x)).abs())
        .collect();
    Ok(cell * terms.iter().sum::<f64>())
}

/// `int |u(t, .)|` with the same rule as [`l1_distance`].
pub fn l1_norm(a: &dyn SpaceTimeDensity, t: f64, region: &BoxRegion, h: f64) -> Result<f64> {
    let zero = crate::transport::AnalyticDensity {
        dim: region.dim(),
        eval: Arc::new(|_, _| 0.0),
        initial: Arc::new(|_| 0.0),
        data_box: None,
    };
    l1_distance(a, &zero, t, region, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{build_flow_grid, Integrator};
    use crate::transport::{density_ratio_field, lagrangian_solution, pullback_along_flow, AnalyticDensity, Datum};

    #[test]
    fn bump_slope_constant() {
        assert!((BUMP_SLOPE - 96.0 / (25.0 * 5f64.sqrt())).abs() < 1e-12);
        let s = 1.0 / 5f64.sqrt();
        assert!((profile_slope(s).abs() - BUMP_SLOPE).abs() < 1e-12);
    }

    #[test]
    fn bump_derivatives_match_differences() {
        let phi = TestFunction::bump(1.3, 0.2, 0.6, vec![0.1, -0.2], 0.7).unwrap();
        let (t, x) = (0.35, [0.3, 0.05]);
        let h = 1e-6;
        let dt = (phi.eval(t + h, &x) - phi.eval(t - h, &x)) / (2.0 * h);
        assert!((phi.time_derivative(t, &x) - dt).abs() < 1e-8);
        let mut g = [0.0; 2];
        phi.gradient(t, &x, &mut g);
        let gx = (phi.eval(t, &[x[0] + h, x[1]]) - phi.eval(t, &[x[0] - h, x[1]])) / (2.0 * h);
        assert!((g[0] - gx).abs() < 1e-8);
        assert_eq!(phi.eval(0.9, &x), 0.0);
        assert_eq!(phi.eval(0.3, &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn zero_density_gives_zero_residual() {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let u = AnalyticDensity {
            dim: 2,
            eval: Arc::new(|_, _| 0.0),
            initial: Arc::new(|_| 0.0),
            data_box: None,
        };
        let phi = TestFunction::bump(1.0, 0.0, 0.8, vec![0.0, 0.0], 0.5).unwrap();
        let r = eulerian_residual(&u, &f, &phi, Quadrature::new(0.1, 0.1).unwrap()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn non_solution_is_detected() {
        // u = t phi2(x) under b = 0, zero datum: residual = int int t phi2 d_t phi.
        let f = VectorField::zero(2, 1.0).unwrap();
        let phi2 = Datum::Bump {
            center: vec![0.0, 0.0],
            radius: 0.5,
            amplitude: 1.0,
        }
        .to_fn();
        let u = AnalyticDensity {
            dim: 2,
            eval: Arc::new(move |t, x| t * phi2(x)),
            initial: Arc::new(|_| 0.0),
            data_box: None,
        };
        let phi = TestFunction::bump(1.0, 0.0, 0.8, vec![0.0, 0.0], 0.5).unwrap();
        let r = eulerian_residual(&u, &f, &phi, Quadrature::new(0.05, 0.05).unwrap()).unwrap();
        assert!(r.value.abs() > 1e-3, "{r:?}");
    }

    #[test]
    fn coverage_is_enforced() {
        let f = VectorField::zero(2, 1.0).unwrap();
        let lat = Lattice::covering(&BoxRegion::centered(2, 0.5), 0.25).unwrap();
        let n = lat.len();
        let u = DensityField::on_lattice(lat, BoxRegion::centered(2, 0.5), vec![0.0], vec![vec![1.0; n]]).unwrap();
        let phi = TestFunction::bump(1.0, 0.0, 0.8, vec![0.0, 0.0], 0.9).unwrap();
        assert!(matches!(
            eulerian_residual(&u, &f, &phi, Quadrature::new(0.1, 0.1).unwrap()),
            Err(Error::Coverage { .. })
        ));
    }

    #[test]
    fn time_constant_weight_integrates_by_parts() {
        let f = VectorField::rotation(1.0, 1.0).unwrap();
        let grid = build_flow_grid(&f, 1.0, 0.1, &[0.0, 0.25, 0.5, 0.75, 1.0], &Integrator::new(1e-2)).unwrap();
        let u = lagrangian_solution(&f, &grid, Datum::Constant(2.0).to_fn()).unwrap();
        let big_u = pullback_along_flow(&u, &grid).unwrap();
        let big_r = density_ratio_field(&grid).unwrap();
        let psi = TestFunction::bump(1.0, 0.0, 0.9, vec![0.1, 0.0], 0.6).unwrap();
        let r = lagrangian_residual(&big_u, &big_r, &psi, &grid, 0.5).unwrap();
        assert!(r.value.abs() < 1e-12, "{r:?}");
        assert!(r.interior.abs() > 0.1);
        assert!(matches!(
            lagrangian_residual(&big_u, &big_r, &psi, &grid, 2.0),
            Err(Error::DensityBound { .. })
        ));
    }

    #[test]
    fn fv_zero_field_is_static() {
        let f = VectorField::zero(2, 1.0).unwrap();
        let u0 = Datum::Gaussian {
            center: vec![0.0, 0.0],
            sigma: 0.3,
            amplitude: 1.0,
        }
        .to_fn();
        let out = fv_solve(&f, &u0, &BoxRegion::centered(2, 1.0), 0.1, 0.05, &[0.0, 1.0]).unwrap();
        assert_eq!(out.slice(0), out.slice(1));
    }

    #[test]
    fn fv_conserves_up_to_boundary_flux() {
        let f = VectorField::constant(vec![1.0, 0.5], 1.0).unwrap();
        let u0 = Datum::Gaussian {
            center: vec![0.7, 0.0],
            sigma: 0.2,
            amplitude: 1.0,
        }
        .to_fn();
        let mut s = FvSolver::new(f, &u0, BoxRegion::centered(2, 1.0), 0.05, 0.02).unwrap();
        for _ in 0..20 {
            let before = s.mass();
            let out = s.step(0.02).unwrap();
            assert!((before - s.mass() - out).abs() < 1e-10);
        }
        assert!(s.boundary_outflow() > 0.0);
    }

    #[test]
    fn cfl_violation_is_rejected() {
        let f = VectorField::constant(vec![1.0, 1.0], 1.0).unwrap();
        let u0 = Datum::Zero.to_fn();
        let err = FvSolver::new(f, &u0, BoxRegion::centered(2, 1.0), 0.1, 0.05).err().unwrap();
        assert!(matches!(err, Error::Cfl { .. }));
        assert_eq!(err.class(), crate::error::ErrorClass::Infeasible);
    }
}
