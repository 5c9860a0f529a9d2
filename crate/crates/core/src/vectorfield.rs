//! Evaluable vector fields `b(t, x)`, the analytic catalog, and sampled
//! checkers for the standing assumptions (bounded divergence, sublinear
//! growth, uniform modulus of continuity, Sobolev seminorm).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{dist, norm};

/// `(t, x, out)`: writes `b(t, x)` into `out`.
pub type FieldFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x) -> div b(t, x)`.
pub type DivergenceFn = Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum FieldKind {
    Zero,
    Constant(Vec<f64>),
    /// Row-major `n x n` matrix, `b(x) = A x`.
    Linear(Vec<f64>),
    /// `b(x) = omega (-x_2, x_1)`.
    Rotation { omega: f64 },
    /// `b(x) = (k x_2, 0)`.
    Shear { k: f64 },
    /// `b(x) = (1 + alpha) |x|^(alpha - 1) (-x_2, x_1)`, `b(0) = 0`.
    SwirlPower { alpha: f64 },
    Custom {
        eval: FieldFn,
        divergence: Option<DivergenceFn>,
        autonomous: bool,
    },
}

impl fmt::Debug for FieldKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldKind::Zero => write!(f, "Zero"),
            FieldKind::Constant(c) => write!(f, "Constant({c:?})"),
            FieldKind::Linear(a) => write!(f, "Linear({a:?})"),
            FieldKind::Rotation { omega } => write!(f, "Rotation {{ omega: {omega} }}"),
            FieldKind::Shear { k } => write!(f, "Shear {{ k: {k} }}"),
            FieldKind::SwirlPower { alpha } => write!(f, "SwirlPower {{ alpha: {alpha} }}"),
            FieldKind::Custom { autonomous, .. } => {
                write!(f, "Custom {{ autonomous: {autonomous} }}")
            }
        }
    }
}

/// A vector field on `[0, T] x R^n`. Immutable once built.
#[derive(Debug, Clone)]
pub struct VectorField {
    name: String,
    dim: usize,
    horizon: f64,
    kind: FieldKind,
    sobolev_p: f64,
    lipschitz: bool,
}

impl VectorField {
    fn build(name: &str, dim: usize, horizon: f64, kind: FieldKind, p: f64, lip: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("field dimension must be at least 1".into()));
        }
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::Config(format!("horizon must be positive and finite, got {horizon}")));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            horizon,
            kind,
            sobolev_p: p,
            lipschitz: lip,
        })
    }

    pub fn zero(dim: usize, horizon: f64) -> Result<Self> {
        Self::build("zero", dim, horizon, FieldKind::Zero, f64::INFINITY, true)
    }

    pub fn constant(c: Vec<f64>, horizon: f64) -> Result<Self> {
        Self::build("constant", c.len(), horizon, FieldKind::Constant(c), f64::INFINITY, true)
    }

    /// `matrix` is row-major and must be square.
    pub fn linear(matrix: Vec<f64>, horizon: f64) -> Result<Self> {
        let n = (matrix.len() as f64).sqrt().round() as usize;
        if n * n != matrix.len() || n == 0 {
            return Err(Error::Config(format!(
                "linear field needs a square matrix, got {} entries",
                matrix.len()
            )));
        }
        Self::build("linear", n, horizon, FieldKind::Linear(matrix), f64::INFINITY, true)
    }

    pub fn rotation(omega: f64, horizon: f64) -> Result<Self> {
        Self::build("rotation", 2, horizon, FieldKind::Rotation { omega }, f64::INFINITY, true)
    }

    pub fn shear(k: f64, horizon: f64) -> Result<Self> {
        Self::build("shear", 2, horizon, FieldKind::Shear { k }, f64::INFINITY, true)
    }

    /// Divergence-free swirl whose angular velocity `(1 + alpha) r^(alpha - 1)`
    /// blows up at the origin. Holder-`alpha` continuous, in `W^{1,p}_loc` for
    /// `p < 2 / (1 - alpha)`; the declared exponent is half that bound.
    pub fn swirl_power(alpha: f64, horizon: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("swirl_power needs alpha in (0, 1), got {alpha}")));
        }
        let p = 1.0 / (1.0 - alpha);
        Self::build("swirl_power", 2, horizon, FieldKind::SwirlPower { alpha }, p, false)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn custom(
        name: &str,
        dim: usize,
        horizon: f64,
        eval: FieldFn,
        divergence: Option<DivergenceFn>,
        autonomous: bool,
        sobolev_p: f64,
        lipschitz: bool,
    ) -> Result<Self> {
        Self::build(
            name,
            dim,
            horizon,
            FieldKind::Custom {
                eval,
                divergence,
                autonomous,
            },
            sobolev_p,
            lipschitz,
        )
    }

    pub fn name(&self) -> &str {
        &self.name
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }
    pub fn sobolev_p(&self) -> f64 {
        self.sobolev_p
    }
    pub fn is_lipschitz(&self) -> bool {
        self.lipschitz
    }

    /// True when `b` does not depend on `t`.
    pub fn is_autonomous(&self) -> bool {
        match &self.kind {
            FieldKind::Custom { autonomous, .. } => *autonomous,
            _ => true,
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match &self.kind {
            FieldKind::Zero => out.iter_mut().for_each(|v| *v = 0.0),
            FieldKind::Constant(c) => out.copy_from_slice(c),
            FieldKind::Linear(a) => {
                let n = self.dim;
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..n).map(|j| a[i * n + j] * x[j]).sum();
                }
            }
            FieldKind::Rotation { omega } => {
                out[0] = -omega * x[1];
                out[1] = omega * x[0];
            }
            FieldKind::Shear { k } => {
                out[0] = k * x[1];
                out[1] = 0.0;
            }
            FieldKind::SwirlPower { alpha } => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                if r == 0.0 {
                    out[0] = 0.0;
                    out[1] = 0.0;
                } else {
                    let s = (1.0 + alpha) * r.powf(alpha - 1.0);
                    out[0] = -s * x[1];
                    out[1] = s * x[0];
                }
            }
            FieldKind::Custom { eval, .. } => eval(t, x, out),
        }
    }

    pub fn eval_vec(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval(t, x, &mut out);
        out
    }

    /// Closed-form divergence when the field carries one.
    pub fn analytic_divergence(&self, t: f64, x: &[f64]) -> Option<f64> {
        match &self.kind {
            FieldKind::Zero
            | FieldKind::Constant(_)
            | FieldKind::Rotation { .. }
            | FieldKind::Shear { .. }
            | FieldKind::SwirlPower { .. } => Some(0.0),
            FieldKind::Linear(a) => Some((0..self.dim).map(|i| a[i * self.dim + i]).sum()),
            FieldKind::Custom { divergence, .. } => divergence.as_ref().map(|d| d(t, x)),
        }
    }

    /// Analytic divergence when available, otherwise the central-difference
    /// estimate at the default step.
    pub fn divergence(&self, t: f64, x: &[f64]) -> f64 {
        self.analytic_divergence(t, x)
            .unwrap_or_else(|| estimate_divergence(self, t, x, default_divergence_step(x)))
    }
}

/// Default central-difference step, `1e-4 (1 + |x|)`.
pub fn default_divergence_step(x: &[f64]) -> f64 {
    1e-4 * (1.0 + norm(x))
}

/// `sum_i [b_i(t, x + h e_i) - b_i(t, x - h e_i)] / (2h)`.
pub fn estimate_divergence(field: &VectorField, t: f64, x: &[f64], h: f64) -> f64 {
    let n = field.dim();
    let mut probe = x.to_vec();
    let mut bp = vec![0.0; n];
    let mut bm = vec![0.0; n];
    let mut acc = 0.0;
    for i in 0..n {
        probe[i] = x[i] + h;
        field.eval(t, &probe, &mut bp);
        probe[i] = x[i] - h;
        field.eval(t, &probe, &mut bm);
        probe[i] = x[i];
        acc += (bp[i] - bm[i]) / (2.0 * h);
    }
    acc
}

/// Numeric parameters for [`catalog`], keyed by name (`c`, `a`, `omega`, `k`,
/// `alpha`). Scalars are one-element lists.
#[derive(Debug, Clone, Default)]
pub struct FieldParams {
    pub values: BTreeMap<String, Vec<f64>>,
}

impl FieldParams {
    pub fn with(mut self, key: &str, v: Vec<f64>) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    fn scalar(&self, key: &str, default: f64) -> Result<f64> {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) if v.len() == 1 => Ok(v[0]),
            Some(v) => Err(Error::Config(format!("parameter `{key}` must be a scalar, got {v:?}"))),
        }
    }
}

/// Named analytic field. `dim` is used by `zero`; `constant` and `linear`
/// take their dimension from the parameters.
pub fn catalog(name: &str, dim: usize, horizon: f64, params: &FieldParams) -> Result<VectorField> {
    match name {
        "zero" => VectorField::zero(dim, horizon),
        "constant" => {
            let c = params
                .values
                .get("c")
                .cloned()
                .unwrap_or_else(|| vec![1.0; dim]);
            VectorField::constant(c, horizon)
        }
        "linear" => {
            let a = params
                .values
                .get("a")
                .cloned()
                .unwrap_or_else(|| vec![1.0, 0.0, 0.0, 2.0]);
            VectorField::linear(a, horizon)
        }
        "rotation" => VectorField::rotation(params.scalar("omega", 1.0)?, horizon),
        "shear" => VectorField::shear(params.scalar("k", 1.0)?, horizon),
        "swirl_power" => VectorField::swirl_power(params.scalar("alpha", 0.75)?, horizon),
        other => Err(Error::UnknownField(other.to_string())),
    }
}

/// Sampling resolution for [`check_assumptions`].
#[derive(Debug, Clone)]
pub struct AssumptionSampling {
    pub box_radius: f64,
    pub t_samples: usize,
    /// Points per axis of the spatial sampling cube `[-r, r]^n`.
    pub x_samples: usize,
    /// Divergence estimates above this cap flag the field as violating the
    /// bounded-divergence hypothesis.
    pub divergence_cap: f64,
}

impl AssumptionSampling {
    pub fn new(box_radius: f64, t_samples: usize, x_samples: usize) -> Self {
        Self {
            box_radius,
            t_samples,
            x_samples,
            divergence_cap: 1e6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModulusRow {
    pub radius: f64,
    pub delta: f64,
    pub omega: f64,
}

#[derive(Debug, Clone)]
pub struct AssumptionReport {
    /// `int_0^T sup_x |div b(t, x)| dt` (trapezoid in time, sup over samples).
    pub div_sup: f64,
    /// `sup |b(t, x)| / (1 + |x|)` over the samples.
    pub growth_sup: f64,
    pub modulus_table: Vec<ModulusRow>,
    /// `int_0^T ||Db(t, .)||_{L^p(B_r)} dt` with the declared exponent.
    pub sobolev_seminorm: f64,
    pub sobolev_p: f64,
    /// Spacing of the spatial samples; the smallest resolvable `delta`.
    pub resolution: f64,
    pub divergence_unbounded: bool,
}

impl AssumptionReport {
    /// CSV rows `(radius, delta, omega)`.
    pub fn modulus_rows(&self) -> Vec<[f64; 3]> {
        self.modulus_table
            .iter()
            .map(|r| [r.radius, r.delta, r.omega])
            .collect()
    }
}

pub fn check_assumptions(field: &VectorField, sampling: &AssumptionSampling) -> Result<AssumptionReport> {
    if sampling.t_samples < 2 || sampling.x_samples < 2 {
        return Err(Error::Config("assumption sampling needs at least 2 samples per axis".into()));
    }
    if !(sampling.box_radius > 0.0) {
        return Err(Error::Config("assumption box radius must be positive".into()));
    }
    let n = field.dim();
    let r = sampling.box_radius;
    let h = 2.0 * r / (sampling.x_samples - 1) as f64;

    // Sample points: the cube lattice intersected with the closed ball.
    let mut points = Vec::new();
    let total = sampling.x_samples.pow(n as u32);
    let mut x = vec![0.0; n];
    for flat in 0..total {
        let mut rem = flat;
        for d in 0..n {
            x[d] = -r + h * (rem % sampling.x_samples) as f64;
            rem /= sampling.x_samples;
        }
        if norm(&x) <= r * (1.0 + 1e-12) {
            points.extend_from_slice(&x);
        }
    }
    let m = points.len() / n;
    let times: Vec<f64> = (0..sampling.t_samples)
        .map(|k| field.horizon() * k as f64 / (sampling.t_samples - 1) as f64)
        .collect();

    let radii = [0.5 * r, r];
    let mut deltas = Vec::new();
    let mut d = h;
    while d <= 2.0 * r * (1.0 + 1e-12) {
        deltas.push(d);
        d *= 2.0;
    }

    let mut div_slices = Vec::with_capacity(times.len());
    let mut sob_slices = Vec::with_capacity(times.len());
    let mut growth_sup = 0.0f64;
    let mut omega = vec![vec![0.0f64; deltas.len()]; radii.len()];
    let mut b = vec![0.0; m * n];
    let p = field.sobolev_p();
    let cell = h.powi(n as i32);

    for &t in &times {
        let mut div_max = 0.0f64;
        let mut sob_acc = 0.0f64;
        for k in 0..m {
            let xk = &points[k * n..(k + 1) * n];
            field.eval(t, xk, &mut b[k * n..(k + 1) * n]);
            growth_sup = growth_sup.max(norm(&b[k * n..(k + 1) * n]) / (1.0 + norm(xk)));
            div_max = div_max.max(field.divergence(t, xk).abs());
            let jac = jacobian_norm(field, t, xk);
            if p.is_infinite() {
                sob_acc = sob_acc.max(jac);
            } else {
                sob_acc += jac.powf(p) * cell;
            }
        }
        div_slices.push(div_max);
        sob_slices.push(if p.is_infinite() { sob_acc } else { sob_acc.powf(1.0 / p) });

        for a in 0..m {
            let xa = &points[a * n..(a + 1) * n];
            let ra = norm(xa);
            for c in (a + 1)..m {
                let xc = &points[c * n..(c + 1) * n];
                let sep = dist(xa, xc);
                let jump = dist(&b[a * n..(a + 1) * n], &b[c * n..(c + 1) * n]);
                let rmax = ra.max(norm(xc));
                for (ri, &rad) in radii.iter().enumerate() {
                    if rmax > rad * (1.0 + 1e-12) {
                        continue;
                    }
                    for (di, &delta) in deltas.iter().enumerate() {
                        if sep <= delta * (1.0 + 1e-12) && jump > omega[ri][di] {
                            omega[ri][di] = jump;
                        }
                    }
                }
            }
        }
    }

    let trapezoid = |vals: &[f64]| -> f64 {
        vals.windows(2)
            .zip(times.windows(2))
            .map(|(v, t)| 0.5 * (v[0] + v[1]) * (t[1] - t[0]))
            .sum()
    };
    let div_sup = trapezoid(&div_slices);
    let sobolev_seminorm = trapezoid(&sob_slices);
    let divergence_unbounded = div_slices.iter().any(|v| *v > sampling.divergence_cap);

    let modulus_table = radii
        .iter()
        .enumerate()
        .flat_map(|(ri, &radius)| {
            let row = omega[ri].clone();
            deltas
                .iter()
                .zip(row)
                .map(move |(&delta, omega)| ModulusRow { radius, delta, omega })
                .collect::<Vec<_>>()
        })
        .collect();

    Ok(AssumptionReport {
        div_sup,
        growth_sup,
        modulus_table,
        sobolev_seminorm,
        sobolev_p: p,
        resolution: h,
        divergence_unbounded,
    })
}

/// Frobenius norm of the central-difference Jacobian.
fn jacobian_norm(field: &VectorField, t: f64, x: &[f64]) -> f64 {
    let n = field.dim();
    let h = default_divergence_step(x);
    let mut probe = x.to_vec();
    let mut bp = vec![0.0; n];
    let mut bm = vec![0.0; n];
    let mut acc = 0.0;
    for j in 0..n {
        probe[j] = x[j] + h;
        field.eval(t, &probe, &mut bp);
        probe[j] = x[j] - h;
        field.eval(t, &probe, &mut bm);
        probe[j] = x[j];
        for i in 0..n {
            let g = (bp[i] - bm[i]) / (2.0 * h);
            acc += g * g;
        }
    }
    acc.sqrt()
}
