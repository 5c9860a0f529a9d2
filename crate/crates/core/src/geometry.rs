//! Boxes, regular lattices and small vector helpers shared by every module.
//!
//! Points are plain `&[f64]` slices of length `dim`; collections of points are
//! stored flat (`dim` consecutive entries per point).

use crate::error::{Error, Result};

pub fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lebesgue measure of the Euclidean ball of radius `r` in dimension `dim`.
pub fn ball_volume(dim: usize, r: f64) -> f64 {
    // V_n = pi^(n/2) / Gamma(n/2 + 1) r^n, via the two-step recurrence.
    let mut v = [1.0, 2.0];
    let mut out = if dim == 0 { 1.0 } else { 2.0 };
    for n in 2..=dim {
        out = 2.0 * std::f64::consts::PI / n as f64 * v[n % 2];
        v[n % 2] = out;
    }
    out * r.powi(dim as i32)
}

/// Axis-aligned box `[lo_0, hi_0] x ... x [lo_{n-1}, hi_{n-1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::Config(format!(
                "box corners have mismatched dimensions {} and {}",
                lo.len(),
                hi.len()
            )));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(Error::Config(format!("degenerate box {lo:?} .. {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    /// The cube `[-r, r]^dim`.
    pub fn centered(dim: usize, r: f64) -> Self {
        Self {
            lo: vec![-r; dim],
            hi: vec![r; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| *v >= *l && *v <= *h)
    }

    pub fn contains_box(&self, other: &BoxRegion) -> bool {
        self.contains(&other.lo) && self.contains(&other.hi)
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).product()
    }
}

/// Regular lattice `origin + spacing * k`, `0 <= k_d < shape_d`, stored in
/// row-major order (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Lattice {
    pub origin: Vec<f64>,
    pub spacing: f64,
    pub shape: Vec<usize>,
}

impl Lattice {
    /// Cell-centred lattice covering `region` with cells of side close to
    /// `spacing` (the count per axis is rounded so cells tile the box exactly
    /// when the side lengths are multiples of `spacing`).
    pub fn cell_centered(region: &BoxRegion, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::Config(format!("lattice spacing must be positive, got {spacing}")));
        }
        let shape: Vec<usize> = region
            .lo
            .iter()
            .zip(&region.hi)
            .map(|(l, h)| (((h - l) / spacing) - 1e-9).ceil().max(1.0) as usize)
            .collect();
        let origin = region.lo.iter().map(|l| l + 0.5 * spacing).collect();
        Ok(Self { origin, spacing, shape })
    }

    /// Node lattice with nodes at `lo + k * spacing` covering `region`
    /// (the last node may overshoot `hi` by less than one spacing).
    pub fn covering(region: &BoxRegion, spacing: f64) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(Error::Config(format!("lattice spacing must be positive, got {spacing}")));
        }
        let shape = region
            .lo
            .iter()
            .zip(&region.hi)
            .map(|(l, h)| (((h - l) / spacing) - 1e-9).ceil() as usize + 1)
            .collect();
        Ok(Self {
            origin: region.lo.clone(),
            spacing,
            shape,
        })
    }

    pub fn dim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut idx = vec![0; self.dim()];
        for d in (0..self.dim()).rev() {
            idx[d] = flat % self.shape[d];
            flat /= self.shape[d];
        }
        idx
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (i, n)| acc * n + i)
    }

    pub fn point(&self, flat: usize, out: &mut [f64]) {
        let idx = self.multi_index(flat);
        for d in 0..self.dim() {
            out[d] = self.origin[d] + self.spacing * idx[d] as f64;
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let n = self.dim();
        let mut pts = vec![0.0; self.len() * n];
        for (k, chunk) in pts.chunks_mut(n).enumerate() {
            self.point(k, chunk);
        }
        pts
    }

    /// Bounding box spanned by the lattice nodes.
    pub fn node_box(&self) -> BoxRegion {
        BoxRegion {
            lo: self.origin.clone(),
            hi: self
                .origin
                .iter()
                .zip(&self.shape)
                .map(|(o, n)| o + self.spacing * (*n as f64 - 1.0))
                .collect(),
        }
    }

    /// Multilinear interpolation of node values; `None` outside the node box.
    pub fn interpolate(&self, values: &[f64], x: &[f64]) -> Option<f64> {
        let n = self.dim();
        let mut base = vec![0usize; n];
        let mut frac = vec![0.0; n];
        for d in 0..n {
            let s = (x[d] - self.origin[d]) / self.spacing;
            let last = self.shape[d] as f64 - 1.0;
            if !(s >= -1e-12 && s <= last + 1e-12) {
                return None;
            }
            if self.shape[d] == 1 {
                base[d] = 0;
                frac[d] = 0.0;
                continue;
            }
            let s = s.clamp(0.0, last);
            let b = (s.floor() as usize).min(self.shape[d] - 2);
            base[d] = b;
            frac[d] = s - b as f64;
        }
        let mut acc = 0.0;
        let mut idx = vec![0usize; n];
        for corner in 0..(1usize << n) {
            let mut w = 1.0;
            for d in 0..n {
                let up = (corner >> d) & 1 == 1;
                if up && self.shape[d] == 1 {
                    w = 0.0;
                    break;
                }
                idx[d] = base[d] + up as usize;
                w *= if up { frac[d] } else { 1.0 - frac[d] };
            }
            if w != 0.0 {
                acc += w * values[self.flat_index(&idx)];
            }
        }
        Some(acc)
    }

    /// Flat indices of the `2^n` nodes of the cell containing `x`, clamped to
    /// the lattice.
    pub fn enclosing_nodes(&self, x: &[f64]) -> Vec<usize> {
        let n = self.dim();
        let base: Vec<usize> = (0..n)
            .map(|d| {
                let s = ((x[d] - self.origin[d]) / self.spacing).floor();
                let max = self.shape[d].saturating_sub(2) as f64;
                s.clamp(0.0, max) as usize
            })
            .collect();
        let mut out = Vec::with_capacity(1 << n);
        let mut idx = vec![0usize; n];
        for corner in 0..(1usize << n) {
            let mut ok = true;
            for d in 0..n {
                let up = (corner >> d) & 1;
                idx[d] = base[d] + up;
                if idx[d] >= self.shape[d] {
                    ok = false;
                }
            }
            if ok {
                out.push(self.flat_index(&idx));
            }
        }
        out
    }

    /// Flat indices of the axis neighbours of node `flat` (at most `2n`).
    pub fn neighbors(&self, flat: usize) -> Vec<usize> {
        let idx = self.multi_index(flat);
        let mut out = Vec::with_capacity(2 * self.dim());
        let mut probe = idx.clone();
        for d in 0..self.dim() {
            if idx[d] + 1 < self.shape[d] {
                probe[d] = idx[d] + 1;
                out.push(self.flat_index(&probe));
            }
            if idx[d] > 0 {
                probe[d] = idx[d] - 1;
                out.push(self.flat_index(&probe));
            }
            probe[d] = idx[d];
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ball_volumes() {
        assert!((ball_volume(1, 1.0) - 2.0).abs() < 1e-15);
        assert!((ball_volume(2, 1.0) - std::f64::consts::PI).abs() < 1e-15);
        assert!((ball_volume(3, 2.0) - 4.0 / 3.0 * std::f64::consts::PI * 8.0).abs() < 1e-12);
    }

    #[test]
    fn multilinear_reproduces_affine_functions() {
        let lat = Lattice::covering(&BoxRegion::centered(2, 1.0), 0.25).unwrap();
        let pts = lat.points();
        let vals: Vec<f64> = pts.chunks(2).map(|p| 1.0 + 2.0 * p[0] - 3.0 * p[1]).collect();
        let x = [0.13, -0.41];
        let v = lat.interpolate(&vals, &x).unwrap();
        assert!((v - (1.0 + 0.26 + 1.23)).abs() < 1e-12);
        assert!(lat.interpolate(&vals, &[1.5, 0.0]).is_none());
    }

    #[test]
    fn index_round_trip_and_neighbors() {
        let lat = Lattice {
            origin: vec![0.0, 0.0, 0.0],
            spacing: 1.0,
            shape: vec![3, 4, 5],
        };
        for k in 0..lat.len() {
            assert_eq!(lat.flat_index(&lat.multi_index(k)), k);
        }
        assert_eq!(lat.neighbors(0).len(), 3);
        assert_eq!(lat.neighbors(lat.flat_index(&[1, 1, 1])).len(), 6);
    }
}
