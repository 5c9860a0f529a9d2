//! Static k-d tree for nearest-neighbour queries on scattered samples.

#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    /// Permutation of point indices; each subtree occupies a contiguous range
    /// whose median is the splitting node.
    order: Vec<usize>,
}

impl KdTree {
    pub fn new(dim: usize, points: Vec<f64>) -> Self {
        assert!(dim > 0 && points.len().is_multiple_of(dim));
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        build(&points, dim, &mut order, 0);
        Self { dim, points, order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// Index and squared distance of the sample closest to `x`; ties go to
    /// the smaller index.
    pub fn nearest(&self, x: &[f64]) -> Option<(usize, f64)> {
        if self.order.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(x, 0, self.order.len(), 0, &mut best);
        Some(best)
    }

    fn search(&self, x: &[f64], lo: usize, hi: usize, depth: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let idx = self.order[mid];
        let p = self.point(idx);
        let d2: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 < best.1 || (d2 == best.1 && idx < best.0) {
            *best = (idx, d2);
        }
        let axis = depth % self.dim;
        let diff = x[axis] - p[axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(x, near.0, near.1, depth + 1, best);
        if diff * diff <= best.1 {
            self.search(x, far.0, far.1, depth + 1, best);
        }
    }
}

fn build(points: &[f64], dim: usize, order: &mut [usize], depth: usize) {
    if order.len() <= 1 {
        return;
    }
    let axis = depth % dim;
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |a, b| {
        points[a * dim + axis]
            .total_cmp(&points[b * dim + axis])
            .then(a.cmp(b))
    });
    let (left, right) = order.split_at_mut(mid);
    build(points, dim, left, depth + 1);
    build(points, dim, &mut right[1..], depth + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for dim in 1..=3 {
            let n = 500;
            let pts: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let tree = KdTree::new(dim, pts.clone());
            for _ in 0..200 {
                let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.2..1.2)).collect();
                let brute = (0..n)
                    .map(|i| {
                        let d: f64 = (0..dim).map(|d| (pts[i * dim + d] - q[d]).powi(2)).sum();
                        (i, d)
                    })
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
                    .unwrap();
                assert_eq!(tree.nearest(&q).unwrap(), brute);
            }
        }
    }

    #[test]
    fn empty_tree() {
        assert!(KdTree::new(2, vec![]).nearest(&[0.0, 0.0]).is_none());
    }
}
