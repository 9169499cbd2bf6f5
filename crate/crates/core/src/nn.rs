//! Exact nearest-neighbour search over small 3D point sets.
//!
//! Points are bucketed into a uniform cell grid and queried with an expanding
//! Chebyshev ring search. Results match a brute-force scan exactly, including
//! tie-breaking: among equidistant points the lowest index wins.

use nalgebra::Vector3;

#[derive(Debug, Clone)]
pub struct NearestIndex {
    points: Vec<Vector3<f64>>,
    cell: f64,
    origin: Vector3<f64>,
    dims: [i64; 3],
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl NearestIndex {
    /// Builds an index with cubic cells of edge `cell` (must be positive).
    pub fn new(points: &[Vector3<f64>], cell: f64) -> Self {
        assert!(cell > 0.0, "cell size must be positive");
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for p in points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        if points.is_empty() {
            lo = Vector3::zeros();
            hi = Vector3::zeros();
        }
        let mut dims = [1i64; 3];
        for a in 0..3 {
            dims[a] = ((hi[a] - lo[a]) / cell).floor() as i64 + 1;
        }
        let n_cells = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0u32; n_cells + 1];
        let cell_ids: Vec<usize> = points
            .iter()
            .map(|p| {
                let c = Self::cell_of(p, &lo, cell, &dims);
                ((c[0] * dims[1] + c[1]) * dims[2] + c[2]) as usize
            })
            .collect();
        for &c in &cell_ids {
            counts[c + 1] += 1;
        }
        for i in 0..n_cells {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut entries = vec![0u32; points.len()];
        for (i, &c) in cell_ids.iter().enumerate() {
            entries[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self {
            points: points.to_vec(),
            cell,
            origin: lo,
            dims,
            starts,
            entries,
        }
    }

    fn cell_of(p: &Vector3<f64>, origin: &Vector3<f64>, cell: f64, dims: &[i64; 3]) -> [i64; 3] {
        let mut c = [0i64; 3];
        for a in 0..3 {
            c[a] = (((p[a] - origin[a]) / cell).floor() as i64).clamp(0, dims[a] - 1);
        }
        c
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    /// Index and squared distance of the nearest point, `None` when empty.
    pub fn nearest(&self, q: &Vector3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        // unclamped cell of the query
        let mut qc = [0i64; 3];
        for a in 0..3 {
            qc[a] = ((q[a] - self.origin[a]) / self.cell).floor() as i64;
        }
        let mut r_max = 0i64;
        for a in 0..3 {
            r_max = r_max.max((qc[a]).abs()).max((qc[a] - (self.dims[a] - 1)).abs());
        }
        // rings that cannot intersect the grid are skipped
        let mut r_min = 0i64;
        for a in 0..3 {
            if qc[a] < 0 {
                r_min = r_min.max(-qc[a]);
            } else if qc[a] >= self.dims[a] {
                r_min = r_min.max(qc[a] - self.dims[a] + 1);
            }
        }
        let mut best = (usize::MAX, f64::INFINITY);
        let mut r = r_min;
        loop {
            self.scan_ring(q, qc, r, &mut best);
            if r >= r_max {
                break;
            }
            // every point in rings beyond r is at least r * cell away
            let bound = r as f64 * self.cell;
            if best.1 < bound * bound {
                break;
            }
            r += 1;
        }
        Some(best)
    }

    fn scan_ring(&self, q: &Vector3<f64>, qc: [i64; 3], r: i64, best: &mut (usize, f64)) {
        let range = |a: usize| -> (i64, i64) {
            ((qc[a] - r).max(0), (qc[a] + r).min(self.dims[a] - 1))
        };
        let (x0, x1) = range(0);
        let (y0, y1) = range(1);
        let (z0, z1) = range(2);
        for x in x0..=x1 {
            let edge_x = (x - qc[0]).abs() == r;
            for y in y0..=y1 {
                let edge_xy = edge_x || (y - qc[1]).abs() == r;
                if edge_xy {
                    for z in z0..=z1 {
                        self.scan_cell(q, [x, y, z], best);
                    }
                } else {
                    for z in [qc[2] - r, qc[2] + r] {
                        if z >= z0 && z <= z1 {
                            self.scan_cell(q, [x, y, z], best);
                        }
                    }
                }
            }
        }
    }

    #[inline]
    fn scan_cell(&self, q: &Vector3<f64>, c: [i64; 3], best: &mut (usize, f64)) {
        let id = ((c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2]) as usize;
        let (s, e) = (self.starts[id] as usize, self.starts[id + 1] as usize);
        for &i in &self.entries[s..e] {
            let i = i as usize;
            let d2 = (self.points[i] - q).norm_squared();
            if d2 < best.1 || (d2 == best.1 && i < best.0) {
                *best = (i, d2);
            }
        }
    }
}

/// Reference scan: lowest index among the closest points.
pub fn nearest_brute_force(points: &[Vector3<f64>], q: &Vector3<f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d2 = (p - q).norm_squared();
        if best.map_or(true, |(_, b)| d2 < b) {
            best = Some((i, d2));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt() -> impl Strategy<Value = Vector3<f64>> {
        (-6i32..6, -6i32..6, -6i32..6, 0u8..3).prop_map(|(x, y, z, frac)| {
            // mix of lattice and off-lattice coordinates to exercise ties
            let f = frac as f64 * 0.25;
            Vector3::new(x as f64 + 0.5, y as f64 + f, z as f64 - f)
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            pts in proptest::collection::vec(pt(), 1..80),
            qs in proptest::collection::vec(pt(), 1..20),
            cell in prop_oneof![Just(0.5), Just(1.0), Just(2.5)],
        ) {
            let idx = NearestIndex::new(&pts, cell);
            for q in &qs {
                let far = q * 3.0;
                prop_assert_eq!(idx.nearest(q), nearest_brute_force(&pts, q));
                prop_assert_eq!(idx.nearest(&far), nearest_brute_force(&pts, &far));
            }
        }
    }

    #[test]
    fn empty_index() {
        let idx = NearestIndex::new(&[], 1.0);
        assert!(idx.nearest(&Vector3::zeros()).is_none());
    }

    #[test]
    fn duplicate_points_prefer_lowest_index() {
        let p = Vector3::new(1.0, 1.0, 1.0);
        let idx = NearestIndex::new(&[Vector3::zeros(), p, p], 1.0);
        assert_eq!(idx.nearest(&p), Some((1, 0.0)));
    }
}
