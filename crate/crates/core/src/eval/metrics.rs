use nalgebra::Vector3;

use crate::error::{invalid, Result};
use crate::nn::NearestIndex;
use crate::voxelgrid::{surface_points, VoxelGrid};

/// Points sampled per surface for grid-level Chamfer distance.
pub const EVAL_POINTS: usize = 16_384;

fn index_for(points: &[Vector3<f64>]) -> NearestIndex {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    // roughly a few points per cell
    let span = (hi - lo).max().max(1e-9);
    let cell = span / (points.len() as f64 / 4.0).cbrt().max(1.0);
    NearestIndex::new(points, cell)
}

fn mean_sq_to(from: &[Vector3<f64>], to: &NearestIndex) -> f64 {
    from.iter().map(|p| to.nearest(p).expect("non-empty").1).sum::<f64>() / from.len() as f64
}

/// Mean squared nearest-neighbour distance from A to B plus from B to A.
/// Swapping the arguments gives a bit-identical result.
pub fn chamfer_l2(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(invalid("chamfer distance needs two non-empty point sets"));
    }
    let ab = mean_sq_to(a, &index_for(b));
    let ba = mean_sq_to(b, &index_for(a));
    Ok(ab + ba)
}

/// Chamfer-L2 ×1000 between surface samples of two grids in unit-cube coordinates.
pub fn grid_chamfer_x1000(output: &VoxelGrid, gt: &VoxelGrid, seed: u64) -> Result<f64> {
    if output.size() != gt.size() {
        return Err(invalid(format!("grid sizes differ: {} vs {}", output.size(), gt.size())));
    }
    let scale = 1.0 / gt.size() as f64;
    let out_pts: Vec<_> = surface_points(output, EVAL_POINTS, seed)?.into_iter().map(|p| p * scale).collect();
    let gt_pts: Vec<_> = surface_points(gt, EVAL_POINTS, seed)?.into_iter().map(|p| p * scale).collect();
    Ok(chamfer_l2(&out_pts, &gt_pts)? * 1000.0)
}

/// Intersection over union of the two grids thresholded at `threshold`.
/// Two empty grids count as identical.
pub fn iou(a: &VoxelGrid, b: &VoxelGrid, threshold: f32) -> Result<f64> {
    if a.size() != b.size() {
        return Err(invalid(format!("grid sizes differ: {} vs {}", a.size(), b.size())));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.values().iter().zip(b.values()) {
        let (x, y) = (x >= threshold, y >= threshold);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn brute(a: &[Vector3<f64>], b: &[Vector3<f64>]) -> f64 {
        let one = |x: &[Vector3<f64>], y: &[Vector3<f64>]| {
            x.iter()
                .map(|p| y.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen())).collect()
    }

    #[test]
    fn chamfer_closed_forms() {
        let a = cloud(50, 1);
        assert_eq!(chamfer_l2(&a, &a).unwrap(), 0.0);
        let d = 0.3;
        let v = chamfer_l2(&[Vector3::zeros()], &[Vector3::new(d, 0.0, 0.0)]).unwrap();
        assert!((v - 2.0 * d * d).abs() < 1e-15);
        assert!(chamfer_l2(&[], &a).is_err());
    }

    #[test]
    fn chamfer_matches_brute_force() {
        let (a, b) = (cloud(1000, 2), cloud(1000, 3));
        let v = chamfer_l2(&a, &b).unwrap();
        assert!((v - brute(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn iou_closed_forms() {
        let mut a = VoxelGrid::empty(8);
        let mut b = VoxelGrid::empty(8);
        assert_eq!(iou(&a, &b, 0.5).unwrap(), 1.0);
        for x in 0..4 {
            a.set(x, 0, 0, 1.0);
            b.set(x + 2, 0, 0, 1.0);
        }
        // boxes of 4 sharing 2 voxels
        assert!((iou(&a, &b, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a, 0.5).unwrap(), 1.0);
        let mut c = VoxelGrid::empty(8);
        c.set(7, 7, 7, 1.0);
        assert_eq!(iou(&a, &c, 0.5).unwrap(), 0.0);
        assert!(iou(&a, &VoxelGrid::empty(4), 0.5).is_err());
    }

    #[test]
    fn grid_chamfer_of_identical_grids_is_zero() {
        let g = crate::eval::generate_shape(crate::eval::ShapeCategory::Chair, 32, 0).unwrap();
        let v = grid_chamfer_x1000(&g, &g, 1).unwrap();
        assert_eq!(v, 0.0);
        let mut h = g.clone();
        h.set(0, 0, 0, 1.0);
        assert!(grid_chamfer_x1000(&h, &g, 1).unwrap() > 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn chamfer_symmetric_and_zero_only_on_cover(sa in 0u64..500, sb in 0u64..500, na in 1usize..40, nb in 1usize..40) {
            let (a, b) = (cloud(na, sa), cloud(nb, sb + 1000));
            prop_assert_eq!(chamfer_l2(&a, &b).unwrap(), chamfer_l2(&b, &a).unwrap());
            prop_assert!(chamfer_l2(&a, &b).unwrap() > 0.0);
            let mut c = a.clone();
            c.extend_from_slice(&a[..na / 2]);
            prop_assert_eq!(chamfer_l2(&a, &c).unwrap(), 0.0);
        }
    }
}
