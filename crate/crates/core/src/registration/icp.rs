//! Point-to-point ICP with a closed-form SVD fit.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::transform::RigidTransform;
use crate::error::{invalid, Result};
use crate::nn::NearestIndex;
use crate::voxelgrid::{centroid, PointSet};

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub transform: RigidTransform,
    /// Normalized symmetric L1 nearest-neighbour distance at `transform`.
    pub distance: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Least-squares proper rotation and translation taking `src[i]` onto `dst[i]`.
///
/// Reflections are excluded by flipping the sign of the smallest singular
/// direction when `det(V Uᵀ) < 0`.
pub fn fit_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    debug_assert_eq!(src.len(), dst.len());
    let cs = centroid(src);
    let cd = centroid(dst);
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - cs) * (d - cd).transpose();
    }
    if h.norm() < 1e-12 {
        return (Matrix3::identity(), cd - cs);
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    (r, cd - r * cs)
}

/// Symmetric L1 nearest-neighbour sum divided by the L1 norms of both sets.
///
/// `target_index` must index `target`. Target positions are taken relative to
/// the origin; moved positions relative to `moved_center`, the image of the
/// source origin, so the denominator does not change under rigid motion.
pub fn normalized_l1_chamfer(
    moved: &[Vector3<f64>],
    moved_center: &Vector3<f64>,
    target: &[Vector3<f64>],
    target_index: &NearestIndex,
) -> f64 {
    let moved_index = NearestIndex::new(moved, 1.0);
    let mut num = 0.0;
    for x in moved {
        let (j, _) = target_index.nearest(x).expect("non-empty target");
        num += (x - target[j]).lp_norm(1);
    }
    for y in target {
        let (j, _) = moved_index.nearest(y).expect("non-empty source");
        num += (y - moved[j]).lp_norm(1);
    }
    if num == 0.0 {
        return 0.0;
    }
    let den: f64 = moved.iter().map(|p| (p - moved_center).lp_norm(1)).sum::<f64>()
        + target.iter().map(|p| p.lp_norm(1)).sum::<f64>();
    num / den.max(f64::MIN_POSITIVE)
}

pub fn icp_align(
    source: &PointSet,
    target: &PointSet,
    init: &RigidTransform,
    max_iters: usize,
    tol: f64,
) -> Result<AlignmentResult> {
    if source.is_empty() || target.is_empty() {
        return Err(invalid("ICP needs non-empty source and target point sets"));
    }
    let index = NearestIndex::new(&target.points, 1.0);
    Ok(icp_with_index(&source.points, &target.points, &index, init, max_iters, tol))
}

/// ICP against a prebuilt target index. The reflection flag of `init` is kept.
pub(crate) fn icp_with_index(
    source: &[Vector3<f64>],
    target: &[Vector3<f64>],
    index: &NearestIndex,
    init: &RigidTransform,
    max_iters: usize,
    tol: f64,
) -> AlignmentResult {
    let reflect = init.reflect;
    let mirrored: Vec<Vector3<f64>> = source
        .iter()
        .map(|p| RigidTransform::mirror(reflect, p))
        .collect();
    let mut current = *init;
    let mut moved = vec![Vector3::zeros(); source.len()];
    let mut matched = vec![Vector3::zeros(); source.len()];

    let correspond = |t: &RigidTransform, moved: &mut [Vector3<f64>], matched: &mut [Vector3<f64>]| {
        let mut sq = 0.0;
        for ((m, out), p) in moved.iter_mut().zip(matched.iter_mut()).zip(&mirrored) {
            *m = t.rotation * p + t.translation;
            let (j, d2) = index.nearest(m).expect("non-empty target");
            *out = target[j];
            sq += d2;
        }
        (sq / source.len() as f64).sqrt()
    };

    let mut rms = correspond(&current, &mut moved, &mut matched);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        let (r, t) = fit_rigid(&mirrored, &matched);
        let candidate = RigidTransform::new(r, t, reflect);
        let next = correspond(&candidate, &mut moved, &mut matched);
        if next > rms {
            // round-off can make a converged fit slightly worse; keep the previous pose
            converged = true;
            break;
        }
        current = candidate;
        let change = rms - next;
        rms = next;
        if change < tol || rms < tol {
            converged = true;
            break;
        }
    }
    for (m, p) in moved.iter_mut().zip(&mirrored) {
        *m = current.rotation * p + current.translation;
    }
    AlignmentResult {
        transform: current,
        distance: normalized_l1_chamfer(&moved, &current.translation, target, index),
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelgrid::OriginMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> Vec<Vector3<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Vector3::new(rng.gen_range(-8.0..8.0), rng.gen_range(-4.0..4.0), rng.gen_range(-2.0..2.0)))
            .collect()
    }

    fn ps(points: Vec<Vector3<f64>>) -> PointSet {
        PointSet::new(points, OriginMode::PatchCenter)
    }

    fn centroid_init(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> RigidTransform {
        RigidTransform::from_translation(centroid(dst) - centroid(src))
    }

    #[test]
    fn svd_fit_recovers_exact_transform() {
        let src = cloud(1, 30);
        let t = RigidTransform::new(
            *nalgebra::Rotation3::from_euler_angles(0.3, -0.7, 1.1).matrix(),
            Vector3::new(1.0, -2.0, 0.5),
            false,
        );
        let dst: Vec<_> = src.iter().map(|p| t.apply_point(p)).collect();
        let (r, tr) = fit_rigid(&src, &dst);
        assert!((r - t.rotation).norm() < 1e-9);
        assert!((tr - t.translation).norm() < 1e-9);
    }

    #[test]
    fn identical_sets_converge_in_one_iteration() {
        let pts = cloud(2, 100);
        let res = icp_align(&ps(pts.clone()), &ps(pts), &RigidTransform::identity(), 50, 1e-6).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(res.converged);
        assert_eq!(res.distance, 0.0);
    }

    #[test]
    fn recovers_pure_translation() {
        let src = cloud(3, 100);
        let shift = Vector3::new(3.0, 1.0, -2.0);
        let dst: Vec<_> = src.iter().map(|p| p + shift).collect();
        let res = icp_align(&ps(src.clone()), &ps(dst.clone()), &centroid_init(&src, &dst), 50, 1e-6).unwrap();
        assert!((res.transform.translation - shift).norm() < 1e-6);
        assert!((res.transform.rotation - Matrix3::identity()).norm() < 1e-6);
    }

    #[test]
    fn recovers_ten_degree_rotation() {
        let src = cloud(4, 100);
        let truth = RigidTransform::new(
            *nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians()).matrix(),
            Vector3::new(0.5, -1.0, 2.0),
            false,
        );
        let dst: Vec<_> = src.iter().map(|p| truth.apply_point(p)).collect();
        let res = icp_align(&ps(src.clone()), &ps(dst.clone()), &centroid_init(&src, &dst), 50, 1e-6).unwrap();
        assert!(res.iterations <= 50);
        assert!((res.transform.rotation - truth.rotation).norm() < 1e-4);
        assert!((res.transform.translation - truth.translation).norm() < 1e-4);
    }

    #[test]
    fn reflection_flag_is_fixed_by_init() {
        let src = cloud(5, 40);
        let dst: Vec<_> = src.iter().map(|p| Vector3::new(-p.x, p.y, p.z)).collect();
        let res = icp_align(&ps(src.clone()), &ps(dst.clone()), &RigidTransform::mirrored(true), 50, 1e-6).unwrap();
        assert!(res.transform.reflect);
        assert!(res.distance < 1e-12);
        let res = icp_align(&ps(src), &ps(dst), &RigidTransform::identity(), 50, 1e-6).unwrap();
        assert!(!res.transform.reflect);
        assert!(res.transform.is_valid(1e-9));
    }

    #[test]
    fn empty_inputs_rejected() {
        let a = ps(cloud(6, 3));
        let e = ps(vec![]);
        assert!(icp_align(&a, &e, &RigidTransform::identity(), 5, 1e-6).is_err());
        assert!(icp_align(&e, &a, &RigidTransform::identity(), 5, 1e-6).is_err());
    }
}
