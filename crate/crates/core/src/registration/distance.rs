//! Pose-invariant distance between detailed patches.
//!
//! `d(p1, p2) = min_T  Σ‖T(p1) − NN_p2‖₁ + Σ‖p2 − NN_T(p1)‖₁
//!                     ─────────────────────────────────────
//!                          Σ‖T(p1)‖₁ + Σ‖p2‖₁`
//!
//! with positions relative to patch centers and `T` a rigid motion composed
//! with an optional mirror. The minimum is approached by ICP started from
//! centroid-aligned axis-aligned poses.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::icp::{icp_with_index, normalized_l1_chamfer, AlignmentResult, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use super::transform::{axis_rotations, centered_points, RigidTransform};
use crate::error::{invalid, Result};
use crate::nn::NearestIndex;
use crate::voxelgrid::{centroid, Patch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceOptions {
    pub max_iters: usize,
    pub tol: f64,
    /// Also try integer translations around the best axis-aligned pose.
    pub lattice_search: bool,
    /// Number of best axis rotations per mirror branch refined on the lattice.
    pub lattice_rotations: usize,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
            lattice_search: true,
            lattice_rotations: 4,
        }
    }
}

pub fn geometric_distance(p1: &Patch, p2: &Patch) -> Result<AlignmentResult> {
    geometric_distance_with(p1, p2, &DistanceOptions::default())
}

pub fn geometric_distance_with(p1: &Patch, p2: &Patch, opts: &DistanceOptions) -> Result<AlignmentResult> {
    if p1.is_empty() || p2.is_empty() {
        return Err(invalid("geometric distance needs two non-empty patches"));
    }
    let src = PreparedPatch::from_patch(p1);
    let dst = PreparedPatch::from_patch(p2);
    Ok(src.distance_to(&dst, opts))
}

/// Centered occupied-voxel points of a patch with a nearest-neighbour index,
/// reusable across many distance evaluations.
#[derive(Debug, Clone)]
pub struct PreparedPatch {
    points: Vec<Vector3<f64>>,
    index: NearestIndex,
    centroid: Vector3<f64>,
    l1_mass: f64,
    lattice: Option<LatticeTable>,
}

/// L1 length from every lattice site around a patch to its nearest occupied
/// voxel center, with the same tie rule as [`NearestIndex`].
#[derive(Debug, Clone)]
struct LatticeTable {
    /// Position of site `[0, 0, 0]`.
    origin: f64,
    dim: usize,
    l1: Vec<u16>,
    /// Twice the origin, and twice the patch's own points; both integral.
    origin2: i32,
    sites2: Vec<[i32; 3]>,
}

impl LatticeTable {
    fn build(points: &[Vector3<f64>], index: &NearestIndex, extent: usize) -> Self {
        let margin = (extent / 2).clamp(1, 6);
        let dim = extent + 2 * margin;
        let origin = 0.5 - extent as f64 / 2.0 - margin as f64;
        let mut l1 = Vec::with_capacity(dim.pow(3));
        for i in 0..dim {
            for j in 0..dim {
                for k in 0..dim {
                    let q = Vector3::new(i as f64, j as f64, k as f64).add_scalar(origin);
                    let (n, _) = index.nearest(&q).expect("non-empty patch");
                    l1.push((q - points[n]).lp_norm(1).round() as u16);
                }
            }
        }
        let sites2 = points
            .iter()
            .map(|p| [(2.0 * p.x).round() as i32, (2.0 * p.y).round() as i32, (2.0 * p.z).round() as i32])
            .collect();
        Self {
            origin,
            dim,
            l1,
            origin2: (2.0 * origin).round() as i32,
            sites2,
        }
    }

    /// Lookup by doubled coordinates.
    #[inline]
    fn lookup2(&self, q2: [i32; 3]) -> Option<u16> {
        let mut at = 0usize;
        for &c in &q2 {
            let k = c - self.origin2;
            if k < 0 || k & 1 != 0 || (k >> 1) as usize >= self.dim {
                return None;
            }
            at = at * self.dim + (k >> 1) as usize;
        }
        Some(self.l1[at])
    }

    #[inline]
    fn lookup(&self, q: &Vector3<f64>) -> Option<f64> {
        let mut at = 0usize;
        for a in 0..3 {
            let r = q[a] - self.origin;
            if !(r > -0.5 && r < self.dim as f64 - 0.5) {
                return None;
            }
            let k = (r + 0.5) as usize;
            if (r - k as f64).abs() > 1e-9 {
                return None;
            }
            at = at * self.dim + k;
        }
        Some(self.l1[at] as f64)
    }
}

impl PreparedPatch {
    pub fn new(points: Vec<Vector3<f64>>) -> Self {
        let index = NearestIndex::new(&points, 1.0);
        let centroid = centroid(&points);
        let l1_mass = points.iter().map(|p| p.lp_norm(1)).sum();
        Self {
            points,
            index,
            centroid,
            l1_mass,
            lattice: None,
        }
    }

    /// Prepares a patch, adding a lookup table that makes axis-aligned poses
    /// with integer translations cheap to score.
    pub fn from_patch(p: &Patch) -> Self {
        let mut prepared = Self::new(centered_points(p));
        if !prepared.is_empty() {
            prepared.lattice = Some(LatticeTable::build(&prepared.points, &prepared.index, p.extent()));
        }
        prepared
    }

    #[inline]
    fn nearest_l1(&self, q: &Vector3<f64>) -> f64 {
        if let Some(v) = self.lattice.as_ref().and_then(|t| t.lookup(q)) {
            return v;
        }
        let (j, _) = self.index.nearest(q).expect("non-empty patch");
        (q - self.points[j]).lp_norm(1)
    }

    pub fn points(&self) -> &[Vector3<f64>] {
        &self.points
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Ratio for a pose whose linear part is a signed permutation.
    ///
    /// Such maps preserve both Euclidean nearest neighbours and L1 lengths, so
    /// the reverse term is evaluated in the source frame against the source
    /// index. Returns infinity once the ratio provably exceeds `cap`.
    fn axis_pose_ratio(&self, target: &PreparedPatch, t: &RigidTransform, cap: f64) -> f64 {
        if let (Some(a), Some(b), Some(pose)) = (&self.lattice, &target.lattice, IntegerPose::from_transform(t)) {
            return self.integer_pose_ratio(target, a, b, &pose, cap);
        }
        let inv_linear = t.rotation.transpose();
        let den = self.l1_mass + target.l1_mass;
        let limit = cap * den;
        let mut num = 0.0;
        for p in &self.points {
            num += target.nearest_l1(&t.apply_point(p));
            if num > limit {
                return f64::INFINITY;
            }
        }
        for y in &target.points {
            num += self.nearest_l1(&RigidTransform::mirror(t.reflect, &(inv_linear * (y - t.translation))));
            if num > limit {
                return f64::INFINITY;
            }
        }
        if num == 0.0 {
            0.0
        } else {
            num / den.max(f64::MIN_POSITIVE)
        }
    }

    fn integer_pose_ratio(
        &self,
        target: &PreparedPatch,
        own: &LatticeTable,
        other: &LatticeTable,
        pose: &IntegerPose,
        cap: f64,
    ) -> f64 {
        let den = self.l1_mass + target.l1_mass;
        let limit = cap * den;
        let half = |q: [i32; 3]| Vector3::new(q[0] as f64, q[1] as f64, q[2] as f64) / 2.0;
        let mut num = 0.0;
        for &p in &own.sites2 {
            let y = pose.forward(p);
            num += match other.lookup2(y) {
                Some(v) => v as f64,
                None => target.nearest_l1(&half(y)),
            };
            if num > limit {
                return f64::INFINITY;
            }
        }
        for &q in &other.sites2 {
            let x = pose.backward(q);
            num += match own.lookup2(x) {
                Some(v) => v as f64,
                None => self.nearest_l1(&half(x)),
            };
            if num > limit {
                return f64::INFINITY;
            }
        }
        if num == 0.0 {
            0.0
        } else {
            num / den.max(f64::MIN_POSITIVE)
        }
    }

    #[allow(dead_code)]
    fn evaluate(&self, target: &PreparedPatch, t: &RigidTransform) -> f64 {
        let moved: Vec<_> = self.points.iter().map(|p| t.apply_point(p)).collect();
        normalized_l1_chamfer(&moved, &t.translation, &target.points, &target.index)
    }

    /// Distance from this patch to `target`.
    ///
    /// Every axis-aligned rotation, with and without the mirror, is scored at
    /// the integer translation nearest to centroid alignment; the best few
    /// poses of each branch are polished over neighbouring integer offsets.
    /// ICP then refines the centroid-aligned pose of both branches and the
    /// best axis pose. The smallest distance seen wins; on ties the axis pose
    /// is kept, and the unmirrored branch is preferred.
    pub fn distance_to(&self, target: &PreparedPatch, opts: &DistanceOptions) -> AlignmentResult {
        self.distance_within(target, opts, f64::INFINITY)
            .expect("unbounded search always yields a pose")
    }

    /// Like [`distance_to`](Self::distance_to), but gives up with `None` when
    /// no axis-aligned pose scores below `bound`. ICP is not attempted for
    /// such pairs.
    pub fn distance_within(&self, target: &PreparedPatch, opts: &DistanceOptions, bound: f64) -> Option<AlignmentResult> {
        assert!(!self.is_empty() && !target.is_empty());
        let rotations = axis_rotations();
        let centroid_pose = |r: &nalgebra::Matrix3<f64>, reflect: bool| {
            let m = RigidTransform::mirror(reflect, &self.centroid);
            RigidTransform::new(*r, target.centroid - r * m, reflect)
        };

        let mut top = (f64::INFINITY, centroid_pose(&rotations[0], false));
        for reflect in [false, true] {
            let branch = self.best_axis_pose(target, &rotations, reflect, opts, &centroid_pose, top.0.min(bound));
            if branch.0 < top.0 {
                top = branch;
            }
        }
        if !(top.0 < bound) {
            return None;
        }
        let mut best = AlignmentResult {
            transform: top.1,
            distance: top.0,
            iterations: 0,
            converged: true,
        };
        if best.distance == 0.0 {
            return Some(best);
        }
        let identity = nalgebra::Matrix3::identity();
        for init in [centroid_pose(&identity, false), centroid_pose(&identity, true), top.1] {
            let refined = icp_with_index(&self.points, &target.points, &target.index, &init, opts.max_iters, opts.tol);
            if refined.distance < best.distance {
                best = refined;
            }
        }
        Some(best)
    }

    fn best_axis_pose(
        &self,
        target: &PreparedPatch,
        rotations: &[nalgebra::Matrix3<f64>],
        reflect: bool,
        opts: &DistanceOptions,
        centroid_pose: &dyn Fn(&nalgebra::Matrix3<f64>, bool) -> RigidTransform,
        cap: f64,
    ) -> (f64, RigidTransform) {
        // the `lattice_rotations` best poses, ordered by ratio
        let keep = opts.lattice_rotations.max(1);
        let mut ranked: Vec<(f64, RigidTransform)> = Vec::with_capacity(keep + 1);
        let kth = |ranked: &Vec<(f64, RigidTransform)>| {
            if ranked.len() < keep {
                cap
            } else {
                ranked[keep - 1].0.min(cap)
            }
        };
        for r in rotations {
            let mut snapped = centroid_pose(r, reflect);
            snapped.translation = snapped.translation.map(f64::round);
            let d = self.axis_pose_ratio(target, &snapped, kth(&ranked));
            if d < kth(&ranked) {
                let at = ranked.partition_point(|e| e.0 <= d);
                ranked.insert(at, (d, snapped));
                ranked.truncate(keep);
            }
        }
        let Some(&first) = ranked.first() else {
            return (f64::INFINITY, centroid_pose(&rotations[0], reflect));
        };
        let mut top = first;
        if opts.lattice_search && top.0 > 0.0 {
            for &(_, seed) in &ranked {
                for dx in -1..=1 {
                    for dy in -1..=1 {
                        for dz in -1..=1 {
                            let mut t = seed;
                            t.translation += Vector3::new(dx as f64, dy as f64, dz as f64);
                            let d = self.axis_pose_ratio(target, &t, top.0);
                            if d < top.0 {
                                top = (d, t);
                            }
                        }
                    }
                }
            }
        }
        top
    }
}

/// Signed axis permutation, optional x mirror, and a half-integer
/// translation, acting on doubled coordinates.
struct IntegerPose {
    perm: [usize; 3],
    sign: [i32; 3],
    reflect: bool,
    t2: [i32; 3],
}

impl IntegerPose {
    fn from_transform(t: &RigidTransform) -> Option<Self> {
        let mut perm = [0; 3];
        let mut sign = [0; 3];
        let mut t2 = [0; 3];
        for i in 0..3 {
            let mut found = false;
            for j in 0..3 {
                let v = t.rotation[(i, j)];
                if (v.abs() - 1.0).abs() < 1e-12 {
                    if found {
                        return None;
                    }
                    perm[i] = j;
                    sign[i] = v.signum() as i32;
                    found = true;
                } else if v.abs() > 1e-12 {
                    return None;
                }
            }
            if !found {
                return None;
            }
            let d = 2.0 * t.translation[i];
            if (d - d.round()).abs() > 1e-9 {
                return None;
            }
            t2[i] = d.round() as i32;
        }
        Some(Self {
            perm,
            sign,
            reflect: t.reflect,
            t2,
        })
    }

    #[inline]
    fn forward(&self, mut p: [i32; 3]) -> [i32; 3] {
        if self.reflect {
            p[0] = -p[0];
        }
        [
            self.sign[0] * p[self.perm[0]] + self.t2[0],
            self.sign[1] * p[self.perm[1]] + self.t2[1],
            self.sign[2] * p[self.perm[2]] + self.t2[2],
        ]
    }

    #[inline]
    fn backward(&self, y: [i32; 3]) -> [i32; 3] {
        let mut x = [0; 3];
        for i in 0..3 {
            x[self.perm[i]] = self.sign[i] * (y[i] - self.t2[i]);
        }
        if self.reflect {
            x[0] = -x[0];
        }
        x
    }
}

/// Applies an axis-aligned orthogonal map (rotation plus optional mirror)
/// about the patch center. The window maps onto itself.
pub fn orthogonal_image(patch: &Patch, rotation: &nalgebra::Matrix3<f64>, reflect: bool) -> Patch {
    let t = RigidTransform::new(*rotation, Vector3::zeros(), reflect);
    super::transform::resample_patch(patch, &t, patch.extent())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registration::transform::resample_patch;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(rng: &mut ChaCha8Rng, extent: usize, n: usize) -> Patch {
        let mut vox = Vec::new();
        while vox.len() < n {
            let v = [rng.gen_range(0..extent), rng.gen_range(0..extent), rng.gen_range(0..extent)];
            if !vox.contains(&v) {
                vox.push(v);
            }
        }
        Patch::from_voxels(extent, &vox)
    }

    /// Minimum of the distance formula over the 48 axis-aligned maps and
    /// integer translations in `-r..=r`; an upper bound on the true minimum.
    fn brute_force_axis_min(p1: &Patch, p2: &Patch, r: i32) -> f64 {
        let src = PreparedPatch::from_patch(p1);
        let target = PreparedPatch::from_patch(p2);
        let mut best = f64::INFINITY;
        for reflect in [false, true] {
            for rot in axis_rotations() {
                for dx in -r..=r {
                    for dy in -r..=r {
                        for dz in -r..=r {
                            let t = RigidTransform::new(rot, Vector3::new(dx as f64, dy as f64, dz as f64), reflect);
                            best = best.min(src.evaluate(&target, &t));
                        }
                    }
                }
            }
        }
        best
    }

    #[test]
    fn self_distance_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let p = random_patch(&mut rng, 6, 30);
            assert_eq!(geometric_distance(&p, &p).unwrap().distance, 0.0);
        }
    }

    #[test]
    fn translated_copy_has_zero_distance() {
        let p = Patch::from_voxels(18, &[[2, 3, 4], [3, 3, 4], [3, 4, 4], [5, 3, 7], [2, 2, 2]]);
        let t = RigidTransform::from_translation(Vector3::new(6.0, 2.0, -1.0));
        let q = resample_patch(&p, &t, 18);
        assert_eq!(q.occupied_count(), p.occupied_count());
        assert!(geometric_distance(&p, &q).unwrap().distance < 1e-12);
    }

    #[test]
    fn mirror_image_uses_reflection_branch() {
        // a chiral arrangement: no proper rotation maps it to its mirror image
        let p = Patch::from_voxels(6, &[[1, 1, 1], [2, 1, 1], [3, 1, 1], [3, 2, 1], [3, 2, 2], [1, 1, 3]]);
        let q = orthogonal_image(&p, &nalgebra::Matrix3::identity(), true);
        let res = geometric_distance(&p, &q).unwrap();
        assert!(res.distance < 1e-12);
        assert!(res.transform.reflect);
    }

    #[test]
    fn single_center_voxels_match() {
        let a = Patch::from_voxels(18, &[[9, 9, 9]]);
        assert_eq!(geometric_distance(&a, &a).unwrap().distance, 0.0);
    }

    #[test]
    fn disjoint_random_patterns_are_apart() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let a = random_patch(&mut rng, 6, 20);
            let b = random_patch(&mut rng, 6, 20);
            let d = geometric_distance(&a, &b).unwrap().distance;
            let oracle = brute_force_axis_min(&a, &b, 2);
            assert!(d > 0.0);
            assert!(d <= oracle + 1e-9, "d = {d}, axis oracle = {oracle}");
        }
    }

    #[test]
    fn invariant_under_all_48_axis_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_patch(&mut rng, 6, 25);
        for reflect in [false, true] {
            for r in axis_rotations() {
                let g = orthogonal_image(&p, &r, reflect);
                assert_eq!(g.occupied_count(), p.occupied_count());
                assert!(geometric_distance(&g, &p).unwrap().distance <= 1e-6);
            }
        }
    }

    #[test]
    fn approximately_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let n1 = rng.gen_range(10..60);
            let n2 = rng.gen_range(10..60);
            let a = random_patch(&mut rng, 6, n1);
            let b = random_patch(&mut rng, 6, n2);
            let ab = geometric_distance(&a, &b).unwrap().distance;
            let ba = geometric_distance(&b, &a).unwrap().distance;
            worst = worst.max((ab - ba).abs());
            assert!(ab >= 0.0);
        }
        assert!(worst <= 0.05, "max asymmetry {worst}");
    }

    #[test]
    fn empty_patch_rejected() {
        let a = Patch::from_voxels(6, &[[1, 1, 1]]);
        let e = Patch::from_voxels(6, &[]);
        assert!(geometric_distance(&a, &e).is_err());
    }

    #[test]
    fn bounded_search_agrees_or_declines() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let opts = DistanceOptions::default();
        for _ in 0..10 {
            let a = PreparedPatch::from_patch(&random_patch(&mut rng, 6, 25));
            let b = PreparedPatch::from_patch(&random_patch(&mut rng, 6, 25));
            let full = a.distance_to(&b, &opts);
            assert_eq!(a.distance_within(&b, &opts, full.distance + 0.1), Some(full));
            assert_eq!(a.distance_within(&b, &opts, full.distance * 0.5), None);
        }
    }
}
