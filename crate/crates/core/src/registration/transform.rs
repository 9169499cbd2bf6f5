use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::voxelgrid::{OriginMode, Patch, PointSet};

/// Rotation, translation and an optional mirror about the source x-axis.
///
/// A point maps as `x ↦ R · mirror(x) + t`, where `mirror` negates the x
/// coordinate when `reflect` is set. Improper maps are carried by `reflect`,
/// never by `rotation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub reflect: bool,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            reflect: false,
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, reflect: bool) -> Self {
        Self {
            rotation,
            translation,
            reflect,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            translation: t,
            ..Self::identity()
        }
    }

    pub fn mirrored(reflect: bool) -> Self {
        Self {
            reflect,
            ..Self::identity()
        }
    }

    /// Rotation about `axis` by `angle` radians.
    pub fn rotation_about(axis: Vector3<f64>, angle: f64) -> Self {
        let r = nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self {
            rotation: *r.matrix(),
            ..Self::identity()
        }
    }

    #[inline]
    pub fn mirror(reflect: bool, p: &Vector3<f64>) -> Vector3<f64> {
        if reflect {
            Vector3::new(-p.x, p.y, p.z)
        } else {
            *p
        }
    }

    #[inline]
    pub fn apply_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * Self::mirror(self.reflect, p) + self.translation
    }

    /// `RᵀR = I` and `det R = +1` within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let orth = (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax();
        orth <= tol && (self.rotation.determinant() - 1.0).abs() <= tol
    }

    /// Homogeneous matrix including the mirror.
    pub fn to_matrix4(&self) -> Matrix4<f64> {
        let mut linear = self.rotation;
        if self.reflect {
            linear.set_column(0, &(-self.rotation.column(0)));
        }
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&linear);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }
}

pub fn apply_transform(points: &PointSet, t: &RigidTransform) -> PointSet {
    PointSet::new(
        points.points.iter().map(|p| t.apply_point(p)).collect(),
        points.origin,
    )
}

/// The 24 proper rotations mapping coordinate axes onto coordinate axes,
/// identity first, then in a fixed enumeration order.
pub fn axis_rotations() -> Vec<Matrix3<f64>> {
    let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
    let mut out = Vec::with_capacity(24);
    for perm in perms {
        for signs in 0..8u8 {
            let mut m = Matrix3::zeros();
            for (row, &col) in perm.iter().enumerate() {
                m[(row, col)] = if signs >> row & 1 == 1 { -1.0 } else { 1.0 };
            }
            if m.determinant() > 0.0 {
                out.push(m);
            }
        }
    }
    out
}

/// Rasterizes `source` moved by `t` into an `extent³` window.
///
/// Source voxel centers are taken relative to the source patch center; the
/// moved point `T(x) + center` falls into the cell `floor(·)`. Cells outside
/// the window are dropped.
pub fn rasterize_transformed(
    source: &Patch,
    t: &RigidTransform,
    extent: usize,
    center: Vector3<f64>,
) -> Vec<f32> {
    let mut out = vec![0.0; extent * extent * extent];
    let half = source.extent() as f64 / 2.0;
    for [i, j, k] in source.occupied_local() {
        let p = Vector3::new(i as f64 + 0.5 - half, j as f64 + 0.5 - half, k as f64 + 0.5 - half);
        let y = t.apply_point(&p) + center;
        let cell = [y.x.floor(), y.y.floor(), y.z.floor()];
        if cell.iter().all(|&c| c >= 0.0 && c < extent as f64) {
            let (x, y, z) = (cell[0] as usize, cell[1] as usize, cell[2] as usize);
            out[(x * extent + y) * extent + z] = 1.0;
        }
    }
    out
}

/// Resamples `source` under `t` into a window of `target_extent` sharing its center.
pub fn resample_patch(source: &Patch, t: &RigidTransform, target_extent: usize) -> Patch {
    let center = Vector3::repeat(target_extent as f64 / 2.0);
    let data = rasterize_transformed(source, t, target_extent, center);
    Patch::from_values(target_extent, data).with_corner(source.corner())
}

/// Occupied-voxel centers of `patch`, relative to its center.
pub fn centered_points(patch: &Patch) -> Vec<Vector3<f64>> {
    crate::voxelgrid::to_point_set(patch, OriginMode::PatchCenter).points
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn apply_examples() {
        let ps = PointSet::new(vec![Vector3::new(1.0, 2.0, 3.0)], OriginMode::PatchCenter);
        assert_eq!(apply_transform(&ps, &RigidTransform::identity()), ps);
        let origin = PointSet::new(vec![Vector3::zeros()], OriginMode::PatchCenter);
        let moved = apply_transform(&origin, &RigidTransform::from_translation(Vector3::x()));
        assert_eq!(moved.points, vec![Vector3::new(1.0, 0.0, 0.0)]);
        let m = apply_transform(&ps, &RigidTransform::mirrored(true));
        assert_eq!(m.points, vec![Vector3::new(-1.0, 2.0, 3.0)]);
    }

    #[test]
    fn axis_rotations_form_the_proper_group() {
        let rs = axis_rotations();
        assert_eq!(rs.len(), 24);
        assert_eq!(rs[0], Matrix3::identity());
        for (i, a) in rs.iter().enumerate() {
            assert!(RigidTransform::new(*a, Vector3::zeros(), false).is_valid(1e-12));
            for b in &rs[i + 1..] {
                assert_ne!(a, b);
            }
            // closed under composition
            for b in &rs {
                assert!(rs.contains(&(a * b)));
            }
        }
    }

    #[test]
    fn matrix4_includes_mirror() {
        let t = RigidTransform::new(Matrix3::identity(), Vector3::new(1.0, 0.0, 0.0), true);
        let m = t.to_matrix4();
        let p = m * nalgebra::Vector4::new(2.0, 3.0, 4.0, 1.0);
        assert_eq!(p.xyz(), t.apply_point(&Vector3::new(2.0, 3.0, 4.0)));
    }

    #[test]
    fn resample_identity_copies() {
        let p = Patch::from_voxels(6, &[[0, 1, 2], [5, 5, 5], [3, 0, 4]]);
        assert_eq!(resample_patch(&p, &RigidTransform::identity(), 6), p);
    }

    #[test]
    fn resample_integer_translation_shifts_and_clips() {
        let p = Patch::from_voxels(6, &[[0, 1, 1], [1, 1, 1], [2, 1, 1], [3, 1, 1]]);
        let t = RigidTransform::from_translation(Vector3::new(4.0, 0.0, 0.0));
        let r = resample_patch(&p, &t, 6);
        assert_eq!(r.occupied_local(), vec![[4, 1, 1], [5, 1, 1]]);
    }

    #[test]
    fn resample_quarter_turn_bar() {
        // bar along x through the patch center line (y = 2, z = 3 in a 6³ patch)
        let bar: Vec<[usize; 3]> = (1..5).map(|x| [x, 2, 3]).collect();
        let p = Patch::from_voxels(6, &bar);
        let t = RigidTransform::rotation_about(Vector3::z(), FRAC_PI_2);
        let r = resample_patch(&p, &t, 6);
        // enumerate: centered (x-2.5, -0.5, 0.5) maps to (0.5, x-2.5, 0.5), cell (3, x, 3)
        let expected: Vec<[usize; 3]> = (1..5).map(|x| [3, x, 3]).collect();
        assert_eq!(r.occupied_local(), expected);
        assert_eq!(r.occupied_count(), p.occupied_count());
    }
}
