//! Rigid registration of patch point sets and the pose-invariant patch distance.

mod distance;
mod icp;
mod transform;

pub use distance::{geometric_distance, geometric_distance_with, orthogonal_image, DistanceOptions, PreparedPatch};
pub use icp::{fit_rigid, icp_align, normalized_l1_chamfer, AlignmentResult, DEFAULT_MAX_ITERS, DEFAULT_TOL};
pub use transform::{
    apply_transform, axis_rotations, centered_points, rasterize_transformed, resample_patch, RigidTransform,
};
