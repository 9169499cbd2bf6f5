//! Occupancy grids, patches and subvolumes, and their conversions.

mod grid;
pub mod io;
pub mod mesh;
mod patch;

pub use grid::{downsample, upsample_nearest, window_corners, VoxelGrid, DEFAULT_THRESHOLD};
pub use io::{read_grid, write_grid, write_grid_as, Encoding};
pub use mesh::{export_obj, exposed_faces, surface_points, voxelize_points, ObjMesh};
pub use patch::{centroid, sample_patches, to_point_set, OriginMode, Patch, PointSet, Subvolume};
