use nalgebra::Vector3;

use super::grid::{window_corners, VoxelGrid, DEFAULT_THRESHOLD};
use crate::error::{invalid, Result};

/// Cubic block of occupancy values copied from a parent grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    corner: [usize; 3],
    extent: usize,
    data: Vec<f32>,
    occupied_count: usize,
}

/// Subvolumes share the patch representation; only their extent differs.
pub type Subvolume = Patch;

impl Patch {
    /// Copies the window of `grid` at `corner`.
    pub fn extract(grid: &VoxelGrid, corner: [usize; 3], extent: usize) -> Result<Self> {
        if extent == 0 {
            return Err(invalid("patch extent must be positive"));
        }
        let data = grid.window(corner, extent)?;
        Ok(Self::from_parts(corner, extent, data))
    }

    /// Builds a free-standing patch. Panics if `data.len() != extent³`.
    pub fn from_values(extent: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), extent.pow(3), "patch data length");
        Self::from_parts([0; 3], extent, data)
    }

    pub fn from_voxels(extent: usize, voxels: &[[usize; 3]]) -> Self {
        let mut data = vec![0.0; extent.pow(3)];
        for &[x, y, z] in voxels {
            data[(x * extent + y) * extent + z] = 1.0;
        }
        Self::from_values(extent, data)
    }

    fn from_parts(corner: [usize; 3], extent: usize, data: Vec<f32>) -> Self {
        let occupied_count = data.iter().filter(|&&v| v >= DEFAULT_THRESHOLD).count();
        Self {
            corner,
            extent,
            data,
            occupied_count,
        }
    }

    pub fn with_corner(mut self, corner: [usize; 3]) -> Self {
        self.corner = corner;
        self
    }

    pub fn corner(&self) -> [usize; 3] {
        self.corner
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn occupied_count(&self) -> usize {
        self.occupied_count
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.extent + y) * self.extent + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Local coordinates of occupied voxels in x, y, z order.
    pub fn occupied_local(&self) -> Vec<[usize; 3]> {
        let e = self.extent;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= DEFAULT_THRESHOLD)
            .map(|(i, _)| [i / (e * e), (i / e) % e, i % e])
            .collect()
    }
}

/// Samples every `extent³` window at the given stride, ordered by corner x, then y, then z.
pub fn sample_patches(
    grid: &VoxelGrid,
    extent: usize,
    stride: usize,
    keep_empty: bool,
) -> Result<Vec<Patch>> {
    if extent == 0 || extent > grid.size() {
        return Err(invalid(format!(
            "patch extent {extent} must be in 1..={}",
            grid.size()
        )));
    }
    if stride == 0 {
        return Err(invalid("patch stride must be at least 1"));
    }
    let corners = window_corners(grid.size(), extent, stride);
    let mut out = Vec::new();
    for &x in &corners {
        for &y in &corners {
            for &z in &corners {
                let p = Patch::extract(grid, [x, y, z], extent)?;
                if keep_empty || !p.is_empty() {
                    out.push(p);
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OriginMode {
    /// Coordinates relative to the patch center (`extent / 2` per axis).
    PatchCenter,
    /// Coordinates in the parent grid frame.
    GridCorner,
}

/// Occupied-voxel centers of a patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vector3<f64>>,
    pub origin: OriginMode,
}

impl PointSet {
    pub fn new(points: Vec<Vector3<f64>>, origin: OriginMode) -> Self {
        Self { points, origin }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Vector3<f64>]) -> Vector3<f64> {
    if points.is_empty() {
        return Vector3::zeros();
    }
    points.iter().sum::<Vector3<f64>>() / points.len() as f64
}

pub fn to_point_set(patch: &Patch, origin: OriginMode) -> PointSet {
    let offset = match origin {
        OriginMode::PatchCenter => Vector3::repeat(patch.extent() as f64 / 2.0),
        OriginMode::GridCorner => {
            let c = patch.corner();
            -Vector3::new(c[0] as f64, c[1] as f64, c[2] as f64)
        }
    };
    let points = patch
        .occupied_local()
        .into_iter()
        .map(|[i, j, k]| Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) - offset)
        .collect();
    PointSet { points, origin }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_counts() {
        let g = VoxelGrid::full(16);
        assert_eq!(sample_patches(&g, 6, 2, true).unwrap().len(), 216);
        let e = VoxelGrid::empty(16);
        assert!(sample_patches(&e, 6, 2, false).unwrap().is_empty());
        assert_eq!(sample_patches(&e, 6, 2, true).unwrap().len(), 216);
        assert!(sample_patches(&e, 17, 2, true).is_err());
        assert!(sample_patches(&e, 4, 0, true).is_err());
    }

    #[test]
    fn sample_count_full_scale() {
        // 28 positions per axis, counted without extracting
        let corners = window_corners(128, 18, 4);
        assert_eq!(corners.len().pow(3), 21_952);
    }

    #[test]
    fn sample_order_is_x_then_y_then_z() {
        let g = VoxelGrid::full(8);
        let ps = sample_patches(&g, 4, 2, true).unwrap();
        let corners: Vec<_> = ps.iter().map(|p| p.corner()).collect();
        let mut sorted = corners.clone();
        sorted.sort();
        assert_eq!(corners, sorted);
        assert_eq!(corners[1], [0, 0, 2]);
    }

    #[test]
    fn point_set_examples() {
        let empty = Patch::from_values(18, vec![0.0; 18 * 18 * 18]);
        assert!(to_point_set(&empty, OriginMode::PatchCenter).is_empty());

        let single = Patch::from_voxels(18, &[[0, 0, 0]]);
        let ps = to_point_set(&single, OriginMode::PatchCenter);
        assert_eq!(ps.points, vec![Vector3::new(-8.5, -8.5, -8.5)]);

        let cube = Patch::from_values(2, vec![1.0; 8]);
        let ps = to_point_set(&cube, OriginMode::PatchCenter);
        assert_eq!(ps.len(), 8);
        for p in &ps.points {
            assert!(p.iter().all(|c| c.abs() == 0.5));
        }
        assert_eq!(ps.centroid(), Vector3::zeros());
    }

    #[test]
    fn grid_corner_origin_uses_parent_frame() {
        let mut g = VoxelGrid::empty(8);
        g.set(5, 6, 7, 1.0);
        let p = Patch::extract(&g, [4, 4, 4], 4).unwrap();
        let ps = to_point_set(&p, OriginMode::GridCorner);
        assert_eq!(ps.points, vec![Vector3::new(5.5, 6.5, 7.5)]);
        assert_eq!(p.occupied_count(), ps.len());
    }
}
