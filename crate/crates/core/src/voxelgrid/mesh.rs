//! Voxel surfaces: exposed faces, surface point sampling, OBJ export and
//! point-cloud voxelization.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::grid::VoxelGrid;
use crate::error::{invalid, Result};

/// Voxels kept between the scaled point cloud and the grid border.
pub const VOXELIZE_MARGIN: usize = 2;

/// A unit square on the boundary of an occupied voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Face {
    pub voxel: [usize; 3],
    pub axis: usize,
    pub positive: bool,
}

impl Face {
    /// Coordinate of the face plane along its axis.
    pub fn plane(&self) -> f64 {
        self.voxel[self.axis] as f64 + if self.positive { 1.0 } else { 0.0 }
    }

    /// Corners in counter-clockwise order seen from outside.
    pub fn corners(&self) -> [[usize; 3]; 4] {
        let a = self.axis;
        let (u, v) = ((a + 1) % 3, (a + 2) % 3);
        let mut base = self.voxel;
        if self.positive {
            base[a] += 1;
        }
        let shift = |du: usize, dv: usize| {
            let mut c = base;
            c[u] += du;
            c[v] += dv;
            c
        };
        let ccw = [shift(0, 0), shift(1, 0), shift(1, 1), shift(0, 1)];
        if self.positive {
            ccw
        } else {
            [ccw[0], ccw[3], ccw[2], ccw[1]]
        }
    }
}

/// Faces of voxels with value ≥ `threshold` whose neighbour is empty or outside.
pub fn exposed_faces(grid: &VoxelGrid, threshold: f32) -> Vec<Face> {
    let s = grid.size() as isize;
    let occ = |x: isize, y: isize, z: isize| {
        x >= 0 && y >= 0 && z >= 0 && x < s && y < s && z < s && grid.get(x as usize, y as usize, z as usize) >= threshold
    };
    let mut faces = Vec::new();
    for (i, &v) in grid.values().iter().enumerate() {
        if v < threshold {
            continue;
        }
        let c = grid.coords(i);
        let p = [c[0] as isize, c[1] as isize, c[2] as isize];
        for axis in 0..3 {
            for positive in [false, true] {
                let mut n = p;
                n[axis] += if positive { 1 } else { -1 };
                if !occ(n[0], n[1], n[2]) {
                    faces.push(Face {
                        voxel: c,
                        axis,
                        positive,
                    });
                }
            }
        }
    }
    faces
}

/// Samples `n` points uniformly over the exposed voxel surface, in voxel units.
pub fn surface_points(grid: &VoxelGrid, n: usize, seed: u64) -> Result<Vec<Vector3<f64>>> {
    let faces = exposed_faces(grid, super::grid::DEFAULT_THRESHOLD);
    if faces.is_empty() {
        return Err(invalid("cannot sample the surface of an empty grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = (0..n)
        .map(|_| {
            let f = faces[rng.gen_range(0..faces.len())];
            let (u, v) = ((f.axis + 1) % 3, (f.axis + 2) % 3);
            let mut p = Vector3::zeros();
            p[f.axis] = f.plane();
            p[u] = f.voxel[u] as f64 + rng.gen::<f64>();
            p[v] = f.voxel[v] as f64 + rng.gen::<f64>();
            p
        })
        .collect();
    Ok(points)
}

/// Quad mesh of exposed faces with shared vertices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ObjMesh {
    pub vertices: Vec<[usize; 3]>,
    pub quads: Vec<[usize; 4]>,
}

impl ObjMesh {
    pub fn from_grid(grid: &VoxelGrid, threshold: f32) -> Self {
        let mut mesh = ObjMesh::default();
        let mut lookup: HashMap<[usize; 3], usize> = HashMap::new();
        for face in exposed_faces(grid, threshold) {
            let mut quad = [0; 4];
            for (k, c) in face.corners().into_iter().enumerate() {
                quad[k] = *lookup.entry(c).or_insert_with(|| {
                    mesh.vertices.push(c);
                    mesh.vertices.len() - 1
                });
            }
            mesh.quads.push(quad);
        }
        mesh
    }

    /// OBJ text with 1-based indices, vertex positions scaled by `pitch`.
    pub fn to_obj_string(&self, pitch: f64) -> String {
        let mut s = String::from("# voxel surface\n");
        for v in &self.vertices {
            let _ = writeln!(
                s,
                "v {} {} {}",
                v[0] as f64 * pitch,
                v[1] as f64 * pitch,
                v[2] as f64 * pitch
            );
        }
        for q in &self.quads {
            let _ = writeln!(s, "f {} {} {} {}", q[0] + 1, q[1] + 1, q[2] + 1, q[3] + 1);
        }
        s
    }
}

pub fn export_obj(grid: &VoxelGrid, threshold: f32, path: impl AsRef<Path>) -> Result<ObjMesh> {
    let mesh = ObjMesh::from_grid(grid, threshold);
    std::fs::write(path, mesh.to_obj_string(grid.pitch()))?;
    Ok(mesh)
}

/// Scales the bounding box of `points` uniformly into a `size³` grid, leaving a
/// [`VOXELIZE_MARGIN`]-voxel border, and marks every voxel hit by a point.
pub fn voxelize_points(points: &[Vector3<f64>], size: usize) -> Result<VoxelGrid> {
    if points.is_empty() {
        return Err(invalid("cannot voxelize an empty point list"));
    }
    if size == 0 {
        return Err(invalid("grid size must be positive"));
    }
    if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(invalid("point coordinates must be finite"));
    }
    let margin = if size > 2 * VOXELIZE_MARGIN {
        VOXELIZE_MARGIN
    } else {
        0
    };
    let usable = (size - 2 * margin) as f64;
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let span = hi - lo;
    let extent = span.max();
    let scale = if extent > 0.0 { (usable - 1.0) / extent } else { 0.0 };
    let mut grid = VoxelGrid::empty(size);
    for p in points {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let centering = ((usable - 1.0) - span[a] * scale) / 2.0;
            let u = margin as f64 + (p[a] - lo[a]) * scale + centering;
            idx[a] = ((u + 1e-9).floor().max(0.0) as usize).min(size - 1);
        }
        grid.set(idx[0], idx[1], idx[2], 1.0);
    }
    Ok(grid)
}
