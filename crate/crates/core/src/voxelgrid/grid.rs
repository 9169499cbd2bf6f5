use crate::error::{invalid, Result};

/// Values at or above this are treated as occupied.
pub const DEFAULT_THRESHOLD: f32 = 0.5;

/// Dense cubic occupancy grid.
///
/// Values are stored x-major: the linear index of `(x, y, z)` is
/// `(x * size + y) * size + z`. Input and ground-truth grids hold `{0, 1}`;
/// blended outputs hold values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    size: usize,
    data: Vec<f32>,
    pitch: f64,
}

// pitch is metadata and does not take part in equality
impl PartialEq for VoxelGrid {
    fn eq(&self, other: &Self) -> bool {
        self.size == other.size && self.data == other.data
    }
}

impl VoxelGrid {
    /// An all-empty grid. Panics if `size == 0`.
    pub fn empty(size: usize) -> Self {
        assert!(size >= 1, "grid size must be positive");
        Self {
            size,
            data: vec![0.0; size * size * size],
            pitch: 1.0,
        }
    }

    pub fn full(size: usize) -> Self {
        let mut g = Self::empty(size);
        g.data.fill(1.0);
        g
    }

    pub fn from_values(size: usize, data: Vec<f32>) -> Result<Self> {
        if size == 0 {
            return Err(invalid("grid size must be positive"));
        }
        if data.len() != size * size * size {
            return Err(invalid(format!(
                "grid of size {size} needs {} values, got {}",
                size * size * size,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite occupancy value {v}")));
        }
        Ok(Self {
            size,
            data,
            pitch: 1.0,
        })
    }

    /// Builds a binary grid from a list of occupied voxels.
    pub fn from_voxels(size: usize, voxels: &[[usize; 3]]) -> Result<Self> {
        if size == 0 {
            return Err(invalid("grid size must be positive"));
        }
        let mut g = Self::empty(size);
        for &[x, y, z] in voxels {
            if x >= size || y >= size || z >= size {
                return Err(invalid(format!(
                    "voxel ({x}, {y}, {z}) outside grid of size {size}"
                )));
            }
            g.set(x, y, z, 1.0);
        }
        Ok(g)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn with_pitch(mut self, pitch: f64) -> Self {
        self.pitch = pitch;
        self
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.size + y) * self.size + z
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let s = self.size;
        [idx / (s * s), (idx / s) % s, idx % s]
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    /// Value at signed coordinates, 0 outside the grid.
    #[inline]
    pub fn get_or_zero(&self, x: isize, y: isize, z: isize) -> f32 {
        let s = self.size as isize;
        if x < 0 || y < 0 || z < 0 || x >= s || y >= s || z >= s {
            0.0
        } else {
            self.get(x as usize, y as usize, z as usize)
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, value: f32) {
        let i = self.index(x, y, z);
        self.data[i] = value;
    }

    #[inline]
    pub fn is_occupied(&self, x: usize, y: usize, z: usize) -> bool {
        self.get(x, y, z) >= DEFAULT_THRESHOLD
    }

    pub fn values(&self) -> &[f32] {
        &self.data
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_values(self) -> Vec<f32> {
        self.data
    }

    pub fn occupied_count(&self) -> usize {
        self.data.iter().filter(|&&v| v >= DEFAULT_THRESHOLD).count()
    }

    pub fn is_empty(&self) -> bool {
        self.occupied_count() == 0
    }

    /// True when every value is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn binarize(&self, threshold: f32) -> VoxelGrid {
        let data = self
            .data
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        VoxelGrid {
            size: self.size,
            data,
            pitch: self.pitch,
        }
    }

    /// Occupied voxel coordinates in linear (x, y, z) order.
    pub fn occupied_voxels(&self) -> Vec<[usize; 3]> {
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= DEFAULT_THRESHOLD)
            .map(|(i, _)| self.coords(i))
            .collect()
    }

    /// Copies the `extent³` window with lowest corner `corner`, x-major.
    pub fn window(&self, corner: [usize; 3], extent: usize) -> Result<Vec<f32>> {
        if corner.iter().any(|&c| c + extent > self.size) {
            return Err(invalid(format!(
                "window at {corner:?} with extent {extent} exceeds grid size {}",
                self.size
            )));
        }
        let mut out = Vec::with_capacity(extent * extent * extent);
        for x in 0..extent {
            for y in 0..extent {
                let base = self.index(corner[0] + x, corner[1] + y, corner[2]);
                out.extend_from_slice(&self.data[base..base + extent]);
            }
        }
        Ok(out)
    }

    /// Writes `values` (x-major `extent³`) into the window at `corner`.
    pub fn paste(&mut self, corner: [usize; 3], extent: usize, values: &[f32]) -> Result<()> {
        if corner.iter().any(|&c| c + extent > self.size) || values.len() != extent.pow(3) {
            return Err(invalid("paste window does not fit the grid"));
        }
        for x in 0..extent {
            for y in 0..extent {
                let base = self.index(corner[0] + x, corner[1] + y, corner[2]);
                let src = (x * extent + y) * extent;
                self.data[base..base + extent].copy_from_slice(&values[src..src + extent]);
            }
        }
        Ok(())
    }

    /// Voxelwise `self ⊆ other` on occupancy.
    pub fn is_subset_of(&self, other: &VoxelGrid) -> bool {
        self.size == other.size
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| a < DEFAULT_THRESHOLD || b >= DEFAULT_THRESHOLD)
    }

    /// Inclusive bounding box of occupied voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for v in self.occupied_voxels() {
            any = true;
            for a in 0..3 {
                lo[a] = lo[a].min(v[a]);
                hi[a] = hi[a].max(v[a]);
            }
        }
        any.then_some((lo, hi))
    }
}

/// Lowest corners of every window of `extent` at `stride` that fits in `size`.
pub fn window_corners(size: usize, extent: usize, stride: usize) -> Vec<usize> {
    if extent == 0 || extent > size || stride == 0 {
        return Vec::new();
    }
    (0..=(size - extent)).step_by(stride).collect()
}

/// Max-pools `factor³` blocks: a coarse voxel takes the largest value in its block.
pub fn downsample(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 || grid.size() % factor != 0 {
        return Err(invalid(format!(
            "downsample factor {factor} does not divide grid size {}",
            grid.size()
        )));
    }
    let n = grid.size() / factor;
    let mut out = VoxelGrid::empty(n).with_pitch(grid.pitch() * factor as f64);
    for (i, &v) in grid.values().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let [x, y, z] = grid.coords(i);
        let j = out.index(x / factor, y / factor, z / factor);
        if v > out.data[j] {
            out.data[j] = v;
        }
    }
    Ok(out)
}

/// Replicates each voxel into a `factor³` block.
pub fn upsample_nearest(grid: &VoxelGrid, factor: usize) -> Result<VoxelGrid> {
    if factor == 0 {
        return Err(invalid("upsample factor must be at least 1"));
    }
    let n = grid.size() * factor;
    let mut out = VoxelGrid::empty(n).with_pitch(grid.pitch() / factor as f64);
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                let v = grid.get(x / factor, y / factor, z / factor);
                if v != 0.0 {
                    out.set(x, y, z, v);
                }
            }
        }
    }
    Ok(out)
}
