//! Coarse complete shapes: exact downsampling of ground truth, a closing plus
//! mirror-symmetry heuristic, or a grid supplied by an external predictor.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::voxelgrid::{downsample, read_grid, VoxelGrid};

/// Resolution ratio between detailed and coarse grids.
pub const COARSE_FACTOR: usize = 4;

pub const DEFAULT_CLOSING_RADIUS: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoarseProvider {
    /// Downsampled ground truth. Needs the complete shape.
    GtDownsample,
    Heuristic { closing_radius: usize, symmetry: bool },
    ExternalFile { path: PathBuf },
}

impl Default for CoarseProvider {
    fn default() -> Self {
        CoarseProvider::Heuristic {
            closing_radius: DEFAULT_CLOSING_RADIUS,
            symmetry: true,
        }
    }
}

impl CoarseProvider {
    pub fn name(&self) -> &'static str {
        match self {
            CoarseProvider::GtDownsample => "gt_downsample",
            CoarseProvider::Heuristic { .. } => "heuristic",
            CoarseProvider::ExternalFile { .. } => "external_file",
        }
    }

    /// Coarse grid for `partial`. `gt` is required by [`CoarseProvider::GtDownsample`].
    pub fn provide(&self, partial: &VoxelGrid, gt: Option<&VoxelGrid>) -> Result<VoxelGrid> {
        match self {
            CoarseProvider::GtDownsample => {
                let gt = gt.ok_or_else(|| invalid("gt_downsample coarse provider needs a ground-truth grid"))?;
                if gt.size() != partial.size() {
                    return Err(invalid(format!(
                        "ground truth is {}³ but the partial input is {}³",
                        gt.size(),
                        partial.size()
                    )));
                }
                coarse_from_gt(gt)
            }
            CoarseProvider::Heuristic {
                closing_radius,
                symmetry,
            } => coarse_heuristic(partial, *closing_radius as i64, *symmetry),
            CoarseProvider::ExternalFile { path } => load_external_coarse(path, partial.size()),
        }
    }
}

pub fn coarse_from_gt(gt: &VoxelGrid) -> Result<VoxelGrid> {
    if gt.size() % COARSE_FACTOR != 0 {
        return Err(invalid(format!(
            "grid size {} is not divisible by {COARSE_FACTOR}",
            gt.size()
        )));
    }
    downsample(&gt.binarize(0.5), COARSE_FACTOR)
}

/// Downsample, close with a cubic element of the given radius, and
/// optionally add the reflection about the best axis-aligned mirror plane.
pub fn coarse_heuristic(partial: &VoxelGrid, closing_radius: i64, symmetry: bool) -> Result<VoxelGrid> {
    if closing_radius < 0 {
        return Err(invalid(format!("closing radius must be non-negative, got {closing_radius}")));
    }
    let mut coarse = coarse_from_gt(partial)?;
    if closing_radius > 0 {
        coarse = closing(&coarse, closing_radius as usize);
    }
    if symmetry {
        if let Some(plane) = best_mirror_plane(&coarse) {
            let mirrored = reflect(&coarse, plane);
            for (v, m) in coarse.values_mut().iter_mut().zip(mirrored.values()) {
                *v = v.max(*m);
            }
        }
    }
    Ok(coarse)
}

/// Reads a coarse grid produced elsewhere. It must be exactly `shape_size / 4`
/// per side; other sizes are rejected rather than resampled.
pub fn load_external_coarse(path: impl AsRef<Path>, shape_size: usize) -> Result<VoxelGrid> {
    let grid = read_grid(path.as_ref())?;
    let expected = shape_size / COARSE_FACTOR;
    if grid.size() != expected {
        return Err(invalid(format!(
            "external coarse grid {} is {}³, expected {expected}³ for a {shape_size}³ shape",
            path.as_ref().display(),
            grid.size()
        )));
    }
    Ok(grid.binarize(0.5))
}

/// Binary closing on an unbounded empty background.
pub fn closing(grid: &VoxelGrid, radius: usize) -> VoxelGrid {
    if radius == 0 {
        return grid.binarize(0.5);
    }
    // pad so the dilation never reaches the border, then close and crop
    let n = grid.size();
    let pad = 2 * radius;
    let m = n + 2 * pad;
    let mut padded = vec![false; m * m * m];
    for [x, y, z] in grid.occupied_voxels() {
        padded[((x + pad) * m + y + pad) * m + z + pad] = true;
    }
    let dilated = separable(&padded, m, radius, |a, b| a || b);
    let closed = separable(&dilated, m, radius, |a, b| a && b);
    let mut out = VoxelGrid::empty(n).with_pitch(grid.pitch());
    for x in 0..n {
        for y in 0..n {
            for z in 0..n {
                if closed[((x + pad) * m + y + pad) * m + z + pad] {
                    out.set(x, y, z, 1.0);
                }
            }
        }
    }
    out
}

/// Cubic structuring element applied one axis at a time. Cells outside the
/// volume are skipped, which is harmless given the padding.
fn separable(src: &[bool], m: usize, r: usize, op: impl Fn(bool, bool) -> bool + Copy) -> Vec<bool> {
    let mut cur = src.to_vec();
    let strides = [m * m, m, 1];
    for &stride in &strides {
        let mut next = cur.clone();
        for (i, slot) in next.iter_mut().enumerate() {
            let c = (i / stride) % m;
            let lo = c.saturating_sub(r);
            let hi = (c + r).min(m - 1);
            let base = i - c * stride;
            let mut acc = cur[base + lo * stride];
            for k in lo + 1..=hi {
                acc = op(acc, cur[base + k * stride]);
            }
            *slot = acc;
        }
        cur = next;
    }
    cur
}

/// Mirror plane along `axis` mapping index `i` to `sum - i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MirrorPlane {
    pub axis: usize,
    pub sum: usize,
}

/// Plane with the largest overlap between the shape and its reflection.
/// Ties go to the lower axis, then the lower offset. `None` for an empty grid.
pub fn best_mirror_plane(grid: &VoxelGrid) -> Option<MirrorPlane> {
    let occupied = grid.occupied_voxels();
    if occupied.is_empty() {
        return None;
    }
    let n = grid.size();
    let mut best: Option<(usize, MirrorPlane)> = None;
    for axis in 0..3 {
        for sum in 0..=2 * (n - 1) {
            let plane = MirrorPlane { axis, sum };
            let overlap = occupied
                .iter()
                .filter(|v| {
                    let c = v[axis];
                    if c > sum || sum - c >= n {
                        return false;
                    }
                    let mut w = **v;
                    w[axis] = sum - c;
                    grid.is_occupied(w[0], w[1], w[2])
                })
                .count();
            if best.map_or(true, |(o, _)| overlap > o) {
                best = Some((overlap, plane));
            }
        }
    }
    best.map(|(_, p)| p)
}

pub fn reflect(grid: &VoxelGrid, plane: MirrorPlane) -> VoxelGrid {
    let n = grid.size();
    let mut out = VoxelGrid::empty(n).with_pitch(grid.pitch());
    for v in grid.occupied_voxels() {
        let c = v[plane.axis];
        if c > plane.sum || plane.sum - c >= n {
            continue;
        }
        let mut w = v;
        w[plane.axis] = plane.sum - c;
        out.set(w[0], w[1], w[2], 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::voxelgrid::write_grid;
    use proptest::prelude::*;

    fn block(size: usize, lo: [usize; 3], hi: [usize; 3]) -> VoxelGrid {
        let mut g = VoxelGrid::empty(size);
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    g.set(x, y, z, 1.0);
                }
            }
        }
        g
    }

    #[test]
    fn gt_examples() {
        assert_eq!(coarse_from_gt(&VoxelGrid::full(128)).unwrap(), VoxelGrid::full(32));
        assert_eq!(coarse_from_gt(&VoxelGrid::empty(32)).unwrap(), VoxelGrid::empty(8));
        let c = coarse_from_gt(&block(16, [4, 8, 0], [8, 12, 4])).unwrap();
        assert_eq!(c.occupied_voxels(), vec![[1, 2, 0]]);
        assert!(coarse_from_gt(&VoxelGrid::empty(10)).is_err());
    }

    #[test]
    fn closing_bridges_a_gap() {
        let mut g = VoxelGrid::empty(8);
        for x in [1, 2, 4, 5] {
            g.set(x, 3, 3, 1.0);
        }
        let c = closing(&g, 1);
        assert!(c.is_occupied(3, 3, 3));
        assert!(g.is_subset_of(&c));
        assert_eq!(c.occupied_count(), 5);
    }

    #[test]
    fn heuristic_radius_zero_is_plain_downsample() {
        let s = block(32, [3, 5, 7], [20, 9, 30]);
        assert_eq!(coarse_heuristic(&s, 0, false).unwrap(), downsample(&s, 4).unwrap());
        assert!(coarse_heuristic(&VoxelGrid::empty(32), 1, true).unwrap().is_empty());
        assert!(coarse_heuristic(&s, -1, false).is_err());
    }

    #[test]
    fn symmetry_fills_cropped_armrest() {
        // seat, back, and two armrests mirrored about the x mid-plane
        let n = 32;
        let mut chair = block(n, [4, 8, 4], [28, 12, 28]);
        chair = union(&chair, &block(n, [4, 12, 24], [28, 28, 28]));
        let left = block(n, [4, 12, 4], [8, 20, 24]);
        let right = block(n, [24, 12, 4], [28, 20, 24]);
        chair = union(&union(&chair, &left), &right);
        let mut cropped = chair.clone();
        for [x, y, z] in right.occupied_voxels() {
            cropped.set(x, y, z, 0.0);
        }
        let c = coarse_heuristic(&cropped, 1, true).unwrap();
        let crop_coarse = downsample(&right, 4).unwrap();
        let filled = crop_coarse
            .occupied_voxels()
            .iter()
            .filter(|[x, y, z]| c.is_occupied(*x, *y, *z))
            .count();
        assert!(filled > 0);
        let without = coarse_heuristic(&cropped, 1, false).unwrap();
        assert!(without.is_subset_of(&c));
    }

    fn union(a: &VoxelGrid, b: &VoxelGrid) -> VoxelGrid {
        let data = a.values().iter().zip(b.values()).map(|(x, y)| x.max(*y)).collect();
        VoxelGrid::from_values(a.size(), data).unwrap()
    }

    #[test]
    fn mirror_plane_ties_prefer_x() {
        // a centered cube is symmetric about all three mid-planes
        let g = block(8, [2, 2, 2], [6, 6, 6]);
        assert_eq!(best_mirror_plane(&g), Some(MirrorPlane { axis: 0, sum: 7 }));
        assert_eq!(reflect(&g, MirrorPlane { axis: 1, sum: 7 }), g);
    }

    #[test]
    fn external_size_checked() {
        let dir = tempfile::tempdir().unwrap();
        let ok = dir.path().join("c32.pvox");
        write_grid(&VoxelGrid::full(32), &ok).unwrap();
        assert_eq!(load_external_coarse(&ok, 128).unwrap().size(), 32);
        let bad = dir.path().join("c64.pvox");
        write_grid(&VoxelGrid::empty(64), &bad).unwrap();
        let err = load_external_coarse(&bad, 128).unwrap_err().to_string();
        assert!(err.contains("64") && err.contains("32"), "{err}");
        let corrupt = dir.path().join("junk.pvox");
        std::fs::write(&corrupt, b"PVOX1\0\0\0\x04").unwrap();
        assert!(matches!(load_external_coarse(&corrupt, 128), Err(crate::Error::Format { .. })));
    }

    #[test]
    fn provider_requires_gt() {
        let s = VoxelGrid::full(16);
        assert!(CoarseProvider::GtDownsample.provide(&s, None).is_err());
        assert_eq!(CoarseProvider::GtDownsample.provide(&s, Some(&s)).unwrap(), VoxelGrid::full(4));
        let json = serde_json::to_string(&CoarseProvider::default()).unwrap();
        assert_eq!(serde_json::from_str::<CoarseProvider>(&json).unwrap(), CoarseProvider::default());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn heuristic_only_adds(vox in prop::collection::vec((0usize..16, 0usize..16, 0usize..16), 0..60), r in 0i64..3, sym: bool) {
            let v: Vec<[usize; 3]> = vox.into_iter().map(|(x, y, z)| [x, y, z]).collect();
            let s = VoxelGrid::from_voxels(16, &v).unwrap();
            let base = downsample(&s, 4).unwrap();
            let c = coarse_heuristic(&s, r, sym).unwrap();
            prop_assert!(base.is_subset_of(&c));
        }
    }
}
