//! Synthetic corruption: random cuboid deletion and random plane cuts.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::voxelgrid::VoxelGrid;

pub const CUBOID_ATTEMPTS: usize = 1000;
pub const PLANE_ATTEMPTS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    Cuboid,
    Plane,
}

impl CropKind {
    pub fn name(self) -> &'static str {
        match self {
            CropKind::Cuboid => "cuboid",
            CropKind::Plane => "plane",
        }
    }
}

impl std::str::FromStr for CropKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cuboid" => Ok(CropKind::Cuboid),
            "plane" => Ok(CropKind::Plane),
            _ => Err(invalid(format!("unknown crop kind '{s}' (expected cuboid or plane)"))),
        }
    }
}

/// Geometry that was actually removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Realized {
    /// Half-open voxel box `lo..hi`.
    Cuboid { lo: [usize; 3], hi: [usize; 3] },
    /// Voxels with `normal · center > offset` were deleted (centers in voxel units).
    Plane { normal: [f64; 3], offset: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CropSpec {
    pub kind: CropKind,
    /// Accepted fraction of occupied voxels to delete. Plane cuts may leave it open.
    pub ratio_range: Option<(f64, f64)>,
    pub seed: u64,
    pub realized: Option<Realized>,
    /// Deleted fraction of the occupied voxels.
    pub realized_ratio: Option<f64>,
}

impl CropSpec {
    pub fn cuboid(ratio_range: (f64, f64), seed: u64) -> Result<Self> {
        check_range(ratio_range)?;
        Ok(Self {
            kind: CropKind::Cuboid,
            ratio_range: Some(ratio_range),
            seed,
            realized: None,
            realized_ratio: None,
        })
    }

    pub fn plane(ratio_range: Option<(f64, f64)>, seed: u64) -> Result<Self> {
        if let Some(r) = ratio_range {
            check_range(r)?;
        }
        Ok(Self {
            kind: CropKind::Plane,
            ratio_range,
            seed,
            realized: None,
            realized_ratio: None,
        })
    }

    /// Runs the crop this spec describes.
    pub fn apply(&self, grid: &VoxelGrid) -> Result<(VoxelGrid, CropSpec)> {
        match self.kind {
            CropKind::Cuboid => {
                let range = self.ratio_range.ok_or_else(|| invalid("cuboid crops need a ratio range"))?;
                crop_cuboid(grid, range, self.seed)
            }
            CropKind::Plane => crop_plane_in(grid, self.ratio_range, self.seed),
        }
    }
}

fn check_range((lo, hi): (f64, f64)) -> Result<()> {
    if !(lo > 0.0 && lo <= hi && hi < 1.0) {
        return Err(invalid(format!("crop ratio range must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")));
    }
    Ok(())
}

/// Inclusive prefix sums of occupancy for O(1) box counts.
struct Counts {
    n: usize,
    sums: Vec<u32>,
}

impl Counts {
    fn new(grid: &VoxelGrid) -> Self {
        let n = grid.size();
        let m = n + 1;
        let mut sums = vec![0u32; m * m * m];
        let at = |x: usize, y: usize, z: usize| (x * m + y) * m + z;
        for x in 0..n {
            for y in 0..n {
                for z in 0..n {
                    let v = grid.is_occupied(x, y, z) as u32;
                    sums[at(x + 1, y + 1, z + 1)] = v + sums[at(x, y + 1, z + 1)] + sums[at(x + 1, y, z + 1)]
                        + sums[at(x + 1, y + 1, z)]
                        - sums[at(x, y, z + 1)]
                        - sums[at(x, y + 1, z)]
                        - sums[at(x + 1, y, z)]
                        + sums[at(x, y, z)];
                }
            }
        }
        Self { n, sums }
    }

    fn boxed(&self, lo: [usize; 3], hi: [usize; 3]) -> u32 {
        let m = self.n + 1;
        let s = |x: usize, y: usize, z: usize| self.sums[(x * m + y) * m + z] as i64;
        let v = s(hi[0], hi[1], hi[2]) - s(lo[0], hi[1], hi[2]) - s(hi[0], lo[1], hi[2]) - s(hi[0], hi[1], lo[2])
            + s(lo[0], lo[1], hi[2])
            + s(lo[0], hi[1], lo[2])
            + s(hi[0], lo[1], lo[2])
            - s(lo[0], lo[1], lo[2]);
        v as u32
    }
}

/// Deletes a random axis-aligned box holding a `ratio_range` fraction of the
/// occupied voxels. Box extents are uniform in `[size/8, size/2]` per axis and
/// the corner is uniform over positions keeping the box inside the grid.
pub fn crop_cuboid(grid: &VoxelGrid, ratio_range: (f64, f64), seed: u64) -> Result<(VoxelGrid, CropSpec)> {
    check_range(ratio_range)?;
    let binary = grid.binarize(0.5);
    let total = binary.occupied_count();
    if total == 0 {
        return Err(invalid("cannot crop an empty grid"));
    }
    let n = binary.size();
    let (emin, emax) = ((n / 8).max(1), (n / 2).max(1));
    let counts = Counts::new(&binary);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..CUBOID_ATTEMPTS {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        for a in 0..3 {
            let e = rng.gen_range(emin..=emax);
            lo[a] = rng.gen_range(0..=n - e);
            hi[a] = lo[a] + e;
        }
        let ratio = counts.boxed(lo, hi) as f64 / total as f64;
        if ratio < ratio_range.0 || ratio > ratio_range.1 {
            continue;
        }
        let mut out = binary.clone();
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    out.set(x, y, z, 0.0);
                }
            }
        }
        let spec = CropSpec {
            kind: CropKind::Cuboid,
            ratio_range: Some(ratio_range),
            seed,
            realized: Some(Realized::Cuboid { lo, hi }),
            realized_ratio: Some(ratio),
        };
        return Ok((out, spec));
    }
    Err(Error::Generation(format!(
        "no cuboid removing {:.3}..{:.3} of {total} occupied voxels found in {CUBOID_ATTEMPTS} attempts",
        ratio_range.0, ratio_range.1
    )))
}

/// Removes every occupied voxel whose center lies strictly on the positive
/// side of the plane through `point` with `normal`. Returns the remaining grid
/// and the number of deleted voxels.
pub fn apply_plane(grid: &VoxelGrid, normal: &Vector3<f64>, point: &Vector3<f64>) -> (VoxelGrid, usize) {
    let mut out = grid.binarize(0.5);
    let offset = normal.dot(point);
    let mut deleted = 0;
    for [x, y, z] in out.occupied_voxels() {
        let c = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
        if normal.dot(&c) > offset {
            out.set(x, y, z, 0.0);
            deleted += 1;
        }
    }
    (out, deleted)
}

/// Cuts along a random plane through a random occupied voxel with a uniformly
/// distributed normal. More than half of the shape may be removed.
pub fn crop_plane(grid: &VoxelGrid, seed: u64) -> Result<(VoxelGrid, CropSpec)> {
    crop_plane_in(grid, None, seed)
}

/// Plane cut, optionally resampled until the deleted fraction lies in `ratio_range`.
pub fn crop_plane_in(grid: &VoxelGrid, ratio_range: Option<(f64, f64)>, seed: u64) -> Result<(VoxelGrid, CropSpec)> {
    if let Some(r) = ratio_range {
        check_range(r)?;
    }
    let occupied = grid.binarize(0.5).occupied_voxels();
    let total = occupied.len();
    if total == 0 {
        return Err(invalid("cannot crop an empty grid"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..PLANE_ATTEMPTS {
        let [x, y, z] = occupied[rng.gen_range(0..total)];
        let point = Vector3::new(x as f64 + 0.5, y as f64 + 0.5, z as f64 + 0.5);
        let g = Vector3::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        let norm = g.norm();
        if norm < 1e-12 {
            continue;
        }
        let normal = g / norm;
        let (out, deleted) = apply_plane(grid, &normal, &point);
        let ratio = deleted as f64 / total as f64;
        if deleted == 0 || deleted == total {
            continue;
        }
        if ratio_range.is_some_and(|(lo, hi)| ratio < lo || ratio > hi) {
            continue;
        }
        let spec = CropSpec {
            kind: CropKind::Plane,
            ratio_range,
            seed,
            realized: Some(Realized::Plane {
                normal: [normal.x, normal.y, normal.z],
                offset: normal.dot(&point),
            }),
            realized_ratio: Some(ratio),
        };
        return Ok((out, spec));
    }
    Err(Error::Generation(format!("no usable cutting plane found in {PLANE_ATTEMPTS} attempts")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{generate_shape, ShapeCategory};
    use proptest::prelude::*;

    fn solid_cube(n: usize, lo: usize, hi: usize) -> VoxelGrid {
        let mut g = VoxelGrid::empty(n);
        for x in lo..hi {
            for y in lo..hi {
                for z in lo..hi {
                    g.set(x, y, z, 1.0);
                }
            }
        }
        g
    }

    #[test]
    fn cuboid_ratio_in_range() {
        let g = solid_cube(32, 4, 28);
        for seed in 0..10 {
            let (p, spec) = crop_cuboid(&g, (0.1, 0.3), seed).unwrap();
            let removed = 1.0 - p.occupied_count() as f64 / g.occupied_count() as f64;
            assert!((0.1..=0.3).contains(&removed), "seed {seed}: {removed}");
            assert!((spec.realized_ratio.unwrap() - removed).abs() < 1e-12);
            assert!(p.is_subset_of(&g));
        }
    }

    #[test]
    fn cuboid_deterministic() {
        let g = generate_shape(ShapeCategory::Chair, 32, 3).unwrap();
        let a = crop_cuboid(&g, (0.1, 0.3), 7).unwrap();
        let b = crop_cuboid(&g, (0.1, 0.3), 7).unwrap();
        assert_eq!(a, b);
        let c = CropSpec::cuboid((0.1, 0.3), 7).unwrap().apply(&g).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn infeasible_cuboid_fails() {
        let g = VoxelGrid::from_voxels(16, &[[3, 3, 3], [12, 12, 12]]).unwrap();
        assert!(matches!(crop_cuboid(&g, (0.99, 0.999), 0), Err(Error::Generation(_))));
        assert!(crop_cuboid(&g, (0.3, 0.2), 0).is_err());
        assert!(crop_cuboid(&VoxelGrid::empty(16), (0.1, 0.3), 0).is_err());
    }

    #[test]
    fn box_counts_match_direct_count() {
        let g = generate_shape(ShapeCategory::Table, 32, 1).unwrap();
        let c = Counts::new(&g);
        let (lo, hi) = ([3, 7, 2], [20, 30, 17]);
        let mut direct = 0;
        for x in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for z in lo[2]..hi[2] {
                    direct += g.is_occupied(x, y, z) as u32;
                }
            }
        }
        assert_eq!(c.boxed(lo, hi), direct);
    }

    #[test]
    fn axis_plane_halves_symmetric_shape() {
        let g = solid_cube(32, 4, 28);
        let (p, deleted) = apply_plane(&g, &Vector3::x(), &Vector3::repeat(16.0));
        let frac = deleted as f64 / g.occupied_count() as f64;
        assert!((frac - 0.5).abs() <= 0.05);
        assert_eq!(p.occupied_count() + deleted, g.occupied_count());
    }

    #[test]
    fn plane_crop_deterministic_and_nondegenerate() {
        let g = generate_shape(ShapeCategory::Sofa, 32, 2).unwrap();
        let mut above_half = false;
        for seed in 0..20 {
            let (p, spec) = crop_plane(&g, seed).unwrap();
            assert_eq!((p.clone(), spec.clone()), crop_plane(&g, seed).unwrap());
            let r = spec.realized_ratio.unwrap();
            assert!(r > 0.0 && r < 1.0);
            above_half |= r > 0.5;
            let Some(Realized::Plane { normal, .. }) = spec.realized else { panic!() };
            assert!((Vector3::from(normal).norm() - 1.0).abs() < 1e-12);
        }
        assert!(above_half, "plane cuts should sometimes remove most of the shape");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn crops_are_subsets(seed in 0u64..1000, cat in 0usize..5) {
            let g = generate_shape(ShapeCategory::ALL[cat], 32, seed).unwrap();
            if let Ok((p, _)) = crop_cuboid(&g, (0.05, 0.4), seed) {
                prop_assert!(p.is_subset_of(&g));
            }
            let (p, _) = crop_plane(&g, seed).unwrap();
            prop_assert!(p.is_subset_of(&g));
        }
    }
}
