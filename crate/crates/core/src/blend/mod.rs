//! Deformation and blending of retrieved patches over subvolumes, and
//! assembly of subvolumes into the completed shape.
//!
//! Within a subvolume `V` each candidate slot `m` holds a codebook patch
//! `r_m`, a rigid transform `T_m` and block-constant weights `ω_m`. The
//! blended volume is the partition of unity
//!
//! ```text
//! V[x] = Σ_m ω_m[x] T_m(r_m)[x] / Σ_m ω_m[x]
//! ```
//!
//! where a slot's weight is zero outside its patch window. Voxels no slot
//! covers fall back to the upsampled coarse shape.

mod operator;
mod optimize;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::registration::RigidTransform;
use crate::retrieval::RetrievalSet;
use crate::voxelgrid::VoxelGrid;

pub use operator::{blend_eval, boundary_discontinuity, loss_rec, loss_smooth, Operator};
pub use optimize::{optimize_subvolume, SubvolumeTargets};

pub const DEFAULT_M: usize = 400;
pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_S_BLEND: usize = 8;
pub const DEFAULT_OPT_ITERS: usize = 100;
pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_RESTARTS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Keep the retrieval poses; no transform refinement.
    pub no_deform: bool,
    /// Paste the best patch per location with unit weights.
    pub no_blend: bool,
    /// Drop the smoothness term.
    pub no_smooth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlendParams {
    #[serde(rename = "M")]
    pub m: usize,
    pub alpha: f64,
    pub s_blend: usize,
    pub opt_iters: usize,
    pub restarts: usize,
    pub lr: f64,
    pub seed: u64,
    pub ablations: Ablations,
}

impl Default for BlendParams {
    fn default() -> Self {
        Self {
            m: DEFAULT_M,
            alpha: DEFAULT_ALPHA,
            s_blend: DEFAULT_S_BLEND,
            opt_iters: DEFAULT_OPT_ITERS,
            restarts: DEFAULT_RESTARTS,
            lr: DEFAULT_LR,
            seed: 0,
            ablations: Ablations::default(),
        }
    }
}

impl BlendParams {
    pub fn validate(&self, s_subv: usize) -> Result<()> {
        if self.m == 0 {
            return Err(invalid("M must be at least 1"));
        }
        if self.s_blend == 0 || s_subv % self.s_blend != 0 {
            return Err(invalid(format!("s_blend {} must divide s_subv {s_subv}", self.s_blend)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be finite and non-negative, got {}", self.alpha)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("lr must be positive, got {}", self.lr)));
        }
        if self.restarts == 0 {
            return Err(invalid("restarts must be at least 1"));
        }
        Ok(())
    }

    /// Smoothness weight after ablations.
    pub fn effective_alpha(&self) -> f64 {
        if self.ablations.no_smooth {
            0.0
        } else {
            self.alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSlot {
    pub patch_id: usize,
    /// Position in the retrieval list at this location.
    pub rank: usize,
    /// Retrieval location in shape coordinates.
    pub location: [usize; 3],
    /// Patch corner relative to the subvolume corner.
    pub placement: [usize; 3],
    pub transform: RigidTransform,
    /// Non-negative weight per `s_blend` block of the subvolume, x-major.
    pub weight_blocks: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub rec: f64,
    pub smooth: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlendState {
    pub subvolume_corner: [usize; 3],
    pub s_subv: usize,
    pub s_blend: usize,
    pub alpha: f64,
    pub slots: Vec<CandidateSlot>,
    pub losses: Losses,
}

impl BlendState {
    pub fn blocks_per_axis(&self) -> usize {
        self.s_subv / self.s_blend
    }
}

/// Slots for the subvolume at `corner`: every candidate whose patch window
/// lies inside the subvolume, sorted by retrieval rank and then location, cut
/// to the first `M`. Under `no_blend` only each location's best candidate is
/// kept, with unit weight. An empty result means the subvolume has no
/// candidates and should copy the coarse shape.
pub fn select_candidates(
    retrievals: &[RetrievalSet],
    corner: [usize; 3],
    s_subv: usize,
    s_patch: usize,
    params: &BlendParams,
) -> Vec<CandidateSlot> {
    let nb = (s_subv / params.s_blend.max(1)).max(1);
    let inside = |l: &[usize; 3]| (0..3).all(|a| l[a] >= corner[a] && l[a] + s_patch <= corner[a] + s_subv);
    let max_rank = if params.ablations.no_blend { 1 } else { usize::MAX };
    let mut slots: Vec<CandidateSlot> = retrievals
        .iter()
        .filter(|set| inside(&set.location))
        .flat_map(|set| {
            set.candidates.iter().take(max_rank).enumerate().map(move |(rank, c)| CandidateSlot {
                patch_id: c.patch_id,
                rank,
                location: set.location,
                placement: [0, 1, 2].map(|a| set.location[a] - corner[a]),
                transform: c.transform_hint,
                weight_blocks: vec![1.0; nb * nb * nb],
            })
        })
        .collect();
    slots.sort_by_key(|s| (s.rank, s.location));
    slots.truncate(params.m);
    slots
}

/// Corners along one axis at `stride`, with the last window clamped to end
/// at the grid border.
pub fn subvolume_axis_corners(size: usize, s_subv: usize, stride: usize) -> Result<Vec<usize>> {
    if s_subv == 0 || s_subv > size {
        return Err(invalid(format!("subvolume extent {s_subv} does not fit a {size}³ grid")));
    }
    if stride == 0 || stride > s_subv {
        return Err(invalid(format!(
            "subvolume stride {stride} leaves gaps between {s_subv}-voxel subvolumes"
        )));
    }
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&c| c + s_subv <= size).collect();
    if *out.last().unwrap() + s_subv < size {
        out.push(size - s_subv);
    }
    Ok(out)
}

/// All subvolume corners in x, then y, then z order.
pub fn subvolume_corners(size: usize, s_subv: usize, stride: usize) -> Result<Vec<[usize; 3]>> {
    let axis = subvolume_axis_corners(size, s_subv, stride)?;
    let mut out = Vec::with_capacity(axis.len().pow(3));
    for &x in &axis {
        for &y in &axis {
            for &z in &axis {
                out.push([x, y, z]);
            }
        }
    }
    Ok(out)
}

/// Averages overlapping subvolumes into a scalar grid of `size³`.
///
/// Each entry is a corner and `s_subv³` values in x-major order. Every voxel
/// must be covered at least once.
pub fn assemble(size: usize, s_subv: usize, subvolumes: &[([usize; 3], Vec<f32>)]) -> Result<VoxelGrid> {
    let mut sum = vec![0.0f64; size * size * size];
    let mut count = vec![0u32; size * size * size];
    for (corner, values) in subvolumes {
        if values.len() != s_subv.pow(3) || (0..3).any(|a| corner[a] + s_subv > size) {
            return Err(invalid(format!("subvolume at {corner:?} does not fit the {size}³ grid")));
        }
        for x in 0..s_subv {
            for y in 0..s_subv {
                let src = (x * s_subv + y) * s_subv;
                let dst = ((corner[0] + x) * size + corner[1] + y) * size + corner[2];
                for z in 0..s_subv {
                    sum[dst + z] += values[src + z] as f64;
                    count[dst + z] += 1;
                }
            }
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        let n = size;
        return Err(invalid(format!(
            "subvolumes leave voxel ({}, {}, {}) uncovered",
            i / (n * n),
            (i / n) % n,
            i % n
        )));
    }
    let data = sum.iter().zip(&count).map(|(&s, &c)| (s / c as f64) as f32).collect();
    VoxelGrid::from_values(size, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::retrieval::Candidate;

    fn set(location: [usize; 3], ids: &[usize]) -> RetrievalSet {
        RetrievalSet {
            location,
            candidates: ids
                .iter()
                .map(|&patch_id| Candidate {
                    patch_id,
                    transform_hint: RigidTransform::identity(),
                    score: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn slots_sorted_by_rank_then_location() {
        let sets = vec![set([2, 0, 0], &[10, 11, 12]), set([0, 0, 0], &[20, 21, 22])];
        let params = BlendParams {
            s_blend: 4,
            ..Default::default()
        };
        let slots = select_candidates(&sets, [0, 0, 0], 16, 6, &params);
        let ids: Vec<_> = slots.iter().map(|s| s.patch_id).collect();
        assert_eq!(ids, [20, 10, 21, 11, 22, 12]);
        assert!(slots.iter().all(|s| s.weight_blocks == vec![1.0; 64]));
        let first4 = select_candidates(&sets, [0, 0, 0], 16, 6, &BlendParams { m: 4, ..params.clone() });
        assert_eq!(first4.iter().map(|s| s.patch_id).collect::<Vec<_>>(), [20, 10, 21, 11]);
        // window at 12 would stick out of a subvolume at 0
        assert!(select_candidates(&[set([12, 0, 0], &[1])], [0, 0, 0], 16, 6, &params).is_empty());
        let moved = select_candidates(&[set([12, 2, 4], &[1])], [10, 0, 0], 16, 6, &params);
        assert_eq!(moved[0].placement, [2, 2, 4]);
    }

    #[test]
    fn no_blend_keeps_best_per_location() {
        let sets = vec![set([2, 0, 0], &[10, 11]), set([0, 0, 0], &[20, 21])];
        let params = BlendParams {
            s_blend: 4,
            ablations: Ablations {
                no_blend: true,
                ..Default::default()
            },
            ..Default::default()
        };
        let ids: Vec<_> = select_candidates(&sets, [0, 0, 0], 16, 6, &params).iter().map(|s| s.patch_id).collect();
        assert_eq!(ids, [20, 10]);
    }

    #[test]
    fn corner_enumeration() {
        assert_eq!(subvolume_axis_corners(128, 40, 32).unwrap(), [0, 32, 64, 88]);
        assert_eq!(subvolume_axis_corners(32, 16, 12).unwrap(), [0, 12, 16]);
        assert_eq!(subvolume_axis_corners(40, 40, 32).unwrap(), [0]);
        assert!(subvolume_axis_corners(32, 16, 20).is_err());
        assert!(subvolume_axis_corners(16, 32, 8).is_err());
        assert_eq!(subvolume_corners(128, 40, 32).unwrap().len(), 64);
    }

    #[test]
    fn assembly_averages_overlaps() {
        let ones = subvolume_corners(32, 16, 12)
            .unwrap()
            .into_iter()
            .map(|c| (c, vec![1.0; 16 * 16 * 16]))
            .collect::<Vec<_>>();
        assert_eq!(assemble(32, 16, &ones).unwrap(), VoxelGrid::full(32));

        let parts: Vec<_> = subvolume_corners(3, 2, 1)
            .unwrap()
            .into_iter()
            .map(|c| (c, vec![if c == [1, 0, 0] { 1.0 } else { 0.0 }; 8]))
            .collect();
        let g = assemble(3, 2, &parts).unwrap();
        // voxel (1,0,0) is covered by a 0 and a 1 subvolume
        assert_eq!(g.get(1, 0, 0), 0.5);
        assert_eq!(g.get(2, 0, 0), 1.0);

        let gap = vec![([0, 0, 0], vec![1.0; 8])];
        assert!(assemble(3, 2, &gap).is_err());
    }
}
