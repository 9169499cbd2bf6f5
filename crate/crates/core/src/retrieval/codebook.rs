use crate::coarse::COARSE_FACTOR;
use crate::error::{invalid, Error, Result};
use crate::voxelgrid::{downsample, sample_patches, upsample_nearest, Patch, VoxelGrid};

/// Non-empty detailed patches of the partial input. A patch's id is its
/// position in corner order.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    extent: usize,
    stride: usize,
    patches: Vec<Patch>,
}

impl Codebook {
    pub fn from_patches(extent: usize, stride: usize, patches: Vec<Patch>) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::EmptyCodebook);
        }
        if let Some(p) = patches.iter().find(|p| p.extent() != extent) {
            return Err(invalid(format!("codebook patch extent {} differs from {extent}", p.extent())));
        }
        Ok(Self {
            extent,
            stride,
            patches,
        })
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&Patch> {
        self.patches.get(id)
    }

    pub fn patches(&self) -> &[Patch] {
        &self.patches
    }
}

impl std::ops::Index<usize> for Codebook {
    type Output = Patch;

    fn index(&self, id: usize) -> &Patch {
        &self.patches[id]
    }
}

pub fn build_codebook(partial: &VoxelGrid, extent: usize, stride: usize) -> Result<Codebook> {
    let patches = sample_patches(&partial.binarize(0.5), extent, stride, false)?;
    Codebook::from_patches(extent, stride, patches)
}

/// A coarse query window at detailed resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryWindow {
    pub location: [usize; 3],
    pub coarse: Patch,
}

/// Every window of `upsample(coarse)` at `stride` that contains occupied
/// voxels, in corner order.
pub fn coarse_queries(coarse: &VoxelGrid, extent: usize, stride: usize) -> Result<Vec<QueryWindow>> {
    let up = upsample_nearest(&coarse.binarize(0.5), COARSE_FACTOR)?;
    Ok(sample_patches(&up, extent, stride, false)?
        .into_iter()
        .map(|p| QueryWindow {
            location: p.corner(),
            coarse: p,
        })
        .collect())
}

/// Detailed guide for retrieval and blending targets.
///
/// A detailed voxel counts as observed when its coarse cell holds any voxel
/// of the partial input. Observed voxels copy the partial input; the rest copy
/// the upsampled coarse shape.
pub fn guide_grid(coarse: &VoxelGrid, partial: &VoxelGrid) -> Result<VoxelGrid> {
    let partial = partial.binarize(0.5);
    if coarse.size() * COARSE_FACTOR != partial.size() {
        return Err(invalid(format!(
            "coarse grid {}³ does not match a {}³ shape (expected {}³)",
            coarse.size(),
            partial.size(),
            partial.size() / COARSE_FACTOR
        )));
    }
    let observed = upsample_nearest(&downsample(&partial, COARSE_FACTOR)?, COARSE_FACTOR)?;
    let up = upsample_nearest(&coarse.binarize(0.5), COARSE_FACTOR)?;
    let data = partial
        .values()
        .iter()
        .zip(observed.values())
        .zip(up.values())
        .map(|((&s, &o), &c)| if o > 0.0 { s } else { c })
        .collect();
    VoxelGrid::from_values(partial.size(), data)
}
