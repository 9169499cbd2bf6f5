use super::{BlendState, Losses};
use crate::error::{invalid, Result};
use crate::registration::{rasterize_transformed, RigidTransform};
use crate::retrieval::Codebook;
use crate::voxelgrid::{Patch, VoxelGrid};
use nalgebra::Vector3;

/// One slot's transformed patch as a sparse footprint inside the subvolume.
#[derive(Debug, Clone)]
struct Footprint {
    /// Subvolume voxel index per window voxel.
    voxel: Vec<u32>,
    /// Index of that voxel's weight block in the flat active-parameter vector.
    param: Vec<u32>,
    /// Transformed occupancy, 0 or 1.
    value: Vec<f32>,
}

/// Blending operator for a fixed set of slots, with the transformed patches
/// rasterized once.
///
/// Only the weight blocks a slot's window touches affect the blend. These
/// active blocks of all slots form one flat parameter vector, which the
/// `*_flat` methods take; the other methods take full per-slot block vectors.
#[derive(Debug, Clone)]
pub struct Operator {
    s: usize,
    s_blend: usize,
    extent: usize,
    footprints: Vec<Footprint>,
    /// Block ids per slot, flattened; slot `m` owns `offsets[m]..offsets[m + 1]`.
    active: Vec<u32>,
    offsets: Vec<usize>,
    boundary: Vec<bool>,
}

/// Voxels next to an interior face between two weight blocks.
fn boundary_mask(s: usize, s_blend: usize) -> Vec<bool> {
    let on = |c: usize| (c % s_blend == s_blend - 1 && c + 1 < s) || (c % s_blend == 0 && c > 0);
    let mut mask = vec![false; s * s * s];
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                mask[(x * s + y) * s + z] = on(x) || on(y) || on(z);
            }
        }
    }
    mask
}

impl Operator {
    pub fn new(state: &BlendState, codebook: &Codebook) -> Result<Self> {
        let (s, sb) = (state.s_subv, state.s_blend);
        if sb == 0 || s % sb != 0 {
            return Err(invalid(format!("s_blend {sb} must divide s_subv {s}")));
        }
        let extent = codebook.extent();
        let nb = s / sb;
        let mut op = Self {
            s,
            s_blend: sb,
            extent,
            footprints: Vec::with_capacity(state.slots.len()),
            active: Vec::new(),
            offsets: vec![0],
            boundary: boundary_mask(s, sb),
        };
        for slot in &state.slots {
            if (0..3).any(|a| slot.placement[a] + extent > s) {
                return Err(invalid(format!("slot at {:?} sticks out of the subvolume", slot.placement)));
            }
            if slot.weight_blocks.len() != nb.pow(3) {
                return Err(invalid(format!("slot weights need {} blocks", nb.pow(3))));
            }
            let patch = codebook
                .get(slot.patch_id)
                .ok_or_else(|| invalid(format!("patch id {} outside the codebook", slot.patch_id)))?;
            let base = op.active.len();
            let blocks = op.window_blocks(slot.placement);
            op.active.extend(&blocks);
            op.offsets.push(op.active.len());
            let fp = op.footprint(patch, &slot.transform, slot.placement, base);
            op.footprints.push(fp);
        }
        Ok(op)
    }

    /// Sorted ids of the blocks a window at `placement` overlaps.
    fn window_blocks(&self, placement: [usize; 3]) -> Vec<u32> {
        let (sb, nb) = (self.s_blend, self.s / self.s_blend);
        let range = |a: usize| placement[a] / sb..=(placement[a] + self.extent - 1) / sb;
        let mut out = Vec::new();
        for bx in range(0) {
            for by in range(1) {
                for bz in range(2) {
                    out.push(((bx * nb + by) * nb + bz) as u32);
                }
            }
        }
        out
    }

    fn footprint(&self, patch: &Patch, t: &RigidTransform, placement: [usize; 3], base: usize) -> Footprint {
        let e = self.extent;
        let raster = rasterize_transformed(patch, t, e, Vector3::repeat(e as f64 / 2.0));
        let (s, sb) = (self.s, self.s_blend);
        let nb = s / sb;
        let first = placement.map(|c| c / sb);
        // blocks touched per axis, matching the loop order of window_blocks
        let span = |a: usize| (placement[a] + e - 1) / sb - first[a] + 1;
        let (ny, nz) = (span(1), span(2));
        let n = e * e * e;
        let mut fp = Footprint {
            voxel: Vec::with_capacity(n),
            param: Vec::with_capacity(n),
            value: raster,
        };
        for i in 0..e {
            for j in 0..e {
                for k in 0..e {
                    let (x, y, z) = (placement[0] + i, placement[1] + j, placement[2] + k);
                    fp.voxel.push(((x * s + y) * s + z) as u32);
                    let local = ((x / sb - first[0]) * ny + y / sb - first[1]) * nz + z / sb - first[2];
                    debug_assert_eq!(self.active[base + local], (((x / sb) * nb + y / sb) * nb + z / sb) as u32);
                    fp.param.push((base + local) as u32);
                }
            }
        }
        fp
    }

    pub fn len(&self) -> usize {
        self.footprints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.footprints.is_empty()
    }

    /// Replaces slot `m`'s transform.
    pub fn set_transform(&mut self, m: usize, patch: &Patch, t: &RigidTransform, placement: [usize; 3]) {
        self.footprints[m] = self.footprint(patch, t, placement, self.offsets[m]);
    }

    /// Number of active weight parameters.
    pub fn n_params(&self) -> usize {
        self.active.len()
    }

    /// Active block weights gathered from full per-slot block vectors.
    pub fn compact(&self, weights: &[Vec<f64>]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.active.len());
        for (m, w) in weights.iter().enumerate() {
            out.extend(self.active[self.offsets[m]..self.offsets[m + 1]].iter().map(|&b| w[b as usize]));
        }
        out
    }

    /// Writes active weights back into full per-slot block vectors.
    pub fn scatter(&self, flat: &[f64], weights: &mut [Vec<f64>]) {
        for (m, w) in weights.iter_mut().enumerate() {
            for i in self.offsets[m]..self.offsets[m + 1] {
                w[self.active[i] as usize] = flat[i];
            }
        }
    }

    /// Flat parameter range of slot `m`.
    pub fn slot_params(&self, m: usize) -> std::ops::Range<usize> {
        self.offsets[m]..self.offsets[m + 1]
    }

    /// Transformed occupancy of slot `m` as a full subvolume, zero outside its window.
    pub fn slot_volume(&self, m: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.s.pow(3)];
        let fp = &self.footprints[m];
        for (&v, &a) in fp.voxel.iter().zip(&fp.value) {
            out[v as usize] = a;
        }
        out
    }

    /// Per voxel `Σ ω a` and `ξ = Σ ω`.
    fn accumulate(&self, flat: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.s.pow(3);
        let (mut w1, mut xi) = (vec![0.0; n], vec![0.0; n]);
        for fp in &self.footprints {
            for ((&v, &p), &a) in fp.voxel.iter().zip(&fp.param).zip(&fp.value) {
                let omega = flat[p as usize];
                xi[v as usize] += omega;
                if a > 0.5 {
                    w1[v as usize] += omega;
                }
            }
        }
        (w1, xi)
    }

    fn blend_from(w1: &[f64], xi: &[f64], coarse: &[f32]) -> Vec<f64> {
        w1.iter()
            .zip(xi)
            .zip(coarse)
            .map(|((&a, &x), &c)| if x > 0.0 { a / x } else { c as f64 })
            .collect()
    }

    /// Blended subvolume; uncovered voxels copy `coarse`.
    pub fn blend(&self, weights: &[Vec<f64>], coarse: &[f32]) -> Vec<f64> {
        let (w1, xi) = self.accumulate(&self.compact(weights));
        Self::blend_from(&w1, &xi, coarse)
    }

    /// Pairwise disagreement on block boundaries. With binary footprints
    /// `Σ_{m<n} ω_m ω_n |a_m − a_n|` collapses to `W₁·W₀`, the weight on
    /// occupied times the weight on empty.
    fn smooth_from(&self, w1: &[f64], xi: &[f64]) -> f64 {
        let mut total = 0.0;
        for (i, &b) in self.boundary.iter().enumerate() {
            if b {
                total += w1[i] * (xi[i] - w1[i]);
            }
        }
        total
    }

    pub fn losses(&self, weights: &[Vec<f64>], coarse: &[f32], target: &[f32], alpha: f64) -> Losses {
        self.losses_flat(&self.compact(weights), coarse, target, alpha)
    }

    pub fn losses_flat(&self, flat: &[f64], coarse: &[f32], target: &[f32], alpha: f64) -> Losses {
        let (w1, xi) = self.accumulate(flat);
        let v = Self::blend_from(&w1, &xi, coarse);
        let rec = rec_of(&v, target);
        let smooth = self.smooth_from(&w1, &xi);
        Losses {
            rec,
            smooth,
            total: rec + alpha * smooth,
        }
    }

    /// Losses and `∂L/∂ω` per slot and block; zero for blocks outside a slot's window.
    pub fn losses_and_gradient(
        &self,
        weights: &[Vec<f64>],
        coarse: &[f32],
        target: &[f32],
        alpha: f64,
    ) -> (Losses, Vec<Vec<f64>>) {
        let (l, flat) = self.losses_and_gradient_flat(&self.compact(weights), coarse, target, alpha);
        let mut g: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        self.scatter(&flat, &mut g);
        (l, g)
    }

    /// Losses and `∂L/∂ω` over the flat active parameters.
    pub fn losses_and_gradient_flat(&self, flat: &[f64], coarse: &[f32], target: &[f32], alpha: f64) -> (Losses, Vec<f64>) {
        let (w1, xi) = self.accumulate(flat);
        let v = Self::blend_from(&w1, &xi, coarse);
        let rec = rec_of(&v, target);
        let smooth = self.smooth_from(&w1, &xi);
        // ∂L_rec/∂V, zero at an exact fit where the root is not differentiable
        let d_v: Vec<f64> = if rec > 0.0 {
            v.iter().zip(target).map(|(&x, &g)| (x - g as f64) / rec).collect()
        } else {
            vec![0.0; v.len()]
        };
        let mut grads = vec![0.0; flat.len()];
        for fp in &self.footprints {
            for ((&vi, &p), &a) in fp.voxel.iter().zip(&fp.param).zip(&fp.value) {
                let i = vi as usize;
                let a = a as f64;
                // ∂V/∂ω_m = (a_m − V)/ξ
                let mut d = d_v[i] * (a - v[i]) / xi[i];
                if self.boundary[i] {
                    d += alpha * if a > 0.5 { xi[i] - w1[i] } else { w1[i] };
                }
                grads[p as usize] += d;
            }
        }
        (
            Losses {
                rec,
                smooth,
                total: rec + alpha * smooth,
            },
            grads,
        )
    }
}

fn rec_of(v: &[f64], target: &[f32]) -> f64 {
    v.iter()
        .zip(target)
        .map(|(&x, &g)| (x - g as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn weights_of(state: &BlendState) -> Vec<Vec<f64>> {
    state.slots.iter().map(|s| s.weight_blocks.clone()).collect()
}

/// Blended `s_subv³` volume for `state`. `coarse` is the upsampled coarse
/// shape over the same subvolume and fills voxels no slot covers.
pub fn blend_eval(state: &BlendState, codebook: &Codebook, coarse: &VoxelGrid) -> Result<VoxelGrid> {
    if coarse.size() != state.s_subv {
        return Err(invalid(format!("coarse window is {}³, expected {}³", coarse.size(), state.s_subv)));
    }
    let op = Operator::new(state, codebook)?;
    let v = op.blend(&weights_of(state), coarse.values());
    VoxelGrid::from_values(state.s_subv, v.into_iter().map(|x| x as f32).collect())
}

/// Root of the summed squared voxel differences.
pub fn loss_rec(v: &VoxelGrid, v_gt: &VoxelGrid) -> Result<f64> {
    if v.size() != v_gt.size() {
        return Err(invalid(format!("volume sizes differ: {} vs {}", v.size(), v_gt.size())));
    }
    let v: Vec<f64> = v.values().iter().map(|&x| x as f64).collect();
    Ok(rec_of(&v, v_gt.values()))
}

/// Smoothness penalty of `state` on block-boundary voxels.
pub fn loss_smooth(state: &BlendState, codebook: &Codebook) -> Result<f64> {
    let op = Operator::new(state, codebook)?;
    let (w1, xi) = op.accumulate(&op.compact(&weights_of(state)));
    Ok(op.smooth_from(&w1, &xi))
}

/// Mean absolute jump across interior faces between `s_blend` blocks of a
/// cubic volume of edge `s`.
pub fn boundary_discontinuity(values: &[f32], s: usize, s_blend: usize) -> f64 {
    let (mut total, mut count) = (0.0, 0usize);
    let at = |x: usize, y: usize, z: usize| values[(x * s + y) * s + z] as f64;
    for x in 0..s {
        for y in 0..s {
            for z in 0..s {
                let here = at(x, y, z);
                for (a, c) in [x, y, z].into_iter().enumerate() {
                    if (c + 1) % s_blend != 0 || c + 1 >= s {
                        continue;
                    }
                    let next = match a {
                        0 => at(x + 1, y, z),
                        1 => at(x, y + 1, z),
                        _ => at(x, y, z + 1),
                    };
                    total += (here - next).abs();
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
