//! Coarse completion, retrieval, blending and assembly in one call.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::blend::{
    assemble, blend_eval, boundary_discontinuity, optimize_subvolume, select_candidates, subvolume_corners,
    BlendState, Losses, Operator, SubvolumeTargets,
};
use crate::coarse::COARSE_FACTOR;
use crate::config::{PipelineConfig, RetrievalMode};
use crate::error::{invalid, Error, Result};
use crate::retrieval::{
    build_codebook, guide_grid, retrieve_exact, retrieve_knn, Codebook, Embedder, EmbedderKind, Retrieval,
};
use crate::voxelgrid::{upsample_nearest, VoxelGrid};

/// Wall-clock seconds per stage. Not deterministic.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTimes {
    pub coarse: f64,
    pub codebook: f64,
    pub retrieval: f64,
    pub blend: f64,
    pub assemble: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubvolumeReport {
    pub corner: [usize; 3],
    pub slots: usize,
    /// No candidate reached this subvolume; it copies the coarse shape.
    pub empty: bool,
    pub initial: Losses,
    #[serde(rename = "final")]
    pub final_: Losses,
    /// Mean jump across interior block faces of the blended subvolume.
    pub discontinuity: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Diagnostics {
    pub codebook_size: usize,
    pub retrieval_sets: usize,
    pub retrieval_truncated: bool,
    pub subvolumes: Vec<SubvolumeReport>,
    pub mean_discontinuity: f64,
    pub seconds: StageTimes,
    /// Optimized states, kept only on request.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub states: Option<Vec<BlendState>>,
}

#[derive(Debug, Clone)]
pub struct Completion {
    pub coarse: VoxelGrid,
    /// Assembled blend in [0, 1].
    pub scalar: VoxelGrid,
    pub binary: VoxelGrid,
    pub diagnostics: Diagnostics,
}

/// What the pipeline may use besides the partial input.
#[derive(Debug, Clone, Copy, Default)]
pub struct Inputs<'a> {
    pub gt: Option<&'a VoxelGrid>,
    pub embedders: Option<(&'a Embedder, &'a Embedder)>,
    pub keep_states: bool,
}

fn window(grid: &VoxelGrid, corner: [usize; 3], s: usize) -> Result<Vec<f32>> {
    grid.window(corner, s)
}

/// Completes `partial` and returns the assembled shape with diagnostics.
pub fn complete(partial: &VoxelGrid, config: &PipelineConfig, inputs: Inputs<'_>) -> Result<Completion> {
    config.validate()?;
    if partial.size() != config.s_shape {
        return Err(invalid(format!(
            "input grid is {}³ but the config expects s_shape = {}",
            partial.size(),
            config.s_shape
        )));
    }
    let partial = partial.binarize(0.5);
    if partial.is_empty() {
        return Err(invalid("input grid has no occupied voxels"));
    }
    let mut times = StageTimes::default();

    let t = Instant::now();
    let coarse = config.coarse.provide(&partial, inputs.gt)?;
    if coarse.size() * COARSE_FACTOR != partial.size() {
        return Err(invalid("coarse grid does not match the input size"));
    }
    times.coarse = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let codebook = build_codebook(&partial, config.s_patch, config.gamma_patch)?;
    times.codebook = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let retrieval = retrieve(&coarse, &partial, &codebook, config, inputs)?;
    times.retrieval = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let guide = guide_grid(&coarse, &partial)?;
    let coarse_up = upsample_nearest(&coarse.binarize(0.5), COARSE_FACTOR)?;
    let params = config.blend_params();
    let s = config.s_subv;
    let corners = subvolume_corners(config.s_shape, s, config.gamma_subv)?;
    let results = corners
        .par_iter()
        .map(|&corner| -> Result<(Vec<f32>, SubvolumeReport, Option<BlendState>)> {
            let targets = SubvolumeTargets {
                coarse_up: window(&coarse_up, corner, s)?,
                target: window(&guide, corner, s)?,
            };
            let slots = select_candidates(&retrieval.sets, corner, s, config.s_patch, &params);
            if slots.is_empty() {
                let values = targets.coarse_up.clone();
                let report = SubvolumeReport {
                    corner,
                    slots: 0,
                    empty: true,
                    initial: Losses::default(),
                    final_: Losses::default(),
                    discontinuity: boundary_discontinuity(&values, s, config.s_blend),
                };
                return Ok((values, report, None));
            }
            let state = BlendState {
                subvolume_corner: corner,
                s_subv: s,
                s_blend: config.s_blend,
                alpha: params.effective_alpha(),
                slots,
                losses: Losses::default(),
            };
            let op = Operator::new(&state, &codebook)?;
            let w: Vec<Vec<f64>> = state.slots.iter().map(|s| s.weight_blocks.clone()).collect();
            let initial = op.losses(&w, &targets.coarse_up, &targets.target, params.effective_alpha());
            let state = optimize_subvolume(state, &codebook, &targets, &params)?;
            let coarse_window = VoxelGrid::from_values(s, targets.coarse_up.clone())?;
            let values = blend_eval(&state, &codebook, &coarse_window)?.into_values();
            let report = SubvolumeReport {
                corner,
                slots: state.slots.len(),
                empty: false,
                initial,
                final_: state.losses,
                discontinuity: boundary_discontinuity(&values, s, config.s_blend),
            };
            Ok((values, report, inputs.keep_states.then_some(state)))
        })
        .collect::<Result<Vec<_>>>()?;
    times.blend = t.elapsed().as_secs_f64();

    let t = Instant::now();
    let mut parts = Vec::with_capacity(results.len());
    let mut reports = Vec::with_capacity(results.len());
    let mut states = Vec::new();
    for (corner, (values, report, state)) in corners.iter().zip(results) {
        parts.push((*corner, values));
        reports.push(report);
        states.extend(state);
    }
    let scalar = assemble(config.s_shape, s, &parts)?;
    let binary = scalar.binarize(0.5);
    times.assemble = t.elapsed().as_secs_f64();

    let blended: Vec<&SubvolumeReport> = reports.iter().filter(|r| !r.empty).collect();
    let mean_discontinuity = if blended.is_empty() {
        0.0
    } else {
        blended.iter().map(|r| r.discontinuity).sum::<f64>() / blended.len() as f64
    };
    Ok(Completion {
        coarse,
        scalar,
        binary,
        diagnostics: Diagnostics {
            codebook_size: codebook.len(),
            retrieval_sets: retrieval.sets.len(),
            retrieval_truncated: retrieval.truncated,
            subvolumes: reports,
            mean_discontinuity,
            seconds: times,
            states: inputs.keep_states.then_some(states),
        },
    })
}

fn retrieve(
    coarse: &VoxelGrid,
    partial: &VoxelGrid,
    codebook: &Codebook,
    config: &PipelineConfig,
    inputs: Inputs<'_>,
) -> Result<Retrieval> {
    match config.retrieval {
        RetrievalMode::Exact => {
            retrieve_exact(coarse, partial, codebook, config.k, config.gamma_patch, &config.exact_options())
        }
        RetrievalMode::Embedding => {
            let (ec, ed) = inputs.embedders.ok_or_else(|| {
                Error::InvalidArgument("embedding retrieval needs trained embedders".into())
            })?;
            if ec.kind() != EmbedderKind::Coarse || ed.kind() != EmbedderKind::Detailed {
                return Err(invalid("embedders must be a coarse and a detailed encoder, in that order"));
            }
            retrieve_knn(coarse, codebook, ec, ed, config.k, config.gamma_patch)
        }
    }
}

/// The coarse-only baseline: the upsampled coarse shape.
pub fn coarse_only(partial: &VoxelGrid, config: &PipelineConfig, gt: Option<&VoxelGrid>) -> Result<VoxelGrid> {
    let coarse = config.coarse.provide(&partial.binarize(0.5), gt)?;
    upsample_nearest(&coarse.binarize(0.5), COARSE_FACTOR)
}
