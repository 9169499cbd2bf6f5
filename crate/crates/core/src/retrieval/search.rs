use std::collections::HashMap;

use nalgebra::{Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codebook::{coarse_queries, guide_grid, Codebook};
use super::embed::{code_distance, Embedder};
use crate::error::{invalid, Result};
use crate::registration::{DistanceOptions, PreparedPatch, RigidTransform};
use crate::voxelgrid::{Patch, VoxelGrid};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub patch_id: usize,
    /// Maps the codebook patch, centered, into the query window, centered.
    pub transform_hint: RigidTransform,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalSet {
    pub location: [usize; 3],
    pub candidates: Vec<Candidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub sets: Vec<RetrievalSet>,
    /// Set when `k` exceeded the codebook size and lists were cut short.
    pub truncated: bool,
}

fn check_k(k: usize, codebook: &Codebook) -> Result<bool> {
    if k == 0 {
        return Err(invalid("K must be at least 1"));
    }
    let truncated = k > codebook.len();
    if truncated {
        log::warn!("K = {k} exceeds the codebook size {}; lists are truncated", codebook.len());
    }
    Ok(truncated)
}

/// K nearest codebook entries in code space for every occupied coarse window.
pub fn retrieve_knn(
    coarse: &VoxelGrid,
    codebook: &Codebook,
    coarse_encoder: &Embedder,
    detailed_encoder: &Embedder,
    k: usize,
    stride: usize,
) -> Result<Retrieval> {
    let truncated = check_k(k, codebook)?;
    let e = codebook.extent();
    if coarse_encoder.extent() != e || detailed_encoder.extent() != e {
        return Err(invalid(format!(
            "embedders are for {}³/{}³ patches but the codebook holds {e}³ patches",
            coarse_encoder.extent(),
            detailed_encoder.extent()
        )));
    }
    if coarse_encoder.code_dim() != detailed_encoder.code_dim() {
        return Err(invalid("coarse and detailed embedders disagree on code_dim"));
    }
    let codes: Vec<Vec<f64>> = codebook
        .patches()
        .par_iter()
        .map(|p| detailed_encoder.encode(p))
        .collect::<Result<_>>()?;
    let queries = coarse_queries(coarse, e, stride)?;
    let sets = queries
        .par_iter()
        .map(|q| {
            let c = coarse_encoder.encode(&q.coarse)?;
            let mut scored: Vec<(f64, usize)> = codes.iter().enumerate().map(|(id, d)| (code_distance(&c, d), id)).collect();
            let keep = k.min(scored.len());
            scored.select_nth_unstable_by(keep - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            scored.truncate(keep);
            scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            Ok(RetrievalSet {
                location: q.location,
                candidates: scored
                    .into_iter()
                    .map(|(score, patch_id)| Candidate {
                        patch_id,
                        transform_hint: RigidTransform::identity(),
                        score,
                    })
                    .collect(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Retrieval { sets, truncated })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExactOptions {
    /// Distinct codebook patterns scored per query, chosen by a pose-invariant
    /// descriptor. `None` scores all of them.
    pub shortlist: Option<usize>,
    /// Candidates whose best axis-aligned pose is worse than the current K-th
    /// score times `1 + slack` are dropped before ICP.
    pub slack: f64,
    pub distance: DistanceOptions,
}

impl Default for ExactOptions {
    fn default() -> Self {
        Self {
            shortlist: Some(64),
            slack: 0.25,
            distance: DistanceOptions::default(),
        }
    }
}

/// A distinct codebook pattern and the ids sharing it.
struct Pattern {
    members: Vec<usize>,
    prepared: PreparedPatch,
    descriptor: [f64; 5],
}

/// K codebook entries closest to the guide content of each occupied coarse
/// window under the pose-invariant distance.
///
/// The query content is the guide grid: the partial input where observed,
/// the upsampled coarse shape elsewhere. Windows whose guide content is empty
/// produce no set.
pub fn retrieve_exact(
    coarse: &VoxelGrid,
    partial: &VoxelGrid,
    codebook: &Codebook,
    k: usize,
    stride: usize,
    opts: &ExactOptions,
) -> Result<Retrieval> {
    let truncated = check_k(k, codebook)?;
    let guide = guide_grid(coarse, partial)?;
    let e = codebook.extent();
    let patterns = distinct_patterns(codebook.patches());

    let mut locations = Vec::new();
    let mut unique: Vec<Patch> = Vec::new();
    let mut seen: HashMap<Vec<u8>, usize> = HashMap::new();
    for q in coarse_queries(coarse, e, stride)? {
        let content = Patch::extract(&guide, q.location, e)?;
        if content.is_empty() {
            continue;
        }
        let slot = *seen.entry(pattern_key(&content)).or_insert_with(|| {
            unique.push(content);
            unique.len() - 1
        });
        locations.push((q.location, slot));
    }

    let ranked: Vec<Vec<Candidate>> = unique
        .par_iter()
        .map(|content| rank_exact(content, &patterns, k, opts))
        .collect();
    let sets = locations
        .into_iter()
        .map(|(location, slot)| RetrievalSet {
            location,
            candidates: ranked[slot].clone(),
        })
        .collect();
    Ok(Retrieval { sets, truncated })
}

/// Exact ranking of codebook patches against one detailed query.
pub fn rank_codebook(query: &Patch, codebook: &Codebook, k: usize, opts: &ExactOptions) -> Result<Vec<Candidate>> {
    if query.is_empty() {
        return Err(invalid("query patch is empty"));
    }
    if query.extent() != codebook.extent() {
        return Err(invalid("query extent differs from the codebook extent"));
    }
    check_k(k, codebook)?;
    Ok(rank_exact(query, &distinct_patterns(codebook.patches()), k, opts))
}

fn rank_exact(query: &Patch, patterns: &[Pattern], k: usize, opts: &ExactOptions) -> Vec<Candidate> {
    let target = PreparedPatch::from_patch(query);
    let qd = descriptor(&target);
    let mut order: Vec<(f64, usize)> = patterns
        .iter()
        .enumerate()
        .map(|(i, p)| (descriptor_distance(&qd, &p.descriptor), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some(n) = opts.shortlist {
        order.truncate(n.max(1));
    }

    // scored patterns ordered by (score, first member)
    let mut scored: Vec<(f64, usize, RigidTransform)> = Vec::new();
    let kth = |scored: &Vec<(f64, usize, RigidTransform)>| {
        let mut count = 0;
        for s in scored {
            count += patterns[s.1].members.len();
            if count >= k {
                return s.0;
            }
        }
        f64::INFINITY
    };
    for &(_, i) in &order {
        let bound = kth(&scored) * (1.0 + opts.slack);
        // a pattern strictly worse than a full K-list by the slack cannot enter it
        let bound = if bound.is_finite() { bound + f64::EPSILON } else { bound };
        if let Some(res) = patterns[i].prepared.distance_within(&target, &opts.distance, bound) {
            let at = scored.partition_point(|s| (s.0, patterns[s.1].members[0]) <= (res.distance, patterns[i].members[0]));
            scored.insert(at, (res.distance, i, res.transform));
        }
    }

    let mut out: Vec<Candidate> = scored
        .iter()
        .flat_map(|&(score, i, t)| {
            patterns[i].members.iter().map(move |&patch_id| Candidate {
                patch_id,
                transform_hint: t,
                score,
            })
        })
        .collect();
    out.sort_by(|a, b| a.score.total_cmp(&b.score).then(a.patch_id.cmp(&b.patch_id)));
    out.truncate(k);
    out
}

fn pattern_key(p: &Patch) -> Vec<u8> {
    let mut key = vec![0u8; p.values().len().div_ceil(8)];
    for (i, &v) in p.values().iter().enumerate() {
        if v >= 0.5 {
            key[i / 8] |= 1 << (i % 8);
        }
    }
    key
}

fn distinct_patterns(patches: &[Patch]) -> Vec<Pattern> {
    let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
    for (id, p) in patches.iter().enumerate() {
        match index.entry(pattern_key(p)) {
            std::collections::hash_map::Entry::Occupied(e) => groups[*e.get()].1.push(id),
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(groups.len());
                groups.push((id, vec![id]));
            }
        }
    }
    groups
        .into_par_iter()
        .map(|(first, members)| {
            let prepared = PreparedPatch::from_patch(&patches[first]);
            let descriptor = descriptor(&prepared);
            Pattern {
                members,
                prepared,
                descriptor,
            }
        })
        .collect()
}

/// Pose-invariant summary: point count, principal spreads, mean radius.
fn descriptor(p: &PreparedPatch) -> [f64; 5] {
    let pts = p.points();
    let n = pts.len() as f64;
    let c = crate::voxelgrid::centroid(pts);
    let mut cov = Matrix3::zeros();
    let mut radius = 0.0;
    for q in pts {
        let d = q - c;
        cov += d * d.transpose();
        radius += d.norm();
    }
    cov /= n;
    let mut ev: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    [n.sqrt(), ev[0], ev[1], ev[2], radius / n]
}

fn descriptor_distance(a: &[f64; 5], b: &[f64; 5]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}
