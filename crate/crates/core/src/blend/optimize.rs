use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::operator::Operator;
use super::{BlendParams, BlendState, Losses};
use crate::error::{invalid, Error, Result};
use crate::nn::NearestIndex;
use crate::registration::{centered_points, icp_align, normalized_l1_chamfer, DEFAULT_MAX_ITERS, DEFAULT_TOL};
use crate::retrieval::Codebook;
use crate::voxelgrid::{OriginMode, PointSet};

/// Per-subvolume inputs, each `s_subv³` values in x-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubvolumeTargets {
    /// Upsampled coarse shape; fills voxels no slot covers.
    pub coarse_up: Vec<f32>,
    /// What the blend should reproduce.
    pub target: Vec<f32>,
}

/// Backtracking halvings before a descent step is given up.
const MAX_HALVINGS: usize = 30;
/// Spread of the weight-parameter perturbation for restarts after the first.
const RESTART_SPREAD: f64 = 0.5;
/// Relative loss gain below which the descent stops.
const REL_TOL: f64 = 1e-6;

pub(crate) fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn inverse_softplus(w: f64) -> f64 {
    if w <= 0.0 {
        -40.0
    } else if w > 30.0 {
        w
    } else {
        w.exp_m1().ln()
    }
}

fn weights_from(theta: &[f64]) -> Vec<f64> {
    theta.iter().map(|&x| softplus(x)).collect()
}

/// Losses and `∂L/∂θ` over the operator's flat parameters, for weights `ω = softplus(θ)`.
pub(crate) fn theta_gradient(op: &Operator, theta: &[f64], targets: &SubvolumeTargets, alpha: f64) -> (Losses, Vec<f64>) {
    let (losses, mut g) = op.losses_and_gradient_flat(&weights_from(theta), &targets.coarse_up, &targets.target, alpha);
    for (d, &t) in g.iter_mut().zip(theta) {
        *d *= sigmoid(t);
    }
    (losses, g)
}

fn check(op: &Operator, l: &Losses, iteration: usize, grads: Option<&[f64]>) -> Result<()> {
    if !l.total.is_finite() {
        let slot = grads
            .and_then(|g| (0..op.len()).position(|m| g[op.slot_params(m)].iter().any(|x| !x.is_finite())))
            .unwrap_or(0);
        return Err(Error::Optimization { slot, iteration });
    }
    Ok(())
}

/// Refines each slot's transform by ICP against the target voxels in its
/// window, keeping a refinement only when it lowers the slot's own distance.
/// Returns the number of slots that moved.
fn refine_transforms(
    state: &mut BlendState,
    op: &mut Operator,
    codebook: &Codebook,
    targets: &SubvolumeTargets,
) -> usize {
    let s = state.s_subv;
    let e = codebook.extent();
    let half = e as f64 / 2.0;
    let mut moved = 0;
    for (m, slot) in state.slots.iter_mut().enumerate() {
        let p = slot.placement;
        let mut target = Vec::new();
        for i in 0..e {
            for j in 0..e {
                for k in 0..e {
                    if targets.target[((p[0] + i) * s + p[1] + j) * s + p[2] + k] >= 0.5 {
                        target.push(Vector3::new(i as f64 + 0.5 - half, j as f64 + 0.5 - half, k as f64 + 0.5 - half));
                    }
                }
            }
        }
        let patch = &codebook[slot.patch_id];
        let source = centered_points(patch);
        if target.is_empty() || source.is_empty() {
            continue;
        }
        let t = slot.transform;
        let index = NearestIndex::new(&target, 1.0);
        let now: Vec<_> = source.iter().map(|x| t.apply_point(x)).collect();
        let before = normalized_l1_chamfer(&now, &t.translation, &target, &index);
        if before == 0.0 {
            continue;
        }
        let Ok(res) = icp_align(
            &PointSet::new(source, OriginMode::PatchCenter),
            &PointSet::new(target, OriginMode::PatchCenter),
            &t,
            DEFAULT_MAX_ITERS,
            DEFAULT_TOL,
        ) else {
            continue;
        };
        if res.distance < before {
            slot.transform = res.transform;
            op.set_transform(m, patch, &res.transform, p);
            moved += 1;
        }
    }
    moved
}

/// Gradient descent with backtracking from `theta`. Stops early once a step
/// gains less than `REL_TOL` of the loss. Returns the final parameters and loss.
fn descend(
    op: &Operator,
    mut theta: Vec<f64>,
    targets: &SubvolumeTargets,
    alpha: f64,
    params: &BlendParams,
) -> Result<(Vec<f64>, f64)> {
    let mut step = params.lr;
    let (mut cur, mut grad) = theta_gradient(op, &theta, targets, alpha);
    check(op, &cur, 0, Some(&grad))?;
    let mut trial = vec![0.0; theta.len()];
    for it in 0..params.opt_iters {
        if cur.total == 0.0 {
            break;
        }
        let mut gain = None;
        for _ in 0..MAX_HALVINGS {
            for ((x, &t), &g) in trial.iter_mut().zip(&theta).zip(&grad) {
                *x = t - step * g;
            }
            let l = op.losses_flat(&weights_from(&trial), &targets.coarse_up, &targets.target, alpha);
            check(op, &l, it + 1, None)?;
            if l.total < cur.total {
                std::mem::swap(&mut theta, &mut trial);
                gain = Some(cur.total - l.total);
                step *= 1.5;
                break;
            }
            step *= 0.5;
        }
        let Some(gain) = gain else { break };
        (cur, grad) = theta_gradient(op, &theta, targets, alpha);
        check(op, &cur, it + 1, Some(&grad))?;
        if gain < REL_TOL * cur.total {
            break;
        }
    }
    Ok((theta, cur.total))
}

/// Optimizes slot transforms and blending weights of one subvolume under
/// `L = L_rec + α·L_sm`.
///
/// Transforms are refined first, then the block weights are descended from
/// the given weights and from `restarts − 1` perturbations of them. The best
/// result is kept, and never one worse than the starting state. The returned
/// losses are evaluated on the returned state.
pub fn optimize_subvolume(
    mut state: BlendState,
    codebook: &Codebook,
    targets: &SubvolumeTargets,
    params: &BlendParams,
) -> Result<BlendState> {
    params.validate(state.s_subv)?;
    let n = state.s_subv.pow(3);
    if targets.coarse_up.len() != n || targets.target.len() != n {
        return Err(invalid(format!("subvolume targets need {n} values each")));
    }
    let alpha = params.effective_alpha();
    state.alpha = alpha;
    let mut op = Operator::new(&state, codebook)?;
    if params.ablations.no_blend {
        for slot in &mut state.slots {
            slot.weight_blocks.iter_mut().for_each(|w| *w = 1.0);
        }
    }
    let full: Vec<Vec<f64>> = state.slots.iter().map(|s| s.weight_blocks.clone()).collect();
    let initial_weights = op.compact(&full);
    let eval = |op: &Operator, w: &[f64]| op.losses_flat(w, &targets.coarse_up, &targets.target, alpha);
    let initial = eval(&op, &initial_weights);
    check(&op, &initial, 0, None)?;

    if !params.ablations.no_deform && !state.slots.is_empty() {
        let before = state.clone();
        let moved = refine_transforms(&mut state, &mut op, codebook, targets);
        if moved > 0 && !(eval(&op, &initial_weights).total <= initial.total) {
            state = before;
            op = Operator::new(&state, codebook)?;
        }
    }

    let mut best = (initial_weights.clone(), eval(&op, &initial_weights).total);
    if !params.ablations.no_blend && !state.slots.is_empty() && best.1 > 0.0 {
        let theta0: Vec<f64> = initial_weights.iter().map(|&x| inverse_softplus(x)).collect();
        let c = state.subvolume_corner;
        for r in 0..params.restarts {
            let mut theta = theta0.clone();
            if r > 0 {
                let seed = params.seed
                    ^ (c[0] as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (c[1] as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f)
                    ^ (c[2] as u64).wrapping_mul(0x1656_67b1_9e37_79f9)
                    ^ (r as u64).wrapping_mul(0x27d4_eb2f_1656_67c5);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for t in theta.iter_mut() {
                    *t += RESTART_SPREAD * rng.sample::<f64, _>(StandardNormal);
                }
            }
            let (theta, total) = descend(&op, theta, targets, alpha, params)?;
            if total < best.1 {
                best = (weights_from(&theta), total);
            }
        }
    }
    let mut full = full;
    op.scatter(&best.0, &mut full);
    for (slot, w) in state.slots.iter_mut().zip(full) {
        slot.weight_blocks = w;
    }
    state.losses = eval(&op, &best.0);
    check(&op, &state.losses, params.opt_iters, None)?;
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blend::{Ablations, CandidateSlot};
    use crate::registration::RigidTransform;
    use crate::voxelgrid::Patch;

    fn codebook(patches: Vec<Patch>) -> Codebook {
        let e = patches[0].extent();
        Codebook::from_patches(e, 1, patches).unwrap()
    }

    fn slot(id: usize, placement: [usize; 3], nb: usize) -> CandidateSlot {
        CandidateSlot {
            patch_id: id,
            rank: 0,
            location: placement,
            placement,
            transform: RigidTransform::identity(),
            weight_blocks: vec![1.0; nb * nb * nb],
        }
    }

    fn state(slots: Vec<CandidateSlot>) -> BlendState {
        BlendState {
            subvolume_corner: [0; 3],
            s_subv: 8,
            s_blend: 4,
            alpha: 10.0,
            slots,
            losses: Losses::default(),
        }
    }

    fn params() -> BlendParams {
        BlendParams {
            s_blend: 4,
            ..Default::default()
        }
    }

    fn blob(e: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::from_values(e, (0..e * e * e).map(|_| rng.gen_bool(0.45) as u8 as f32).collect())
    }

    fn placed(p: &Patch, at: [usize; 3], s: usize) -> Vec<f32> {
        let e = p.extent();
        let mut v = vec![0.0; s * s * s];
        for i in 0..e {
            for j in 0..e {
                for k in 0..e {
                    v[((at[0] + i) * s + at[1] + j) * s + at[2] + k] = p.get(i, j, k);
                }
            }
        }
        v
    }

    #[test]
    fn exact_slot_is_already_optimal() {
        let p = blob(8, 1);
        let cb = codebook(vec![p.clone()]);
        let targets = SubvolumeTargets {
            coarse_up: vec![1.0; 512],
            target: placed(&p, [0, 0, 0], 8),
        };
        let out = optimize_subvolume(state(vec![slot(0, [0, 0, 0], 2)]), &cb, &targets, &params()).unwrap();
        assert_eq!(out.losses, Losses::default());
        assert_eq!(out.slots[0].weight_blocks, vec![1.0; 8]);
        assert_eq!(out.slots[0].transform, RigidTransform::identity());
    }

    #[test]
    fn descent_favours_the_matching_slot() {
        let (good, bad) = (blob(8, 2), blob(8, 3));
        let cb = codebook(vec![good.clone(), bad]);
        let targets = SubvolumeTargets {
            coarse_up: vec![0.0; 512],
            target: placed(&good, [0, 0, 0], 8),
        };
        let st = state(vec![slot(1, [0, 0, 0], 2), slot(0, [0, 0, 0], 2)]);
        let p = BlendParams {
            ablations: Ablations {
                no_deform: true,
                ..Default::default()
            },
            ..params()
        };
        let op = Operator::new(&st, &cb).unwrap();
        let w0: Vec<Vec<f64>> = st.slots.iter().map(|s| s.weight_blocks.clone()).collect();
        let l0 = op.losses(&w0, &targets.coarse_up, &targets.target, 10.0).total;
        let out = optimize_subvolume(st, &cb, &targets, &p).unwrap();
        assert!(out.losses.total < 0.2 * l0, "{} vs {l0}", out.losses.total);
        for b in 0..8 {
            assert!(out.slots[1].weight_blocks[b] > out.slots[0].weight_blocks[b]);
        }
    }

    #[test]
    fn never_worse_than_start_and_reports_exact_losses() {
        for seed in 0..6 {
            let patches: Vec<Patch> = (0..3).map(|i| blob(4, seed * 10 + i)).collect();
            let cb = codebook(patches);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let slots = (0..5).map(|i| slot(i % 3, [0, 1, 2].map(|_| rng.gen_range(0..=4)), 2)).collect();
            let st = state(slots);
            let targets = SubvolumeTargets {
                coarse_up: (0..512).map(|_| rng.gen_bool(0.5) as u8 as f32).collect(),
                target: (0..512).map(|_| rng.gen_bool(0.5) as u8 as f32).collect(),
            };
            let op = Operator::new(&st, &cb).unwrap();
            let w0: Vec<Vec<f64>> = st.slots.iter().map(|s| s.weight_blocks.clone()).collect();
            let l0 = op.losses(&w0, &targets.coarse_up, &targets.target, 10.0).total;
            let out = optimize_subvolume(st, &cb, &targets, &params()).unwrap();
            assert!(out.losses.total <= l0);
            let op = Operator::new(&out, &cb).unwrap();
            let w: Vec<Vec<f64>> = out.slots.iter().map(|s| s.weight_blocks.clone()).collect();
            assert_eq!(op.losses(&w, &targets.coarse_up, &targets.target, 10.0), out.losses);
            assert!(w.iter().flatten().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn no_blend_fixes_unit_weights_and_no_smooth_zeroes_alpha() {
        let patches: Vec<Patch> = (0..2).map(|i| blob(4, 40 + i)).collect();
        let cb = codebook(patches);
        let targets = SubvolumeTargets {
            coarse_up: vec![0.0; 512],
            target: vec![1.0; 512],
        };
        let mut s0 = slot(0, [0, 0, 0], 2);
        s0.weight_blocks[0] = 3.0;
        let st = state(vec![s0, slot(1, [2, 2, 2], 2)]);
        let p = BlendParams {
            ablations: Ablations {
                no_blend: true,
                ..Default::default()
            },
            ..params()
        };
        let out = optimize_subvolume(st.clone(), &cb, &targets, &p).unwrap();
        assert!(out.slots.iter().all(|s| s.weight_blocks == vec![1.0; 8]));
        let p = BlendParams {
            ablations: Ablations {
                no_smooth: true,
                ..Default::default()
            },
            ..params()
        };
        let out = optimize_subvolume(st, &cb, &targets, &p).unwrap();
        assert_eq!(out.alpha, 0.0);
        assert_eq!(out.losses.total, out.losses.rec);
    }

    #[test]
    fn icp_refinement_recovers_a_shift() {
        // the slot's patch is the target shifted by one voxel; ICP should undo it
        let mut vox = Vec::new();
        for i in 2..6 {
            vox.push([i, 3, 3]);
            vox.push([3, i, 4]);
            vox.push([4, 4, i]);
        }
        let target_patch = Patch::from_voxels(8, &vox);
        let shifted: Vec<[usize; 3]> = vox.iter().map(|v| [v[0] + 1, v[1], v[2]]).collect();
        let cb = codebook(vec![Patch::from_voxels(8, &shifted)]);
        let targets = SubvolumeTargets {
            coarse_up: vec![0.0; 512],
            target: placed(&target_patch, [0, 0, 0], 8),
        };
        let out = optimize_subvolume(state(vec![slot(0, [0, 0, 0], 2)]), &cb, &targets, &params()).unwrap();
        assert_eq!(out.losses.rec, 0.0);
        assert!((out.slots[0].transform.translation - Vector3::new(-1.0, 0.0, 0.0)).norm() < 1e-6);
    }

    #[test]
    fn theta_gradient_matches_central_differences() {
        let patches: Vec<Patch> = (0..3).map(|i| blob(4, 70 + i)).collect();
        let cb = codebook(patches);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let slots = (0..6).map(|i| slot(i % 3, [0, 1, 2].map(|_| rng.gen_range(0..=4)), 2)).collect();
        let st = state(slots);
        let op = Operator::new(&st, &cb).unwrap();
        let targets = SubvolumeTargets {
            coarse_up: vec![0.0; 512],
            target: (0..512).map(|_| rng.gen_bool(0.5) as u8 as f32).collect(),
        };
        let theta: Vec<f64> = (0..op.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (_, g) = theta_gradient(&op, &theta, &targets, 10.0);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 12 {
            let i = rng.gen_range(0..theta.len());
            if g[i] == 0.0 {
                continue;
            }
            let f = |d: f64| {
                let mut t = theta.clone();
                t[i] += d;
                op.losses_flat(&weights_from(&t), &targets.coarse_up, &targets.target, 10.0).total
            };
            let fd = (f(h) - f(-h)) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs());
            assert!(rel < 1e-4, "parameter {i}: fd {fd} analytic {}", g[i]);
            checked += 1;
        }
    }

    #[test]
    fn softplus_helpers() {
        for w in [1e-3, 0.5, 1.0, 7.0] {
            assert!((softplus(inverse_softplus(w)) - w).abs() < 1e-12);
        }
        assert!(softplus(-800.0) >= 0.0 && softplus(800.0) == 800.0);
        assert!((sigmoid(0.3) - 1.0 / (1.0 + (-0.3f64).exp())).abs() < 1e-15);
    }
}
