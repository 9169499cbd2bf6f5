//! Linear patch encoders trained so that code distances track the geometric
//! distance between detailed patches.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::codebook::{build_codebook, coarse_queries};
use crate::error::{invalid, Error, Result};
use crate::registration::{DistanceOptions, PreparedPatch};
use crate::voxelgrid::{Patch, VoxelGrid};

pub const DEFAULT_CODE_DIM: usize = 128;
pub const DEFAULT_N_RND: usize = 800;
pub const DEFAULT_N_TRUE: usize = 400;

/// Coarse query, its true detailed patch, and a detailed sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Triplet {
    pub location: [usize; 3],
    pub coarse: Patch,
    pub positive: Patch,
    pub sample: Patch,
    /// Codebook id of `sample`; `None` when the sample is the positive itself.
    pub sample_id: Option<usize>,
    pub target_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletOptions {
    pub extent: usize,
    pub stride: usize,
    pub n_rnd: usize,
    pub n_true: usize,
    pub seed: u64,
}

/// Samples training triplets.
///
/// Locations are drawn with replacement among query windows that are occupied
/// both in the upsampled coarse grid and in the ground truth. Random samples
/// come uniformly from the codebook of `partial`.
pub fn make_triplets(
    partial: &VoxelGrid,
    coarse: &VoxelGrid,
    gt: &VoxelGrid,
    opts: &TripletOptions,
) -> Result<Vec<Triplet>> {
    let gt = gt.binarize(0.5);
    let mut locations = Vec::new();
    for q in coarse_queries(coarse, opts.extent, opts.stride)? {
        let positive = Patch::extract(&gt, q.location, opts.extent)?;
        if !positive.is_empty() {
            locations.push((q, positive));
        }
    }
    if locations.is_empty() && opts.n_rnd + opts.n_true > 0 {
        return Err(invalid("no query window is occupied in both the coarse grid and the ground truth"));
    }
    let codebook = if opts.n_rnd > 0 {
        Some(build_codebook(partial, opts.extent, opts.stride)?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut draws = Vec::with_capacity(opts.n_true + opts.n_rnd);
    for _ in 0..opts.n_true {
        draws.push((rng.gen_range(0..locations.len()), None));
    }
    if let Some(cb) = &codebook {
        for _ in 0..opts.n_rnd {
            draws.push((rng.gen_range(0..locations.len()), Some(rng.gen_range(0..cb.len()))));
        }
    }

    let dist = DistanceOptions::default();
    let triplets = draws
        .par_iter()
        .map(|&(li, sample_id)| {
            let (q, positive) = &locations[li];
            let (sample, target_distance) = match (sample_id, &codebook) {
                (Some(id), Some(cb)) => {
                    let p = cb[id].clone();
                    let d = PreparedPatch::from_patch(&p)
                        .distance_to(&PreparedPatch::from_patch(positive), &dist)
                        .distance;
                    (p, d)
                }
                _ => (positive.clone(), 0.0),
            };
            Triplet {
                location: q.location,
                coarse: q.coarse.clone(),
                positive: positive.clone(),
                sample,
                sample_id,
                target_distance,
            }
        })
        .collect();
    Ok(triplets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Coarse,
    Detailed,
}

/// Affine map from a flattened patch to a code vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedder {
    kind: EmbedderKind,
    extent: usize,
    code_dim: usize,
    /// Column-major: input `j` owns `weights[j * code_dim..(j + 1) * code_dim]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

impl Embedder {
    /// Uniform weights in `±1/n_in`, zero bias. Inputs are raw 0/1 occupancy,
    /// so initial codes stay small.
    pub fn random(kind: EmbedderKind, extent: usize, code_dim: usize, rng: &mut impl Rng) -> Self {
        let n_in = extent.pow(3);
        let bound = 1.0 / n_in as f64;
        let weights = (0..n_in * code_dim).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            kind,
            extent,
            code_dim,
            weights,
            bias: vec![0.0; code_dim],
        }
    }

    pub fn from_parts(
        kind: EmbedderKind,
        extent: usize,
        code_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        if extent == 0 || code_dim == 0 {
            return Err(invalid("embedder extent and code_dim must be positive"));
        }
        if weights.len() != extent.pow(3) * code_dim || bias.len() != code_dim {
            return Err(invalid(format!(
                "embedder expects {} weights and {code_dim} biases, got {} and {}",
                extent.pow(3) * code_dim,
                weights.len(),
                bias.len()
            )));
        }
        let e = Self {
            kind,
            extent,
            code_dim,
            weights,
            bias,
        };
        if !e.is_finite() {
            return Err(invalid("embedder weights must be finite"));
        }
        Ok(e)
    }

    /// Same weights, different role.
    pub fn with_kind(mut self, kind: EmbedderKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn kind(&self) -> EmbedderKind {
        self.kind
    }

    pub fn extent(&self) -> usize {
        self.extent
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn input_dim(&self) -> usize {
        self.extent.pow(3)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight(&self, code: usize, input: usize) -> f64 {
        self.weights[input * self.code_dim + code]
    }

    pub fn set_weight(&mut self, code: usize, input: usize, value: f64) {
        self.weights[input * self.code_dim + code] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }

    pub fn encode(&self, patch: &Patch) -> Result<Vec<f64>> {
        if patch.extent() != self.extent {
            return Err(invalid(format!(
                "patch extent {} does not match embedder extent {}",
                patch.extent(),
                self.extent
            )));
        }
        Ok(self.encode_features(&Features::of(patch)))
    }

    fn encode_features(&self, f: &Features) -> Vec<f64> {
        let mut code = self.bias.clone();
        for (&j, &v) in f.idx.iter().zip(&f.val) {
            let col = &self.weights[j as usize * self.code_dim..(j as usize + 1) * self.code_dim];
            for (c, w) in code.iter_mut().zip(col) {
                *c += v * w;
            }
        }
        code
    }

    /// `self -= step * (g ⊗ f)` for the weights and `step * g` for the bias.
    fn descend(&mut self, f: &Features, g: &[f64], step: f64) {
        for (&j, &v) in f.idx.iter().zip(&f.val) {
            let col = &mut self.weights[j as usize * self.code_dim..(j as usize + 1) * self.code_dim];
            for (w, gi) in col.iter_mut().zip(g) {
                *w -= step * v * gi;
            }
        }
        for (b, gi) in self.bias.iter_mut().zip(g) {
            *b -= step * gi;
        }
    }

    fn round_to_f32(&mut self) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            *v = *v as f32 as f64;
        }
    }
}

/// Sparse occupancy of a patch.
#[derive(Debug, Clone)]
pub(crate) struct Features {
    idx: Vec<u32>,
    val: Vec<f64>,
}

impl Features {
    pub(crate) fn of(patch: &Patch) -> Self {
        let mut idx = Vec::new();
        let mut val = Vec::new();
        for (j, &v) in patch.values().iter().enumerate() {
            if v != 0.0 {
                idx.push(j as u32);
                val.push(v as f64);
            }
        }
        Self { idx, val }
    }
}

pub fn code_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `Σ | ‖E^c(c) − E^d(p)‖₂ − d(p, q) |` over the triplets.
pub fn embedding_loss(coarse: &Embedder, detailed: &Embedder, triplets: &[Triplet]) -> Result<f64> {
    check_pair(coarse, detailed)?;
    let prepared = prepare(triplets);
    Ok(prepared.iter().map(|t| residual(coarse, detailed, t).0.abs()).sum())
}

/// Gradients of [`embedding_loss`] with the same layout as the embedders.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGradient {
    pub coarse_weights: Vec<f64>,
    pub coarse_bias: Vec<f64>,
    pub detailed_weights: Vec<f64>,
    pub detailed_bias: Vec<f64>,
}

pub fn embedding_loss_gradient(
    coarse: &Embedder,
    detailed: &Embedder,
    triplets: &[Triplet],
) -> Result<(f64, EmbeddingGradient)> {
    check_pair(coarse, detailed)?;
    let k = coarse.code_dim;
    let mut grad = EmbeddingGradient {
        coarse_weights: vec![0.0; coarse.weights.len()],
        coarse_bias: vec![0.0; k],
        detailed_weights: vec![0.0; detailed.weights.len()],
        detailed_bias: vec![0.0; k],
    };
    let mut loss = 0.0;
    for t in &prepare(triplets) {
        let (r, g) = residual(coarse, detailed, t);
        loss += r.abs();
        for (&j, &v) in t.coarse.idx.iter().zip(&t.coarse.val) {
            for (w, gi) in grad.coarse_weights[j as usize * k..(j as usize + 1) * k].iter_mut().zip(&g) {
                *w += v * gi;
            }
        }
        for (&j, &v) in t.sample.idx.iter().zip(&t.sample.val) {
            for (w, gi) in grad.detailed_weights[j as usize * k..(j as usize + 1) * k].iter_mut().zip(&g) {
                *w -= v * gi;
            }
        }
        for i in 0..k {
            grad.coarse_bias[i] += g[i];
            grad.detailed_bias[i] -= g[i];
        }
    }
    Ok((loss, grad))
}

struct PreparedTriplet {
    coarse: Features,
    sample: Features,
    target: f64,
}

fn prepare(triplets: &[Triplet]) -> Vec<PreparedTriplet> {
    triplets
        .iter()
        .map(|t| PreparedTriplet {
            coarse: Features::of(&t.coarse),
            sample: Features::of(&t.sample),
            target: t.target_distance,
        })
        .collect()
}

/// Signed residual `‖u‖ − d` and its gradient with respect to `u = E^c(c) − E^d(p)`.
/// At `u = 0` the gradient is taken as zero.
fn residual(coarse: &Embedder, detailed: &Embedder, t: &PreparedTriplet) -> (f64, Vec<f64>) {
    let mut u = coarse.encode_features(&t.coarse);
    for (a, b) in u.iter_mut().zip(detailed.encode_features(&t.sample)) {
        *a -= b;
    }
    let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
    let r = norm - t.target;
    if norm == 0.0 || r == 0.0 {
        return (r, vec![0.0; u.len()]);
    }
    let s = r.signum() / norm;
    for v in &mut u {
        *v *= s;
    }
    (r, u)
}

fn check_pair(coarse: &Embedder, detailed: &Embedder) -> Result<()> {
    if coarse.extent != detailed.extent || coarse.code_dim != detailed.code_dim {
        return Err(invalid("coarse and detailed embedders disagree on extent or code_dim"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub code_dim: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            batch: 32,
            code_dim: DEFAULT_CODE_DIM,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedEmbedding {
    pub coarse: Embedder,
    pub detailed: Embedder,
    /// Mean per-triplet loss over the training set: at initialization, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Minibatch SGD on the mean per-triplet loss.
///
/// Both encoders start from the same random weights. The step size decays
/// linearly from `lr` to `lr / epochs` over the run. Final weights are
/// rounded to `f32` so they survive a save and load unchanged.
pub fn train_embedding(triplets: &[Triplet], opts: &TrainOptions) -> Result<TrainedEmbedding> {
    let first = triplets.first().ok_or_else(|| invalid("training needs at least one triplet"))?;
    if opts.batch == 0 || opts.code_dim == 0 {
        return Err(invalid("batch size and code_dim must be positive"));
    }
    if !(opts.lr.is_finite() && opts.lr > 0.0) {
        return Err(invalid(format!("learning rate must be positive, got {}", opts.lr)));
    }
    let extent = first.coarse.extent();
    if triplets
        .iter()
        .any(|t| t.coarse.extent() != extent || t.sample.extent() != extent)
    {
        return Err(invalid("triplet patches must share one extent"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut coarse = Embedder::random(EmbedderKind::Coarse, extent, opts.code_dim, &mut rng);
    let mut detailed = coarse.clone().with_kind(EmbedderKind::Detailed);
    let data = prepare(triplets);
    let mean_loss = |c: &Embedder, d: &Embedder| {
        data.iter().map(|t| residual(c, d, t).0.abs()).sum::<f64>() / data.len() as f64
    };

    let mut history = vec![mean_loss(&coarse, &detailed)];
    if !history[0].is_finite() {
        return Err(Error::TrainingDiverged { epoch: 0 });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..opts.epochs {
        let lr = opts.lr * (1.0 - epoch as f64 / opts.epochs as f64);
        order.shuffle(&mut rng);
        for batch in order.chunks(opts.batch) {
            // gradients at the pre-batch weights, applied afterwards
            let grads: Vec<Vec<f64>> = batch.iter().map(|&i| residual(&coarse, &detailed, &data[i]).1).collect();
            let step = lr / batch.len() as f64;
            for (&i, g) in batch.iter().zip(&grads) {
                coarse.descend(&data[i].coarse, g, step);
                detailed.descend(&data[i].sample, g, -step);
            }
        }
        let loss = mean_loss(&coarse, &detailed);
        if !loss.is_finite() || !coarse.is_finite() || !detailed.is_finite() {
            return Err(Error::TrainingDiverged { epoch: epoch + 1 });
        }
        history.push(loss);
    }
    coarse.round_to_f32();
    detailed.round_to_f32();
    Ok(TrainedEmbedding {
        coarse,
        detailed,
        loss_history: history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_with(extent: usize, voxels: &[[usize; 3]]) -> Patch {
        Patch::from_voxels(extent, voxels)
    }

    fn triplet(c: Patch, p: Patch, d: f64) -> Triplet {
        Triplet {
            location: [0; 3],
            positive: p.clone(),
            coarse: c,
            sample: p,
            sample_id: None,
            target_distance: d,
        }
    }

    #[test]
    fn tied_encoders_give_zero_loss_on_identical_inputs() {
        let p = patch_with(4, &[[0, 0, 0], [1, 2, 3], [3, 3, 3]]);
        let q = patch_with(4, &[[2, 2, 2]]);
        let ts = vec![triplet(p.clone(), p, 0.0), triplet(q.clone(), q, 0.0)];
        let trained = train_embedding(&ts, &TrainOptions { epochs: 5, code_dim: 8, ..Default::default() }).unwrap();
        assert!(trained.loss_history.iter().all(|&l| l == 0.0));
    }

    #[test]
    fn single_triplet_is_fit() {
        let c = patch_with(4, &[[0, 0, 0], [1, 0, 0], [1, 1, 0]]);
        let p = patch_with(4, &[[3, 3, 3], [2, 3, 3]]);
        let ts = vec![triplet(c.clone(), p.clone(), 0.4)];
        let opts = TrainOptions {
            epochs: 2000,
            lr: 1e-3,
            batch: 1,
            code_dim: 16,
            seed: 3,
        };
        let trained = train_embedding(&ts, &opts).unwrap();
        let d = code_distance(&trained.coarse.encode(&c).unwrap(), &trained.detailed.encode(&p).unwrap());
        assert!((d - 0.4).abs() < 1e-3, "code distance {d}");
    }

    #[test]
    fn rejects_bad_input() {
        assert!(train_embedding(&[], &TrainOptions::default()).is_err());
        let p = patch_with(4, &[[0, 0, 0]]);
        let ts = vec![triplet(p.clone(), p, 0.0)];
        let bad = TrainOptions { lr: f64::NAN, ..Default::default() };
        assert!(train_embedding(&ts, &bad).is_err());
    }

    #[test]
    fn huge_step_reports_divergence() {
        let c = patch_with(4, &[[0, 0, 0], [1, 0, 0]]);
        let p = patch_with(4, &[[3, 3, 3]]);
        let ts = vec![triplet(c, p, 1e300)];
        let opts = TrainOptions { lr: 1e300, epochs: 3, batch: 1, code_dim: 4, seed: 0 };
        assert!(matches!(train_embedding(&ts, &opts), Err(Error::TrainingDiverged { .. })));
    }

    #[test]
    fn zero_norm_subgradient_is_zero() {
        let p = patch_with(4, &[[1, 1, 1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = Embedder::random(EmbedderKind::Coarse, 4, 8, &mut rng);
        let d = e.clone().with_kind(EmbedderKind::Detailed);
        let (loss, g) = embedding_loss_gradient(&e, &d, &[triplet(p.clone(), p, 0.3)]).unwrap();
        assert!((loss - 0.3).abs() < 1e-15);
        assert!(g.coarse_weights.iter().chain(&g.detailed_bias).all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = 4;
        let random_patch = |rng: &mut ChaCha8Rng| {
            let v: Vec<[usize; 3]> = (0..12).map(|_| [rng.gen_range(0..e), rng.gen_range(0..e), rng.gen_range(0..e)]).collect();
            patch_with(e, &v)
        };
        let ts: Vec<Triplet> = (0..6)
            .map(|_| {
                let c = random_patch(&mut rng);
                let p = random_patch(&mut rng);
                triplet(c, p, rng.gen_range(0.0..0.05))
            })
            .collect();
        let c = Embedder::random(EmbedderKind::Coarse, e, 8, &mut rng);
        let d = Embedder::random(EmbedderKind::Detailed, e, 8, &mut rng);
        let (_, g) = embedding_loss_gradient(&c, &d, &ts).unwrap();
        let h = 1e-5;
        for trial in 0..10 {
            let code = rng.gen_range(0..8);
            let which_coarse = trial % 2 == 0;
            // an input some triplet actually uses
            let t = &ts[rng.gen_range(0..ts.len())];
            let src = if which_coarse { &t.coarse } else { &t.sample };
            let occ = src.occupied_local();
            let [x, y, z] = occ[rng.gen_range(0..occ.len())];
            let input = src.index(x, y, z);
            let eval = |delta: f64| {
                let (mut c2, mut d2) = (c.clone(), d.clone());
                let target = if which_coarse { &mut c2 } else { &mut d2 };
                let w = target.weight(code, input);
                target.set_weight(code, input, w + delta);
                embedding_loss(&c2, &d2, &ts).unwrap()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let analytic = if which_coarse {
                g.coarse_weights[input * 8 + code]
            } else {
                g.detailed_weights[input * 8 + code]
            };
            let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "entry ({code},{input}): analytic {analytic} numeric {numeric}");
        }
    }
}
