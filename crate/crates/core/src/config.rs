//! Pipeline configuration shared by every command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blend::{Ablations, BlendParams};
use crate::coarse::{CoarseProvider, COARSE_FACTOR};
use crate::error::{invalid, Result};
use crate::registration::DistanceOptions;
use crate::retrieval::{ExactOptions, TrainOptions, TripletOptions, DEFAULT_CODE_DIM, DEFAULT_K, DEFAULT_N_RND, DEFAULT_N_TRUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    #[default]
    Exact,
    Embedding,
}

impl std::str::FromStr for RetrievalMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(RetrievalMode::Exact),
            "embedding" => Ok(RetrievalMode::Embedding),
            _ => Err(invalid(format!("unknown retrieval mode '{s}' (expected exact or embedding)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Small,
}

impl std::str::FromStr for Preset {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "small" => Ok(Preset::Small),
            _ => Err(invalid(format!("unknown preset '{s}' (expected paper or small)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub code_dim: usize,
    pub n_rnd: usize,
    pub n_true: usize,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            epochs: t.epochs,
            lr: t.lr,
            batch: t.batch,
            code_dim: DEFAULT_CODE_DIM,
            n_rnd: DEFAULT_N_RND,
            n_true: DEFAULT_N_TRUE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExactConfig {
    /// Distinct patterns scored per query; 0 scores all of them.
    pub shortlist: usize,
    pub slack: f64,
}

impl Default for ExactConfig {
    fn default() -> Self {
        let e = ExactOptions::default();
        Self {
            shortlist: e.shortlist.unwrap_or(0),
            slack: e.slack,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// PRDB1 file holding trained embedders, used by embedding retrieval.
    pub embedder: Option<PathBuf>,
    /// Ground-truth grid, needed by the gt_downsample coarse provider.
    pub gt: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub s_shape: usize,
    pub s_patch: usize,
    pub s_subv: usize,
    pub s_blend: usize,
    pub gamma_patch: usize,
    pub gamma_subv: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "M")]
    pub m: usize,
    pub alpha: f64,
    pub opt_iters: usize,
    pub lr: f64,
    pub restarts: usize,
    pub seed: u64,
    pub coarse: CoarseProvider,
    pub retrieval: RetrievalMode,
    pub ablations: Ablations,
    pub embedding: EmbeddingConfig,
    pub exact: ExactConfig,
    pub paths: Paths,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl PipelineConfig {
    pub fn preset(preset: Preset) -> Self {
        let blend = BlendParams::default();
        let full = Self {
            s_shape: 128,
            s_patch: 18,
            s_subv: 40,
            s_blend: blend.s_blend,
            gamma_patch: 4,
            gamma_subv: 32,
            k: DEFAULT_K,
            m: blend.m,
            alpha: blend.alpha,
            opt_iters: blend.opt_iters,
            lr: blend.lr,
            restarts: blend.restarts,
            seed: 0,
            coarse: CoarseProvider::default(),
            retrieval: RetrievalMode::default(),
            ablations: Ablations::default(),
            embedding: EmbeddingConfig::default(),
            exact: ExactConfig::default(),
            paths: Paths::default(),
        };
        match preset {
            Preset::Paper => full,
            Preset::Small => Self {
                s_shape: 32,
                s_patch: 6,
                s_subv: 16,
                s_blend: 4,
                gamma_patch: 2,
                gamma_subv: 12,
                // same slot count as the full preset, well above the 216 locations per subvolume
                m: 400,
                ..full
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("s_shape", self.s_shape),
            ("s_patch", self.s_patch),
            ("s_subv", self.s_subv),
            ("s_blend", self.s_blend),
            ("gamma_patch", self.gamma_patch),
            ("gamma_subv", self.gamma_subv),
            ("K", self.k),
            ("M", self.m),
            ("restarts", self.restarts),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(invalid(format!("{name} must be positive")));
        }
        if self.s_shape % COARSE_FACTOR != 0 {
            return Err(invalid(format!("s_shape {} must be divisible by {COARSE_FACTOR}", self.s_shape)));
        }
        if self.s_patch > self.s_subv {
            return Err(invalid(format!("s_patch {} exceeds s_subv {}", self.s_patch, self.s_subv)));
        }
        if self.s_subv > self.s_shape {
            return Err(invalid(format!("s_subv {} exceeds s_shape {}", self.s_subv, self.s_shape)));
        }
        if self.gamma_subv > self.s_subv {
            return Err(invalid(format!(
                "gamma_subv {} exceeds s_subv {} and would leave gaps",
                self.gamma_subv, self.s_subv
            )));
        }
        self.blend_params().validate(self.s_subv)?;
        if self.embedding.code_dim == 0 || self.embedding.batch == 0 {
            return Err(invalid("embedding code_dim and batch must be positive"));
        }
        if !(self.embedding.lr > 0.0 && self.embedding.lr.is_finite()) {
            return Err(invalid("embedding lr must be positive"));
        }
        if !(self.exact.slack >= 0.0 && self.exact.slack.is_finite()) {
            return Err(invalid("exact slack must be non-negative"));
        }
        Ok(())
    }

    pub fn blend_params(&self) -> BlendParams {
        BlendParams {
            m: self.m,
            alpha: self.alpha,
            s_blend: self.s_blend,
            opt_iters: self.opt_iters,
            restarts: self.restarts,
            lr: self.lr,
            seed: self.seed,
            ablations: self.ablations,
        }
    }

    pub fn exact_options(&self) -> ExactOptions {
        ExactOptions {
            shortlist: (self.exact.shortlist > 0).then_some(self.exact.shortlist),
            slack: self.exact.slack,
            distance: DistanceOptions::default(),
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.embedding.epochs,
            lr: self.embedding.lr,
            batch: self.embedding.batch,
            code_dim: self.embedding.code_dim,
            seed: self.seed,
        }
    }

    pub fn triplet_options(&self) -> TripletOptions {
        TripletOptions {
            extent: self.s_patch,
            stride: self.gamma_patch,
            n_rnd: self.embedding.n_rnd,
            n_true: self.embedding.n_true,
            seed: self.seed,
        }
    }

    /// Parses a JSON config; missing fields take defaults of the full-size preset.
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Like [`from_json`](Self::from_json), with missing fields from `base`.
    pub fn from_json_over(text: &str, base: &Self) -> Result<Self> {
        let mut merged = serde_json::to_value(base)?;
        let patch: serde_json::Value = serde_json::from_str(text)?;
        merge(&mut merged, patch);
        let c: Self = serde_json::from_value(merged)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Recursive object merge; values in `patch` win.
fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    // tagged enums are replaced whole so a new kind does not inherit old fields
                    Some(slot) if slot.is_object() && v.is_object() && v.get("kind").is_none() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        let p = PipelineConfig::preset(Preset::Paper);
        p.validate().unwrap();
        assert_eq!((p.s_shape, p.s_patch, p.s_subv, p.gamma_patch, p.gamma_subv), (128, 18, 40, 4, 32));
        assert_eq!((p.m, p.alpha, p.s_blend, p.k), (400, 10.0, 8, 10));
        let s = PipelineConfig::preset(Preset::Small);
        s.validate().unwrap();
        assert_eq!((s.s_shape, s.s_patch, s.s_subv, s.s_blend, s.gamma_patch, s.gamma_subv), (32, 6, 16, 4, 2, 12));
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let c = PipelineConfig::preset(Preset::Small);
        assert_eq!(PipelineConfig::from_json(&c.to_json()).unwrap(), c);
        let partial = PipelineConfig::from_json(r#"{"alpha": 0.0, "retrieval": "embedding"}"#).unwrap();
        assert_eq!(partial.alpha, 0.0);
        assert_eq!(partial.retrieval, RetrievalMode::Embedding);
        assert_eq!(partial.s_shape, 128);
        let over = PipelineConfig::from_json_over(
            r#"{"K": 3, "coarse": {"kind": "gt_downsample"}, "exact": {"slack": 0.5}}"#,
            &c,
        )
        .unwrap();
        assert_eq!((over.k, over.s_shape, over.exact.slack), (3, 32, 0.5));
        assert_eq!(over.exact.shortlist, c.exact.shortlist);
        assert_eq!(over.coarse, CoarseProvider::GtDownsample);
    }

    #[test]
    fn divisibility_is_checked() {
        let mut c = PipelineConfig::preset(Preset::Small);
        c.s_blend = 5;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::preset(Preset::Small);
        c.gamma_subv = 20;
        assert!(c.validate().is_err());
        let mut c = PipelineConfig::preset(Preset::Small);
        c.s_shape = 30;
        assert!(c.validate().is_err());
        assert!(PipelineConfig::from_json(r#"{"bogus": 1}"#).is_err());
        assert!(PipelineConfig::from_json(r#"{"M": 0}"#).is_err());
    }
}
