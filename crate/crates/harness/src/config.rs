//! Experiment configuration, read from a single TOML file. Every field has a
//! default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ctxtrack_core::backbone::CropJitter;
use ctxtrack_core::heads::{LossWeights, VarifocalParams};
use ctxtrack_core::model::ModelConfig;
use ctxtrack_core::optim::AdamConfig;
use ctxtrack_core::update::{UpdatePolicy, UpdateStrategy};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for parameter initialization and training-triplet sampling.
    pub seed: u64,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub loss: LossSection,
    pub train: TrainSection,
    pub crop: CropSection,
    pub update: UpdateSection,
    pub tracking: TrackingSection,
    pub sequence: SequenceConfig,
    pub update_sim: UpdateSimConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelSection::default(),
            optimizer: OptimizerSection::default(),
            loss: LossSection::default(),
            train: TrainSection::default(),
            crop: CropSection::default(),
            update: UpdateSection::default(),
            tracking: TrackingSection::default(),
            sequence: SequenceConfig::default(),
            update_sim: UpdateSimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// One of `toy`, `small`, `base`, `large`.
    pub preset: String,
    pub backbone_lca: bool,
    pub positional: bool,
    pub restricted_keys_include_search: bool,
    pub box_embedding: bool,
    pub use_gaussian: bool,
    pub use_ltrb: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "toy".into(),
            backbone_lca: true,
            positional: true,
            restricted_keys_include_search: false,
            box_embedding: true,
            use_gaussian: true,
            use_ltrb: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self { lr: a.lr, beta1: a.beta1, beta2: a.beta2, eps: a.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub alpha: f64,
    pub gamma: f64,
    pub cls_weight: f64,
    pub giou_weight: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        let v = VarifocalParams::default();
        let w = LossWeights::default();
        Self { alpha: v.alpha, gamma: v.gamma, cls_weight: w.cls, giou_weight: w.giou }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterSection {
    pub max_offset: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for JitterSection {
    fn default() -> Self {
        let j = CropJitter::default();
        Self { max_offset: j.max_offset, min_scale: j.min_scale, max_scale: j.max_scale }
    }
}

impl JitterSection {
    pub fn to_jitter(self) -> CropJitter {
        CropJitter { max_offset: self.max_offset, min_scale: self.min_scale, max_scale: self.max_scale }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.max_offset >= 0.0 && self.min_scale > 0.0 && self.min_scale <= self.max_scale) {
            return Err(HarnessError::config(format!(
                "{name}: need max_offset >= 0 and 0 < min_scale <= max_scale, got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    /// Fixed triplets on which the loss is measured before and after training.
    pub eval_triplets: usize,
    /// Largest frame distance between the previous template and the search frame.
    pub max_frame_gap: usize,
    pub previous_jitter: JitterSection,
    /// Displacement of the search crop around the target, standing in for
    /// motion between frames.
    pub search_jitter: JitterSection,
    /// Steps of linear ramp-up to the optimizer learning rate.
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate to zero over the remaining steps.
    pub cosine_decay: bool,
}

impl TrainSection {
    /// Learning rate for 0-based `step`, given the peak rate `lr`.
    pub fn lr_at(&self, lr: f64, step: usize) -> f64 {
        if step < self.warmup_steps {
            return lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine_decay {
            return lr;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
        let t = (step - self.warmup_steps) as f64 / span;
        0.5 * lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            eval_triplets: 16,
            max_frame_gap: 3,
            previous_jitter: JitterSection::default(),
            search_jitter: JitterSection { max_offset: 0.1, min_scale: 1.0, max_scale: 1.0 },
            warmup_steps: 50,
            cosine_decay: true,
        }
    }
}

/// Crop sides as multiples of `sqrt(w * h)` of the box they are centered on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CropSection {
    pub target_factor: f64,
    pub previous_factor: f64,
    pub search_factor: f64,
}

impl Default for CropSection {
    fn default() -> Self {
        Self { target_factor: 1.0, previous_factor: 2.0, search_factor: 2.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateSection {
    pub strategy: String,
    pub seed_confidence: f64,
    pub include_current: bool,
}

impl Default for UpdateSection {
    fn default() -> Self {
        Self { strategy: UpdateStrategy::PMean.as_str().into(), seed_confidence: 1.0, include_current: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackingSection {
    /// Report annotated boxes instead of predictions (upper-bound check).
    pub gt_oracle: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Range of the target's initial width and height in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Standard deviation of the per-frame velocity change, pixels.
    pub speed: f64,
    /// Per-frame appearance change of the target colors (0 keeps them fixed).
    pub drift: f64,
    pub distractors: usize,
    /// Frames `[start, end)` in which the target is not drawn.
    pub occlusion: Option<[usize; 2]>,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            frames: 20,
            width: 128,
            height: 128,
            min_size: 24.0,
            max_size: 40.0,
            speed: 1.0,
            drift: 0.0,
            distractors: 0,
            occlusion: None,
        }
    }
}

impl SequenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(HarnessError::config("sequence.frames must be at least 1"));
        }
        if !(self.min_size >= 2.0 && self.min_size <= self.max_size) {
            return Err(HarnessError::config(format!(
                "sequence: need 2 <= min_size <= max_size, got {} and {}",
                self.min_size, self.max_size
            )));
        }
        if self.max_size * 2.0 > self.width.min(self.height) as f64 {
            return Err(HarnessError::config(format!(
                "sequence: max_size {} does not leave room to move in a {}x{} frame",
                self.max_size, self.width, self.height
            )));
        }
        if !(self.speed >= 0.0 && self.drift >= 0.0) {
            return Err(HarnessError::config("sequence: speed and drift must be non-negative"));
        }
        if let Some([start, end]) = self.occlusion {
            if start >= end || end > self.frames || start == 0 {
                return Err(HarnessError::config(format!(
                    "sequence.occlusion [{start}, {end}) must be a non-empty range inside frames 1..{}",
                    self.frames
                )));
            }
        }
        Ok(())
    }
}

/// Synthetic confidence traces for the update-rule simulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpdateSimConfig {
    pub traces: usize,
    pub seed: u64,
    pub high: f64,
    pub low: f64,
    pub noise: f64,
    pub high_frames: usize,
    pub drop_frames: usize,
    /// Frames after the drop, back at the high level.
    pub recovery_frames: usize,
    /// Brief confidence spikes inside the last third of the drop.
    pub spikes: usize,
    pub spike_range: [f64; 2],
    pub stable_frames: usize,
}

impl Default for UpdateSimConfig {
    fn default() -> Self {
        Self {
            traces: 100,
            seed: 11,
            high: 0.8,
            low: 0.1,
            noise: 0.05,
            high_frames: 40,
            drop_frames: 30,
            recovery_frames: 10,
            spikes: 3,
            spike_range: [0.6, 0.68],
            stable_frames: 70,
        }
    }
}

impl UpdateSimConfig {
    fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let [lo, hi] = self.spike_range;
        if !(unit(self.high) && unit(self.low) && unit(lo) && unit(hi) && lo <= hi && self.noise >= 0.0) {
            return Err(HarnessError::config("update_sim: levels and spike range must lie in [0, 1]"));
        }
        if self.drop_frames < 3 || self.spikes > self.drop_frames / 3 {
            return Err(HarnessError::config("update_sim: drop too short for the requested spikes"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.strategy()?;
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(HarnessError::config(format!("optimizer: invalid settings {o:?}")));
        }
        let l = &self.loss;
        if !(l.alpha >= 0.0 && l.gamma >= 0.0 && l.cls_weight >= 0.0 && l.giou_weight >= 0.0) {
            return Err(HarnessError::config("loss weights and varifocal constants must be non-negative"));
        }
        if self.train.batch_size == 0 || self.train.eval_triplets == 0 || self.train.max_frame_gap == 0 {
            return Err(HarnessError::config("train: batch_size, eval_triplets and max_frame_gap must be at least 1"));
        }
        self.train.previous_jitter.validate("train.previous_jitter")?;
        self.train.search_jitter.validate("train.search_jitter")?;
        let c = &self.crop;
        if !(c.target_factor > 0.0 && c.previous_factor > 0.0 && c.search_factor > 0.0) {
            return Err(HarnessError::config("crop factors must be positive"));
        }
        if !(0.0..=1.0).contains(&self.update.seed_confidence) {
            return Err(HarnessError::config("update.seed_confidence must lie in [0, 1]"));
        }
        self.sequence.validate()?;
        self.update_sim.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::preset(&m.preset).map_err(|e| HarnessError::config(e.to_string()))?;
        cfg.backbone_lca = m.backbone_lca;
        cfg.positional = m.positional;
        cfg.restricted_keys_include_search = m.restricted_keys_include_search;
        cfg.box_embedding = m.box_embedding;
        cfg.use_gaussian = m.use_gaussian;
        cfg.use_ltrb = m.use_ltrb;
        Ok(cfg)
    }

    pub fn strategy(&self) -> Result<UpdateStrategy> {
        self.update.strategy.parse().map_err(|e: ctxtrack_core::Error| HarnessError::config(e.to_string()))
    }

    pub fn update_policy(&self) -> Result<UpdatePolicy> {
        Ok(UpdatePolicy {
            strategy: self.strategy()?,
            seed_confidence: self.update.seed_confidence,
            include_current: self.update.include_current,
        })
    }

    pub fn adam(&self) -> AdamConfig {
        let o = &self.optimizer;
        AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps }
    }

    pub fn varifocal(&self) -> VarifocalParams {
        VarifocalParams { alpha: self.loss.alpha, gamma: self.loss.gamma }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { cls: self.loss.cls_weight, giou: self.loss.giou_weight }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.crop.search_factor, 2.0);
        assert_eq!(cfg.optimizer.lr, 1e-3);
        assert_eq!(cfg.loss.cls_weight, 1.5);
    }

    #[test]
    fn roundtrip_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.sequence.occlusion = Some([5, 9]);
        cfg.update.strategy = "mean".into();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "[model]\npreset = \"huge\"",
            "[update]\nstrategy = \"sometimes\"",
            "[sequence]\nmin_size = 50.0\nmax_size = 40.0",
            "[sequence]\nocclusion = [8, 4]",
            "[crop]\nsearch_factor = 0.0",
            "[train]\nbatch_size = 0",
            "unknown_key = 3",
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text), Err(HarnessError::Config(_))), "{text}");
        }
    }
}
