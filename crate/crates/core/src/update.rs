//! Confidence-driven template update.
//!
//! Two dynamic thresholds are kept in O(1) per frame: the running mean of all
//! confidences and the mean of all prefix means (the penalized mean), which
//! gives early, typically higher, confidences more weight.
//!
//! Both are updated as running means (`m += (s - m) / n`) rather than as
//! sums divided by `n`, so a constant trace reproduces its constant exactly.

use std::fmt;
use std::str::FromStr;

use crate::boxes::BBox;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfidenceHistory {
    scores: Vec<f64>,
    mean: f64,
    p_mean: f64,
}

impl ConfidenceHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        let mut h = Self::new();
        for &s in scores {
            h.push(s)?;
        }
        Ok(h)
    }

    pub fn push(&mut self, score: f64) -> Result<()> {
        check_confidence(score)?;
        self.scores.push(score);
        let n = self.scores.len() as f64;
        self.mean += (score - self.mean) / n;
        self.p_mean += (self.mean - self.p_mean) / n;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

}

fn check_confidence(score: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&score) {
        return invalid("confidence", format!("{score} outside [0, 1]"));
    }
    Ok(())
}

/// `S_n / n`.
pub fn mean_threshold(h: &ConfidenceHistory) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::EmptyHistory);
    }
    Ok(h.mean)
}

/// `(sum over m of S_m / m) / n`.
pub fn p_mean_threshold(h: &ConfidenceHistory) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::EmptyHistory);
    }
    Ok(h.p_mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateStrategy {
    Never,
    AlwaysLast,
    Mean,
    PMean,
}

impl UpdateStrategy {
    pub const ALL: [UpdateStrategy; 4] =
        [UpdateStrategy::Never, UpdateStrategy::AlwaysLast, UpdateStrategy::Mean, UpdateStrategy::PMean];

    pub fn as_str(self) -> &'static str {
        match self {
            UpdateStrategy::Never => "never",
            UpdateStrategy::AlwaysLast => "always-last",
            UpdateStrategy::Mean => "mean",
            UpdateStrategy::PMean => "p-mean",
        }
    }

    /// Threshold this strategy compares against, if it uses one.
    pub fn threshold(self, h: &ConfidenceHistory) -> Result<Option<f64>> {
        match self {
            UpdateStrategy::Never | UpdateStrategy::AlwaysLast => Ok(None),
            UpdateStrategy::Mean => mean_threshold(h).map(Some),
            UpdateStrategy::PMean => p_mean_threshold(h).map(Some),
        }
    }
}

impl fmt::Display for UpdateStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpdateStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument {
                arg: "strategy",
                reason: format!("unknown update strategy `{s}` (never, always-last, mean, p-mean)"),
            })
    }
}

/// Timing and seeding choices of the update rule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdatePolicy {
    pub strategy: UpdateStrategy,
    /// Confidence recorded for the initial, annotated frame.
    pub seed_confidence: f64,
    /// Append the current confidence before computing the threshold.
    pub include_current: bool,
}

impl UpdatePolicy {
    pub fn new(strategy: UpdateStrategy) -> Self {
        Self { strategy, seed_confidence: 1.0, include_current: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateDecision {
    pub update: bool,
    pub threshold: Option<f64>,
}

/// An image crop together with the target box in crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateCrop {
    pub image: Tensor,
    pub bbox: BBox,
}

/// History plus policy: decides per frame whether to replace the previous
/// template, then records the frame's confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct TemplateUpdater {
    history: ConfidenceHistory,
    policy: UpdatePolicy,
}

impl TemplateUpdater {
    /// Starts the history with the policy's seed confidence.
    pub fn new(policy: UpdatePolicy) -> Result<Self> {
        let mut history = ConfidenceHistory::new();
        history.push(policy.seed_confidence)?;
        Ok(Self { history, policy })
    }

    pub fn history(&self) -> &ConfidenceHistory {
        &self.history
    }

    pub fn policy(&self) -> &UpdatePolicy {
        &self.policy
    }

    pub fn should_update(&mut self, score: f64) -> Result<UpdateDecision> {
        check_confidence(score)?;
        if self.policy.include_current {
            self.history.push(score)?;
        }
        let threshold = self.policy.strategy.threshold(&self.history)?;
        if !self.policy.include_current {
            self.history.push(score)?;
        }
        let update = match self.policy.strategy {
            UpdateStrategy::Never => false,
            UpdateStrategy::AlwaysLast => true,
            UpdateStrategy::Mean | UpdateStrategy::PMean => score > threshold.expect("threshold strategies"),
        };
        Ok(UpdateDecision { update, threshold })
    }
}

/// Per-video tracking state. The target template is fixed at construction.
#[derive(Clone, Debug)]
pub struct TrackState {
    target: Tensor,
    previous: TemplateCrop,
    pub current_box: BBox,
    updater: TemplateUpdater,
}

impl TrackState {
    pub fn new(target: Tensor, previous: TemplateCrop, initial_box: BBox, policy: UpdatePolicy) -> Result<Self> {
        Ok(Self { target, previous, current_box: initial_box, updater: TemplateUpdater::new(policy)? })
    }

    pub fn target_template(&self) -> &Tensor {
        &self.target
    }

    pub fn previous_template(&self) -> &TemplateCrop {
        &self.previous
    }

    pub fn history(&self) -> &ConfidenceHistory {
        self.updater.history()
    }

    pub fn policy(&self) -> &UpdatePolicy {
        self.updater.policy()
    }

    /// Decides whether the frame with confidence `score` should become the
    /// previous template, then records `score`. The threshold excludes
    /// `score` unless the policy says otherwise.
    pub fn should_update(&mut self, score: f64) -> Result<UpdateDecision> {
        self.updater.should_update(score)
    }

    /// Runs [`TrackState::should_update`] and, on a positive decision,
    /// replaces the previous template with the crop produced by `candidate`.
    pub fn observe(&mut self, score: f64, candidate: impl FnOnce() -> Result<TemplateCrop>) -> Result<UpdateDecision> {
        let decision = self.should_update(score)?;
        if decision.update {
            self.previous = candidate()?;
        }
        Ok(decision)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn state(strategy: UpdateStrategy, history: &[f64]) -> TrackState {
        let crop = TemplateCrop { image: Tensor::zeros(&[1, 1, 3]), bbox: BBox::new(0.0, 0.0, 1.0, 1.0) };
        let mut policy = UpdatePolicy::new(strategy);
        policy.seed_confidence = history[0];
        let mut s = TrackState::new(Tensor::zeros(&[1, 1, 3]), crop.clone(), crop.bbox, policy).unwrap();
        for &v in &history[1..] {
            s.updater.history.push(v).unwrap();
        }
        s
    }

    #[test]
    fn mean_examples() {
        let h = ConfidenceHistory::from_scores(&[0.6, 0.8]).unwrap();
        assert!((mean_threshold(&h).unwrap() - 0.7).abs() < 1e-15);
        let h = ConfidenceHistory::from_scores(&[0.3, 0.3, 0.3]).unwrap();
        assert_eq!(mean_threshold(&h).unwrap(), 0.3);
        let h = ConfidenceHistory::from_scores(&[0.9]).unwrap();
        assert_eq!(mean_threshold(&h).unwrap(), 0.9);
        assert_eq!(mean_threshold(&ConfidenceHistory::new()), Err(Error::EmptyHistory));
    }

    #[test]
    fn p_mean_examples() {
        let h = ConfidenceHistory::from_scores(&[1.0]).unwrap();
        assert_eq!(p_mean_threshold(&h).unwrap(), 1.0);
        let h = ConfidenceHistory::from_scores(&[1.0, 0.0]).unwrap();
        assert_eq!(p_mean_threshold(&h).unwrap(), 0.75);
        let h = ConfidenceHistory::from_scores(&[0.9, 0.6, 0.3]).unwrap();
        assert!((p_mean_threshold(&h).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(p_mean_threshold(&ConfidenceHistory::new()), Err(Error::EmptyHistory));
    }

    #[test]
    fn constant_trace_is_exact() {
        for c in [0.1, 0.3, 0.7, 1.0 / 3.0, 0.0, 1.0] {
            let h = ConfidenceHistory::from_scores(&vec![c; 257]).unwrap();
            assert_eq!(mean_threshold(&h).unwrap(), c);
            assert_eq!(p_mean_threshold(&h).unwrap(), c);
        }
    }

    #[test]
    fn decision_examples() {
        let mut s = state(UpdateStrategy::Mean, &[0.9, 0.7]);
        let d = s.should_update(0.85).unwrap();
        assert!(d.update);
        assert!((d.threshold.unwrap() - 0.8).abs() < 1e-15);
        assert_eq!(s.history().len(), 3);

        let mut s = state(UpdateStrategy::Mean, &[0.9, 0.7]);
        assert!(!s.should_update(0.75).unwrap().update);

        let mut s = state(UpdateStrategy::Never, &[0.9, 0.7]);
        for v in [0.0, 0.5, 1.0] {
            assert!(!s.should_update(v).unwrap().update);
        }
        assert!(s.should_update(1.5).is_err());
        assert!(s.should_update(-0.1).is_err());
    }

    #[test]
    fn seeded_history_blocks_first_comparison() {
        let mut s = state(UpdateStrategy::Mean, &[1.0]);
        assert!(!s.should_update(1.0).unwrap().update);
        assert!(s.should_update(1.0).unwrap().update == false);
        let mut s = state(UpdateStrategy::Mean, &[1.0]);
        s.should_update(0.5).unwrap();
        // Threshold is now mean(1.0, 0.5) = 0.75.
        assert!(s.should_update(0.8).unwrap().update);
    }

    #[test]
    fn observe_replaces_only_on_update_and_keeps_target() {
        let mut s = state(UpdateStrategy::AlwaysLast, &[1.0]);
        let target_before = s.target_template().clone();
        let fresh = TemplateCrop { image: Tensor::ones(&[1, 1, 3]), bbox: BBox::new(0.0, 0.0, 2.0, 2.0) };
        let d = s.observe(0.1, || Ok(fresh.clone())).unwrap();
        assert!(d.update && d.threshold.is_none());
        assert_eq!(s.previous_template(), &fresh);
        assert_eq!(s.target_template(), &target_before);

        let mut s = state(UpdateStrategy::Never, &[1.0]);
        s.observe(0.9, || panic!("never strategy must not build a crop")).unwrap();
    }

    #[test]
    fn include_current_variant() {
        let mut s = state(UpdateStrategy::Mean, &[0.9, 0.7]);
        s.updater.policy.include_current = true;
        let d = s.should_update(0.85).unwrap();
        assert!((d.threshold.unwrap() - (0.9 + 0.7 + 0.85) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn strategy_parsing() {
        for s in UpdateStrategy::ALL {
            assert_eq!(s.as_str().parse::<UpdateStrategy>().unwrap(), s);
        }
        assert!("sometimes".parse::<UpdateStrategy>().is_err());
    }
}
