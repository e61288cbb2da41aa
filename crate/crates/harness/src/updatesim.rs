//! Update decisions on synthetic confidence traces, without any images.
//!
//! A drop trace holds a high level, collapses to a low level for a window
//! (occlusion or disappearance) with a few brief spikes late in the window,
//! then recovers. A stable trace stays at the high level throughout.

use std::fmt::Write as _;
use std::ops::Range;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ctxtrack_core::update::{TemplateUpdater, UpdatePolicy, UpdateStrategy};

use crate::config::UpdateSimConfig;
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub id: String,
    /// Confidences of frames 1.. (frame 0 is the seeded, annotated frame).
    pub scores: Vec<f64>,
    /// Indices into `scores` covered by the drop.
    pub drop: Option<Range<usize>>,
}

fn noisy<R: Rng>(rng: &mut R, level: f64, noise: f64) -> f64 {
    let jitter = if noise > 0.0 { rng.gen_range(-noise..=noise) } else { 0.0 };
    (level + jitter).clamp(0.0, 1.0)
}

pub fn drop_trace(cfg: &UpdateSimConfig, index: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64));
    let mut scores: Vec<f64> = (0..cfg.high_frames).map(|_| noisy(&mut rng, cfg.high, cfg.noise)).collect();
    let start = scores.len();
    scores.extend((0..cfg.drop_frames).map(|_| noisy(&mut rng, cfg.low, cfg.noise)));
    let late = cfg.drop_frames - cfg.drop_frames / 3;
    let [lo, hi] = cfg.spike_range;
    for k in sample(&mut rng, cfg.drop_frames - late, cfg.spikes).into_iter() {
        scores[start + late + k] = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    }
    scores.extend((0..cfg.recovery_frames).map(|_| noisy(&mut rng, cfg.high, cfg.noise)));
    Trace { id: format!("drop-{index:03}"), scores, drop: Some(start..start + cfg.drop_frames) }
}

pub fn stable_trace(cfg: &UpdateSimConfig, index: usize) -> Trace {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_033).wrapping_add(index as u64 | 1 << 32));
    let scores = (0..cfg.stable_frames).map(|_| noisy(&mut rng, cfg.high, cfg.noise)).collect();
    Trace { id: format!("stable-{index:03}"), scores, drop: None }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimRow {
    pub frame: usize,
    pub confidence: f64,
    pub in_drop: bool,
    pub mean_threshold: f64,
    pub mean_updated: bool,
    pub p_mean_threshold: f64,
    pub p_mean_updated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceOutcome {
    pub trace: Trace,
    pub rows: Vec<SimRow>,
}

impl TraceOutcome {
    pub fn updates(&self, strategy: UpdateStrategy, drop_only: bool) -> usize {
        self.rows
            .iter()
            .filter(|r| !drop_only || r.in_drop)
            .filter(|r| match strategy {
                UpdateStrategy::Mean => r.mean_updated,
                UpdateStrategy::PMean => r.p_mean_updated,
                _ => false,
            })
            .count()
    }
}

/// Runs the mean and p-mean rules side by side, both seeded as `base`.
pub fn simulate(trace: Trace, base: UpdatePolicy) -> Result<TraceOutcome> {
    let mut mean = TemplateUpdater::new(UpdatePolicy { strategy: UpdateStrategy::Mean, ..base })?;
    let mut p_mean = TemplateUpdater::new(UpdatePolicy { strategy: UpdateStrategy::PMean, ..base })?;
    let mut rows = Vec::with_capacity(trace.scores.len());
    for (i, &s) in trace.scores.iter().enumerate() {
        let m = mean.should_update(s)?;
        let p = p_mean.should_update(s)?;
        rows.push(SimRow {
            frame: i + 1,
            confidence: s,
            in_drop: trace.drop.as_ref().is_some_and(|d| d.contains(&i)),
            mean_threshold: m.threshold.expect("mean threshold"),
            mean_updated: m.update,
            p_mean_threshold: p.threshold.expect("p-mean threshold"),
            p_mean_updated: p.update,
        });
    }
    Ok(TraceOutcome { trace, rows })
}

/// Every drop trace followed by every stable trace.
pub fn run_update_sim(cfg: &UpdateSimConfig, base: UpdatePolicy) -> Result<Vec<TraceOutcome>> {
    let traces = (0..cfg.traces).map(|i| drop_trace(cfg, i)).chain((0..cfg.traces).map(|i| stable_trace(cfg, i)));
    traces.map(|t| simulate(t, base)).collect()
}

pub fn decisions_csv(outcomes: &[TraceOutcome]) -> String {
    let mut out =
        String::from("trace_id,frame,confidence,in_drop,mean_threshold,mean_updated,p_mean_threshold,p_mean_updated\n");
    for o in outcomes {
        for r in &o.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                o.trace.id,
                r.frame,
                r.confidence,
                r.in_drop as u8,
                r.mean_threshold,
                r.mean_updated as u8,
                r.p_mean_threshold,
                r.p_mean_updated as u8
            )
            .unwrap();
        }
    }
    out
}

/// Aggregate counts behind the strategy comparison.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimSummary {
    pub drop_traces: usize,
    /// Drop traces in which p-mean updated at least once inside the drop.
    pub p_mean_drop_violations: usize,
    /// Drop traces in which mean updated at least once inside the drop.
    pub mean_drop_updates: usize,
    pub stable_traces: usize,
    /// Stable traces on which mean updated at least as often as p-mean.
    pub stable_mean_at_least_p_mean: usize,
    pub stable_mean_updates: usize,
    pub stable_p_mean_updates: usize,
}

pub fn summarize(outcomes: &[TraceOutcome]) -> SimSummary {
    let mut s = SimSummary::default();
    for o in outcomes {
        if o.trace.drop.is_some() {
            s.drop_traces += 1;
            s.p_mean_drop_violations += (o.updates(UpdateStrategy::PMean, true) > 0) as usize;
            s.mean_drop_updates += (o.updates(UpdateStrategy::Mean, true) > 0) as usize;
        } else {
            let (m, p) = (o.updates(UpdateStrategy::Mean, false), o.updates(UpdateStrategy::PMean, false));
            s.stable_traces += 1;
            s.stable_mean_at_least_p_mean += (m >= p) as usize;
            s.stable_mean_updates += m;
            s.stable_p_mean_updates += p;
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_shapes() {
        let cfg = UpdateSimConfig::default();
        let t = drop_trace(&cfg, 0);
        assert_eq!(t.scores.len(), 80);
        assert_eq!(t.drop, Some(40..70));
        let spikes = t.scores[60..70].iter().filter(|&&v| v >= 0.6).count();
        assert_eq!(spikes, 3);
        assert!(t.scores[40..60].iter().all(|&v| v <= 0.15 + 1e-12));
        assert_eq!(drop_trace(&cfg, 0), t);
        assert_ne!(drop_trace(&cfg, 1), t);
        assert_eq!(stable_trace(&cfg, 0).scores.len(), 70);
    }

    #[test]
    fn thresholds_in_the_drop() {
        let cfg = UpdateSimConfig::default();
        let out = simulate(drop_trace(&cfg, 0), UpdatePolicy::new(UpdateStrategy::PMean)).unwrap();
        let last = out.rows.iter().filter(|r| r.in_drop).last().unwrap();
        assert!(last.mean_threshold < 0.6, "{}", last.mean_threshold);
        assert!(last.p_mean_threshold > 0.7, "{}", last.p_mean_threshold);
        assert_eq!(out.rows[0].frame, 1);
        assert_eq!(out.rows[0].mean_threshold, 1.0);
    }
}
