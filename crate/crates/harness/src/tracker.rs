//! Frame loop of the online tracker.

use std::fmt::Write as _;

use ctxtrack_core::backbone::context_window;
use ctxtrack_core::boxes::BBox;
use ctxtrack_core::model::{TrackerModel, TripletInput, STRIDE};
use ctxtrack_core::update::{TemplateCrop, TrackState, UpdateStrategy};
use ctxtrack_core::{Graph, ParamStore, Tensor};

use crate::config::ExperimentConfig;
use crate::crop::crop_resize;
use crate::error::{HarnessError, Result};
use crate::metrics::{compute_metrics, Metrics};
use crate::synthetic::SyntheticSequence;
use crate::triplet::{context_crop, target_template};

/// Smallest box side, in pixels, accepted as a prediction.
const MIN_SIDE: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameRecord {
    pub frame: usize,
    pub iou: f64,
    pub confidence: f64,
    pub threshold: Option<f64>,
    pub updated: bool,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackRun {
    pub sequence_id: String,
    pub strategy: UpdateStrategy,
    /// Frames 1.. (the annotated first frame is not scored).
    pub records: Vec<FrameRecord>,
    pub metrics: Metrics,
}

impl TrackRun {
    pub fn updates(&self) -> usize {
        self.records.iter().filter(|r| r.updated).count()
    }
}

pub const METRICS_HEADER: &str = "sequence_id,frame,iou,confidence,threshold,updated";

pub fn metrics_csv(runs: &[TrackRun]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for run in runs {
        for r in &run.records {
            let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
            writeln!(out, "{},{},{},{},{threshold},{}", run.sequence_id, r.frame, r.iou, r.confidence, r.updated as u8)
                .unwrap();
        }
    }
    out
}

/// One line per template replacement.
pub fn events_csv(runs: &[TrackRun]) -> String {
    let mut out = String::from("sequence_id,frame,confidence,threshold,x1,y1,x2,y2\n");
    for run in runs {
        for r in run.records.iter().filter(|r| r.updated) {
            let threshold = r.threshold.map(|t| t.to_string()).unwrap_or_default();
            let b = r.bbox;
            writeln!(out, "{},{},{},{threshold},{},{},{},{}", run.sequence_id, r.frame, r.confidence, b.x1, b.y1, b.x2, b.y2)
                .unwrap();
        }
    }
    out
}

pub fn summary_csv(runs: &[TrackRun]) -> String {
    let mut out = String::from("sequence_id,strategy,frames,ao,sr50,sr75,updates\n");
    for run in runs {
        let m = run.metrics;
        writeln!(out, "{},{},{},{},{},{},{}", run.sequence_id, run.strategy, m.frames, m.ao, m.sr50, m.sr75, run.updates())
            .unwrap();
    }
    out
}

fn clip_to_frame(b: &BBox, width: f64, height: f64) -> Option<BBox> {
    if !b.is_finite() {
        return None;
    }
    let c = BBox::new(b.x1.max(0.0), b.y1.max(0.0), b.x2.min(width), b.y2.min(height));
    (c.width() >= MIN_SIDE && c.height() >= MIN_SIDE).then_some(c)
}

/// Tracks `seq` from its first annotation. Predictions that decode to
/// an unusable box keep the last box, so a lost target costs IoU only.
pub fn run_tracker(
    model: &TrackerModel,
    params: &ParamStore,
    seq: &SyntheticSequence,
    cfg: &ExperimentConfig,
    sequence_id: &str,
) -> Result<TrackRun> {
    if seq.len() < 2 {
        return Err(HarnessError::config("tracking needs at least two frames"));
    }
    let mcfg = model.config();
    let policy = cfg.update_policy()?;
    let (fh, fw) = (seq.frames[0].shape()[0] as f64, seq.frames[0].shape()[1] as f64);
    let first = seq.boxes[0];
    let target: Tensor = target_template(&seq.frames[0], &first, &cfg.crop, mcfg)?;
    let previous_crop = |frame: &Tensor, b: &BBox| -> Result<TemplateCrop> {
        let (image, bbox) = context_crop(frame, b, context_window(b, cfg.crop.previous_factor), mcfg)?;
        Ok(TemplateCrop { image, bbox })
    };
    let mut state = TrackState::new(target, previous_crop(&seq.frames[0], &first)?, first, policy)?;

    let mut records = Vec::with_capacity(seq.len() - 1);
    for f in 1..seq.len() {
        let window = context_window(&state.current_box, cfg.crop.search_factor);
        let search = crop_resize(&seq.frames[f], &window, mcfg.search_size)?;
        let decoded = {
            let g = Graph::new(params);
            let prev = state.previous_template();
            let input = TripletInput {
                target: state.target_template(),
                previous: &prev.image,
                search: &search,
                previous_box: prev.bbox,
            };
            model.forward(&g, input)?.heads.decode(STRIDE as f64)?
        };
        let confidence = decoded.confidence.clamp(0.0, 1.0);
        if !confidence.is_finite() {
            return Err(HarnessError::Numeric(format!("non-finite confidence at frame {f}")));
        }
        let predicted = if decoded.low_quality {
            None
        } else {
            clip_to_frame(&window.to_frame(&decoded.bbox, mcfg.search_size), fw, fh)
        };
        let bbox = if cfg.tracking.gt_oracle { seq.boxes[f] } else { predicted.unwrap_or(state.current_box) };
        state.current_box = bbox;
        let frame = &seq.frames[f];
        // The crop is only built when the template is replaced.
        let mut crop_error = None;
        let decision = state.observe(confidence, || {
            previous_crop(frame, &bbox).or_else(|e| {
                crop_error = Some(e);
                Ok(TemplateCrop { image: Tensor::zeros(&[0]), bbox })
            })
        })?;
        if let Some(e) = crop_error {
            return Err(e);
        }
        records.push(FrameRecord {
            frame: f,
            iou: bbox.iou(&seq.boxes[f]).clamp(0.0, 1.0),
            confidence,
            threshold: decision.threshold,
            updated: decision.update,
            bbox,
        });
    }
    let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
    Ok(TrackRun { sequence_id: sequence_id.to_string(), strategy: policy.strategy, metrics: compute_metrics(&ious)?, records })
}
