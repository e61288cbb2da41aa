use crate::error::{HarnessError, Result};

/// Average overlap and success rates of one IoU trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub ao: f64,
    pub sr50: f64,
    pub sr75: f64,
    pub frames: usize,
}

/// Fraction of frames with IoU strictly above `tau`.
pub fn success_rate(ious: &[f64], tau: f64) -> f64 {
    ious.iter().filter(|&&v| v > tau).count() as f64 / ious.len() as f64
}

pub fn compute_metrics(ious: &[f64]) -> Result<Metrics> {
    if ious.is_empty() {
        return Err(HarnessError::Numeric("cannot score an empty IoU trace".into()));
    }
    if let Some(v) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(HarnessError::Numeric(format!("IoU {v} outside [0, 1]")));
    }
    Ok(Metrics {
        ao: ious.iter().sum::<f64>() / ious.len() as f64,
        sr50: success_rate(ious, 0.5),
        sr75: success_rate(ious, 0.75),
        frames: ious.len(),
    })
}
