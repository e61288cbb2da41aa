//! Building the three model inputs from annotated frames.

use rand::Rng;
use ctxtrack_core::backbone::{context_window, CropJitter, CropWindow};
use ctxtrack_core::boxes::BBox;
use ctxtrack_core::model::{ModelConfig, TripletInput};
use ctxtrack_core::Tensor;

use crate::config::{CropSection, TrainSection};
use crate::crop::crop_resize;
use crate::error::{HarnessError, Result};
use crate::synthetic::SyntheticSequence;

/// Model inputs plus the ground truth in search-crop pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub target: Tensor,
    pub previous: Tensor,
    /// Target box inside the previous template.
    pub previous_box: BBox,
    pub search: Tensor,
    pub search_box: BBox,
    pub search_window: CropWindow,
}

impl Triplet {
    pub fn input(&self) -> TripletInput<'_> {
        TripletInput { target: &self.target, previous: &self.previous, search: &self.search, previous_box: self.previous_box }
    }
}

pub fn target_template(frame: &Tensor, b: &BBox, crop: &CropSection, model: &ModelConfig) -> Result<Tensor> {
    crop_resize(frame, &context_window(b, crop.target_factor), model.target_size)
}

/// Crop of size `model.search_size` and the box expressed inside it.
pub fn context_crop(frame: &Tensor, b: &BBox, window: CropWindow, model: &ModelConfig) -> Result<(Tensor, BBox)> {
    Ok((crop_resize(frame, &window, model.search_size)?, window.to_crop(b, model.search_size)))
}

/// Random training triplet: target from frame 0, a jittered previous
/// template from a visible frame and a search crop from a later visible frame
/// at most `max_frame_gap` frames ahead.
pub fn sample_triplet<R: Rng + ?Sized>(
    seq: &SyntheticSequence,
    model: &ModelConfig,
    crop: &CropSection,
    train: &TrainSection,
    rng: &mut R,
) -> Result<Triplet> {
    let visible: Vec<usize> = (0..seq.len()).filter(|&i| seq.visible[i]).collect();
    if visible.is_empty() || !seq.visible[0] {
        return Err(HarnessError::config("training sequence needs a visible first frame"));
    }
    let p = visible[rng.gen_range(0..visible.len())];
    let later: Vec<usize> = visible.iter().copied().filter(|&i| i > p && i <= p + train.max_frame_gap).collect();
    let s = if later.is_empty() { p } else { later[rng.gen_range(0..later.len())] };
    build_triplet(
        seq,
        model,
        crop,
        (p, train.previous_jitter.to_jitter()),
        (s, train.search_jitter.to_jitter()),
        rng,
    )
}

pub fn build_triplet<R: Rng + ?Sized>(
    seq: &SyntheticSequence,
    model: &ModelConfig,
    crop: &CropSection,
    (p, previous_jitter): (usize, CropJitter),
    (s, search_jitter): (usize, CropJitter),
    rng: &mut R,
) -> Result<Triplet> {
    let target = target_template(&seq.frames[0], &seq.boxes[0], crop, model)?;
    let pw = previous_jitter.sample(&seq.boxes[p], crop.previous_factor, rng);
    let (previous, previous_box) = context_crop(&seq.frames[p], &seq.boxes[p], pw, model)?;
    let sw = search_jitter.sample(&seq.boxes[s], crop.search_factor, rng);
    let (search, search_box) = context_crop(&seq.frames[s], &seq.boxes[s], sw, model)?;
    Ok(Triplet { target, previous, previous_box, search, search_box, search_window: sw })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::SequenceConfig;
    use crate::synthetic::gen_sequence;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn triplet_shapes_and_boxes_inside() {
        let seq = gen_sequence(&SequenceConfig { speed: 2.0, ..SequenceConfig::default() }).unwrap();
        let model = ModelConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = sample_triplet(&seq, &model, &CropSection::default(), &TrainSection::default(), &mut rng).unwrap();
            assert_eq!(t.target.shape(), &[32, 32, 3]);
            assert_eq!(t.previous.shape(), &[64, 64, 3]);
            assert_eq!(t.search.shape(), &[64, 64, 3]);
            for b in [t.previous_box, t.search_box] {
                let tol = 1e-9;
                assert!(b.x1 >= -tol && b.y1 >= -tol && b.x2 <= 64.0 + tol && b.y2 <= 64.0 + tol, "{b:?}");
            }
        }
    }
}
