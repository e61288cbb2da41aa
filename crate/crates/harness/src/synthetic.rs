//! Synthetic tracking sequences: a textured rectangle on a static, smoothly
//! varying background, following a damped random walk. Optional look-alike
//! distractors, color drift and an occlusion window in which the target is
//! not drawn.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ctxtrack_core::boxes::BBox;
use ctxtrack_core::Tensor;

use crate::config::SequenceConfig;
use crate::error::{HarnessError, Result};
use crate::pnm;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSequence {
    /// `[H, W, 3]` frames with values quantized to multiples of 1/255.
    pub frames: Vec<Tensor>,
    pub boxes: Vec<BBox>,
    pub distractors: Vec<Vec<BBox>>,
    /// False inside the occlusion window.
    pub visible: Vec<bool>,
}

impl SyntheticSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
struct Texture {
    colors: [[f64; 3]; 2],
    cell: f64,
}

impl Texture {
    fn sample(&self, u: f64, v: f64) -> [f64; 3] {
        let parity = ((u / self.cell).floor() as i64 + (v / self.cell).floor() as i64).rem_euclid(2);
        self.colors[parity as usize]
    }
}

#[derive(Clone, Copy, Debug)]
struct Mover {
    cx: f64,
    cy: f64,
    vx: f64,
    vy: f64,
    w: f64,
    h: f64,
}

impl Mover {
    fn spawn<R: Rng>(rng: &mut R, cfg: &SequenceConfig) -> Self {
        let w = rng.gen_range(cfg.min_size..=cfg.max_size);
        let h = rng.gen_range(cfg.min_size..=cfg.max_size);
        Self {
            cx: rng.gen_range(w / 2.0..=cfg.width as f64 - w / 2.0),
            cy: rng.gen_range(h / 2.0..=cfg.height as f64 - h / 2.0),
            vx: 0.0,
            vy: 0.0,
            w,
            h,
        }
    }

    fn bbox(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.w, self.h)
    }

    fn step<R: Rng>(&mut self, rng: &mut R, cfg: &SequenceConfig) {
        let kick = cfg.speed;
        if kick > 0.0 {
            self.vx = 0.8 * self.vx + rng.gen_range(-kick..=kick);
            self.vy = 0.8 * self.vy + rng.gen_range(-kick..=kick);
        }
        self.cx += self.vx;
        self.cy += self.vy;
        // Reflect off the frame border so the box stays inside.
        let (lo_x, hi_x) = (self.w / 2.0, cfg.width as f64 - self.w / 2.0);
        let (lo_y, hi_y) = (self.h / 2.0, cfg.height as f64 - self.h / 2.0);
        if self.cx < lo_x || self.cx > hi_x {
            self.cx = self.cx.clamp(lo_x, hi_x);
            self.vx = -self.vx;
        }
        if self.cy < lo_y || self.cy > hi_y {
            self.cy = self.cy.clamp(lo_y, hi_y);
            self.vy = -self.vy;
        }
    }
}

fn random_color<R: Rng>(rng: &mut R) -> [f64; 3] {
    [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)]
}

fn draw(frame: &mut [f64], width: usize, b: &BBox, tex: &Texture) {
    let height = frame.len() / (3 * width);
    let x0 = b.x1.floor().max(0.0) as usize;
    let y0 = b.y1.floor().max(0.0) as usize;
    let x1 = (b.x2.ceil() as usize).min(width);
    let y1 = (b.y2.ceil() as usize).min(height);
    for y in y0..y1 {
        for x in x0..x1 {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if b.contains_point(px, py) {
                let c = tex.sample(px - b.x1, py - b.y1);
                frame[(y * width + x) * 3..(y * width + x) * 3 + 3].copy_from_slice(&c);
            }
        }
    }
}

pub fn gen_sequence(cfg: &SequenceConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width, cfg.height);

    // Static background: a few low-frequency waves around a dim base color.
    let base = [rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5), rng.gen_range(0.2..0.5)];
    let waves: Vec<(f64, f64, f64, usize)> = (0..4)
        .map(|_| (rng.gen_range(0.02..0.12), rng.gen_range(0.02..0.12), rng.gen_range(0.0..6.28), rng.gen_range(0..3)))
        .collect();
    let mut background = vec![0.0; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for &(fx, fy, phase, ch) in &waves {
                    if ch == c {
                        v += 0.08 * (fx * x as f64 + fy * y as f64 + phase).sin();
                    }
                }
                background[(y * w + x) * 3 + c] = v;
            }
        }
    }

    let mut target = Mover::spawn(&mut rng, cfg);
    let cell = (target.w.min(target.h) / 4.0).max(2.0);
    let mut target_tex = Texture { colors: [random_color(&mut rng), random_color(&mut rng)], cell };
    let mut others: Vec<(Mover, Texture)> = (0..cfg.distractors)
        .map(|_| {
            let m = Mover::spawn(&mut rng, cfg);
            let mut tex = target_tex;
            for color in tex.colors.iter_mut() {
                for v in color.iter_mut() {
                    *v = (*v + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0);
                }
            }
            (m, tex)
        })
        .collect();

    let mut seq = SyntheticSequence { frames: Vec::new(), boxes: Vec::new(), distractors: Vec::new(), visible: Vec::new() };
    for f in 0..cfg.frames {
        if f > 0 {
            target.step(&mut rng, cfg);
            for (m, _) in others.iter_mut() {
                m.step(&mut rng, cfg);
            }
            if cfg.drift > 0.0 {
                for color in target_tex.colors.iter_mut() {
                    for v in color.iter_mut() {
                        *v = (*v + rng.gen_range(-cfg.drift..=cfg.drift)).clamp(0.0, 1.0);
                    }
                }
            }
        }
        let visible = !matches!(cfg.occlusion, Some([s, e]) if (s..e).contains(&f));
        let mut frame = background.clone();
        for (m, tex) in &others {
            draw(&mut frame, w, &m.bbox(), tex);
        }
        if visible {
            draw(&mut frame, w, &target.bbox(), &target_tex);
        }
        let frame = frame.into_iter().map(|v| pnm::to_byte(v) as f64 / 255.0).collect();
        seq.frames.push(Tensor::new(&[h, w, 3], frame)?);
        seq.boxes.push(target.bbox());
        seq.distractors.push(others.iter().map(|(m, _)| m.bbox()).collect());
        seq.visible.push(visible);
    }
    Ok(seq)
}

fn box_fields(b: &BBox) -> String {
    format!("{},{},{},{}", b.x1, b.y1, b.x2, b.y2)
}

/// Writes `frame_NNNN.ppm`, `annotations.csv` and `distractors.csv` into `dir`.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(HarnessError::io(dir))?;
    let mut ann = String::from("frame,x1,y1,x2,y2,visible\n");
    let mut dis = String::from("frame,index,x1,y1,x2,y2\n");
    for (i, frame) in seq.frames.iter().enumerate() {
        pnm::write_ppm(&dir.join(format!("frame_{i:04}.ppm")), frame)?;
        writeln!(ann, "{i},{},{}", box_fields(&seq.boxes[i]), seq.visible[i] as u8).unwrap();
        for (k, b) in seq.distractors[i].iter().enumerate() {
            writeln!(dis, "{i},{k},{}", box_fields(b)).unwrap();
        }
    }
    let ann_path = dir.join("annotations.csv");
    fs::write(&ann_path, ann).map_err(HarnessError::io(&ann_path))?;
    let dis_path = dir.join("distractors.csv");
    fs::write(&dis_path, dis).map_err(HarnessError::io(&dis_path))
}

/// Reads a directory written by [`write_sequence`].
pub fn read_sequence(dir: &Path) -> Result<SyntheticSequence> {
    let ann_path = dir.join("annotations.csv");
    let text = fs::read_to_string(&ann_path).map_err(HarnessError::io(&ann_path))?;
    let bad = |reason: String| HarnessError::Format { path: ann_path.clone(), reason };
    let mut seq = SyntheticSequence { frames: Vec::new(), boxes: Vec::new(), distractors: Vec::new(), visible: Vec::new() };
    for (line_no, line) in text.lines().enumerate().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("line {}: expected 6 fields", line_no + 1)));
        }
        let num = |i: usize| fields[i].parse::<f64>().map_err(|e| bad(format!("line {}: {e}", line_no + 1)));
        let frame: usize = fields[0].parse().map_err(|_| bad(format!("line {}: frame index", line_no + 1)))?;
        if frame != seq.frames.len() {
            return Err(bad(format!("line {}: frames out of order", line_no + 1)));
        }
        seq.boxes.push(BBox::new(num(1)?, num(2)?, num(3)?, num(4)?));
        seq.visible.push(fields[5] == "1");
        seq.frames.push(pnm::read_ppm(&dir.join(format!("frame_{frame:04}.ppm")))?);
        seq.distractors.push(Vec::new());
    }
    let dis_path = dir.join("distractors.csv");
    if let Ok(text) = fs::read_to_string(&dis_path) {
        for line in text.lines().skip(1) {
            let f: Vec<f64> = line.split(',').filter_map(|v| v.parse().ok()).collect();
            if f.len() == 6 && (f[0] as usize) < seq.distractors.len() {
                seq.distractors[f[0] as usize].push(BBox::new(f[2], f[3], f[4], f[5]));
            }
        }
    }
    if seq.is_empty() {
        return Err(bad("no frames".into()));
    }
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SequenceConfig {
        SequenceConfig { frames: 12, ..SequenceConfig::default() }
    }

    #[test]
    fn deterministic_given_seed() {
        assert_eq!(gen_sequence(&cfg()).unwrap(), gen_sequence(&cfg()).unwrap());
        let other = SequenceConfig { seed: 2, ..cfg() };
        assert_ne!(gen_sequence(&cfg()).unwrap().frames[0], gen_sequence(&other).unwrap().frames[0]);
    }

    #[test]
    fn boxes_stay_in_frame() {
        let c = SequenceConfig { frames: 200, speed: 4.0, distractors: 2, ..cfg() };
        let seq = gen_sequence(&c).unwrap();
        let frame = BBox::new(0.0, 0.0, c.width as f64, c.height as f64);
        for b in seq.boxes.iter().chain(seq.distractors.iter().flatten()) {
            assert!(frame.contains(b), "{b:?}");
        }
    }

    fn crop_pixels(seq: &SyntheticSequence, f: usize) -> Vec<f64> {
        // Interior pixels of the target, in box-relative order.
        let b = seq.boxes[f];
        let w = seq.frames[f].shape()[1];
        let mut out = Vec::new();
        for dy in 2..(b.height() as usize - 2) {
            for dx in 2..(b.width() as usize - 2) {
                let (x, y) = ((b.x1 + dx as f64).floor() as usize, (b.y1 + dy as f64).floor() as usize);
                out.push(seq.frames[f].data()[(y * w + x) * 3]);
            }
        }
        out
    }

    #[test]
    fn no_drift_keeps_appearance_on_static_target() {
        let c = SequenceConfig { speed: 0.0, drift: 0.0, distractors: 0, ..cfg() };
        let seq = gen_sequence(&c).unwrap();
        for f in 1..seq.len() {
            assert_eq!(seq.frames[f], seq.frames[0]);
        }
        let moving = gen_sequence(&SequenceConfig { speed: 2.0, ..c }).unwrap();
        let colors: std::collections::BTreeSet<u64> =
            crop_pixels(&moving, 5).iter().map(|v| v.to_bits()).collect();
        let first: std::collections::BTreeSet<u64> = crop_pixels(&moving, 0).iter().map(|v| v.to_bits()).collect();
        assert_eq!(colors, first);
    }

    #[test]
    fn occlusion_window_hides_target() {
        let c = SequenceConfig { speed: 0.0, occlusion: Some([4, 8]), ..cfg() };
        let seq = gen_sequence(&c).unwrap();
        for f in 0..seq.len() {
            assert_eq!(seq.visible[f], !(4..8).contains(&f));
            assert_eq!(seq.frames[f] == seq.frames[0], seq.visible[f]);
        }
    }

    #[test]
    fn invalid_motion_bounds_rejected() {
        assert!(gen_sequence(&SequenceConfig { max_size: 100.0, ..cfg() }).is_err());
        assert!(gen_sequence(&SequenceConfig { speed: -1.0, ..cfg() }).is_err());
    }

    #[test]
    fn write_then_read() {
        let dir = tempfile::tempdir().unwrap();
        let seq = gen_sequence(&SequenceConfig { frames: 3, distractors: 1, ..cfg() }).unwrap();
        write_sequence(&seq, dir.path()).unwrap();
        assert_eq!(read_sequence(dir.path()).unwrap(), seq);
    }
}
