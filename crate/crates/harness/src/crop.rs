//! Square crops of a frame, bilinearly resampled to a fixed output size.
//!
//! Output pixel `j` samples the frame at `x0 + (j + 0.5) * side / out - 0.5`,
//! i.e. pixel centers map to pixel centers, which matches the continuous box
//! transform of [`CropWindow::to_crop`].

use ctxtrack_core::backbone::CropWindow;
use ctxtrack_core::model::STRIDE;
use ctxtrack_core::Tensor;

use crate::error::{HarnessError, Result};

fn mean_color(frame: &Tensor) -> [f64; 3] {
    let mut sum = [0.0; 3];
    for px in frame.data().chunks(3) {
        for c in 0..3 {
            sum[c] += px[c];
        }
    }
    let n = (frame.len() / 3) as f64;
    sum.map(|s| s / n)
}

pub fn crop_resize(frame: &Tensor, window: &CropWindow, out: usize) -> Result<Tensor> {
    let &[h, w, 3] = frame.shape() else {
        return Err(HarnessError::Numeric(format!("frame must be [H, W, 3], got {:?}", frame.shape())));
    };
    if !(window.side > 0.0 && window.side.is_finite()) {
        return Err(HarnessError::Numeric(format!("crop side must be positive, got {}", window.side)));
    }
    if out == 0 || out % STRIDE != 0 {
        return Err(HarnessError::Numeric(format!("crop size {out} is not a multiple of {STRIDE}")));
    }
    let fill = mean_color(frame);
    let data = frame.data();
    let pixel = |x: isize, y: isize, c: usize| -> f64 {
        if x < 0 || y < 0 || x as usize >= w || y as usize >= h {
            fill[c]
        } else {
            data[(y as usize * w + x as usize) * 3 + c]
        }
    };
    let scale = window.side / out as f64;
    let x0 = window.cx - window.side / 2.0;
    let y0 = window.cy - window.side / 2.0;
    let mut result = Vec::with_capacity(out * out * 3);
    for i in 0..out {
        let fy = y0 + (i as f64 + 0.5) * scale - 0.5;
        let (yf, ty) = (fy.floor(), fy - fy.floor());
        for j in 0..out {
            let fx = x0 + (j as f64 + 0.5) * scale - 0.5;
            let (xf, tx) = (fx.floor(), fx - fx.floor());
            let (xa, ya) = (xf as isize, yf as isize);
            for c in 0..3 {
                let top = pixel(xa, ya, c) * (1.0 - tx) + pixel(xa + 1, ya, c) * tx;
                let bottom = pixel(xa, ya + 1, c) * (1.0 - tx) + pixel(xa + 1, ya + 1, c) * tx;
                result.push(top * (1.0 - ty) + bottom * ty);
            }
        }
    }
    Ok(Tensor::new(&[out, out, 3], result)?)
}
