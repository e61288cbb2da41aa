//! Axis-aligned boxes, overlap measures, and the per-position ltrb and
//! Gaussian encodings of a box on a stride-`s` feature grid.

use crate::error::{invalid, Result};
use crate::position::GridSize;
use crate::tensor::Tensor;

/// Corner-form box `(x1, y1, x2, y2)`; pixel units unless stated otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.x1 < self.x2 && self.y1 < self.y2) || !self.is_finite()
    }

    pub fn is_finite(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
    }

    pub fn ensure_valid(&self, arg: &'static str) -> Result<()> {
        if self.is_degenerate() {
            return invalid(arg, format!("degenerate box {self:?}"));
        }
        Ok(())
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x <= self.x2 && y >= self.y1 && y <= self.y2
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.x1 >= self.x1 && other.x2 <= self.x2 && other.y1 >= self.y1 && other.y2 <= self.y2
    }

    /// Uniform scaling of all coordinates (e.g. pixels to grid units).
    pub fn scaled(&self, factor: f64) -> Self {
        Self::new(self.x1 * factor, self.y1 * factor, self.x2 * factor, self.y2 * factor)
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    /// Intersection over union; zero when the union is empty.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }

    /// Generalized IoU: `IoU - (hull - union) / hull`.
    pub fn giou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        let hull = (self.x2.max(other.x2) - self.x1.min(other.x1)) * (self.y2.max(other.y2) - self.y1.min(other.y1));
        if hull <= 0.0 {
            return 0.0;
        }
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        iou - (hull - union) / hull
    }
}

/// `1 - GIoU(pred, gt)` for a single box pair.
pub fn giou_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    gt.ensure_valid("gt")?;
    Ok(1.0 - pred.giou(gt))
}

/// Distances `(l, t, r, b)` from a grid position to the four sides.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ltrb {
    pub l: f64,
    pub t: f64,
    pub r: f64,
    pub b: f64,
}

impl Ltrb {
    /// Side distances of `bbox` (pixels) seen from grid position
    /// `(kx, ky)` on a stride-`stride` grid, in grid units.
    pub fn encode(bbox: &BBox, kx: f64, ky: f64, stride: f64) -> Self {
        Self {
            l: kx - bbox.x1 / stride,
            t: ky - bbox.y1 / stride,
            r: bbox.x2 / stride - kx,
            b: bbox.y2 / stride - ky,
        }
    }

    /// Inverse of [`Ltrb::encode`], back to pixels.
    pub fn decode(&self, kx: f64, ky: f64, stride: f64) -> BBox {
        BBox::new((kx - self.l) * stride, (ky - self.t) * stride, (kx + self.r) * stride, (ky + self.b) * stride)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.l, self.t, self.r, self.b]
    }
}

fn check_stride(stride: f64) -> Result<()> {
    if !(stride > 0.0) {
        return invalid("stride", format!("must be positive, got {stride}"));
    }
    Ok(())
}

/// Per-position ltrb distances, `[H, W, 4]`, in grid units. Position
/// `(row, col)` is the grid point `(k^x, k^y) = (col, row)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtrbMap {
    pub values: Tensor,
    pub grid: GridSize,
}

pub fn ltrb_map(bbox: &BBox, grid: GridSize, stride: f64) -> Result<LtrbMap> {
    check_stride(stride)?;
    bbox.ensure_valid("box")?;
    let mut data = Vec::with_capacity(grid.area() * 4);
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            data.extend(Ltrb::encode(bbox, col as f64, row as f64, stride).as_array());
        }
    }
    Ok(LtrbMap { values: Tensor::new(&[grid.rows, grid.cols, 4], data)?, grid })
}

/// Unit-peak isotropic Gaussian over the grid, `[H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMap {
    pub values: Tensor,
    pub grid: GridSize,
    /// `(row, col)` of the largest value.
    pub peak: (usize, usize),
    /// Spread in grid units.
    pub sigma: f64,
}

/// Gaussian centered on the box center with `sigma = max(w, h) / (4 s)` grid
/// units, rescaled so that its largest grid value is exactly 1.
pub fn gaussian_map(bbox: &BBox, grid: GridSize, stride: f64) -> Result<GaussianMap> {
    check_stride(stride)?;
    bbox.ensure_valid("box")?;
    let sigma = bbox.width().max(bbox.height()) / (4.0 * stride);
    let (cx, cy) = bbox.center();
    let (cx, cy) = (cx / stride, cy / stride);
    let mut raw = Vec::with_capacity(grid.area());
    for row in 0..grid.rows {
        for col in 0..grid.cols {
            let d2 = (col as f64 - cx).powi(2) + (row as f64 - cy).powi(2);
            raw.push(-d2 / (2.0 * sigma * sigma));
        }
    }
    // Normalize in log space so far-away cells stay strictly positive.
    let (peak_index, &max_log) = raw
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, (i, v)| if *v > *best.1 { (i, v) } else { best });
    let data = raw.iter().map(|v| (v - max_log).exp().max(f64::MIN_POSITIVE)).collect();
    Ok(GaussianMap {
        values: Tensor::new(&[grid.rows, grid.cols, 1], data)?,
        grid,
        peak: (peak_index / grid.cols, peak_index % grid.cols),
        sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ltrb_example_and_identities() {
        let b = BBox::new(32.0, 16.0, 96.0, 80.0);
        let e = Ltrb::encode(&b, 4.0, 3.0, 16.0);
        assert_eq!(e, Ltrb { l: 2.0, t: 2.0, r: 2.0, b: 2.0 });
        let corner = Ltrb::encode(&b, 2.0, 1.0, 16.0);
        assert_eq!((corner.l, corner.t), (0.0, 0.0));

        let map = ltrb_map(&b, GridSize::new(6, 8).unwrap(), 16.0).unwrap();
        for row in 0..6 {
            for col in 0..8 {
                let v = |c| map.values.at(&[row, col, c]);
                assert_eq!(v(0) + v(2), 4.0);
                assert_eq!(v(1) + v(3), 4.0);
            }
        }
    }

    #[test]
    fn ltrb_rejects_degenerate() {
        let grid = GridSize::square(4).unwrap();
        assert!(ltrb_map(&BBox::new(5.0, 0.0, 5.0, 10.0), grid, 16.0).is_err());
        assert!(ltrb_map(&BBox::new(0.0, 9.0, 5.0, 3.0), grid, 16.0).is_err());
        assert!(ltrb_map(&BBox::new(0.0, 0.0, 5.0, 5.0), grid, 0.0).is_err());
    }

    #[test]
    fn decode_inverts_encode_example() {
        let e = Ltrb { l: 2.0, t: 2.0, r: 2.0, b: 2.0 };
        assert_eq!(e.decode(4.0, 3.0, 16.0), BBox::new(32.0, 16.0, 96.0, 80.0));
    }

    #[test]
    fn giou_examples() {
        let a = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        let b = BBox::new(2.0, 2.0, 3.0, 3.0);
        assert!((a.giou(&b) + 7.0 / 9.0).abs() < 1e-15);
        assert!((giou_loss(&a, &b).unwrap() - 16.0 / 9.0).abs() < 1e-12);
        assert!(giou_loss(&a, &BBox::new(1.0, 1.0, 1.0, 2.0)).is_err());
    }

    #[test]
    fn gaussian_examples() {
        // 64x64 box centered on grid point (col 4, row 3): sigma = 1 grid unit.
        let b = BBox::from_center(64.0, 48.0, 64.0, 64.0);
        let m = gaussian_map(&b, GridSize::new(8, 8).unwrap(), 16.0).unwrap();
        assert_eq!(m.sigma, 1.0);
        assert_eq!(m.peak, (3, 4));
        assert_eq!(m.values.at(&[3, 4, 0]), 1.0);
        assert_eq!(m.values.at(&[3, 3, 0]), m.values.at(&[3, 5, 0]));
        assert_eq!(m.values.at(&[2, 4, 0]), m.values.at(&[4, 4, 0]));
        assert!((m.values.at(&[3, 5, 0]) - (-0.5f64).exp()).abs() < 1e-15);
        assert!(m.values.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn gaussian_peak_is_one_off_grid() {
        let b = BBox::new(10.0, 13.0, 41.0, 37.0);
        let m = gaussian_map(&b, GridSize::new(4, 4).unwrap(), 16.0).unwrap();
        let max = m.values.data().iter().copied().fold(0.0, f64::max);
        assert_eq!(max, 1.0);
        assert_eq!(m.values.at(&[m.peak.0, m.peak.1, 0]), 1.0);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.1..40.0f64, 0.1..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn giou_bounds(a in arb_box(), b in arb_box()) {
            let g = a.giou(&b);
            prop_assert!((-1.0..=1.0).contains(&g));
            let loss = giou_loss(&a, &b).unwrap();
            prop_assert!((0.0..=2.0).contains(&loss));
            prop_assert!((a.giou(&b) - b.giou(&a)).abs() < 1e-12);
            prop_assert_eq!(giou_loss(&a, &a).unwrap(), 0.0);
        }
    }

    proptest! {
        #[test]
        fn encode_decode_identity_on_grid(
            x1 in 0u32..48, y1 in 0u32..48, w in 1u32..16, h in 1u32..16,
            kx in 0u32..4, ky in 0u32..4,
        ) {
            // Boxes on a 1/16 pixel lattice are exactly representable.
            let b = BBox::new(x1 as f64, y1 as f64, (x1 + w) as f64, (y1 + h) as f64);
            let e = Ltrb::encode(&b, kx as f64, ky as f64, 16.0);
            let grid_box = e.decode(kx as f64, ky as f64, 1.0);
            prop_assert_eq!(grid_box, b.scaled(1.0 / 16.0));
        }
    }
}
