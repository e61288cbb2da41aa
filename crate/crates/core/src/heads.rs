//! Classification and regression heads over the search feature map, box
//! decoding, and the training objective (varifocal + GIoU).

use rand::Rng;

use crate::boxes::{BBox, Ltrb};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::lca::Linear;
use crate::position::GridSize;
use crate::tensor::Tensor;

/// Three affine layers with GELU between them.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            layers: [
                Linear::new(format!("{prefix}.0"), input, hidden),
                Linear::new(format!("{prefix}.1"), hidden, hidden),
                Linear::new(format!("{prefix}.2"), hidden, output),
            ],
        }
    }

    pub fn last(&self) -> &Linear {
        &self.layers[2]
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in &self.layers {
            l.init(store, rng);
        }
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.layers[0].forward(g, x)?.gelu();
        let h = self.layers[1].forward(g, h)?.gelu();
        self.layers[2].forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct PredictionHeads {
    pub cls: Mlp3,
    pub reg: Mlp3,
}

/// Per-position head outputs, one row per search-grid position (row-major).
#[derive(Clone, Debug)]
pub struct HeadOutputs<'g> {
    pub cls_logits: Var<'g>,
    /// `[H*W, 1]`, in (0, 1).
    pub cls: Var<'g>,
    /// `[H*W, 4]` ltrb distances in grid units, positive.
    pub reg: Var<'g>,
    pub grid: GridSize,
}

impl PredictionHeads {
    pub fn new(prefix: &str, dim: usize) -> Self {
        Self {
            cls: Mlp3::new(&format!("{prefix}.cls"), dim, dim, 1),
            reg: Mlp3::new(&format!("{prefix}.reg"), dim, dim, 4),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cls.init(store, rng);
        self.reg.init(store, rng);
        // Start with small logits so early predictions sit near sigmoid(0)
        // and exp(0).
        for last in [self.cls.last(), self.reg.last()] {
            let w = store.get(&last.weight_name()).expect("initialized").clone();
            store.insert(last.weight_name(), w.map(|v| v * 0.1));
        }
    }

    /// Applies both heads per position to `features` (`[H*W, d]`).
    pub fn forward<'g>(&self, g: &'g Graph, features: Var<'g>, grid: GridSize) -> Result<HeadOutputs<'g>> {
        let shape = features.shape();
        if shape.len() != 2 || shape[0] != grid.area() {
            return shape_err("heads_forward", format!("features {shape:?} for grid {grid}"));
        }
        let cls_logits = self.cls.forward(g, features)?;
        let reg = self.reg.forward(g, features)?.exp();
        Ok(HeadOutputs { cls: cls_logits.sigmoid(), cls_logits, reg, grid })
    }
}

/// Best-scoring box of a head output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodedBox {
    pub bbox: BBox,
    pub confidence: f64,
    /// `(row, col)` of the winning position.
    pub position: (usize, usize),
    /// Zero-area (or non-finite) box.
    pub low_quality: bool,
}

/// Grid position `(k^x, k^y)` of flat index `i`.
pub fn grid_point(grid: GridSize, i: usize) -> (f64, f64) {
    ((i % grid.cols) as f64, (i / grid.cols) as f64)
}

/// Decodes every position's box in pixels.
pub fn decode_all(reg: &Tensor, grid: GridSize, stride: f64) -> Result<Vec<BBox>> {
    if reg.shape() != [grid.area(), 4] {
        return shape_err("decode", format!("reg {:?} for grid {grid}", reg.shape()));
    }
    Ok(reg
        .data()
        .chunks(4)
        .enumerate()
        .map(|(i, v)| {
            let (kx, ky) = grid_point(grid, i);
            Ltrb { l: v[0], t: v[1], r: v[2], b: v[3] }.decode(kx, ky, stride)
        })
        .collect())
}

/// Box at the classification argmax; ties go to the lowest flat index.
pub fn decode_box(cls: &Tensor, reg: &Tensor, grid: GridSize, stride: f64) -> Result<DecodedBox> {
    if cls.len() != grid.area() {
        return shape_err("decode_box", format!("cls {:?} for grid {grid}", cls.shape()));
    }
    let boxes = decode_all(reg, grid, stride)?;
    let (best, confidence) = cls
        .data()
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
    let bbox = boxes[best];
    Ok(DecodedBox {
        bbox,
        confidence,
        position: (best / grid.cols, best % grid.cols),
        low_quality: bbox.area() <= 0.0 || !bbox.is_finite(),
    })
}

impl HeadOutputs<'_> {
    pub fn decode(&self, stride: f64) -> Result<DecodedBox> {
        decode_box(&self.cls.value(), &self.reg.value(), self.grid, stride)
    }
}

/// IoU-aware classification labels and the ground truth they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingTarget {
    /// `[H*W, 1]`, IoU of the predicted box at positive positions, else 0.
    pub q: Tensor,
    pub positive: Vec<bool>,
    pub gt: BBox,
}

impl TrainingTarget {
    pub fn positive_indices(&self) -> Vec<usize> {
        self.positive.iter().enumerate().filter(|(_, &p)| p).map(|(i, _)| i).collect()
    }
}

/// Positions whose grid point lies inside `gt` are positive, labelled with
/// the IoU between their own predicted box and `gt`. `pred` are detached
/// predictions in pixels.
pub fn build_targets(gt: &BBox, grid: GridSize, stride: f64, pred: &[BBox]) -> Result<TrainingTarget> {
    gt.ensure_valid("gt")?;
    let image = BBox::new(0.0, 0.0, grid.cols as f64 * stride, grid.rows as f64 * stride);
    if gt.intersection_area(&image) <= 0.0 {
        return invalid("gt", format!("{gt:?} lies outside the {}x{} search image", image.x2, image.y2));
    }
    if pred.len() != grid.area() {
        return shape_err("build_targets", format!("{} predictions for grid {grid}", pred.len()));
    }
    let mut q = vec![0.0; grid.area()];
    let mut positive = vec![false; grid.area()];
    for i in 0..grid.area() {
        let (kx, ky) = grid_point(grid, i);
        if gt.contains_point(kx * stride, ky * stride) {
            positive[i] = true;
            q[i] = pred[i].iou(gt).clamp(0.0, 1.0);
        }
    }
    Ok(TrainingTarget { q: Tensor::new(&[grid.area(), 1], q)?, positive, gt: *gt })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarifocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for VarifocalParams {
    fn default() -> Self {
        Self { alpha: 0.75, gamma: 2.0 }
    }
}

/// Varifocal loss of one prediction `p` against label `q`.
pub fn varifocal_term(p: f64, q: f64, params: VarifocalParams) -> f64 {
    if q > 0.0 {
        -q * (q * p.ln() + (1.0 - q) * (1.0 - p).ln())
    } else {
        -params.alpha * p.powf(params.gamma) * (1.0 - p).ln()
    }
}

/// Summed varifocal loss normalized by the number of `q > 0` entries (at
/// least one).
pub fn varifocal_loss(p: &[f64], q: &[f64], params: VarifocalParams) -> Result<f64> {
    if p.len() != q.len() {
        return shape_err("varifocal_loss", format!("{} predictions vs {} labels", p.len(), q.len()));
    }
    if let Some(bad) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return invalid("p", format!("prediction {bad} outside (0, 1)"));
    }
    if let Some(bad) = q.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return invalid("q", format!("label {bad} outside [0, 1]"));
    }
    let positives = q.iter().filter(|&&v| v > 0.0).count().max(1);
    let total: f64 = p.iter().zip(q).map(|(&p, &q)| varifocal_term(p, q, params)).sum();
    Ok(total / positives as f64)
}

/// Tracked varifocal loss computed from classification logits, using
/// `log p = -softplus(-z)` and `log(1 - p) = -softplus(z)`.
pub fn varifocal_loss_logits<'g>(logits: Var<'g>, q: &Tensor, params: VarifocalParams) -> Result<Var<'g>> {
    let g = logits.graph();
    if logits.shape() != q.shape() {
        return shape_err("varifocal_loss", format!("logits {:?} vs labels {:?}", logits.shape(), q.shape()));
    }
    let positives = q.data().iter().filter(|&&v| v > 0.0).count().max(1);
    let pos_log_p: Vec<f64> = q.data().iter().map(|&v| if v > 0.0 { v * v } else { 0.0 }).collect();
    let pos_log_1mp: Vec<f64> = q.data().iter().map(|&v| if v > 0.0 { v * (1.0 - v) } else { 0.0 }).collect();
    let negative: Vec<f64> = q.data().iter().map(|&v| if v > 0.0 { 0.0 } else { params.alpha }).collect();
    let shape = q.shape();

    let log_p = logits.neg().softplus().neg();
    let log_1mp = logits.softplus().neg();
    let p_gamma = log_p.scale(params.gamma).exp();

    let positive_part = log_p
        .mul(g.constant(Tensor::new(shape, pos_log_p)?))?
        .add(log_1mp.mul(g.constant(Tensor::new(shape, pos_log_1mp)?))?)?;
    let negative_part = p_gamma.mul(log_1mp)?.mul(g.constant(Tensor::new(shape, negative)?))?;
    Ok(positive_part.add(negative_part)?.sum().scale(-1.0 / positives as f64))
}

/// Mean `1 - GIoU` over the `positions` rows of `reg` against `gt` given in
/// grid units.
pub fn giou_loss_positions<'g>(reg: Var<'g>, grid: GridSize, positions: &[usize], gt_grid: &BBox) -> Result<Var<'g>> {
    gt_grid.ensure_valid("gt")?;
    let g = reg.graph();
    if positions.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = positions.len();
    let reg = reg.take_rows(positions)?;
    let mut anchor = Vec::with_capacity(n * 4);
    for &i in positions {
        let (kx, ky) = grid_point(grid, i);
        anchor.extend([kx, ky, kx, ky]);
    }
    let sign = g.constant(Tensor::new(&[4], vec![-1.0, -1.0, 1.0, 1.0])?);
    let pred = g.constant(Tensor::new(&[n, 4], anchor)?).add(reg.mul_row(sign)?)?;
    let col = |c: usize| pred.cols(c, 1);
    let (x1, y1, x2, y2) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let gt = |v: f64| g.constant(Tensor::full(&[n, 1], v));
    let (gx1, gy1, gx2, gy2) = (gt(gt_grid.x1), gt(gt_grid.y1), gt(gt_grid.x2), gt(gt_grid.y2));

    let iw = x2.minimum(gx2)?.sub(x1.maximum(gx1)?)?.max_scalar(0.0);
    let ih = y2.minimum(gy2)?.sub(y1.maximum(gy1)?)?.max_scalar(0.0);
    let inter = iw.mul(ih)?;
    let area_pred = x2.sub(x1)?.mul(y2.sub(y1)?)?;
    let union = area_pred.add_scalar(gt_grid.area()).sub(inter)?;
    let iou = inter.div(union)?;
    let hw = x2.maximum(gx2)?.sub(x1.minimum(gx1)?)?;
    let hh = y2.maximum(gy2)?.sub(y1.minimum(gy1)?)?;
    let hull = hw.mul(hh)?;
    let giou = iou.sub(hull.sub(union)?.div(hull)?)?;
    Ok(giou.rsub_scalar(1.0).mean())
}

/// Loss weights of the two objective terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { cls: 1.5, giou: 1.5 }
    }
}

pub fn total_loss(cls: f64, giou: f64, weights: LossWeights) -> f64 {
    weights.cls * cls + weights.giou * giou
}

/// Per-term breakdown of the tracked objective.
#[derive(Clone, Debug)]
pub struct LossTerms<'g> {
    pub cls: Var<'g>,
    pub giou: Var<'g>,
    pub total: Var<'g>,
}

/// IoU-aware objective on one head output. `target` must have been built
/// from detached predictions so that `q` carries no gradient.
pub fn objective<'g>(
    out: &HeadOutputs<'g>,
    target: &TrainingTarget,
    stride: f64,
    vfl: VarifocalParams,
    weights: LossWeights,
) -> Result<LossTerms<'g>> {
    let cls = varifocal_loss_logits(out.cls_logits, &target.q, vfl)?;
    let giou = giou_loss_positions(out.reg, out.grid, &target.positive_indices(), &target.gt.scaled(1.0 / stride))?;
    let total = cls.scale(weights.cls).add(giou.scale(weights.giou))?;
    Ok(LossTerms { cls, giou, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::giou_loss;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn varifocal_point_values() {
        let p = VarifocalParams::default();
        assert!(varifocal_loss(&[1.0 - 1e-15], &[1.0], p).unwrap().abs() < 1e-12);
        let neg = varifocal_loss(&[0.5], &[0.0], p).unwrap();
        assert!((neg - 0.12997).abs() < 1e-4, "{neg}");
        assert!((neg - (-0.75 * 0.25 * 0.5f64.ln())).abs() < 1e-15);
        let soft = varifocal_loss(&[0.5], &[0.5], p).unwrap();
        assert!((soft - 0.34657).abs() < 1e-5);
        assert!(varifocal_loss(&[1.0], &[1.0], p).is_err());
        assert!(varifocal_loss(&[0.0], &[0.0], p).is_err());
    }

    #[test]
    fn varifocal_logits_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = Tensor::randn(&[6, 1], 2.0, &mut rng);
        let q = Tensor::new(&[6, 1], vec![0.0, 0.3, 0.0, 0.9, 1.0, 0.0]).unwrap();
        let g = Graph::new(&ParamStore::new());
        let tracked = varifocal_loss_logits(g.constant(z.clone()), &q, VarifocalParams::default()).unwrap();
        let p: Vec<f64> = z.data().iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect();
        let plain = varifocal_loss(&p, q.data(), VarifocalParams::default()).unwrap();
        assert!((tracked.value().item() - plain).abs() < 1e-12);
    }

    #[test]
    fn varifocal_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let p: f64 = rand::Rng::gen_range(&mut rng, 1e-6..1.0 - 1e-6);
            let q: f64 = if rand::Rng::gen_bool(&mut rng, 0.5) { 0.0 } else { rand::Rng::gen_range(&mut rng, 1e-6..=1.0) };
            assert!(varifocal_term(p, q, VarifocalParams::default()) >= 0.0);
        }
    }

    #[test]
    fn total_loss_weights() {
        let t = total_loss(0.2, 0.4, LossWeights::default());
        assert!((t - 0.9).abs() <= 2.0 * f64::EPSILON);
        assert_eq!(total_loss(0.0, 0.0, LossWeights::default()), 0.0);
        let c = 3.0;
        let scaled = total_loss(0.2 * c, 0.4 * c, LossWeights::default());
        assert!((scaled - c * t).abs() < 1e-12);
    }

    #[test]
    fn heads_shapes_and_zero_init_values() {
        let heads = PredictionHeads::new("head", 32);
        let mut store = ParamStore::new();
        heads.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let grid = GridSize::square(4).unwrap();
        let feats = Tensor::randn(&[16, 32], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let g = Graph::new(&store);
        let out = heads.forward(&g, g.constant(feats.clone()), grid).unwrap();
        assert_eq!(out.cls.shape(), vec![16, 1]);
        assert_eq!(out.reg.shape(), vec![16, 4]);
        assert!(out.cls.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(out.reg.value().data().iter().all(|&v| v > 0.0));

        for last in [heads.cls.last(), heads.reg.last()] {
            let shape = store.get(&last.weight_name()).unwrap().shape().to_vec();
            store.set(&last.weight_name(), Tensor::zeros(&shape)).unwrap();
        }
        let g = Graph::new(&store);
        let out = heads.forward(&g, g.constant(feats), grid).unwrap();
        assert!(out.cls.value().data().iter().all(|&v| v == 0.5));
        assert!(out.reg.value().data().iter().all(|&v| v == 1.0));
    }

    fn reg_at(grid: GridSize, pos: usize, ltrb: [f64; 4]) -> Tensor {
        let mut reg = vec![1.0; grid.area() * 4];
        reg[pos * 4..pos * 4 + 4].copy_from_slice(&ltrb);
        Tensor::new(&[grid.area(), 4], reg).unwrap()
    }

    #[test]
    fn decode_examples() {
        let grid = GridSize::new(6, 8).unwrap();
        let pos = 3 * 8 + 4;
        let mut cls = vec![0.1; 48];
        cls[pos] = 0.9;
        let cls = Tensor::new(&[48, 1], cls).unwrap();
        let d = decode_box(&cls, &reg_at(grid, pos, [2.0; 4]), grid, 16.0).unwrap();
        assert_eq!(d.bbox, BBox::new(32.0, 16.0, 96.0, 80.0));
        assert_eq!(d.position, (3, 4));
        assert_eq!(d.confidence, 0.9);
        assert!(!d.low_quality);

        let d = decode_box(&cls, &reg_at(grid, pos, [0.0; 4]), grid, 16.0).unwrap();
        assert!(d.low_quality);

        // Ties resolve to the lowest index.
        let flat = Tensor::full(&[48, 1], 0.5);
        assert_eq!(decode_box(&flat, &reg_at(grid, 0, [1.0; 4]), grid, 16.0).unwrap().position, (0, 0));
    }

    #[test]
    fn targets_single_positive_and_perfect() {
        let grid = GridSize::square(4).unwrap();
        // Covers only grid point (col 1, row 2) = pixel (16, 32).
        let gt = BBox::new(10.0, 26.0, 22.0, 38.0);
        let preds = vec![BBox::new(0.0, 0.0, 1.0, 1.0); 16];
        let t = build_targets(&gt, grid, 16.0, &preds).unwrap();
        assert_eq!(t.positive_indices(), vec![2 * 4 + 1]);
        assert_eq!(t.q.data()[9], BBox::new(0.0, 0.0, 1.0, 1.0).iou(&gt));

        let gt = BBox::new(8.0, 8.0, 40.0, 40.0);
        let t = build_targets(&gt, grid, 16.0, &vec![gt; 16]).unwrap();
        assert_eq!(t.positive_indices().len(), 4);
        for (i, &p) in t.positive.iter().enumerate() {
            assert_eq!(t.q.data()[i], if p { 1.0 } else { 0.0 });
        }
        assert!(t.q.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(build_targets(&BBox::new(100.0, 100.0, 120.0, 120.0), grid, 16.0, &preds).is_err());
    }

    #[test]
    fn tracked_giou_matches_plain() {
        let grid = GridSize::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reg = Tensor::rand_uniform(&[16, 4], 0.2, 3.0, &mut rng);
        let gt = BBox::new(0.5, 0.7, 2.9, 2.4);
        let positions = [5, 6, 9, 10];
        let g = Graph::new(&ParamStore::new());
        let tracked = giou_loss_positions(g.constant(reg.clone()), grid, &positions, &gt).unwrap().value().item();
        let boxes = decode_all(&reg, grid, 1.0).unwrap();
        let plain: f64 =
            positions.iter().map(|&i| giou_loss(&boxes[i], &gt).unwrap()).sum::<f64>() / positions.len() as f64;
        assert!((tracked - plain).abs() < 1e-12);
    }
}
