//! Per-image feature extraction blocks (patch embedding, patch merging and
//! non-shifted window attention), the box embedding injected into the
//! previous template, and the training-time jitter of that template's crop.

use std::sync::Arc;

use rand::Rng;

use crate::boxes::{BBox, GaussianMap, LtrbMap};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::lca::{FeedForward, LayerNorm, Linear};
use crate::position::GridSize;
use crate::tensor::Tensor;

pub const PATCH: usize = 4;

/// Tokens of one image laid out row-major on a grid, `[rows * cols, C]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid<'g> {
    pub tokens: Var<'g>,
    pub grid: GridSize,
}

impl<'g> TokenGrid<'g> {
    pub fn new(tokens: Var<'g>, grid: GridSize) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != grid.area() {
            return shape_err("TokenGrid", format!("{shape:?} tokens for grid {grid}"));
        }
        Ok(Self { tokens, grid })
    }

    pub fn channels(&self) -> usize {
        self.tokens.shape()[1]
    }
}

fn image_dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => shape_err("image", format!("expected [H, W, C], got {s:?}")),
    }
}

/// Non-overlapping 4x4 patches projected linearly to `C` channels.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    proj: Linear,
}

impl PatchEmbed {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self { proj: Linear::new(format!("{prefix}.proj"), PATCH * PATCH * 3, channels) }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.proj.init(store, rng);
    }

    pub fn forward<'g>(&self, g: &'g Graph, image: &Tensor) -> Result<TokenGrid<'g>> {
        let (h, w, c) = image_dims(image)?;
        if c != 3 {
            return shape_err("patch_embed", format!("expected 3 channels, got {c}"));
        }
        if h % PATCH != 0 || w % PATCH != 0 {
            return invalid("image", format!("{h}x{w} is not divisible by the patch size {PATCH}"));
        }
        let grid = GridSize::new(h / PATCH, w / PATCH)?;
        let mut index = Vec::with_capacity(h * w * 3);
        for pr in 0..grid.rows {
            for pc in 0..grid.cols {
                for dy in 0..PATCH {
                    for dx in 0..PATCH {
                        let base = ((pr * PATCH + dy) * w + pc * PATCH + dx) * 3;
                        index.extend(base..base + 3);
                    }
                }
            }
        }
        let patches = g.constant(image.clone()).gather(Arc::new(index), &[grid.area(), PATCH * PATCH * 3])?;
        TokenGrid::new(self.proj.forward(g, patches)?, grid)
    }
}

/// 2x2 neighborhood concatenation, normalization and a linear map to `2C`.
#[derive(Clone, Debug)]
pub struct Downsample {
    norm: LayerNorm,
    reduce: Linear,
}

impl Downsample {
    pub fn new(prefix: &str, channels: usize) -> Self {
        Self {
            norm: LayerNorm::new(format!("{prefix}.norm"), 4 * channels),
            reduce: Linear::new(format!("{prefix}.reduce"), 4 * channels, 2 * channels),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.norm.init(store);
        self.reduce.init(store, rng);
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: TokenGrid<'g>) -> Result<TokenGrid<'g>> {
        let GridSize { rows, cols } = x.grid;
        if rows % 2 != 0 || cols % 2 != 0 {
            return invalid("grid", format!("{} cannot be halved", x.grid));
        }
        let c = x.channels();
        let out = GridSize::new(rows / 2, cols / 2)?;
        let mut index = Vec::with_capacity(rows * cols * c);
        for r in 0..out.rows {
            for q in 0..out.cols {
                for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                    let t = (2 * r + dy) * cols + 2 * q + dx;
                    index.extend(t * c..(t + 1) * c);
                }
            }
        }
        let merged = x.tokens.gather(Arc::new(index), &[out.area(), 4 * c])?;
        let reduced = self.reduce.forward(g, self.norm.forward(g, merged)?)?;
        TokenGrid::new(reduced, out)
    }
}

/// Self-attention inside non-overlapping `window x window` tiles of one
/// image, with a per-window relative position bias; pre-norm transformer
/// block with a feed-forward sublayer.
#[derive(Clone, Debug)]
pub struct WindowBlock {
    prefix: String,
    dim: usize,
    heads: usize,
    window: usize,
    norm_attn: LayerNorm,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

impl WindowBlock {
    pub fn new(prefix: impl Into<String>, dim: usize, heads: usize, window: usize, ffn_ratio: usize) -> Result<Self> {
        let prefix = prefix.into();
        if heads == 0 || dim % heads != 0 {
            return invalid("heads", format!("dimension {dim} is not divisible by {heads} heads"));
        }
        if window == 0 {
            return invalid("window", "must be positive");
        }
        Ok(Self {
            norm_attn: LayerNorm::new(format!("{prefix}.norm1"), dim),
            norm_ffn: LayerNorm::new(format!("{prefix}.norm2"), dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), dim, ffn_ratio),
            prefix,
            dim,
            heads,
            window,
        })
    }

    pub fn rel_name(&self) -> String {
        format!("{}.attn.rel", self.prefix)
    }

    pub fn weight_name(&self, which: &str) -> String {
        format!("{}.attn.w_{which}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.dim;
        let std = (1.0 / d as f64).sqrt();
        for w in ["q", "k", "v", "o"] {
            store.insert(self.weight_name(w), Tensor::randn(&[d, d], std, rng));
        }
        store.insert(format!("{}.attn.b_o", self.prefix), Tensor::zeros(&[d]));
        let span = 2 * self.window - 1;
        store.insert(self.rel_name(), Tensor::randn(&[self.heads, span * span], 0.02, rng));
        self.norm_attn.init(store);
        self.norm_ffn.init(store);
        self.ffn.init(store, rng);
    }

    /// Token order of window `(wr, wc)`: row-major inside the window.
    fn window_tokens(&self, grid: GridSize) -> Vec<Vec<usize>> {
        let ws = self.window;
        let mut out = Vec::new();
        for wr in 0..grid.rows / ws {
            for wc in 0..grid.cols / ws {
                let mut tokens = Vec::with_capacity(ws * ws);
                for i in 0..ws {
                    for j in 0..ws {
                        tokens.push((wr * ws + i) * grid.cols + wc * ws + j);
                    }
                }
                out.push(tokens);
            }
        }
        out
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: TokenGrid<'g>) -> Result<TokenGrid<'g>> {
        let ws = self.window;
        if x.grid.rows % ws != 0 || x.grid.cols % ws != 0 {
            return invalid("window", format!("grid {} is not divisible into {ws}x{ws} windows", x.grid));
        }
        if x.channels() != self.dim {
            return shape_err("swa_lite_forward", format!("{} channels, block expects {}", x.channels(), self.dim));
        }
        let (d, heads) = (self.dim, self.heads);
        let dh = d / heads;
        let n = ws * ws;
        let windows = self.window_tokens(x.grid);
        let nw = windows.len();

        // [N, d] -> [windows * heads, n, dh]
        let mut to_windows = Vec::with_capacity(nw * heads * n * dh);
        for tokens in &windows {
            for h in 0..heads {
                for &t in tokens {
                    to_windows.extend((0..dh).map(|c| t * d + h * dh + c));
                }
            }
        }
        let to_windows = Arc::new(to_windows);
        // Inverse mapping back to [N, d].
        let mut from_windows = vec![0; x.grid.area() * d];
        for (w, tokens) in windows.iter().enumerate() {
            for h in 0..heads {
                for (i, &t) in tokens.iter().enumerate() {
                    for c in 0..dh {
                        from_windows[t * d + h * dh + c] = (((w * heads + h) * n) + i) * dh + c;
                    }
                }
            }
        }
        // Relative bias lookup, identical for every window.
        let span = 2 * ws - 1;
        let mut rel_index = Vec::with_capacity(nw * heads * n * n);
        for _ in 0..nw {
            for h in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let dr = (i / ws) as isize - (j / ws) as isize + ws as isize - 1;
                        let dc = (i % ws) as isize - (j % ws) as isize + ws as isize - 1;
                        rel_index.push(h * span * span + dr as usize * span + dc as usize);
                    }
                }
            }
        }

        let normed = self.norm_attn.forward(g, x.tokens)?;
        let batch = [nw * heads, n, dh];
        let project = |w: &str| -> Result<Var<'g>> {
            normed.matmul(g.param(&self.weight_name(w))?)?.gather(to_windows.clone(), &batch)
        };
        let (q, k, v) = (project("q")?, project("k")?, project("v")?);
        let rel = g.param(&self.rel_name())?.gather(Arc::new(rel_index), &[nw * heads, n, n])?;
        let weights = q.bmm(k, true)?.scale(1.0 / (dh as f64).sqrt()).add(rel)?.softmax_lastdim();
        let mixed = weights.bmm(v, false)?.gather(Arc::new(from_windows), &[x.grid.area(), d])?;
        let attn = mixed
            .matmul(g.param(&self.weight_name("o"))?)?
            .add_row(g.param(&format!("{}.attn.b_o", self.prefix))?)?;
        let h = x.tokens.add(attn)?;
        let out = h.add(self.ffn.forward(g, self.norm_ffn.forward(g, h)?)?)?;
        TokenGrid::new(out, x.grid)
    }
}

/// Additive embedding `w * y_pre + psi(d_pre)` for previous-template tokens.
#[derive(Clone, Debug)]
pub struct BoxEmbedding {
    prefix: String,
    dim: usize,
    psi_in: Linear,
    psi_out: Linear,
    pub use_gaussian: bool,
    pub use_ltrb: bool,
}

impl BoxEmbedding {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        let prefix = prefix.into();
        Self {
            psi_in: Linear::new(format!("{prefix}.psi.0"), 4, dim),
            psi_out: Linear::new(format!("{prefix}.psi.1"), dim, dim),
            prefix,
            dim,
            use_gaussian: true,
            use_ltrb: true,
        }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.w", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(self.weight_name(), Tensor::randn(&[self.dim], 0.1, rng));
        self.psi_in.init(store, rng);
        self.psi_out.init(store, rng);
    }

    /// `[H*W, C]` embedding over the previous-template grid.
    pub fn forward<'g>(&self, g: &'g Graph, gaussian: &GaussianMap, ltrb: &LtrbMap) -> Result<Var<'g>> {
        if gaussian.grid != ltrb.grid {
            return shape_err("box_embedding", format!("gaussian grid {} vs ltrb grid {}", gaussian.grid, ltrb.grid));
        }
        let n = gaussian.grid.area();
        let mut out = g.constant(Tensor::zeros(&[n, self.dim]));
        if self.use_gaussian {
            let y = g.constant(gaussian.values.reshape(&[n, 1])?);
            let w = g.param(&self.weight_name())?.reshape(&[1, self.dim])?;
            out = out.add(y.matmul(w)?)?;
        }
        if self.use_ltrb {
            let d = g.constant(ltrb.values.reshape(&[n, 4])?);
            let psi = self.psi_out.forward(g, self.psi_in.forward(g, d)?.gelu())?;
            out = out.add(psi)?;
        }
        Ok(out)
    }
}

/// Square crop window in frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropWindow {
    pub cx: f64,
    pub cy: f64,
    pub side: f64,
}

impl CropWindow {
    pub fn bounds(&self) -> BBox {
        BBox::from_center(self.cx, self.cy, self.side, self.side)
    }

    /// Maps a frame-pixel box into the coordinates of a `out_size` crop.
    pub fn to_crop(&self, b: &BBox, out_size: usize) -> BBox {
        let s = out_size as f64 / self.side;
        let o = self.bounds();
        BBox::new((b.x1 - o.x1) * s, (b.y1 - o.y1) * s, (b.x2 - o.x1) * s, (b.y2 - o.y1) * s)
    }

    /// Inverse of [`CropWindow::to_crop`].
    pub fn to_frame(&self, b: &BBox, out_size: usize) -> BBox {
        let s = self.side / out_size as f64;
        let o = self.bounds();
        BBox::new(b.x1 * s + o.x1, b.y1 * s + o.y1, b.x2 * s + o.x1, b.y2 * s + o.y1)
    }
}

/// Context window centered on `b` with side `factor * sqrt(w * h)`.
pub fn context_window(b: &BBox, factor: f64) -> CropWindow {
    let (cx, cy) = b.center();
    CropWindow { cx, cy, side: factor * (b.width() * b.height()).sqrt() }
}

/// Random offset and scale applied to a context window during training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropJitter {
    /// Maximum center shift as a fraction of box width / height.
    pub max_offset: f64,
    pub min_scale: f64,
    pub max_scale: f64,
}

impl Default for CropJitter {
    fn default() -> Self {
        Self { max_offset: 0.25, min_scale: 0.8, max_scale: 1.2 }
    }
}

impl CropJitter {
    pub const NONE: CropJitter = CropJitter { max_offset: 0.0, min_scale: 1.0, max_scale: 1.0 };

    /// Jittered window around `b`. The window is grown and the shift clamped
    /// as needed so `b` always stays fully inside it.
    pub fn sample<R: Rng + ?Sized>(&self, b: &BBox, factor: f64, rng: &mut R) -> CropWindow {
        let base = context_window(b, factor);
        let mut pick = |lo: f64, hi: f64| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let scale = pick(self.min_scale, self.max_scale);
        let dx = pick(-self.max_offset, self.max_offset) * b.width();
        let dy = pick(-self.max_offset, self.max_offset) * b.height();
        let side = (base.side * scale).max(b.width().max(b.height()));
        let slack_x = (side - b.width()) / 2.0;
        let slack_y = (side - b.height()) / 2.0;
        CropWindow { cx: base.cx + dx.clamp(-slack_x, slack_x), cy: base.cy + dy.clamp(-slack_y, slack_y), side }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::{gaussian_map, ltrb_map};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_for(init: impl FnOnce(&mut ParamStore, &mut ChaCha8Rng)) -> ParamStore {
        let mut store = ParamStore::new();
        init(&mut store, &mut ChaCha8Rng::seed_from_u64(17));
        store
    }

    #[test]
    fn patch_embed_shapes() {
        let pe = PatchEmbed::new("pe", 16);
        let store = store_for(|s, r| pe.init(s, r));
        let g = Graph::new(&store);
        let img = Tensor::rand_uniform(&[64, 64, 3], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        let out = pe.forward(&g, &img).unwrap();
        assert_eq!(out.grid, GridSize::square(16).unwrap());
        assert_eq!(out.tokens.shape(), vec![256, 16]);
        assert!(pe.forward(&g, &Tensor::zeros(&[62, 64, 3])).is_err());

        let pe = PatchEmbed::new("pe", 96);
        let store = store_for(|s, r| pe.init(s, r));
        let g = Graph::new(&store);
        let out = pe.forward(&g, &Tensor::zeros(&[224, 224, 3])).unwrap();
        assert_eq!(out.tokens.shape(), vec![56 * 56, 96]);
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let pe = PatchEmbed::new("pe", 8);
        let down = Downsample::new("down", 8);
        let store = store_for(|s, r| {
            pe.init(s, r);
            down.init(s, r);
        });
        let g = Graph::new(&store);
        let out = pe.forward(&g, &Tensor::full(&[32, 32, 3], 0.3)).unwrap();
        let merged = down.forward(&g, out).unwrap();
        for t in [out.tokens.value(), merged.tokens.value()] {
            let c = t.shape()[1];
            let first = t.data()[..c].to_vec();
            for row in t.data().chunks(c) {
                assert_eq!(row, &first[..]);
            }
        }
    }

    #[test]
    fn downsample_halves_and_doubles() {
        let down = Downsample::new("down", 16);
        let store = store_for(|s, r| down.init(s, r));
        let g = Graph::new(&store);
        let x = g.constant(Tensor::randn(&[256, 16], 1.0, &mut ChaCha8Rng::seed_from_u64(4)));
        let out = down.forward(&g, TokenGrid::new(x, GridSize::square(16).unwrap()).unwrap()).unwrap();
        assert_eq!(out.grid, GridSize::square(8).unwrap());
        assert_eq!(out.tokens.shape(), vec![64, 32]);
        let odd = g.constant(Tensor::zeros(&[9, 16]));
        assert!(down.forward(&g, TokenGrid::new(odd, GridSize::square(3).unwrap()).unwrap()).is_err());
    }

    #[test]
    fn windows_do_not_mix() {
        let block = WindowBlock::new("swa", 32, 2, 2, 4).unwrap();
        let mut store = store_for(|s, r| block.init(s, r));
        store.set(&block.rel_name(), Tensor::zeros(&[2, 9])).unwrap();
        let grid = GridSize::square(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let base = Tensor::randn(&[16, 32], 1.0, &mut rng);
        let run = |x: &Tensor| {
            let g = Graph::new(&store);
            let v = g.constant(x.clone());
            block.forward(&g, TokenGrid::new(v, grid).unwrap()).unwrap().tokens.value().as_ref().clone()
        };
        let out = run(&base);
        assert_eq!(out.shape(), &[16, 32]);
        // Perturb token (0, 0): only its 2x2 window {0, 1, 4, 5} may change.
        let mut data = base.clone().into_data();
        data[3] += 1.0;
        let moved = run(&Tensor::new(&[16, 32], data).unwrap());
        for t in 0..16 {
            let changed = (0..32).any(|c| out.at(&[t, c]) != moved.at(&[t, c]));
            assert_eq!(changed, [0, 1, 4, 5].contains(&t), "token {t}");
        }
        assert!(block.forward(&Graph::new(&store), TokenGrid::new(Graph::new(&store).constant(Tensor::zeros(&[9, 32])), GridSize::square(3).unwrap()).unwrap()).is_err());
    }

    #[test]
    fn box_embedding_identity_and_peak() {
        let emb = BoxEmbedding::new("box", 32);
        let mut store = store_for(|s, r| emb.init(s, r));
        let grid = GridSize::square(4).unwrap();
        let b = BBox::new(16.0, 16.0, 48.0, 48.0);
        let gauss = gaussian_map(&b, grid, 16.0).unwrap();
        let ltrb = ltrb_map(&b, grid, 16.0).unwrap();
        let g = Graph::new(&store);
        let out = emb.forward(&g, &gauss, &ltrb).unwrap();
        assert_eq!(out.shape(), vec![16, 32]);

        let mut only_w = emb.clone();
        only_w.use_ltrb = false;
        let g = Graph::new(&store);
        let w_term = only_w.forward(&g, &gauss, &ltrb).unwrap().value();
        let w = store.get(&emb.weight_name()).unwrap().clone();
        let peak = gauss.peak.0 * 4 + gauss.peak.1;
        for c in 0..32 {
            assert_eq!(w_term.at(&[peak, c]), w.data()[c]);
            for t in 0..16 {
                assert!(w_term.at(&[t, c]).abs() <= w.data()[c].abs());
            }
        }

        // Zero w and zero psi output give a zero embedding.
        store.set(&emb.weight_name(), Tensor::zeros(&[32])).unwrap();
        let psi_out_w = format!("box.psi.1.weight");
        store.set(&psi_out_w, Tensor::zeros(&[32, 32])).unwrap();
        let g = Graph::new(&store);
        let zero = emb.forward(&g, &gauss, &ltrb).unwrap().value();
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn crop_window_roundtrip() {
        let w = CropWindow { cx: 50.0, cy: 40.0, side: 37.0 };
        let b = BBox::new(41.0, 30.5, 60.0, 52.0);
        let back = w.to_frame(&w.to_crop(&b, 64), 64);
        assert!((back.x1 - b.x1).abs() < 1e-12 && (back.y2 - b.y2).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn jitter_keeps_box_inside(
            x in 0.0..200.0f64, y in 0.0..200.0f64, w in 4.0..80.0f64, h in 4.0..80.0f64, seed in 0u64..1000,
        ) {
            let b = BBox::new(x, y, x + w, y + h);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let win = CropJitter::default().sample(&b, 2.0, &mut rng);
            let bounds = win.bounds();
            prop_assert!(bounds.x1 <= b.x1 + 1e-9 && bounds.y1 <= b.y1 + 1e-9);
            prop_assert!(bounds.x2 >= b.x2 - 1e-9 && bounds.y2 >= b.y2 - 1e-9);
        }
    }
}
