//! Full tracker: per-image stages to stride 16, stage-3 groups mixing the
//! three images through LCA, a neck of LCA layers and the prediction heads.

use rand::Rng;

use crate::backbone::{BoxEmbedding, Downsample, PatchEmbed, TokenGrid, WindowBlock, PATCH};
use crate::boxes::{gaussian_map, ltrb_map, BBox};
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::heads::{build_targets, decode_all, objective, HeadOutputs, LossTerms, LossWeights, PredictionHeads, TrainingTarget, VarifocalParams};
use crate::lca::{lca_forward, lca_search_query_forward, LcaConfig, LcaLayer, LcaOutput, SegmentedTokens};
use crate::position::{GridSize, Segment, SegmentLayout};
use crate::tensor::Tensor;

/// Reduction from image pixels to the final token grid.
pub const STRIDE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    /// Stage-3 groups of two window blocks followed by one LCA layer.
    pub n1: usize,
    /// Window-block pairs in each of stages 1 and 2.
    pub n2: usize,
    /// LCA layers in the neck, the last one search-query-only.
    pub n3: usize,
    /// Channels after patch embedding; doubled by each downsample.
    pub channels: usize,
    /// Attention heads per stage.
    pub heads: [usize; 3],
    pub window: usize,
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        for (arg, v) in [("n1", self.n1), ("n2", self.n2), ("n3", self.n3), ("channels", self.channels), ("window", self.window)] {
            if v == 0 {
                return invalid(arg, "must be at least 1");
            }
        }
        for (i, &h) in self.heads.iter().enumerate() {
            let dim = self.channels << i;
            if h == 0 || dim % h != 0 {
                return invalid("heads", format!("stage {} has {dim} channels, not divisible by {h} heads", i + 1));
            }
        }
        Ok(())
    }

    /// Token dimension at stride 16.
    pub fn dim(&self) -> usize {
        4 * self.channels
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub stages: StageConfig,
    /// Side of the square target template in pixels.
    pub target_size: usize,
    /// Side of the square previous template and search region in pixels.
    pub search_size: usize,
    pub ffn_ratio: usize,
    /// Stage-3 LCA layers; without them the backbone never mixes images.
    pub backbone_lca: bool,
    pub positional: bool,
    pub restricted_keys_include_search: bool,
    pub box_embedding: bool,
    pub use_gaussian: bool,
    pub use_ltrb: bool,
}

impl ModelConfig {
    pub const PRESETS: [&'static str; 4] = ["toy", "small", "base", "large"];

    fn with(stages: StageConfig, target_size: usize, search_size: usize) -> Self {
        Self {
            stages,
            target_size,
            search_size,
            ffn_ratio: 4,
            backbone_lca: true,
            positional: true,
            restricted_keys_include_search: false,
            box_embedding: true,
            use_gaussian: true,
            use_ltrb: true,
        }
    }

    pub fn toy() -> Self {
        Self::with(StageConfig { n1: 2, n2: 1, n3: 4, channels: 8, heads: [2, 2, 2], window: 2 }, 32, 64)
    }

    pub fn small() -> Self {
        Self::with(StageConfig { n1: 3, n2: 2, n3: 4, channels: 96, heads: [3, 6, 12], window: 7 }, 112, 224)
    }

    pub fn base() -> Self {
        Self::with(StageConfig { n1: 9, n2: 8, n3: 8, channels: 128, heads: [4, 8, 16], window: 7 }, 112, 224)
    }

    pub fn large() -> Self {
        Self::with(StageConfig { n1: 9, n2: 8, n3: 8, channels: 128, heads: [4, 8, 16], window: 12 }, 192, 384)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "small" => Ok(Self::small()),
            "base" => Ok(Self::base()),
            "large" => Ok(Self::large()),
            other => invalid("preset", format!("unknown preset `{other}` ({})", Self::PRESETS.join(", "))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        for (arg, size) in [("target_size", self.target_size), ("search_size", self.search_size)] {
            if size == 0 || size % STRIDE != 0 {
                return invalid(arg, format!("{size} is not a positive multiple of {STRIDE}"));
            }
            for reduction in [PATCH, 2 * PATCH, STRIDE] {
                let side = size / reduction;
                if side % self.stages.window != 0 {
                    return invalid(
                        "window",
                        format!("{side}x{side} grid of the {size}px image is not divisible by window {}", self.stages.window),
                    );
                }
            }
        }
        if self.ffn_ratio == 0 {
            return invalid("ffn_ratio", "must be at least 1");
        }
        Ok(())
    }

    pub fn target_grid(&self) -> GridSize {
        GridSize { rows: self.target_size / STRIDE, cols: self.target_size / STRIDE }
    }

    pub fn search_grid(&self) -> GridSize {
        GridSize { rows: self.search_size / STRIDE, cols: self.search_size / STRIDE }
    }

    pub fn layout(&self) -> SegmentLayout {
        SegmentLayout::triplet(self.target_grid(), self.search_grid(), self.search_grid())
            .expect("validated grids are non-empty")
    }

    fn lca_config(&self) -> LcaConfig {
        let s = &self.stages;
        LcaConfig {
            dim: s.dim(),
            heads: s.heads[2],
            ffn_ratio: self.ffn_ratio,
            positional: self.positional,
            restricted_keys_include_search: self.restricted_keys_include_search,
        }
    }
}

/// Three input crops and the target box inside the previous template, in
/// that crop's pixels.
#[derive(Clone, Copy, Debug)]
pub struct TripletInput<'a> {
    pub target: &'a Tensor,
    pub previous: &'a Tensor,
    pub search: &'a Tensor,
    pub previous_box: BBox,
}

#[derive(Clone, Debug)]
struct BackboneGroup {
    blocks: [WindowBlock; 2],
    lca: LcaLayer,
}

#[derive(Clone, Debug)]
pub struct BackboneOutput<'g> {
    pub tokens: SegmentedTokens<'g>,
    /// Output of every stage-3 LCA layer, in order.
    pub lca: Vec<LcaOutput<'g>>,
}

#[derive(Clone, Debug)]
pub struct NeckOutput<'g> {
    /// `[H_x * W_x, d]` search features.
    pub search: Var<'g>,
    pub grid: GridSize,
    /// Every neck layer output; all but the last are full LCA layers.
    pub lca: Vec<LcaOutput<'g>>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<'g> {
    pub heads: HeadOutputs<'g>,
    pub backbone: BackboneOutput<'g>,
    pub neck: NeckOutput<'g>,
}

impl ModelOutput<'_> {
    /// Full (every token attends to every token) LCA layers, backbone first.
    pub fn full_lca_layers(&self) -> impl Iterator<Item = &LcaOutput<'_>> {
        let neck_full = self.neck.lca.len().saturating_sub(1);
        self.backbone.lca.iter().chain(self.neck.lca[..neck_full].iter())
    }
}

#[derive(Clone, Debug)]
pub struct TrackerModel {
    config: ModelConfig,
    patch: PatchEmbed,
    stage1: Vec<WindowBlock>,
    down1: Downsample,
    stage2: Vec<WindowBlock>,
    down2: Downsample,
    groups: Vec<BackboneGroup>,
    neck: Vec<LcaLayer>,
    box_emb: BoxEmbedding,
    heads: PredictionHeads,
}

fn run_blocks<'g>(g: &'g Graph, blocks: &[WindowBlock], mut x: TokenGrid<'g>) -> Result<TokenGrid<'g>> {
    for b in blocks {
        x = b.forward(g, x)?;
    }
    Ok(x)
}

impl TrackerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let s = &config.stages;
        let (c, ws, r) = (s.channels, s.window, config.ffn_ratio);
        let blocks = |stage: &str, count: usize, dim: usize, heads: usize| -> Result<Vec<WindowBlock>> {
            (0..count).map(|i| WindowBlock::new(format!("{stage}.swa{i}"), dim, heads, ws, r)).collect()
        };
        let layout = config.layout();
        let lca = config.lca_config();
        let groups = (0..s.n1)
            .map(|i| {
                let prefix = format!("stage3.group{i}");
                Ok(BackboneGroup {
                    blocks: [
                        WindowBlock::new(format!("{prefix}.swa0"), 4 * c, s.heads[2], ws, r)?,
                        WindowBlock::new(format!("{prefix}.swa1"), 4 * c, s.heads[2], ws, r)?,
                    ],
                    lca: LcaLayer::new(format!("{prefix}.lca"), lca.clone(), layout.clone())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let neck = (0..s.n3)
            .map(|i| LcaLayer::new(format!("neck.lca{i}"), lca.clone(), layout.clone()))
            .collect::<Result<Vec<_>>>()?;
        let mut box_emb = BoxEmbedding::new("neck.box", 4 * c);
        box_emb.use_gaussian = config.use_gaussian;
        box_emb.use_ltrb = config.use_ltrb;
        Ok(Self {
            patch: PatchEmbed::new("stage1.patch", c),
            stage1: blocks("stage1", 2 * s.n2, c, s.heads[0])?,
            down1: Downsample::new("stage1.down", c),
            stage2: blocks("stage2", 2 * s.n2, 2 * c, s.heads[1])?,
            down2: Downsample::new("stage2.down", 2 * c),
            groups,
            neck,
            box_emb,
            heads: PredictionHeads::new("head", 4 * c),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> SegmentLayout {
        self.config.layout()
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut store = ParamStore::new();
        self.patch.init(&mut store, rng);
        for b in self.stage1.iter().chain(&self.stage2) {
            b.init(&mut store, rng);
        }
        self.down1.init(&mut store, rng);
        self.down2.init(&mut store, rng);
        for group in &self.groups {
            for b in &group.blocks {
                b.init(&mut store, rng);
            }
            group.lca.init(&mut store, rng);
        }
        for layer in &self.neck {
            layer.init(&mut store, rng);
        }
        self.box_emb.init(&mut store, rng);
        self.heads.init(&mut store, rng);
        store
    }

    pub fn box_embedding_module(&self) -> &BoxEmbedding {
        &self.box_emb
    }

    /// Stages 1 and 2 for one image, ending at stride 16.
    fn early_stages<'g>(&self, g: &'g Graph, image: &Tensor, expected: usize) -> Result<TokenGrid<'g>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[0] != expected || shape[1] != expected || shape[2] != 3 {
            return invalid("image", format!("expected [{expected}, {expected}, 3], got {shape:?}"));
        }
        let x = self.patch.forward(g, image)?;
        let x = self.down1.forward(g, run_blocks(g, &self.stage1, x)?)?;
        self.down2.forward(g, run_blocks(g, &self.stage2, x)?)
    }

    pub fn backbone_forward<'g>(&self, g: &'g Graph, z: &Tensor, pre: &Tensor, x: &Tensor) -> Result<BackboneOutput<'g>> {
        let layout = self.layout();
        let mut images = [
            self.early_stages(g, z, self.config.target_size)?,
            self.early_stages(g, pre, self.config.search_size)?,
            self.early_stages(g, x, self.config.search_size)?,
        ];
        let mut lca = Vec::new();
        for group in &self.groups {
            for img in images.iter_mut() {
                *img = run_blocks(g, &group.blocks, *img)?;
            }
            if self.config.backbone_lca {
                let joined = SegmentedTokens::new(Var::concat(&images.map(|t| t.tokens))?, layout.clone())?;
                let out = lca_forward(&group.lca, g, &joined)?;
                for (img, seg) in images.iter_mut().zip(Segment::ALL) {
                    img.tokens = out.tokens.segment(seg)?;
                }
                lca.push(out);
            }
        }
        let tokens = SegmentedTokens::new(Var::concat(&images.map(|t| t.tokens))?, layout)?;
        Ok(BackboneOutput { tokens, lca })
    }

    /// Box embedding over the previous-template grid; `previous_box` is in
    /// previous-template pixels.
    pub fn box_embedding<'g>(&self, g: &'g Graph, previous_box: &BBox) -> Result<Var<'g>> {
        let grid = self.config.search_grid();
        let s = STRIDE as f64;
        let gaussian = gaussian_map(previous_box, grid, s)?;
        let ltrb = ltrb_map(previous_box, grid, s)?;
        self.box_emb.forward(g, &gaussian, &ltrb)
    }

    pub fn neck_forward<'g>(&self, g: &'g Graph, tokens: &SegmentedTokens<'g>, box_emb: Option<Var<'g>>) -> Result<NeckOutput<'g>> {
        let mut x = tokens.clone();
        if let Some(emb) = box_emb {
            let span = *x.layout.require(Segment::Previous)?;
            if emb.shape() != [span.len(), self.config.stages.dim()] {
                return shape_err("neck_forward", format!("box embedding {:?} for previous grid {}", emb.shape(), span.grid));
            }
            let parts = [x.segment(Segment::Target)?, x.segment(Segment::Previous)?.add(emb)?, x.segment(Segment::Search)?];
            x = SegmentedTokens::new(Var::concat(&parts)?, x.layout.clone())?;
        }
        let (last, full) = self.neck.split_last().expect("n3 >= 1");
        let mut lca = Vec::with_capacity(self.neck.len());
        for layer in full {
            let out = lca_forward(layer, g, &x)?;
            x = out.tokens.clone();
            lca.push(out);
        }
        let out = lca_search_query_forward(last, g, &x)?;
        let search = out.tokens.tokens;
        let grid = out.tokens.layout.require(Segment::Search)?.grid;
        lca.push(out);
        Ok(NeckOutput { search, grid, lca })
    }

    pub fn forward<'g>(&self, g: &'g Graph, input: TripletInput<'_>) -> Result<ModelOutput<'g>> {
        let backbone = self.backbone_forward(g, input.target, input.previous, input.search)?;
        let emb = if self.config.box_embedding { Some(self.box_embedding(g, &input.previous_box)?) } else { None };
        let neck = self.neck_forward(g, &backbone.tokens, emb)?;
        let heads = self.heads.forward(g, neck.search, neck.grid)?;
        Ok(ModelOutput { heads, backbone, neck })
    }

    /// Labels for `gt` (search-crop pixels) from the detached predictions of `out`.
    pub fn training_target(&self, out: &ModelOutput<'_>, gt: &BBox) -> Result<TrainingTarget> {
        let grid = out.heads.grid;
        let pred = decode_all(&out.heads.reg.value(), grid, STRIDE as f64)?;
        build_targets(gt, grid, STRIDE as f64, &pred)
    }

    pub fn loss<'g>(
        &self,
        out: &ModelOutput<'g>,
        target: &TrainingTarget,
        vfl: VarifocalParams,
        weights: LossWeights,
    ) -> Result<LossTerms<'g>> {
        objective(&out.heads, target, STRIDE as f64, vfl, weights)
    }
}
