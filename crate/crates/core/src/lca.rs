//! Long-term context attention: joint self- and cross-attention over the
//! concatenated target, previous and search tokens, with the content term,
//! the untied absolute term and the region-partitioned relative term summed
//! before the softmax.

use rand::Rng;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::position::{AbsolutePositionTable, RelativeBiasTables, Segment, SegmentLayout};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Token sequence plus the layout that says which rows belong to which image.
#[derive(Clone, Debug)]
pub struct SegmentedTokens<'g> {
    pub tokens: Var<'g>,
    pub layout: SegmentLayout,
}

impl<'g> SegmentedTokens<'g> {
    pub fn new(tokens: Var<'g>, layout: SegmentLayout) -> Result<Self> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != layout.len() {
            return shape_err("SegmentedTokens", format!("tokens {shape:?} for layout of {} tokens", layout.len()));
        }
        Ok(Self { tokens, layout })
    }

    pub fn segment(&self, segment: Segment) -> Result<Var<'g>> {
        let span = self.layout.require(segment)?;
        self.tokens.rows(span.offset, span.len())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LcaConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_ratio: usize,
    /// Adds the absolute and relative positional terms to the logits.
    pub positional: bool,
    /// In the search-query-only variant, lets search tokens attend to
    /// themselves as well as to the two templates.
    pub restricted_keys_include_search: bool,
}

impl LcaConfig {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self { dim, heads, ffn_ratio: 4, positional: true, restricted_keys_include_search: false }
    }
}

/// Affine layer norm over the last dimension.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    prefix: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(prefix: impl Into<String>, dim: usize) -> Self {
        Self { prefix: prefix.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.prefix), Tensor::ones(&[self.dim]));
        store.insert(format!("{}.beta", self.prefix), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let gamma = g.param(&format!("{}.gamma", self.prefix))?;
        let beta = g.param(&format!("{}.beta", self.prefix))?;
        x.layer_norm(LN_EPS).mul_row(gamma)?.add_row(beta)
    }
}

/// Affine map `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    prefix: String,
    input: usize,
    output: usize,
}

impl Linear {
    pub fn new(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self { prefix: prefix.into(), input, output }
    }

    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.prefix)
    }

    pub fn bias_name(&self) -> String {
        format!("{}.bias", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let std = (1.0 / self.input as f64).sqrt();
        store.insert(self.weight_name(), Tensor::randn(&[self.input, self.output], std, rng));
        store.insert(self.bias_name(), Tensor::zeros(&[self.output]));
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(g.param(&self.weight_name())?)?.add_row(g.param(&self.bias_name())?)
    }
}

/// Two affine maps around a GELU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(prefix: &str, dim: usize, ratio: usize) -> Self {
        Self {
            up: Linear::new(format!("{prefix}.up"), dim, dim * ratio),
            down: Linear::new(format!("{prefix}.down"), dim * ratio, dim),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.up.init(store, rng);
        self.down.init(store, rng);
    }

    pub fn forward<'g>(&self, g: &'g Graph, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.up.forward(g, x)?.gelu();
        self.down.forward(g, h)
    }
}

/// One LCA layer: pre-norm attention with residual, then a pre-norm
/// feed-forward with residual.
#[derive(Clone, Debug)]
pub struct LcaLayer {
    prefix: String,
    config: LcaConfig,
    layout: SegmentLayout,
    pub abs: AbsolutePositionTable,
    pub rel: RelativeBiasTables,
    norm_attn: LayerNorm,
    norm_ffn: LayerNorm,
    ffn: FeedForward,
}

/// Result of one layer evaluation.
#[derive(Clone, Debug)]
pub struct LcaOutput<'g> {
    pub tokens: SegmentedTokens<'g>,
    /// Post-softmax weights, `[heads, |queries|, |keys|]`.
    pub weights: Var<'g>,
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

impl LcaLayer {
    pub fn new(prefix: impl Into<String>, config: LcaConfig, layout: SegmentLayout) -> Result<Self> {
        let prefix = prefix.into();
        if config.heads == 0 || config.dim % config.heads != 0 {
            return crate::error::invalid(
                "heads",
                format!("dimension {} is not divisible by {} heads", config.dim, config.heads),
            );
        }
        Ok(Self {
            abs: AbsolutePositionTable::new(prefix.clone(), layout.clone(), config.dim),
            rel: RelativeBiasTables::new(prefix.clone(), layout.clone(), config.heads),
            norm_attn: LayerNorm::new(format!("{prefix}.norm1"), config.dim),
            norm_ffn: LayerNorm::new(format!("{prefix}.norm2"), config.dim),
            ffn: FeedForward::new(&format!("{prefix}.ffn"), config.dim, config.ffn_ratio),
            prefix,
            config,
            layout,
        })
    }

    pub fn config(&self) -> &LcaConfig {
        &self.config
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn weight_name(&self, which: &str) -> String {
        format!("{}.attn.w_{which}", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.config.dim;
        let std = (1.0 / d as f64).sqrt();
        for w in ["q", "k", "v", "o"] {
            store.insert(self.weight_name(w), Tensor::randn(&[d, d], std, rng));
        }
        store.insert(format!("{}.attn.b_o", self.prefix), Tensor::zeros(&[d]));
        self.abs.init(store, rng);
        self.rel.init(store, rng, 0.1);
        self.norm_attn.init(store);
        self.norm_ffn.init(store);
        self.ffn.init(store, rng);
    }

    /// Every parameter name this layer reads.
    pub fn param_names(&self, store: &ParamStore) -> Vec<String> {
        let prefix = format!("{}.", self.prefix);
        store.names().filter(|n| n.starts_with(&prefix)).map(str::to_string).collect()
    }

    fn check_layout(&self, input: &SegmentedTokens<'_>) -> Result<()> {
        if input.layout != self.layout {
            return shape_err(
                "lca_forward",
                format!("layer built for {:?}, input has {:?}", self.layout, input.layout),
            );
        }
        Ok(())
    }

    fn attend<'g>(&self, g: &'g Graph, normed: Var<'g>, queries: &[usize], keys: &[usize]) -> Result<(Var<'g>, Var<'g>)> {
        let LcaConfig { dim, heads, .. } = self.config;
        let all = queries.len() == self.layout.len() && keys.len() == self.layout.len();
        let (xq, xk) = if all {
            (normed, normed)
        } else {
            (normed.take_rows(queries)?, normed.take_rows(keys)?)
        };
        let q = xq.matmul(g.param(&self.weight_name("q"))?)?.split_heads(heads)?;
        let k = xk.matmul(g.param(&self.weight_name("k"))?)?.split_heads(heads)?;
        let v = xk.matmul(g.param(&self.weight_name("v"))?)?.split_heads(heads)?;
        let dh = (dim / heads) as f64;
        let mut logits = q.bmm(k, true)?.scale(1.0 / (2.0 * dh).sqrt());
        if self.config.positional {
            logits = logits.add(self.abs.bias_block(g, heads, queries, keys)?)?;
            logits = logits.add(self.rel.bias_block(g, queries, keys)?)?;
        }
        let weights = logits.softmax_lastdim();
        let mixed = weights.bmm(v, false)?.merge_heads()?;
        let out = mixed
            .matmul(g.param(&self.weight_name("o"))?)?
            .add_row(g.param(&format!("{}.attn.b_o", self.prefix))?)?;
        Ok((out, weights))
    }

    fn block<'g>(
        &self,
        g: &'g Graph,
        input: &SegmentedTokens<'g>,
        queries: Vec<usize>,
        keys: Vec<usize>,
        out_layout: SegmentLayout,
    ) -> Result<LcaOutput<'g>> {
        self.check_layout(input)?;
        let normed = self.norm_attn.forward(g, input.tokens)?;
        let (attn, weights) = self.attend(g, normed, &queries, &keys)?;
        let residual = if queries.len() == self.layout.len() {
            input.tokens
        } else {
            input.tokens.take_rows(&queries)?
        };
        let h = residual.add(attn)?;
        let out = h.add(self.ffn.forward(g, self.norm_ffn.forward(g, h)?)?)?;
        Ok(LcaOutput { tokens: SegmentedTokens::new(out, out_layout)?, weights, queries, keys })
    }
}

/// Full LCA layer over every token; output layout equals the input layout.
pub fn lca_forward<'g>(layer: &LcaLayer, g: &'g Graph, input: &SegmentedTokens<'g>) -> Result<LcaOutput<'g>> {
    let all: Vec<usize> = (0..input.layout.len()).collect();
    layer.block(g, input, all.clone(), all, input.layout.clone())
}

/// Final-neck variant: only search tokens query, and they attend to the
/// target and previous templates (plus themselves when configured).
/// Returns the search tokens alone.
pub fn lca_search_query_forward<'g>(
    layer: &LcaLayer,
    g: &'g Graph,
    input: &SegmentedTokens<'g>,
) -> Result<LcaOutput<'g>> {
    layer.check_layout(input)?;
    let search = *input.layout.require(Segment::Search)?;
    let queries: Vec<usize> = search.indices().collect();
    let key_segments: &[Segment] = if layer.config.restricted_keys_include_search {
        &Segment::ALL
    } else {
        &[Segment::Target, Segment::Previous]
    };
    let keys = input.layout.indices_of(key_segments);
    if keys.is_empty() {
        return shape_err("lca_search_query_forward", "layout has no template tokens to attend to");
    }
    let out_layout = SegmentLayout::single(Segment::Search, search.grid)?;
    layer.block(g, input, queries, keys, out_layout)
}

/// Post-softmax weights of one (query segment, key segment) region.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub query: Segment,
    pub key: Segment,
    /// `[heads, query tokens, key tokens]`
    pub weights: Tensor,
}

/// The weight map sliced into its named regions (`TtoT` .. `StoS`).
#[derive(Clone, Debug)]
pub struct AttentionBlocks {
    pub blocks: Vec<AttentionBlock>,
}

impl AttentionBlocks {
    pub fn get(&self, query: Segment, key: Segment) -> Option<&AttentionBlock> {
        self.blocks.iter().find(|b| b.query == query && b.key == key)
    }

    pub fn names(&self) -> Vec<String> {
        self.blocks.iter().map(|b| crate::position::region_name(b.query, b.key)).collect()
    }
}

impl LcaOutput<'_> {
    /// Slices the weights by the segments of `layout` (the input layout).
    pub fn blocks(&self, layout: &SegmentLayout) -> Result<AttentionBlocks> {
        let w = self.weights.value();
        let [heads, nq, nk] = [w.shape()[0], w.shape()[1], w.shape()[2]];
        let mut blocks = Vec::new();
        for qs in layout.spans() {
            let q_rows: Vec<usize> = (0..nq).filter(|&i| qs.indices().contains(&self.queries[i])).collect();
            if q_rows.is_empty() {
                continue;
            }
            for ks in layout.spans() {
                let k_cols: Vec<usize> = (0..nk).filter(|&j| ks.indices().contains(&self.keys[j])).collect();
                if k_cols.is_empty() {
                    continue;
                }
                let mut data = Vec::with_capacity(heads * q_rows.len() * k_cols.len());
                for h in 0..heads {
                    for &i in &q_rows {
                        for &j in &k_cols {
                            data.push(w.at(&[h, i, j]));
                        }
                    }
                }
                blocks.push(AttentionBlock {
                    query: qs.segment,
                    key: ks.segment,
                    weights: Tensor::new(&[heads, q_rows.len(), k_cols.len()], data)?,
                });
            }
        }
        Ok(AttentionBlocks { blocks })
    }
}

/// Runs the full layer and returns its weight map split into regions.
pub fn attention_blocks_view<'g>(layer: &LcaLayer, g: &'g Graph, input: &SegmentedTokens<'g>) -> Result<AttentionBlocks> {
    lca_forward(layer, g, input)?.blocks(&input.layout)
}
