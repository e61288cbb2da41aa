//! Token layout of the concatenated (target, previous, search) sequence and
//! the two positional terms of the multi-image attention: the untied absolute
//! term and the region-partitioned relative bias.

use std::fmt;
use std::sync::Arc;

use rand::Rng;

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Segment {
    Target,
    Previous,
    Search,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::Target, Segment::Previous, Segment::Search];

    pub fn letter(self) -> char {
        match self {
            Segment::Target => 'T',
            Segment::Previous => 'P',
            Segment::Search => 'S',
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Segment::Target => "target",
            Segment::Previous => "previous",
            Segment::Search => "search",
        }
    }
}

impl fmt::Display for Segment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Name of an ordered segment pair, e.g. `StoP`.
pub fn region_name(query: Segment, key: Segment) -> String {
    format!("{}to{}", query.letter(), key.letter())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSize {
    pub rows: usize,
    pub cols: usize,
}

impl GridSize {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return invalid("grid", format!("{rows}x{cols} has a zero side"));
        }
        Ok(Self { rows, cols })
    }

    pub fn square(side: usize) -> Result<Self> {
        Self::new(side, side)
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }
}

impl fmt::Display for GridSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.rows, self.cols)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentSpan {
    pub segment: Segment,
    pub grid: GridSize,
    pub offset: usize,
}

impl SegmentSpan {
    pub fn len(&self) -> usize {
        self.grid.area()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCoord {
    pub segment: Segment,
    pub row: usize,
    pub col: usize,
}

/// Flattened, row-major-per-segment layout, always ordered target,
/// previous, search. Absent segments are allowed for degenerate layouts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentLayout {
    spans: Vec<SegmentSpan>,
    len: usize,
}

impl SegmentLayout {
    pub fn new(target: Option<GridSize>, previous: Option<GridSize>, search: Option<GridSize>) -> Result<Self> {
        let mut spans = Vec::new();
        let mut offset = 0;
        for (segment, grid) in Segment::ALL.into_iter().zip([target, previous, search]) {
            if let Some(grid) = grid {
                let grid = GridSize::new(grid.rows, grid.cols)?;
                spans.push(SegmentSpan { segment, grid, offset });
                offset += grid.area();
            }
        }
        if spans.is_empty() {
            return invalid("layout", "at least one segment is required");
        }
        Ok(Self { spans, len: offset })
    }

    pub fn triplet(target: GridSize, previous: GridSize, search: GridSize) -> Result<Self> {
        Self::new(Some(target), Some(previous), Some(search))
    }

    pub fn single(segment: Segment, grid: GridSize) -> Result<Self> {
        let mut grids = [None; 3];
        grids[segment as usize] = Some(grid);
        Self::new(grids[0], grids[1], grids[2])
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn spans(&self) -> &[SegmentSpan] {
        &self.spans
    }

    pub fn span(&self, segment: Segment) -> Option<&SegmentSpan> {
        self.spans.iter().find(|s| s.segment == segment)
    }

    pub fn require(&self, segment: Segment) -> Result<&SegmentSpan> {
        self.span(segment)
            .ok_or_else(|| crate::Error::InvalidArgument { arg: "layout", reason: format!("no {segment} segment") })
    }

    pub fn token(&self, index: usize) -> Option<TokenCoord> {
        let span = self.spans.iter().find(|s| s.indices().contains(&index))?;
        let local = index - span.offset;
        Some(TokenCoord { segment: span.segment, row: local / span.grid.cols, col: local % span.grid.cols })
    }

    pub fn index_of(&self, coord: TokenCoord) -> Option<usize> {
        let span = self.span(coord.segment)?;
        (coord.row < span.grid.rows && coord.col < span.grid.cols)
            .then(|| span.offset + coord.row * span.grid.cols + coord.col)
    }

    /// Flat token indices of the given segments, in layout order.
    pub fn indices_of(&self, segments: &[Segment]) -> Vec<usize> {
        self.spans
            .iter()
            .filter(|s| segments.contains(&s.segment))
            .flat_map(|s| s.indices())
            .collect()
    }
}

/// Number of distinct displacements between a query grid and a key grid:
/// `(H_q + H_k - 1) * (W_q + W_k - 1)`.
pub fn displacement_count(query: GridSize, key: GridSize) -> usize {
    (query.rows + key.rows - 1) * (query.cols + key.cols - 1)
}

/// Table slot for displacement `(dr, dc)` = query position minus key
/// position, each in its own grid's coordinates.
fn displacement_slot(query: GridSize, key: GridSize, dr: isize, dc: isize) -> usize {
    let r = (dr + key.rows as isize - 1) as usize;
    let c = (dc + key.cols as isize - 1) as usize;
    r * (query.cols + key.cols - 1) + c
}

/// Learnable absolute encoding `p = concat(p_z, p_pre, p_x)` with its untied
/// query/key projections.
#[derive(Clone, Debug)]
pub struct AbsolutePositionTable {
    prefix: String,
    layout: SegmentLayout,
    dim: usize,
}

impl AbsolutePositionTable {
    pub fn new(prefix: impl Into<String>, layout: SegmentLayout, dim: usize) -> Self {
        Self { prefix: prefix.into(), layout, dim }
    }

    pub fn table_name(&self, segment: Segment) -> String {
        format!("{}.abs.p_{}", self.prefix, segment.name())
    }

    pub fn uq_name(&self) -> String {
        format!("{}.abs.u_q", self.prefix)
    }

    pub fn uk_name(&self) -> String {
        format!("{}.abs.u_k", self.prefix)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for span in self.layout.spans() {
            store.insert(self.table_name(span.segment), Tensor::randn(&[span.len(), self.dim], 0.1, rng));
        }
        let std = (1.0 / self.dim as f64).sqrt();
        store.insert(self.uq_name(), Tensor::randn(&[self.dim, self.dim], std, rng));
        store.insert(self.uk_name(), Tensor::randn(&[self.dim, self.dim], std, rng));
    }

    /// The concatenated encoding `p`, `[L, d]`.
    pub fn encoding<'g>(&self, g: &'g Graph) -> Result<Var<'g>> {
        let parts = self
            .layout
            .spans()
            .iter()
            .map(|s| g.param(&self.table_name(s.segment)))
            .collect::<Result<Vec<_>>>()?;
        Var::concat(&parts)
    }

    /// `(p_q U^Q)(p_k U^K)^T / sqrt(2 d_head)` per head, `[heads, |queries|, |keys|]`.
    pub fn bias_block<'g>(&self, g: &'g Graph, heads: usize, queries: &[usize], keys: &[usize]) -> Result<Var<'g>> {
        if heads == 0 || self.dim % heads != 0 {
            return invalid("heads", format!("dimension {} is not divisible by {heads} heads", self.dim));
        }
        let p = self.encoding(g)?;
        let uq = g.param(&self.uq_name())?;
        let uk = g.param(&self.uk_name())?;
        let pq = p.take_rows(queries)?.matmul(uq)?.split_heads(heads)?;
        let pk = p.take_rows(keys)?.matmul(uk)?.split_heads(heads)?;
        let dh = (self.dim / heads) as f64;
        Ok(pq.bmm(pk, true)?.scale(1.0 / (2.0 * dh).sqrt()))
    }
}

/// `[heads, L, L]` untied absolute bias over the whole layout.
pub fn untied_abs_bias<'g>(table: &AbsolutePositionTable, g: &'g Graph, heads: usize) -> Result<Var<'g>> {
    let all: Vec<usize> = (0..table.layout.len()).collect();
    table.bias_block(g, heads, &all, &all)
}

/// Nine independent relative-position tables, one per ordered segment pair,
/// each holding one value per head per 2-D displacement.
#[derive(Clone, Debug)]
pub struct RelativeBiasTables {
    prefix: String,
    layout: SegmentLayout,
    heads: usize,
}

impl RelativeBiasTables {
    pub fn new(prefix: impl Into<String>, layout: SegmentLayout, heads: usize) -> Self {
        Self { prefix: prefix.into(), layout, heads }
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    pub fn table_name(&self, query: Segment, key: Segment) -> String {
        format!("{}.rel.{}", self.prefix, region_name(query, key))
    }

    fn regions(&self) -> impl Iterator<Item = (SegmentSpan, SegmentSpan)> + '_ {
        let spans = self.layout.spans();
        spans.iter().flat_map(move |q| spans.iter().map(move |k| (*q, *k)))
    }

    pub fn table_shape(&self, query: Segment, key: Segment) -> Result<[usize; 2]> {
        let q = self.layout.require(query)?;
        let k = self.layout.require(key)?;
        Ok([self.heads, displacement_count(q.grid, k.grid)])
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R, std: f64) {
        for (q, k) in self.regions() {
            let shape = [self.heads, displacement_count(q.grid, k.grid)];
            store.insert(self.table_name(q.segment, k.segment), Tensor::randn(&shape, std, rng));
        }
    }

    /// Gather indices into the flat concatenation of all region tables (in
    /// region order) for the `[heads, |queries|, |keys|]` bias block.
    pub fn index_map(&self, queries: &[usize], keys: &[usize]) -> Result<Vec<usize>> {
        let mut region_offset = Vec::new();
        let mut total = 0;
        for (q, k) in self.regions() {
            region_offset.push(((q.segment, k.segment), total));
            total += self.heads * displacement_count(q.grid, k.grid);
        }
        let coord = |i: usize| {
            self.layout.token(i).ok_or_else(|| crate::Error::Shape {
                op: "relative_bias",
                detail: format!("token {i} outside layout of length {}", self.layout.len()),
            })
        };
        let qc = queries.iter().map(|&i| coord(i)).collect::<Result<Vec<_>>>()?;
        let kc = keys.iter().map(|&i| coord(i)).collect::<Result<Vec<_>>>()?;
        let per_head = queries.len() * keys.len();
        let mut index = vec![0; self.heads * per_head];
        for (qi, a) in qc.iter().enumerate() {
            let qgrid = self.layout.span(a.segment).expect("token segment").grid;
            for (ki, b) in kc.iter().enumerate() {
                let kgrid = self.layout.span(b.segment).expect("token segment").grid;
                let base = region_offset
                    .iter()
                    .find(|(pair, _)| *pair == (a.segment, b.segment))
                    .expect("all region pairs present")
                    .1;
                let count = displacement_count(qgrid, kgrid);
                let slot = displacement_slot(
                    qgrid,
                    kgrid,
                    a.row as isize - b.row as isize,
                    a.col as isize - b.col as isize,
                );
                for h in 0..self.heads {
                    index[h * per_head + qi * keys.len() + ki] = base + h * count + slot;
                }
            }
        }
        Ok(index)
    }

    /// Relative bias restricted to the given query and key tokens.
    pub fn bias_block<'g>(&self, g: &'g Graph, queries: &[usize], keys: &[usize]) -> Result<Var<'g>> {
        let mut flat = Vec::new();
        for (q, k) in self.regions() {
            let t = g.param(&self.table_name(q.segment, k.segment))?;
            let expected = [self.heads, displacement_count(q.grid, k.grid)];
            if t.shape() != expected {
                return shape_err(
                    "relative_bias",
                    format!("table {} is {:?}, layout needs {expected:?}", region_name(q.segment, k.segment), t.shape()),
                );
            }
            flat.push(t.reshape(&[expected[0] * expected[1]])?);
        }
        let flat = Var::concat(&flat)?;
        let index = self.index_map(queries, keys)?;
        flat.gather(Arc::new(index), &[self.heads, queries.len(), keys.len()])
    }
}

/// `[heads, L, L]` relative bias for `layout`. The layout must be the one the
/// tables were sized for.
pub fn relative_bias<'g>(
    tables: &RelativeBiasTables,
    g: &'g Graph,
    layout: &SegmentLayout,
    heads: usize,
) -> Result<Var<'g>> {
    if layout != &tables.layout || heads != tables.heads {
        return shape_err(
            "relative_bias",
            format!("tables sized for {:?}/{} heads, got {:?}/{heads}", tables.layout, tables.heads, layout),
        );
    }
    let all: Vec<usize> = (0..layout.len()).collect();
    tables.bias_block(g, &all, &all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn g(r: usize, c: usize) -> GridSize {
        GridSize::new(r, c).unwrap()
    }

    fn small() -> SegmentLayout {
        SegmentLayout::triplet(g(1, 1), g(2, 2), g(2, 2)).unwrap()
    }

    #[test]
    fn layout_enumeration() {
        let l = small();
        assert_eq!(l.len(), 9);
        assert_eq!(l.token(0).unwrap(), TokenCoord { segment: Segment::Target, row: 0, col: 0 });
        assert_eq!(l.token(1).unwrap(), TokenCoord { segment: Segment::Previous, row: 0, col: 0 });
        assert_eq!(l.token(8).unwrap(), TokenCoord { segment: Segment::Search, row: 1, col: 1 });
        for i in 0..l.len() {
            assert_eq!(l.index_of(l.token(i).unwrap()), Some(i));
        }
        assert!(l.token(9).is_none());
    }

    #[test]
    fn layout_stride16_sizes() {
        let l = SegmentLayout::triplet(g(7, 7), g(14, 14), g(14, 14)).unwrap();
        assert_eq!(l.len(), 441);
        let single = SegmentLayout::single(Segment::Search, g(1, 1)).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.spans().len(), 1);
    }

    #[test]
    fn zero_grid_rejected() {
        assert!(GridSize::new(0, 3).is_err());
        assert!(SegmentLayout::new(None, None, None).is_err());
    }

    #[test]
    fn region_table_sizes() {
        let t = RelativeBiasTables::new("x", small(), 1);
        assert_eq!(t.table_shape(Segment::Target, Segment::Target).unwrap(), [1, 1]);
        assert_eq!(t.table_shape(Segment::Target, Segment::Previous).unwrap(), [1, 4]);
        assert_eq!(t.table_shape(Segment::Previous, Segment::Previous).unwrap(), [1, 9]);
    }

    #[test]
    fn abs_bias_zero_and_scalar() {
        let layout = SegmentLayout::single(Segment::Target, g(1, 1)).unwrap();
        let table = AbsolutePositionTable::new("a", layout, 1);
        let mut store = ParamStore::new();
        let (c, u, v) = (1.7, -0.4, 2.3);
        store.insert(table.table_name(Segment::Target), Tensor::new(&[1, 1], vec![c]).unwrap());
        store.insert(table.uq_name(), Tensor::new(&[1, 1], vec![u]).unwrap());
        store.insert(table.uk_name(), Tensor::new(&[1, 1], vec![v]).unwrap());
        let graph = Graph::new(&store);
        let a = untied_abs_bias(&table, &graph, 1).unwrap().value().item();
        assert!((a - c * c * u * v / 2f64.sqrt()).abs() < 1e-15);

        store.insert(table.table_name(Segment::Target), Tensor::zeros(&[1, 1]));
        let graph = Graph::new(&store);
        assert_eq!(untied_abs_bias(&table, &graph, 1).unwrap().value().item(), 0.0);
    }

    #[test]
    fn abs_bias_is_asymmetric_and_checks_heads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let table = AbsolutePositionTable::new("a", small(), 4);
        let mut store = ParamStore::new();
        table.init(&mut store, &mut rng);
        let graph = Graph::new(&store);
        let a = untied_abs_bias(&table, &graph, 2).unwrap().value();
        assert_eq!(a.shape(), &[2, 9, 9]);
        assert!((a.at(&[0, 1, 5]) - a.at(&[0, 5, 1])).abs() > 1e-6);
        assert!(untied_abs_bias(&table, &graph, 3).is_err());
    }

    #[test]
    fn adjacent_search_tokens_use_distinct_slots() {
        let t = RelativeBiasTables::new("r", small(), 1);
        let layout = small();
        let a = layout.index_of(TokenCoord { segment: Segment::Search, row: 0, col: 0 }).unwrap();
        let b = layout.index_of(TokenCoord { segment: Segment::Search, row: 0, col: 1 }).unwrap();
        let ab = t.index_map(&[a], &[b]).unwrap()[0];
        let ba = t.index_map(&[b], &[a]).unwrap()[0];
        assert_ne!(ab, ba);
        // Both sit in the StoS table, which comes last.
        let last_region_start = t.index_map(&[a], &[a]).unwrap()[0] - displacement_slot(g(2, 2), g(2, 2), 0, 0);
        assert!(ab >= last_region_start && ba >= last_region_start);
    }

    #[test]
    fn zero_tables_give_zero_bias() {
        let layout = small();
        let t = RelativeBiasTables::new("r", layout.clone(), 2);
        let mut store = ParamStore::new();
        t.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 0.0);
        let graph = Graph::new(&store);
        let r = relative_bias(&t, &graph, &layout, 2).unwrap().value();
        assert!(r.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mismatched_layout_rejected() {
        let t = RelativeBiasTables::new("r", small(), 1);
        let mut store = ParamStore::new();
        t.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0), 0.1);
        let graph = Graph::new(&store);
        let other = SegmentLayout::triplet(g(1, 1), g(2, 2), g(3, 3)).unwrap();
        assert!(relative_bias(&t, &graph, &other, 1).is_err());
    }

    #[test]
    fn translation_invariant_within_segment() {
        let layout = SegmentLayout::triplet(g(2, 3), g(3, 3), g(4, 4)).unwrap();
        let t = RelativeBiasTables::new("r", layout.clone(), 2);
        let mut store = ParamStore::new();
        t.init(&mut store, &mut ChaCha8Rng::seed_from_u64(9), 1.0);
        let graph = Graph::new(&store);
        let r = relative_bias(&t, &graph, &layout, 2).unwrap().value();
        let span = *layout.span(Segment::Search).unwrap();
        let idx = |row, col| layout.index_of(TokenCoord { segment: Segment::Search, row, col }).unwrap();
        for h in 0..2 {
            // Same displacement (+1, -1), different absolute positions.
            let v1 = r.at(&[h, idx(1, 0), idx(0, 1)]);
            let v2 = r.at(&[h, idx(3, 2), idx(2, 3)]);
            assert_eq!(v1, v2);
        }
        assert_eq!(span.len(), 16);
    }
}
