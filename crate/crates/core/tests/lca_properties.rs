use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ctxtrack_core::gradcheck::{finite_diff_grad, relative_error};
use ctxtrack_core::lca::{lca_forward, lca_search_query_forward, LcaConfig, LcaLayer, SegmentedTokens};
use ctxtrack_core::position::{GridSize, Segment, SegmentLayout};
use ctxtrack_core::{Graph, ParamStore, Tensor};

fn grid(r: usize, c: usize) -> GridSize {
    GridSize::new(r, c).unwrap()
}

fn layer(layout: &SegmentLayout, dim: usize, heads: usize, seed: u64) -> (LcaLayer, ParamStore) {
    let layer = LcaLayer::new("lca", LcaConfig::new(dim, heads), layout.clone()).unwrap();
    let mut store = ParamStore::new();
    layer.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    (layer, store)
}

fn zero_positional(store: &mut ParamStore) {
    let names: Vec<String> = store.names().filter(|n| n.contains(".abs.") || n.contains(".rel.")).map(String::from).collect();
    for n in names {
        let shape = store.get(&n).unwrap().shape().to_vec();
        store.set(&n, Tensor::zeros(&shape)).unwrap();
    }
}

fn run(layer: &LcaLayer, store: &ParamStore, x: &Tensor) -> Tensor {
    let g = Graph::new(store);
    let input = SegmentedTokens::new(g.constant(x.clone()), layer.layout().clone()).unwrap();
    lca_forward(layer, &g, &input).unwrap().tokens.tokens.value().as_ref().clone()
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let mut data = Vec::with_capacity(x.len());
    for &p in perm {
        data.extend_from_slice(&x.data()[p * d..(p + 1) * d]);
    }
    Tensor::new(x.shape(), data).unwrap()
}

#[test]
fn permutation_within_segment_is_equivariant_without_positions() {
    let layout = SegmentLayout::triplet(grid(2, 2), grid(3, 3), grid(3, 3)).unwrap();
    let (layer, mut store) = layer(&layout, 16, 2, 1);
    zero_positional(&mut store);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for seg in Segment::ALL {
        let x = Tensor::randn(&[layout.len(), 16], 1.0, &mut rng);
        let span = *layout.require(seg).unwrap();
        let mut perm: Vec<usize> = (0..layout.len()).collect();
        perm[span.indices()].shuffle(&mut rng);
        let lhs = run(&layer, &store, &permute_rows(&x, &perm));
        let rhs = permute_rows(&run(&layer, &store, &x), &perm);
        assert!(lhs.max_abs_diff(&rhs) < 1e-12, "{seg:?}");
    }
}

#[test]
fn positional_terms_break_permutation_equivariance() {
    let layout = SegmentLayout::triplet(grid(2, 2), grid(3, 3), grid(3, 3)).unwrap();
    let (layer, store) = layer(&layout, 16, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = Tensor::randn(&[layout.len(), 16], 1.0, &mut rng);
    let mut perm: Vec<usize> = (0..layout.len()).collect();
    perm.swap(13, 21);
    let lhs = run(&layer, &store, &permute_rows(&x, &perm));
    let rhs = permute_rows(&run(&layer, &store, &x), &perm);
    assert!(lhs.max_abs_diff(&rhs) > 1e-6);
}

#[test]
fn attention_rows_sum_to_one() {
    let layout = SegmentLayout::triplet(grid(1, 1), grid(2, 2), grid(2, 2)).unwrap();
    let (layer, store) = layer(&layout, 8, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let x = Tensor::randn(&[9, 8], rng.gen_range(0.1..20.0), &mut rng);
        let g = Graph::new(&store);
        let input = SegmentedTokens::new(g.constant(x), layout.clone()).unwrap();
        for out in [lca_forward(&layer, &g, &input).unwrap(), lca_search_query_forward(&layer, &g, &input).unwrap()] {
            let w = out.weights.value();
            let k = *w.shape().last().unwrap();
            for row in w.data().chunks(k) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn lca_gradients_match_finite_differences() {
    let layout = SegmentLayout::triplet(grid(1, 1), grid(2, 2), grid(2, 2)).unwrap();
    let (layer, store) = layer(&layout, 8, 2, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::randn(&[9, 8], 1.0, &mut rng);
    let weights = Tensor::randn(&[9, 8], 1.0, &mut rng);

    let loss = |store: &ParamStore, x: &Tensor| -> f64 {
        let out = run(&layer, store, x);
        out.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut with_input = store.clone();
    with_input.insert("input", x.clone());
    let g = Graph::new(&with_input);
    let xv = g.param("input").unwrap();
    let input = SegmentedTokens::new(xv, layout.clone()).unwrap();
    let out = lca_forward(&layer, &g, &input).unwrap().tokens.tokens;
    let total = out.mul(g.constant(weights.clone())).unwrap().sum();
    let grads = g.backward(total).unwrap();

    let num_x = finite_diff_grad(|t| loss(&store, t), &x, 1e-5).unwrap();
    let ana_x = grads.get_or_zeros("input", x.shape());
    for (a, n) in ana_x.data().iter().zip(num_x.data()) {
        assert!(relative_error(*a, *n, 1e-6) <= 1e-3, "input grad {a} vs {n}");
    }

    let mut worst: f64 = 0.0;
    for name in store.names().map(String::from).collect::<Vec<_>>() {
        let base = store.get(&name).unwrap().clone();
        let numeric = finite_diff_grad(
            |t| {
                let mut s = store.clone();
                s.set(&name, t.clone()).unwrap();
                loss(&s, &x)
            },
            &base,
            1e-5,
        )
        .unwrap();
        let analytic = grads.get(&name).cloned().unwrap_or_else(|| Tensor::zeros(base.shape()));
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            worst = worst.max(relative_error(*a, *n, 1e-6));
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}
