use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::grad_check;
use crate::nn::Linear;

fn store_rng(seed: u64) -> (ParamStore, ChaCha8Rng) {
    (ParamStore::new(), ChaCha8Rng::seed_from_u64(seed))
}

fn set(store: &mut ParamStore, lin: &Linear, w: &[f64], b: &[f64]) {
    store.get_mut(lin.weight).data_mut().copy_from_slice(w);
    store.get_mut(lin.bias.unwrap()).data_mut().copy_from_slice(b);
}

fn embed_count(c: usize, h: usize, w: usize, patch: usize) -> usize {
    let (mut store, mut rng) = store_rng(0);
    let cfg = PatchEmbedConfig { patch_w: patch, patch_h: patch, in_channels: c, embed_dim: 4 };
    let pe = PatchEmbed::new(&mut store, "pe", cfg, &mut rng);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::uniform(&[c, h, w], 0.0, 1.0, &mut rng)).unwrap();
    let e = pe.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(e.values), &[4, e.n_patches]);
    assert_eq!(e.grid.0 * e.grid.1, e.n_patches);
    e.n_patches
}

#[test]
fn patch_counts_for_dataset_shapes() {
    // 1/8-scale maps: 80×60 for 640×480 input, 152×44 for 1216×352 input.
    assert_eq!(embed_count(8, 60, 80, 4), 300);
    assert_eq!(embed_count(8, 44, 152, 4), 418);
    // 1/16-scale maps with 2×2 patches land on the same grids.
    assert_eq!(embed_count(4, 30, 40, 2), 300);
    assert_eq!(embed_count(4, 22, 76, 2), 418);
}

#[test]
fn zero_map_zero_bias_embeds_to_zero() {
    let (mut store, mut rng) = store_rng(1);
    let cfg = PatchEmbedConfig { patch_w: 2, patch_h: 2, in_channels: 3, embed_dim: 5 };
    let pe = PatchEmbed::new(&mut store, "pe", cfg, &mut rng);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::zeros(&[3, 4, 6])).unwrap();
    let e = pe.forward(&mut g, &p, x).unwrap();
    assert_eq!(e.n_patches, 6);
    assert!(g.value(e.values).data().iter().all(|&v| v == 0.0));
}

#[test]
fn patch_layout_is_channel_row_col_within_row_major_grid() {
    // 1 channel, 2×4 map, 2×2 patches -> 2 patches side by side.
    let index = patch_gather_index(1, 2, 4, 2, 2);
    // feature-major, patch columns: [[0,2],[1,3],[4,6],[5,7]]
    assert_eq!(index, vec![0, 2, 1, 3, 4, 6, 5, 7]);
    let index = patch_gather_index(2, 2, 2, 2, 2);
    assert_eq!(index, (0..8).collect::<Vec<_>>());
}

#[test]
fn non_divisible_map_is_rejected() {
    let (mut store, mut rng) = store_rng(2);
    let cfg = PatchEmbedConfig { patch_w: 4, patch_h: 4, in_channels: 1, embed_dim: 2 };
    let pe = PatchEmbed::new(&mut store, "pe", cfg, &mut rng);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 8, 6])).unwrap();
    assert!(matches!(pe.forward(&mut g, &p, x), Err(Error::Shape { op: "patch_embed", .. })));
}

#[test]
fn knn_examples() {
    let one_d = Tensor::new(&[1, 3], vec![0.0, 1.0, 5.0]).unwrap();
    let nb = knn_graph(&one_d, 1).unwrap();
    assert_eq!(nb.column(0), vec![1, 0, 1]);

    let nb = knn_graph(&one_d, 2).unwrap();
    assert_eq!(nb.row(0), &[1, 2]);
    assert_eq!(nb.row(1), &[0, 2]);
    assert_eq!(nb.row(2), &[1, 0]);

    let same = Tensor::full(&[2, 4], 0.5);
    let nb = knn_graph(&same, 2).unwrap();
    assert_eq!(nb.row(0), &[1, 2]);
    assert_eq!(nb.row(1), &[0, 2]);
    assert_eq!(nb.row(3), &[0, 1]);
}

#[test]
fn knn_rejects_bad_k() {
    let v = Tensor::zeros(&[2, 3]);
    assert!(matches!(knn_graph(&v, 3), Err(Error::Config(_))));
    assert!(matches!(knn_graph(&v, 0), Err(Error::Config(_))));
    assert!(matches!(knn_graph(&Tensor::zeros(&[1, 1]), 1), Err(Error::Config(_))));
}

/// Exhaustive selection: repeatedly take the unchosen other patch with the
/// smallest (distance, id).
fn knn_oracle(v: &Tensor, k: usize) -> Vec<Vec<usize>> {
    let (c, n) = (v.shape()[0], v.shape()[1]);
    let dist = |i: usize, j: usize| -> f64 { (0..c).map(|ch| (v.at(&[ch, i]) - v.at(&[ch, j])).powi(2)).sum() };
    (0..n)
        .map(|i| {
            let mut chosen: Vec<usize> = Vec::new();
            for _ in 0..k {
                let mut best: Option<(f64, usize)> = None;
                for j in 0..n {
                    if j == i || chosen.contains(&j) {
                        continue;
                    }
                    let d = dist(i, j);
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, j));
                    }
                }
                chosen.push(best.unwrap().1);
            }
            chosen
        })
        .collect()
}

fn random_embeddings(rng: &mut ChaCha8Rng, c: usize, n: usize) -> Tensor {
    // Small integer grid so duplicated points and distance ties occur.
    let mut t = Tensor::uniform(&[c, n], -1.0, 1.0, rng);
    if rng.gen_bool(0.5) {
        t = t.map(|v| (v * 2.0).round());
    }
    if n > 2 && rng.gen_bool(0.5) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        for ch in 0..c {
            let v = t.at(&[ch, a]);
            t.data_mut()[ch * n + b] = v;
        }
    }
    t
}

#[test]
fn knn_matches_oracle_including_ties() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let n = rng.gen_range(2..=64);
        let c = rng.gen_range(1..=16);
        let k = rng.gen_range(1..n);
        let v = random_embeddings(&mut rng, c, n);
        let nb = knn_graph(&v, k).unwrap();
        let oracle = knn_oracle(&v, k);
        for (i, row) in oracle.iter().enumerate() {
            assert_eq!(nb.row(i), row.as_slice(), "row {i} n={n} c={c} k={k}");
            assert!(!row.contains(&i));
        }
    }
}

#[test]
fn knn_complete_graph_lists_all_others_by_distance() {
    let v = Tensor::new(&[1, 4], vec![0.0, 10.0, 3.0, -1.0]).unwrap();
    let nb = knn_graph(&v, 3).unwrap();
    assert_eq!(nb.row(0), &[3, 2, 1]);
    assert_eq!(nb.row(1), &[2, 0, 3]);
}

fn edge_setup(c_in: usize, c_out: usize, w: &[f64], b: &[f64]) -> (ParamStore, EdgeConvParams) {
    let (mut store, mut rng) = store_rng(3);
    let params = EdgeConvParams::new(&mut store, "ec", c_in, c_out, &mut rng);
    set(&mut store, &params.theta, w, b);
    (store, params)
}

#[test]
fn identity_theta_exposes_center_and_difference() {
    let (store, params) = edge_setup(1, 2, &[1.0, 0.0, 0.0, 1.0], &[0.0, 0.0]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 3.0]).unwrap()).unwrap();
    let nb = knn_graph(g.value(x), 1).unwrap();
    let e = edge_features(&mut g, &p, x, &nb, &params).unwrap();
    assert_eq!(g.shape(e), &[1, 2, 2]);
    // column 0 = patch 0: [e_0, e_1 - e_0] = [1, 2]
    assert_eq!(g.value(e).at(&[0, 0, 0]), 1.0);
    assert_eq!(g.value(e).at(&[0, 1, 0]), 2.0);
}

#[test]
fn equal_neighbors_zero_the_difference_half() {
    // weights read only the difference half
    let (store, params) = edge_setup(2, 1, &[0.0, 0.0, 1.0, 1.0], &[0.0]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::full(&[2, 3], 0.7)).unwrap();
    let nb = knn_graph(g.value(x), 2).unwrap();
    let e = edge_features(&mut g, &p, x, &nb, &params).unwrap();
    assert!(g.value(e).data().iter().all(|&v| v == 0.0));
}

#[test]
fn sum_theta_hand_example() {
    let (store, params) = edge_setup(1, 1, &[1.0, 1.0], &[0.0]);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::new(&[1, 2], vec![0.0, 2.0]).unwrap()).unwrap();
    let nb = knn_graph(g.value(x), 1).unwrap();
    let e = edge_features(&mut g, &p, x, &nb, &params).unwrap();
    assert_eq!(g.value(e).data(), &[2.0, 0.0]);
}

#[test]
fn aggregate_examples() {
    let mut g = Graph::new();
    let single = g.constant(Tensor::new(&[1, 1, 3], vec![1.0, -1.0, 4.0]).unwrap()).unwrap();
    let a = edge_aggregate(&mut g, single).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, -1.0, 4.0]);

    let pair = g.constant(Tensor::new(&[2, 1, 2], vec![1.0, -2.0, 0.0, 5.0]).unwrap()).unwrap();
    let a = edge_aggregate(&mut g, pair).unwrap();
    assert_eq!(g.value(a).data(), &[1.0, 5.0]);

    let rep = g.constant(Tensor::full(&[3, 2, 2], 0.25)).unwrap();
    let a = edge_aggregate(&mut g, rep).unwrap();
    assert_eq!(g.value(a).data(), &[0.25; 4]);
}

fn em(seed: u64, c_in: usize, c_edge: usize, c_out: usize, k: usize, norm: bool) -> (ParamStore, EdgeConv) {
    let (mut store, mut rng) = store_rng(seed);
    let m = EdgeConv::new(&mut store, "em", c_in, c_edge, c_out, k, norm, &mut rng);
    // non-zero biases so they are exercised
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("bias") {
            let b = Tensor::uniform(store.get(id).shape(), -0.3, 0.3, &mut rng);
            *store.get_mut(id) = b;
        }
    }
    (store, m)
}

fn run_em(store: &ParamStore, m: &EdgeConv, x: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let y = m.forward(&mut g, &p, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn forced_graph_with_two_patches() {
    let (store, m) = em(4, 3, 5, 2, 1, false);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::new(&[3, 2], vec![0.1, 0.9, -0.3, 0.2, 0.5, 0.5]).unwrap()).unwrap();
    let tr = m.forward_traced(&mut g, &p, x).unwrap();
    assert_eq!(tr.neighbors.column(0), vec![1, 0]);
    assert_eq!(g.shape(tr.output), &[2, 2]);
}

/// Per-edge reference: loops over patches and neighbors using plain arrays.
fn em_reference(store: &ParamStore, m: &EdgeConv, x: &Tensor) -> Tensor {
    let (c, n) = (x.shape()[0], x.shape()[1]);
    let th_w = store.get(m.edge.theta.weight);
    let th_b = store.get(m.edge.theta.bias.unwrap());
    let mw = store.get(m.mlp.weight);
    let mb = store.get(m.mlp.bias.unwrap());
    let ce = m.edge.c_out;
    let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
    let nbrs = knn_oracle(x, m.k);
    let mut out = Tensor::zeros(&[m.c_out(), n]);
    for i in 0..n {
        let mut pooled = vec![f64::NEG_INFINITY; ce];
        for &j in &nbrs[i] {
            let input: Vec<f64> = (0..c).map(|ch| x.at(&[ch, i])).chain((0..c).map(|ch| x.at(&[ch, j]) - x.at(&[ch, i]))).collect();
            for (o, slot) in pooled.iter_mut().enumerate() {
                let z: f64 = th_b.data()[o] + (0..2 * c).map(|q| th_w.at(&[o, q]) * input[q]).sum::<f64>();
                *slot = slot.max(lrelu(z));
            }
        }
        for o in 0..m.c_out() {
            let z: f64 = mb.data()[o] + (0..ce).map(|q| mw.at(&[o, q]) * pooled[q]).sum::<f64>();
            out.data_mut()[o * n + i] = lrelu(z);
        }
    }
    out
}

#[test]
fn em_matches_per_edge_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..50 {
        let n = rng.gen_range(2..=12);
        let k = rng.gen_range(1..n).min(5);
        let c_in = rng.gen_range(1..=4);
        let (store, m) = em(100 + trial, c_in, rng.gen_range(1..=5), rng.gen_range(1..=4), k, false);
        let x = Tensor::uniform(&[c_in, n], -1.0, 1.0, &mut rng);
        let got = run_em(&store, &m, &x);
        let want = em_reference(&store, &m, &x);
        assert!(got.max_abs_diff(&want) < 1e-12, "trial {trial}");
    }
    // the fixed 4-patch, k=2, 3-channel case
    let (store, m) = em(5, 3, 3, 3, 2, false);
    let x = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut rng);
    assert!(run_em(&store, &m, &x).max_abs_diff(&em_reference(&store, &m, &x)) < 1e-12);
}

#[test]
fn em_grad_check_inputs_and_params() {
    for norm in [false, true] {
        let (store, m) = em(21, 3, 4, 2, 2, norm);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x = Tensor::uniform(&[3, 6], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[2, 6], -1.0, 1.0, &mut rng);
        let loss = |g: &mut Graph, y: Var| -> crate::Result<Var> {
            let wv = g.constant(w.clone())?;
            let p = g.mul(y, wv)?;
            g.sum(p)
        };
        let r = grad_check(
            |g, xv| {
                let p = store.bind_frozen(g)?;
                let y = m.forward(g, &p, xv)?;
                loss(g, y)
            },
            &x,
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(r.pass, "norm={norm} input: {r:?}");
        for id in store.ids() {
            let r = grad_check(
                |g, pv| {
                    let mut p = store.bind_frozen(g)?;
                    p.set(id, pv);
                    let xv = g.constant(x.clone())?;
                    let y = m.forward(g, &p, xv)?;
                    loss(g, y)
                },
                store.get(id),
                1e-6,
                1e-4,
            )
            .unwrap();
            assert!(r.pass, "norm={norm} {}: {r:?}", store.name(id));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn em_is_permutation_equivariant(n in 3usize..10, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, m) = em(seed, 3, 4, 2, 2.min(n - 1), false);
        let x = Tensor::uniform(&[3, n], -1.0, 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        // column q of the permuted matrix is column perm[q] of x
        let mut xp = Tensor::zeros(&[3, n]);
        for ch in 0..3 {
            for q in 0..n {
                xp.data_mut()[ch * n + q] = x.at(&[ch, perm[q]]);
            }
        }
        let y = run_em(&store, &m, &x);
        let yp = run_em(&store, &m, &xp);
        for ch in 0..2 {
            for q in 0..n {
                prop_assert!((yp.at(&[ch, q]) - y.at(&[ch, perm[q]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_ignores_neighbor_order(k in 1usize..6, c in 1usize..4, n in 1usize..6, seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = Tensor::uniform(&[k, c, n], -1.0, 1.0, &mut rng);
        let mut order: Vec<usize> = (0..k).collect();
        for i in (1..k).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut shuffled = Tensor::zeros(&[k, c, n]);
        for (dst, &src) in order.iter().enumerate() {
            let block = c * n;
            shuffled.data_mut()[dst * block..(dst + 1) * block].copy_from_slice(&e.data()[src * block..(src + 1) * block]);
        }
        let mut g = Graph::new();
        let a = g.constant(e).unwrap();
        let b = g.constant(shuffled).unwrap();
        let ra = edge_aggregate(&mut g, a).unwrap();
        let rb = edge_aggregate(&mut g, b).unwrap();
        prop_assert_eq!(g.value(ra), g.value(rb));
    }
}
