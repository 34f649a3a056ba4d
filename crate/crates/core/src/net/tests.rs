use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check, grad_check_steps, Graph, Var};
use crate::error::Error;
use crate::loss::{silog_loss, LossConfig};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::tensor::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAKY_SLOPE * v
    }
}

/// `W·x + b` on a single column.
fn affine(w: &Tensor, b: Option<&Tensor>, x: &[f64]) -> Vec<f64> {
    let (r, c) = (w.shape()[0], w.shape()[1]);
    (0..r)
        .map(|i| (0..c).map(|j| w.data()[i * c + j] * x[j]).sum::<f64>() + b.map_or(0.0, |b| b.data()[i]))
        .collect()
}

fn apply_linear(store: &ParamStore, lin: &Linear, x: &[f64]) -> Vec<f64> {
    let y = affine(store.get(lin.weight), lin.bias.map(|b| store.get(b)), x);
    if lin.activate {
        y.into_iter().map(leaky).collect()
    } else {
        y
    }
}

fn column(t: &Tensor, j: usize) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c + j]).collect()
}

fn randomize_biases(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).ends_with("bias") {
            *store.get_mut(id) = Tensor::uniform(store.get(id).shape(), -0.2, 0.2, r);
        }
    }
}

fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
    Tensor::uniform(&[3, cfg.input_h, cfg.input_w], 0.0, 1.0, &mut rng(seed))
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, DepthNet) {
    let mut store = ParamStore::new();
    let net = DepthNet::new(cfg, &mut store, &mut rng(seed)).unwrap();
    (store, net)
}

fn run(store: &ParamStore, net: &DepthNet, img: &Tensor) -> (Graph, ModelOutput) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(img.clone()).unwrap();
    let out = net.forward(&mut g, &p, x).unwrap();
    (g, out)
}

#[test]
fn encoder_stride_arithmetic() {
    let cfg = ModelConfig { encoder_channels: [8, 16, 32, 64], ..ModelConfig::desk() };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&cfg, &mut store, &mut rng(1));
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(image(&cfg, 2)).unwrap();
    let f = enc.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(f.s4), &[8, 16, 16]);
    assert_eq!(g.shape(f.s8), &[16, 8, 8]);
    assert_eq!(g.shape(f.s16), &[32, 4, 4]);
    assert_eq!(g.shape(f.s32), &[64, 2, 2]);

    let bad = g.constant(Tensor::zeros(&[3, 32, 64])).unwrap();
    assert!(matches!(enc.forward(&mut g, &p, bad), Err(Error::Shape { .. })));

    // zero input through zero-initialized biases stays zero
    let z = g.constant(Tensor::zeros(&[3, 64, 64])).unwrap();
    let f = enc.forward(&mut g, &p, z).unwrap();
    for v in [f.s4, f.s8, f.s16, f.s32] {
        assert!(g.value(v).data().iter().all(|&x| x == 0.0));
    }
}

#[test]
fn forward_is_bit_identical_across_builds() {
    let cfg = ModelConfig::desk();
    let img = image(&cfg, 9);
    let (s1, n1) = build(&cfg, 4);
    let (s2, n2) = build(&cfg, 4);
    let (g1, o1) = run(&s1, &n1, &img);
    let (g2, o2) = run(&s2, &n2, &img);
    assert_eq!(g1.value(o1.depth).data(), g2.value(o2.depth).data());
    assert_eq!(g1.value(o1.features.s32).data(), g2.value(o2.features.s32).data());
}

#[test]
fn patch_counts_match_grid() {
    for (cfg, n) in [(ModelConfig::nyu(), 300), (ModelConfig::kitti(), 418), (ModelConfig::desk(), 4)] {
        let (store, net) = build(&cfg, 0);
        let (g, out) = run(&store, &net, &image(&cfg, 1));
        let (e8, e16) = (out.edge8.unwrap(), out.edge16.unwrap());
        assert_eq!((e8.n_patches, e16.n_patches), (n, n));
        assert_eq!(g.shape(e8.values), &[cfg.pem_out[0], n]);
        assert_eq!(g.shape(e16.values), &[cfg.pem_out[1], n]);
        let d = g.value(out.depth);
        assert_eq!(d.shape(), &[1, cfg.input_h, cfg.input_w]);
        assert!(d.data().iter().all(|&v| v > 0.0 && v < cfg.max_depth));
    }
}

#[test]
fn eam_concat_layout() {
    let mut g = Graph::new();
    let mut r = rng(3);
    let f_g = g.constant(Tensor::uniform(&[4, 4], -1.0, 1.0, &mut r)).unwrap();
    let a = g.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut r)).unwrap();
    let b = g.constant(Tensor::uniform(&[2, 4], -1.0, 1.0, &mut r)).unwrap();
    let x = eam_concat(&mut g, f_g, a, b).unwrap();
    assert_eq!(g.shape(x), &[8, 4]);
    assert_eq!(&g.value(x).data()[..16], g.value(f_g).data());
    assert_eq!(&g.value(x).data()[16..24], g.value(a).data());
    assert_eq!(&g.value(x).data()[24..], g.value(b).data());

    let z: Vec<Var> = [4, 2, 2].iter().map(|&c| g.constant(Tensor::zeros(&[c, 4])).unwrap()).collect();
    let x = eam_concat(&mut g, z[0], z[1], z[2]).unwrap();
    assert!(g.value(x).data().iter().all(|&v| v == 0.0));

    let short = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    assert!(matches!(eam_concat(&mut g, f_g, a, short), Err(Error::Shape { .. })));
}

#[test]
fn edge_stage_shapes_and_ordering() {
    let mut store = ParamStore::new();
    let stage = EdgeStage::new(&mut store, "s", 8, 2, false, &mut rng(5)).unwrap();
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::uniform(&[8, 6], -1.0, 1.0, &mut rng(6))).unwrap();
    let (x_r, x_xi) = stage.forward(&mut g, &p, x).unwrap();
    assert_eq!(g.shape(x_r), &[4, 6]);
    assert_eq!(g.shape(x_xi), &[8, 6]);
    assert_eq!(&g.value(x_xi).data()[..24], g.value(x_r).data());

    assert!(matches!(EdgeStage::new(&mut ParamStore::new(), "s", 7, 2, false, &mut rng(0)), Err(Error::Config(_))));
    let wrong = g.constant(Tensor::zeros(&[6, 6])).unwrap();
    assert!(stage.forward(&mut g, &p, wrong).is_err());
}

#[test]
fn edge_stage_two_patches_matches_hand_composition() {
    let mut r = rng(8);
    let mut store = ParamStore::new();
    let stage = EdgeStage::new(&mut store, "s", 6, 1, false, &mut r).unwrap();
    randomize_biases(&mut store, &mut r);
    let x = Tensor::uniform(&[6, 2], -1.0, 1.0, &mut r);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let (_, x_xi) = stage.forward(&mut g, &p, xv).unwrap();

    // With two patches and one neighbor each, patch i links to 1 - i.
    let xr: Vec<Vec<f64>> = (0..2).map(|j| apply_linear(&store, &stage.reduce, &column(&x, j))).collect();
    for i in 0..2 {
        let (e_i, e_j) = (&xr[i], &xr[1 - i]);
        let mut input = e_i.clone();
        input.extend(e_j.iter().zip(e_i).map(|(a, b)| a - b));
        let edge = apply_linear(&store, &stage.edge.edge.theta, &input);
        let out = apply_linear(&store, &stage.edge.mlp, &edge);
        let mut expect = e_i.clone();
        expect.extend(out);
        let got = column(g.value(x_xi), i);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }
}

fn attention_setup(c: usize, n: usize, seed: u64) -> (ParamStore, SelfAttention, Tensor) {
    let mut r = rng(seed);
    let mut store = ParamStore::new();
    let sam = SelfAttention::new(&mut store, "sam", c, &mut r);
    randomize_biases(&mut store, &mut r);
    let x = Tensor::uniform(&[c, n], -2.0, 2.0, &mut r);
    (store, sam, x)
}

fn run_attention(store: &ParamStore, sam: &SelfAttention, x: &Tensor) -> (Graph, AttentionOut) {
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let out = sam.forward(&mut g, &p, xv).unwrap();
    (g, out)
}

#[test]
fn single_patch_attention_is_identity_weighting() {
    let (store, sam, x) = attention_setup(6, 1, 11);
    let (g, out) = run_attention(&store, &sam, &x);
    assert_eq!(g.value(out.attention).data(), &[1.0]);
    let v = g.value(out.x_v).data();
    for (i, &a) in g.value(out.x_att).data().iter().enumerate() {
        assert!((a - (x.data()[i] + v[i])).abs() < 1e-12);
    }
}

#[test]
fn zero_value_map_leaves_input() {
    let (mut store, sam, x) = attention_setup(4, 5, 12);
    *store.get_mut(sam.value.weight) = Tensor::zeros(&[4, 4]);
    *store.get_mut(sam.value.bias.unwrap()) = Tensor::zeros(&[4]);
    let (g, out) = run_attention(&store, &sam, &x);
    assert_eq!(g.value(out.x_att).data(), x.data());
}

#[test]
fn two_patch_attention_by_hand() {
    let (mut store, sam, _) = attention_setup(2, 2, 0);
    let set = |store: &mut ParamStore, lin: &Linear, w: [f64; 4], b: [f64; 2]| {
        store.get_mut(lin.weight).data_mut().copy_from_slice(&w);
        store.get_mut(lin.bias.unwrap()).data_mut().copy_from_slice(&b);
    };
    store.get_mut(sam.key.weight).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    set(&mut store, &sam.query, [2.0, 0.0, 0.0, 0.0], [0.0, 1.0]);
    set(&mut store, &sam.value, [0.0, 1.0, 1.0, 0.0], [0.5, 0.0]);
    // columns are patches: p0 = (1, 0), p1 = (0, 2)
    let x = Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
    let (g, out) = run_attention(&store, &sam, &x);

    // K = X, Q = (2·x0, 1), V = (x1 + 0.5, x0)
    let k = [[1.0, 0.0], [0.0, 2.0]];
    let q = [[2.0, 1.0], [0.0, 1.0]];
    let v = [[0.5, 1.0], [2.5, 0.0]];
    let s = 2f64.sqrt();
    let mut att = [[0.0; 2]; 2];
    for i in 0..2 {
        let logits: Vec<f64> = (0..2).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / s).collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for j in 0..2 {
            att[i][j] = logits[j].exp() / z;
        }
    }
    let a = g.value(out.attention).data();
    for i in 0..2 {
        for j in 0..2 {
            assert!((a[i * 2 + j] - att[i][j]).abs() < 1e-14);
        }
    }
    let xa = g.value(out.x_att);
    let xp = [[1.0, 0.0], [0.0, 2.0]];
    for i in 0..2 {
        for c in 0..2 {
            let mixed = att[i][0] * v[0][c] + att[i][1] * v[1][c];
            assert!((xa.at(&[c, i]) - (xp[i][c] + mixed)).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(13);
    for t in 0..100 {
        let c = 2 * r.gen_range(1..5);
        let n = r.gen_range(1..12);
        let (store, sam, x) = attention_setup(c, n, t);
        let (g, out) = run_attention(&store, &sam, &x);
        let a = g.value(out.attention);
        assert_eq!(a.shape(), &[n, n]);
        for i in 0..n {
            let s: f64 = a.data()[i * n..(i + 1) * n].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}

fn aspp_run(cfg: AsppConfig, seed: u64, setup: impl Fn(&mut ParamStore, &Aspp), x: &Tensor) -> Tensor {
    let mut store = ParamStore::new();
    let aspp = Aspp::new(&mut store, "a", cfg, &mut rng(seed)).unwrap();
    setup(&mut store, &aspp);
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let xv = g.constant(x.clone()).unwrap();
    let y = aspp.forward(&mut g, &p, xv).unwrap();
    g.value(y).clone()
}

#[test]
fn aspp_constant_input_on_single_cell() {
    // On a 1×1 map every dilated 3×3 kernel only sees its center tap.
    let cfg = AsppConfig {
        in_channels: 3,
        branch_channels: 2,
        out_channels: 2,
        rates: vec![1, 2],
        use_pointwise: true,
        use_global: true,
    };
    let v = 0.7;
    let x = Tensor::full(&[3, 1, 1], v);
    let fuse_b = [0.3, -0.1];
    let mut store = ParamStore::new();
    let aspp = Aspp::new(&mut store, "a", cfg.clone(), &mut rng(21)).unwrap();
    store.get_mut(aspp.fuse.0.bias.unwrap()).data_mut().copy_from_slice(&fuse_b);
    let got = aspp_run(cfg, 21, |s, a| s.get_mut(a.fuse.0.bias.unwrap()).data_mut().copy_from_slice(&fuse_b), &x);

    let center_sum = |w: &Tensor, o: usize, kk: usize| -> f64 {
        let c_in = w.shape()[1];
        (0..c_in).map(|c| w.at(&[o, c, kk / 2, kk / 2])).sum()
    };
    let mut branches = Vec::new();
    let pw = store.get(aspp.pointwise.as_ref().unwrap().0.weight);
    branches.extend((0..2).map(|o| leaky(v * center_sum(pw, o, 1))));
    for d in &aspp.dilated {
        let w = store.get(d.0.weight);
        branches.extend((0..2).map(|o| leaky(v * center_sum(w, o, 3))));
    }
    let gw = store.get(aspp.global.as_ref().unwrap().weight);
    branches.extend(affine(gw, None, &[v; 3]).into_iter().map(leaky));
    let fw = store.get(aspp.fuse.0.weight);
    let fw2 = Tensor::new(&[2, branches.len()], fw.data().to_vec()).unwrap();
    let bias = Tensor::new(&[2], fuse_b.to_vec()).unwrap();
    let expect: Vec<f64> = affine(&fw2, Some(&bias), &branches).into_iter().map(leaky).collect();
    for (a, b) in got.data().iter().zip(&expect) {
        assert!((a - b).abs() < 1e-13);
    }

    // A wider constant map without spatial kernels stays constant.
    let cfg = AsppConfig { rates: vec![], ..aspp.config().clone() };
    let y = aspp_run(cfg, 22, |_, _| {}, &Tensor::full(&[3, 4, 4], v));
    for c in 0..2 {
        let first = y.at(&[c, 0, 0]);
        assert!((0..16).all(|i| (y.data()[c * 16 + i] - first).abs() < 1e-15));
    }
}

#[test]
fn aspp_two_by_two_hand_example() {
    let cfg = AsppConfig {
        in_channels: 1,
        branch_channels: 1,
        out_channels: 1,
        rates: vec![1, 2],
        use_pointwise: false,
        use_global: false,
    };
    let x = Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    for (fuse, expect) in [([1.0, 1.0], [11.0, 12.0, 13.0, 14.0]), ([1.0, -1.0], [9.0, 8.0, 7.0, 6.0])] {
        let y = aspp_run(
            cfg.clone(),
            0,
            |s, a| {
                for d in &a.dilated {
                    *s.get_mut(d.0.weight) = Tensor::full(&[1, 1, 3, 3], 1.0);
                }
                s.get_mut(a.fuse.0.weight).data_mut().copy_from_slice(&fuse);
            },
            &x,
        );
        // rate 1 sums the whole 2×2 map at every cell; rate 2 only reaches the center
        assert_eq!(y.data(), &expect);
    }
}

#[test]
fn aspp_single_rate_is_plain_conv() {
    let cfg = AsppConfig {
        in_channels: 2,
        branch_channels: 1,
        out_channels: 1,
        rates: vec![1],
        use_pointwise: false,
        use_global: false,
    };
    let mut r = rng(30);
    let x = Tensor::uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
    let w = Tensor::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut r);
    let y = aspp_run(
        cfg,
        0,
        |s, a| {
            *s.get_mut(a.dilated[0].0.weight) = w.clone();
            s.get_mut(a.fuse.0.weight).data_mut().copy_from_slice(&[1.0]);
        },
        &x,
    );
    for i in 0..3 {
        for j in 0..4 {
            let mut acc = 0.0;
            for c in 0..2 {
                for a in 0..3 {
                    for b in 0..3 {
                        let (yi, xj) = (i as isize + a as isize - 1, j as isize + b as isize - 1);
                        if (0..3).contains(&yi) && (0..4).contains(&xj) {
                            acc += w.at(&[0, c, a, b]) * x.at(&[c, yi as usize, xj as usize]);
                        }
                    }
                }
            }
            assert!((y.at(&[0, i, j]) - leaky(leaky(acc))).abs() < 1e-13);
        }
    }
}

#[test]
fn aspp_rejects_oversized_dilation() {
    let cfg = AsppConfig {
        in_channels: 1,
        branch_channels: 1,
        out_channels: 1,
        rates: vec![1],
        use_pointwise: false,
        use_global: false,
    };
    let mut store = ParamStore::new();
    let mut aspp = Aspp::new(&mut store, "a", cfg, &mut rng(0)).unwrap();
    // strip the padding so a 3-wide kernel no longer fits a 2×2 map
    aspp.dilated[0].0.spec.padding = 0;
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g).unwrap();
    let x = g.constant(Tensor::zeros(&[1, 2, 2])).unwrap();
    assert!(matches!(aspp.forward(&mut g, &p, x), Err(Error::Shape { .. })));
}

#[test]
fn decoder_head_range() {
    let cfg = ModelConfig::desk();
    let (mut store, net) = build(&cfg, 5);
    let (g, out) = run(&store, &net, &image(&cfg, 6));
    let u = g.value(out.unit);
    assert_eq!(u.shape(), &[1, 64, 64]);
    assert!(u.data().iter().all(|&v| v > 0.0 && v < 1.0));

    for id in store.ids().collect::<Vec<_>>() {
        if store.name(id).starts_with("dec.") {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
    }
    let (g, out) = run(&store, &net, &image(&cfg, 6));
    assert!(g.value(out.unit).data().iter().all(|&v| v == 0.5));
}

#[test]
fn depth_scales_with_max_depth() {
    let c80 = ModelConfig { max_depth: 80.0, ..ModelConfig::desk() };
    let c160 = ModelConfig { max_depth: 160.0, ..ModelConfig::desk() };
    let img = image(&c80, 2);
    let (s1, n1) = build(&c80, 7);
    let (s2, n2) = build(&c160, 7);
    let (g1, o1) = run(&s1, &n1, &img);
    let (g2, o2) = run(&s2, &n2, &img);
    let (a, b) = (g1.value(o1.depth).data(), g2.value(o2.depth).data());
    assert!(a.iter().all(|&v| v > 0.0 && v < 80.0));
    for (x, y) in a.iter().zip(b) {
        assert_eq!(2.0 * x, *y);
    }
}

#[test]
fn eam_state_channel_counts() {
    let cfg = ModelConfig::desk();
    let (store, net) = build(&cfg, 1);
    let (g, out) = run(&store, &net, &image(&cfg, 1));
    let s = out.eam.unwrap();
    let (c_t, n) = (cfg.c_t(), cfg.n_patches());
    assert_eq!(c_t, cfg.c_g() + cfg.pem_out[0] + cfg.pem_out[1]);
    for v in [s.x_cat, s.x_xi, s.x_k, s.x_q, s.x_v, s.x_att] {
        assert_eq!(g.shape(v), &[c_t, n]);
    }
    assert_eq!(g.shape(s.x_r), &[c_t / 2, n]);
    assert_eq!(g.shape(s.attention), &[n, n]);
    assert_eq!(g.shape(s.output), &[cfg.decoder_channels, 2, 2]);
}

#[test]
fn ablations_run() {
    for (use_pem, use_eam) in [(false, true), (true, false), (false, false)] {
        let cfg = ModelConfig { use_pem, use_eam, ..ModelConfig::desk() };
        let (store, net) = build(&cfg, 3);
        let (g, out) = run(&store, &net, &image(&cfg, 3));
        assert_eq!(out.edge8.is_some(), use_pem);
        assert_eq!(out.eam.is_some(), use_eam);
        if let Some(s) = out.eam {
            assert_eq!(g.shape(s.x_cat), &[cfg.c_g(), 4]);
        }
        assert!(g.value(out.depth).data().iter().all(|&v| v > 0.0 && v < cfg.max_depth));
    }
}

#[test]
fn end_to_end_gradient() {
    for edge_norm in [false, true] {
        let cfg = ModelConfig { edge_norm, ..ModelConfig::desk() };
        let mut store = ParamStore::new();
        let mut r = rng(40);
        let net = DepthNet::new(&cfg, &mut store, &mut r).unwrap();
        randomize_biases(&mut store, &mut r);
        let img = image(&cfg, 41);
        let target = Tensor::uniform(&[1, 64, 64], 1.0, 9.0, &mut r);
        let mask: Vec<bool> = (0..target.len()).map(|i| i % 7 != 3).collect();
        let lc = LossConfig::default();
        for id in store.ids().collect::<Vec<_>>() {
            let len = store.get(id).len();
            let coords: Vec<usize> = (0..3.min(len)).map(|_| r.gen_range(0..len)).collect();
            let rep = grad_check_steps(
                |g, pv| {
                    let mut p = store.bind_frozen(g)?;
                    p.set(id, pv);
                    let x = g.constant(img.clone())?;
                    let out = net.forward(g, &p, x)?;
                    silog_loss(g, out.depth, &target, &mask, &lc)
                },
                store.get(id),
                &[1e-6, 1e-5, 1e-4],
                1e-4,
                &coords,
            )
            .unwrap();
            assert!(rep.pass, "edge_norm={edge_norm} {}: {rep:?}", store.name(id));
        }
    }
}

#[test]
fn sam_input_gradient() {
    let (store, sam, x) = attention_setup(4, 5, 50);
    let r = grad_check(
        |g, xv| {
            let p = store.bind_frozen(g)?;
            let o = sam.forward(g, &p, xv)?;
            let sq = g.mul(o.x_att, o.x_att)?;
            g.sum(sq)
        },
        &x,
        1e-6,
        1e-4,
    )
    .unwrap();
    assert!(r.pass, "{r:?}");
}
