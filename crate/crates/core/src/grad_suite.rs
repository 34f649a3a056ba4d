//! Registry of finite-difference checks over every primitive and network
//! block, at shapes of at most 8 per extent.
//!
//! Block checks cover the input and every parameter. The scalar probed is
//! `sum(out ⊙ R)` for a fixed random `R`, so no output entry can cancel
//! another by symmetry.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_steps, Conv2dSpec, CustomBackward, GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::loss::{silog_loss, LossConfig};
use crate::net::{Aspp, AsppConfig, Decoder, EdgeStage, Pem, PemConfig, SelfAttention};
use crate::params::{Bound, ParamStore};
use crate::patch_graph::EdgeConv;
use crate::tensor::Tensor;

/// Step sizes tried per coordinate; the best agreement counts.
pub const STEPS: [f64; 3] = [1e-6, 1e-5, 1e-4];
pub const TOLERANCE: f64 = 1e-4;

/// Block names accepted as a scope, besides `all`.
pub const MODULES: [&str; 8] = ["primitive", "em", "pem", "edge_stage", "sam", "aspp", "decoder", "loss"];

type CaseFn = Box<dyn Fn() -> Result<GradCheckReport>>;

pub struct CheckCase {
    pub module: &'static str,
    pub op: &'static str,
    pub shapes: String,
    run: CaseFn,
}

impl CheckCase {
    pub fn new(module: &'static str, op: &'static str, shapes: impl Into<String>, run: CaseFn) -> Self {
        CheckCase { module, op, shapes: shapes.into(), run }
    }

    pub fn run(&self) -> CheckRow {
        let start = Instant::now();
        let (max_rel_err, pass, error) = match (self.run)() {
            Ok(r) => (r.max_rel_err, r.pass, None),
            Err(e) => (f64::NAN, false, Some(e.to_string())),
        };
        CheckRow {
            module: self.module,
            op: self.op,
            shapes: self.shapes.clone(),
            max_rel_err,
            pass,
            error,
            seconds: start.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckRow {
    pub module: &'static str,
    pub op: &'static str,
    pub shapes: String,
    pub max_rel_err: f64,
    pub pass: bool,
    pub error: Option<String>,
    pub seconds: f64,
}

impl CheckRow {
    pub fn header() -> String {
        format!("{:<11} {:<20} {:<28} {:>12}  result", "module", "op", "shapes", "max_rel_err")
    }

    pub fn line(&self) -> String {
        let verdict = match (&self.error, self.pass) {
            (Some(e), _) => format!("FAIL ({e})"),
            (None, true) => "pass".to_string(),
            (None, false) => "FAIL".to_string(),
        };
        format!("{:<11} {:<20} {:<28} {:>12.3e}  {verdict}", self.module, self.op, self.shapes, self.max_rel_err)
    }
}

/// Cases in `scope`: `all` or one of [`MODULES`].
pub fn cases(scope: &str) -> Result<Vec<CheckCase>> {
    if scope != "all" && !MODULES.contains(&scope) {
        return Err(Error::config(format!("gradcheck scope: unknown {scope:?}; use all or one of {}", MODULES.join(", "))));
    }
    Ok(registry().into_iter().filter(|c| scope == "all" || c.module == scope).collect())
}

pub fn run(scope: &str) -> Result<Vec<CheckRow>> {
    Ok(cases(scope)?.iter().map(CheckCase::run).collect())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 0.5, 2.0, &mut rng(seed))
}

fn dims(shape: &[usize]) -> String {
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn merge(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    let worst = if b.max_rel_err > a.max_rel_err { &b } else { &a };
    GradCheckReport {
        max_rel_err: worst.max_rel_err,
        max_abs_err: a.max_abs_err.max(b.max_abs_err),
        worst_index: worst.worst_index,
        coords_checked: a.coords_checked + b.coords_checked,
        pass: a.pass && b.pass,
    }
}

fn check_all<F: Fn(&mut Graph, Var) -> Result<Var>>(f: F, x: &Tensor) -> Result<GradCheckReport> {
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_steps(f, x, &STEPS, TOLERANCE, &coords)
}

/// `sum(y ⊙ R)` with `R` drawn from `seed` in the shape of `y`.
fn project(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let r = rand(g.shape(y), seed);
    let rv = g.constant(r)?;
    let p = g.mul(y, rv)?;
    g.sum(p)
}

/// Unary op checked on `x`.
fn unary(op: &'static str, x: Tensor, f: fn(&mut Graph, Var) -> Result<Var>) -> CheckCase {
    let shapes = dims(x.shape());
    CheckCase::new(
        "primitive",
        op,
        shapes,
        Box::new(move || {
            check_all(
                |g, v| {
                    let y = f(g, v)?;
                    project(g, y, 99)
                },
                &x,
            )
        }),
    )
}

/// Binary op checked on each operand with the other held fixed.
fn binary(op: &'static str, a: Tensor, b: Tensor, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> CheckCase {
    let shapes = format!("{}, {}", dims(a.shape()), dims(b.shape()));
    CheckCase::new(
        "primitive",
        op,
        shapes,
        Box::new(move || {
            let left = check_all(
                |g, v| {
                    let bv = g.constant(b.clone())?;
                    let y = f(g, v, bv)?;
                    project(g, y, 99)
                },
                &a,
            )?;
            let right = check_all(
                |g, v| {
                    let av = g.constant(a.clone())?;
                    let y = f(g, av, v)?;
                    project(g, y, 99)
                },
                &b,
            )?;
            Ok(merge(left, right))
        }),
    )
}

/// Checks a parameterized block on its input and on each parameter.
fn block<F>(module: &'static str, op: &'static str, store: ParamStore, x: Tensor, f: F) -> CheckCase
where
    F: Fn(&mut Graph, &Bound, Var) -> Result<Var> + 'static,
{
    let shapes = format!("in {}, {} params", dims(x.shape()), store.num_elements());
    CheckCase::new(
        module,
        op,
        shapes,
        Box::new(move || {
            let mut report = check_all(
                |g, v| {
                    let p = store.bind_frozen(g)?;
                    let y = f(g, &p, v)?;
                    project(g, y, 99)
                },
                &x,
            )?;
            for id in store.ids() {
                let r = check_all(
                    |g, v| {
                        let mut p = store.bind_frozen(g)?;
                        p.set(id, v);
                        let xv = g.constant(x.clone())?;
                        let y = f(g, &p, xv)?;
                        project(g, y, 99)
                    },
                    store.get(id),
                )?;
                report = merge(report, r);
            }
            Ok(report)
        }),
    )
}

/// Init leaves biases at 0 and norm gains at 1; moving them off those
/// values exercises more paths.
fn jitter_biases(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id);
        let base = if name.ends_with(".gamma") {
            1.0
        } else if name.ends_with(".bias") || name.ends_with(".beta") {
            0.0
        } else {
            continue;
        };
        store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = base + r.gen_range(-0.3..0.3));
    }
}

fn primitives() -> Vec<CheckCase> {
    let m = |s: u64| rand(&[3, 4], s);
    let mut v = vec![
        binary("add", m(1), m(2), |g, a, b| g.add(a, b)),
        binary("sub", m(3), m(4), |g, a, b| g.sub(a, b)),
        binary("mul", m(5), m(6), |g, a, b| g.mul(a, b)),
        binary("div", m(7), positive(&[3, 4], 8), |g, a, b| g.div(a, b)),
        binary("matmul", rand(&[3, 5], 9), rand(&[5, 4], 10), |g, a, b| g.matmul(a, b)),
        binary("concat_rows", rand(&[2, 4], 11), rand(&[3, 4], 12), |g, a, b| g.concat(&[a, b], 0)),
        binary("concat_cols", rand(&[3, 2], 13), rand(&[3, 5], 14), |g, a, b| g.concat(&[a, b], 1)),
        binary("concat_channels", rand(&[2, 3, 3], 15), rand(&[1, 3, 3], 16), |g, a, b| g.concat_channels(&[a, b])),
        binary("linear_columns", rand(&[4, 6], 17), rand(&[3, 4], 18), |g, x, w| g.linear_columns(x, w, None)),
        binary("linear_bias", rand(&[3, 1], 19), rand(&[3, 1], 20), |g, b, x| {
            let w = g.constant(rand(&[3, 3], 21))?;
            g.linear_columns(x, w, Some(b))
        }),
        binary("conv2d", rand(&[2, 6, 6], 22), rand(&[3, 2, 3, 3], 23), |g, x, w| {
            g.conv2d(x, w, None, Conv2dSpec::new(1, 1, 1))
        }),
        binary("conv2d_stride2", rand(&[2, 7, 7], 24), rand(&[2, 2, 3, 3], 25), |g, x, w| {
            g.conv2d(x, w, None, Conv2dSpec::new(2, 1, 1))
        }),
        binary("conv2d_dilated", rand(&[2, 8, 8], 26), rand(&[2, 2, 3, 3], 27), |g, x, w| {
            g.conv2d(x, w, None, Conv2dSpec::new(1, 2, 2))
        }),
        binary("conv2d_bias", rand(&[2], 28), rand(&[1, 5, 5], 29), |g, b, x| {
            let w = g.constant(rand(&[2, 1, 3, 3], 30))?;
            g.conv2d(x, w, Some(b), Conv2dSpec::new(1, 1, 1))
        }),
        unary("scale", m(31), |g, a| g.scale(a, -2.5)),
        unary("reshape", m(32), |g, a| g.reshape(a, &[2, 6])),
        unary("transpose", m(33), |g, a| g.transpose(a)),
        unary("leaky_relu", m(34), |g, a| g.leaky_relu(a, 0.2)),
        unary("sigmoid", m(35), |g, a| g.sigmoid(a)),
        unary("log", positive(&[3, 4], 36), |g, a| g.log(a)),
        unary("sqrt", positive(&[3, 4], 37), |g, a| g.sqrt(a)),
        unary("reduce_max_0", m(38), |g, a| g.reduce_max(a, 0)),
        unary("reduce_max_1", rand(&[2, 3, 4], 39), |g, a| g.reduce_max(a, 1)),
        unary("reduce_mean_1", m(40), |g, a| g.reduce_mean(a, 1)),
        unary("sum", m(41), |g, a| g.sum(a)),
        unary("mean", m(42), |g, a| g.mean(a)),
        unary("broadcast", rand(&[3, 1], 43), |g, a| g.broadcast(a, &[3, 4])),
        unary("gather", m(44), |g, a| g.gather(a, vec![0, 5, 5, 11, 2, 0], &[2, 3])),
        unary("select_columns", m(45), |g, a| g.select_columns(a, &[3, 0, 0, 2])),
        unary("softmax_lastdim", m(46), |g, a| g.softmax_lastdim(a)),
        unary("upsample_bilinear", rand(&[2, 3, 4], 47), |g, a| g.upsample_bilinear(a, 7, 8)),
        unary("upsample_from_1x1", rand(&[2, 1, 1], 48), |g, a| g.upsample_bilinear(a, 4, 4)),
    ];
    v.push(unary("custom_square", m(49), |g, a| square(g, a, 2.0)));
    v
}

/// `a²` as a custom op whose backward multiplies by `slope·a`; a slope of
/// 2 is correct.
pub fn square(g: &mut Graph, a: Var, slope: f64) -> Result<Var> {
    let value = g.value(a).map(|v| v * v);
    let backward: CustomBackward = Box::new(move |inputs: &[&Tensor], _out: &Tensor, grad: &Tensor| {
        let d = grad.data().iter().zip(inputs[0].data()).map(|(g, x)| g * slope * x).collect();
        vec![Tensor::new(grad.shape(), d).expect("same shape")]
    });
    g.custom("square", &[a], value, backward)
}

/// Harness sensitivity: a custom op whose backward is off by 10 %.
pub fn wrong_backward_case() -> CheckCase {
    let x = rand(&[3, 4], 50);
    let mut c = unary("wrong_square", x, |g, a| square(g, a, 2.2));
    c.module = "fixture";
    c
}

fn em_case(edge_norm: bool, op: &'static str) -> CheckCase {
    let mut store = ParamStore::new();
    let em = EdgeConv::new(&mut store, "em", 4, 5, 3, 2, edge_norm, &mut rng(60));
    jitter_biases(&mut store, 61);
    block("em", op, store, rand(&[4, 6], 62), move |g, p, x| em.forward(g, p, x))
}

fn pem_case(edge_norm: bool, op: &'static str) -> CheckCase {
    let mut store = ParamStore::new();
    let cfg = PemConfig { in_channels: 3, reduce_channels: 2, embed_dim: 4, out_channels: 3, patch: 2, k: 2, edge_norm };
    let pem = Pem::new("pem", cfg, &mut store, &mut rng(63));
    jitter_biases(&mut store, 64);
    block("pem", op, store, rand(&[3, 4, 6], 65), move |g, p, x| Ok(pem.forward(g, p, x)?.values))
}

fn modules() -> Vec<CheckCase> {
    let mut v = vec![em_case(false, "em_forward"), em_case(true, "em_forward_norm"), pem_case(false, "pem_forward"), pem_case(true, "pem_forward_norm")];

    let mut store = ParamStore::new();
    let stage = EdgeStage::new(&mut store, "edge", 6, 2, false, &mut rng(66)).expect("even width");
    jitter_biases(&mut store, 67);
    v.push(block("edge_stage", "edge_stage_forward", store, rand(&[6, 5], 68), move |g, p, x| Ok(stage.forward(g, p, x)?.1)));

    let mut store = ParamStore::new();
    let sam = SelfAttention::new(&mut store, "sam", 4, &mut rng(69));
    jitter_biases(&mut store, 70);
    v.push(block("sam", "sam_forward", store, rand(&[4, 5], 71), move |g, p, x| Ok(sam.forward(g, p, x)?.x_att)));

    let mut store = ParamStore::new();
    let cfg = AsppConfig { in_channels: 3, branch_channels: 2, out_channels: 3, rates: vec![1, 2], use_pointwise: true, use_global: true };
    let aspp = Aspp::new(&mut store, "aspp", cfg, &mut rng(72)).expect("valid aspp");
    jitter_biases(&mut store, 73);
    v.push(block("aspp", "aspp_forward", store, rand(&[3, 4, 4], 74), move |g, p, x| aspp.forward(g, p, x)));

    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, "dec", [3, 2, 2], 2, (8, 8), &mut rng(75));
    jitter_biases(&mut store, 76);
    let skips = [rand(&[3, 2, 2], 77), rand(&[2, 4, 4], 78), rand(&[2, 8, 8], 79)];
    v.push(block("decoder", "decoder_forward", store, rand(&[2, 1, 1], 80), move |g, p, top| {
        let s = [g.constant(skips[0].clone())?, g.constant(skips[1].clone())?, g.constant(skips[2].clone())?];
        dec.forward(g, p, top, s)
    }));

    let gt = positive(&[1, 4, 4], 81);
    let mask: Vec<bool> = (0..16).map(|i| i % 5 != 2).collect();
    let pred = positive(&[1, 4, 4], 82);
    v.push(CheckCase::new(
        "loss",
        "silog_loss",
        "pred 1x4x4, gt 1x4x4",
        Box::new(move || check_all(|g, x| silog_loss(g, x, &gt, &mask, &LossConfig::default()), &pred)),
    ));
    v
}

pub fn registry() -> Vec<CheckCase> {
    let mut v = primitives();
    v.extend(modules());
    v
}
