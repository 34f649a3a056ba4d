//! Lowest silog reachable by any depth map that is predicted at a coarse
//! stride and bilinearly upsampled, like the decoder head does.
//!
//! A free `H/s × W/s` logit map goes through the same upsample, sigmoid and
//! depth scaling as the network output and is fitted to each scene's depth
//! directly with Adam. Whatever it cannot reach, no network with that head
//! can reach either.
//!
//! `cargo run --release --example resolution_floor`

use edgedepth::config::OptimConfig;
use edgedepth::data::{synth_scene, SceneSpec};
use edgedepth::loss::{silog_loss, LossConfig};
use edgedepth::params::ParamStore;
use edgedepth::train::Adam;
use edgedepth::{Graph, Result, Tensor};

const SIDE: usize = 64;
const MAX_DEPTH: f64 = 10.0;

fn fitted_loss(depth: &Tensor, mask: &[bool], stride: usize) -> Result<f64> {
    let n = SIDE / stride;
    let mut store = ParamStore::new();
    let id = store.add("logit", Tensor::zeros(&[1, n, n]));
    let mut adam = Adam::new(&store, OptimConfig::default());
    let mut last = f64::NAN;
    for it in 0..3000 {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let up = g.upsample_bilinear(p.var(id), SIDE, SIDE)?;
        let unit = g.sigmoid(up)?;
        let pred = g.scale(unit, MAX_DEPTH)?;
        let loss = silog_loss(&mut g, pred, depth, mask, &LossConfig::default())?;
        last = g.value(loss).item();
        g.backward(loss)?;
        let grad = g.grad(p.var(id)).expect("logit feeds the loss");
        adam.step(&mut store, &[grad], if it < 2000 { 0.02 } else { 0.002 })?;
    }
    Ok(last)
}

fn main() -> Result<()> {
    // the eight scenes of the desk learning check
    let scenes: Vec<_> = (0..8).map(|i| synth_scene(&SceneSpec::random(100 + i, SIDE, SIDE, MAX_DEPTH))).collect::<Result<_>>()?;
    for stride in [4, 2, 1] {
        let mut total = 0.0;
        for s in &scenes {
            total += fitted_loss(&s.depth, &s.mask, stride)?;
        }
        println!("stride {stride}: mean silog floor {:.4}", total / scenes.len() as f64);
    }
    Ok(())
}
