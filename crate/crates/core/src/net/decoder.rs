use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvAct};
use crate::params::{Bound, ParamStore};

/// Top-down feature pyramid with a sigmoid head.
///
/// Each level upsamples the coarser one, adds a 1×1 lateral projection of
/// the encoder skip and smooths with a 3×3 conv. The stride-16, 8 and 4
/// levels are resized to stride 4, stacked, reduced to one channel by a
/// 3×3 conv, squashed by a sigmoid and upsampled to the input extent.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub laterals: Vec<Conv2d>,
    pub smooth: Vec<ConvAct>,
    pub head: Conv2d,
    channels: usize,
    out_hw: (usize, usize),
}

impl Decoder {
    /// `skip_channels` are the widths at strides 16, 8 and 4.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        skip_channels: [usize; 3],
        channels: usize,
        out_hw: (usize, usize),
        rng: &mut R,
    ) -> Self {
        let same = Conv2dSpec::new(1, 1, 1);
        let laterals = skip_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("{name}.lateral{i}"), c, channels, 1, Conv2dSpec::default(), true, rng))
            .collect();
        let smooth = (0..3)
            .map(|i| ConvAct(Conv2d::new(store, &format!("{name}.smooth{i}"), channels, channels, 3, same, true, rng)))
            .collect();
        let head = Conv2d::new(store, &format!("{name}.head"), 3 * channels, 1, 3, same, true, rng);
        Decoder { laterals, smooth, head, channels, out_hw }
    }

    /// `top` is the stride-32 map; `skips` are the encoder maps at strides
    /// 16, 8 and 4. Returns `1×H×W` in (0, 1).
    pub fn forward(&self, g: &mut Graph, p: &Bound, top: Var, skips: [Var; 3]) -> Result<Var> {
        let ts = g.shape(top);
        if ts.len() != 3 || ts[0] != self.channels {
            return Err(Error::shape("decoder", format!("top must have {} channels", self.channels), &[ts]));
        }
        let mut prev = top;
        let mut levels = Vec::with_capacity(3);
        for ((lat, sm), &skip) in self.laterals.iter().zip(&self.smooth).zip(&skips) {
            let ss = g.shape(skip).to_vec();
            let ps = g.shape(prev).to_vec();
            if ss.len() != 3 || ss[1] != 2 * ps[1] || ss[2] != 2 * ps[2] {
                return Err(Error::shape("decoder", "skip must be twice the coarser level", &[&ss, &ps]));
            }
            let lateral = lat.forward(g, p, skip)?;
            let up = g.upsample_bilinear(prev, ss[1], ss[2])?;
            let sum = g.add(up, lateral)?;
            prev = sm.forward(g, p, sum)?;
            levels.push(prev);
        }
        let fine = g.shape(prev).to_vec();
        let mut resized = Vec::with_capacity(3);
        for &lv in &levels {
            let s = g.shape(lv).to_vec();
            resized.push(if s == fine { lv } else { g.upsample_bilinear(lv, fine[1], fine[2])? });
        }
        let stacked = g.concat_channels(&resized)?;
        let logit = self.head.forward(g, p, stacked)?;
        let unit = g.sigmoid(logit)?;
        g.upsample_bilinear(unit, self.out_hw.0, self.out_hw.1)
    }
}
