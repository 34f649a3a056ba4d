use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvAct};
use crate::params::{Bound, ParamStore};

use super::ModelConfig;

/// Encoder outputs at strides 4, 8, 16 and 32.
#[derive(Clone, Copy, Debug)]
pub struct EncoderFeatures {
    pub s4: Var,
    pub s8: Var,
    pub s16: Var,
    pub s32: Var,
}

/// Strided-conv encoder: a stride-2 stem, then four stages of
/// (3×3 stride-2 conv, 3×3 conv), each followed by leaky ReLU.
#[derive(Clone, Debug)]
pub struct Encoder {
    stem: ConvAct,
    stages: Vec<(ConvAct, ConvAct)>,
    input_hw: (usize, usize),
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let down = Conv2dSpec::new(2, 1, 1);
        let same = Conv2dSpec::new(1, 1, 1);
        let stem = ConvAct(Conv2d::new(store, "enc.stem", 3, cfg.stem_channels, 3, down, true, rng));
        let mut prev = cfg.stem_channels;
        let stages = cfg
            .encoder_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let a = ConvAct(Conv2d::new(store, &format!("enc.s{i}.down"), prev, c, 3, down, true, rng));
                let b = ConvAct(Conv2d::new(store, &format!("enc.s{i}.conv"), c, c, 3, same, true, rng));
                prev = c;
                (a, b)
            })
            .collect();
        Encoder { stem, stages, input_hw: (cfg.input_h, cfg.input_w) }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<EncoderFeatures> {
        let s = g.shape(image);
        if s != [3, self.input_hw.0, self.input_hw.1] {
            return Err(Error::shape(
                "encoder",
                format!("expected 3×{}×{} image", self.input_hw.0, self.input_hw.1),
                &[s],
            ));
        }
        let mut x = self.stem.forward(g, p, image)?;
        let mut outs = Vec::with_capacity(4);
        for (down, conv) in &self.stages {
            x = down.forward(g, p, x)?;
            x = conv.forward(g, p, x)?;
            outs.push(x);
        }
        Ok(EncoderFeatures { s4: outs[0], s8: outs[1], s16: outs[2], s32: outs[3] })
    }
}
