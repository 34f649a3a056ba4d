use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvAct, Linear};
use crate::params::{Bound, ParamStore};

/// Branch layout of an [`Aspp`].
#[derive(Clone, Debug, PartialEq)]
pub struct AsppConfig {
    pub in_channels: usize,
    /// Width of every branch.
    pub branch_channels: usize,
    pub out_channels: usize,
    pub rates: Vec<usize>,
    pub use_pointwise: bool,
    pub use_global: bool,
}

/// Atrous spatial pyramid pooling: a 1×1 branch, one 3×3 branch per
/// dilation rate (padding = rate), a global-average branch broadcast back,
/// all concatenated and fused by a 1×1 conv.
#[derive(Clone, Debug)]
pub struct Aspp {
    pub pointwise: Option<ConvAct>,
    pub dilated: Vec<ConvAct>,
    pub global: Option<Linear>,
    pub fuse: ConvAct,
    cfg: AsppConfig,
}

impl Aspp {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: AsppConfig, rng: &mut R) -> Result<Self> {
        let n_branches = cfg.rates.len() + cfg.use_pointwise as usize + cfg.use_global as usize;
        if n_branches == 0 || cfg.rates.contains(&0) {
            return Err(Error::config(format!("{name}: need at least one branch and rates >= 1")));
        }
        let (c_in, c_b) = (cfg.in_channels, cfg.branch_channels);
        let pointwise = cfg.use_pointwise.then(|| {
            ConvAct(Conv2d::new(store, &format!("{name}.pointwise"), c_in, c_b, 1, Conv2dSpec::default(), true, rng))
        });
        let dilated = cfg
            .rates
            .iter()
            .map(|&r| {
                let spec = Conv2dSpec::new(1, r, r);
                ConvAct(Conv2d::new(store, &format!("{name}.rate{r}"), c_in, c_b, 3, spec, true, rng))
            })
            .collect();
        let global = cfg.use_global.then(|| Linear::new(store, &format!("{name}.global"), c_in, c_b, true, rng));
        let fuse = ConvAct(Conv2d::new(
            store,
            &format!("{name}.fuse"),
            n_branches * c_b,
            cfg.out_channels,
            1,
            Conv2dSpec::default(),
            true,
            rng,
        ));
        Ok(Aspp { pointwise, dilated, global, fuse, cfg })
    }

    pub fn config(&self) -> &AsppConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::shape("aspp", format!("expected {}×H×W", self.cfg.in_channels), &[&s]));
        }
        let (h, w) = (s[1], s[2]);
        let mut branches = Vec::new();
        if let Some(b) = &self.pointwise {
            branches.push(b.forward(g, p, x)?);
        }
        for b in &self.dilated {
            branches.push(b.forward(g, p, x)?);
        }
        if let Some(lin) = &self.global {
            let flat = g.reshape(x, &[s[0], h * w])?;
            let pooled = g.reduce_mean(flat, 1)?;
            let col = g.reshape(pooled, &[s[0], 1])?;
            let y = lin.forward(g, p, col)?;
            let c_b = self.cfg.branch_channels;
            let wide = g.broadcast(y, &[c_b, h * w])?;
            branches.push(g.reshape(wide, &[c_b, h, w])?);
        }
        let stacked = g.concat_channels(&branches)?;
        self.fuse.forward(g, p, stacked)
    }
}
