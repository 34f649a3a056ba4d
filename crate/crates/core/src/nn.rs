//! Parameterized layers used by the network.

use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::Result;
use crate::params::{kaiming_uniform, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Default negative slope for every nonlinearity in the network.
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        spec: Conv2dSpec,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(&[c_out, c_in, kernel, kernel], c_in * kernel * kernel, LEAKY_SLOPE, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Conv2d { weight, bias, spec }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), self.bias.map(|b| p.var(b)), self.spec)
    }
}

/// Conv followed by leaky ReLU.
#[derive(Clone, Debug)]
pub struct ConvAct(pub Conv2d);

impl ConvAct {
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.0.forward(g, p, x)?;
        g.leaky_relu(y, LEAKY_SLOPE)
    }
}

/// Per-column affine map on a `c_in × N` matrix, optionally followed by
/// leaky ReLU. This is the channel-wise MLP layer: the same weights are
/// applied to every column (patch).
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activate: bool,
    pub c_in: usize,
    pub c_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        activate: bool,
        rng: &mut R,
    ) -> Self {
        Self::with_bias(store, name, c_in, c_out, activate, true, rng)
    }

    pub fn with_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        activate: bool,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_uniform(&[c_out, c_in], c_in, LEAKY_SLOPE, rng);
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        Linear { weight, bias, activate, c_in, c_out }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = g.linear_columns(x, p.var(self.weight), self.bias.map(|b| p.var(b)))?;
        if self.activate {
            g.leaky_relu(y, LEAKY_SLOPE)
        } else {
            Ok(y)
        }
    }
}
