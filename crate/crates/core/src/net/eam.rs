use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamStore};
use crate::patch_graph::EdgeConv;

/// Intermediates of one attention-module forward. All matrices are
/// `channels × N_p`; `output` is `channels × H/32 × W/32`.
#[derive(Clone, Copy, Debug)]
pub struct EamState {
    pub x_cat: Var,
    pub x_r: Var,
    pub x_xi: Var,
    pub x_k: Var,
    pub x_q: Var,
    pub x_v: Var,
    /// `N_p × N_p`, rows over keys.
    pub attention: Var,
    pub x_att: Var,
    pub output: Var,
}

fn expect_rows(g: &Graph, v: Var, what: &str, rows: usize, cols: usize) -> Result<()> {
    let s = g.shape(v);
    if s != [rows, cols] {
        return Err(Error::shape("eam", format!("{what} must be {rows}×{cols}"), &[s]));
    }
    Ok(())
}

/// Stacks the flattened deepest feature and both edge-feature maps along
/// channels, in that order.
pub fn eam_concat(g: &mut Graph, f_g: Var, xi8: Var, xi16: Var) -> Result<Var> {
    let shapes = [g.shape(f_g).to_vec(), g.shape(xi8).to_vec(), g.shape(xi16).to_vec()];
    if shapes.iter().any(|s| s.len() != 2) || shapes.iter().any(|s| s[1] != shapes[0][1]) {
        let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        return Err(Error::shape("eam_concat", "inputs must be matrices with equal columns", &refs));
    }
    g.concat(&[f_g, xi8, xi16], 0)
}

/// Halves the channels with a channel-wise MLP, runs the EdgeConv module on
/// the result and stacks both back to the input width.
#[derive(Clone, Debug)]
pub struct EdgeStage {
    pub reduce: Linear,
    pub edge: EdgeConv,
    c_t: usize,
}

impl EdgeStage {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_t: usize,
        k: usize,
        edge_norm: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if !c_t.is_multiple_of(2) || c_t == 0 {
            return Err(Error::config(format!("{name}: channel count {c_t} must be even and positive")));
        }
        let half = c_t / 2;
        let reduce = Linear::new(store, &format!("{name}.reduce"), c_t, half, true, rng);
        let edge = EdgeConv::new(store, &format!("{name}.em"), half, half, half, k, edge_norm, rng);
        Ok(EdgeStage { reduce, edge, c_t })
    }

    /// Returns `(x_r, x_xi)`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x_cat: Var) -> Result<(Var, Var)> {
        let n = g.shape(x_cat).get(1).copied().unwrap_or(0);
        expect_rows(g, x_cat, "X_cat", self.c_t, n)?;
        let x_r = self.reduce.forward(g, p, x_cat)?;
        let e = self.edge.forward(g, p, x_r)?;
        let x_xi = g.concat(&[x_r, e], 0)?;
        expect_rows(g, x_xi, "X_xi", self.c_t, n)?;
        Ok((x_r, x_xi))
    }
}

/// Residual scaled dot-product self-attention over patches.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub key: Linear,
    pub query: Linear,
    pub value: Linear,
    c: usize,
}

/// Outputs of [`SelfAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOut {
    pub x_k: Var,
    pub x_q: Var,
    pub x_v: Var,
    pub attention: Var,
    pub x_att: Var,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, rng: &mut R) -> Self {
        SelfAttention {
            // a key shift moves every score of a query equally, which softmax cancels
            key: Linear::with_bias(store, &format!("{name}.key"), c, c, false, false, rng),
            query: Linear::new(store, &format!("{name}.query"), c, c, false, rng),
            value: Linear::new(store, &format!("{name}.value"), c, c, false, rng),
            c,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<AttentionOut> {
        let n = g.shape(x).get(1).copied().unwrap_or(0);
        expect_rows(g, x, "attention input", self.c, n)?;
        let x_k = self.key.forward(g, p, x)?;
        let x_q = self.query.forward(g, p, x)?;
        let x_v = self.value.forward(g, p, x)?;
        let qt = g.transpose(x_q)?;
        let scores = g.matmul(qt, x_k)?;
        let scores = g.scale(scores, 1.0 / (self.c as f64).sqrt())?;
        let attention = g.softmax_lastdim(scores)?;
        let vt = g.transpose(x_v)?;
        let mixed = g.matmul(attention, vt)?;
        let mixed = g.transpose(mixed)?;
        let x_att = g.add(x, mixed)?;
        expect_rows(g, x_att, "X_att", self.c, n)?;
        Ok(AttentionOut { x_k, x_q, x_v, attention, x_att })
    }
}
