//! Patch embedding, feature-space k-NN graphs and the EdgeConv module.
//!
//! A feature map is cut into non-overlapping patches, each patch is mapped
//! by one shared linear layer to an embedding column, and the EdgeConv
//! module relates every column to its `k` nearest columns in embedding
//! space:
//!
//! ```text
//! xi_ij = h_theta(e_i, e_j - e_i)      for j in knn(i)
//! out_i = mlp(max_j xi_ij)
//! ```

use std::cmp::Ordering;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, LEAKY_SLOPE};
use crate::params::{Bound, ParamStore};
use crate::tensor::Tensor;

/// Default number of neighbors per patch.
pub const DEFAULT_K: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedConfig {
    pub patch_w: usize,
    pub patch_h: usize,
    /// Channels of the incoming feature map.
    pub in_channels: usize,
    pub embed_dim: usize,
}

impl PatchEmbedConfig {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.patch_w * self.patch_h
    }

    /// Patch grid `(cols, rows)` for a `height × width` map.
    pub fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        if !height.is_multiple_of(self.patch_h) || !width.is_multiple_of(self.patch_w) {
            return Err(Error::shape(
                "patch_embed",
                format!("{}×{} map is not divisible into {}×{} patches", height, width, self.patch_h, self.patch_w),
                &[&[height, width]],
            ));
        }
        Ok((width / self.patch_w, height / self.patch_h))
    }
}

/// Column-per-patch embedding matrix `c_e × N_p`.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedPatches {
    pub values: Var,
    pub n_patches: usize,
    /// `(cols, rows)` of the patch grid; columns are ordered row-major.
    pub grid: (usize, usize),
}

/// Flat source offsets that rearrange a `c×H×W` map into a
/// `(c·h_p·w_p) × N_p` patch matrix. Within a patch, values are ordered
/// channel, row, column; patches are ordered row-major over the grid.
pub fn patch_gather_index(c: usize, height: usize, width: usize, patch_h: usize, patch_w: usize) -> Vec<usize> {
    let (cols, rows) = (width / patch_w, height / patch_h);
    let n = cols * rows;
    let d = c * patch_h * patch_w;
    let mut index = vec![0; d * n];
    for ch in 0..c {
        for y in 0..patch_h {
            for x in 0..patch_w {
                let feat = (ch * patch_h + y) * patch_w + x;
                for r in 0..rows {
                    for col in 0..cols {
                        let src = (ch * height + r * patch_h + y) * width + col * patch_w + x;
                        index[feat * n + r * cols + col] = src;
                    }
                }
            }
        }
    }
    index
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub cfg: PatchEmbedConfig,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cfg: PatchEmbedConfig, rng: &mut R) -> Self {
        Self::with_bias(store, name, cfg, true, rng)
    }

    pub fn with_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cfg: PatchEmbedConfig,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let proj = Linear::with_bias(store, &format!("{name}.proj"), cfg.patch_len(), cfg.embed_dim, false, bias, rng);
        PatchEmbed { cfg, proj }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, fmap: Var) -> Result<EmbeddedPatches> {
        let s = g.shape(fmap).to_vec();
        if s.len() != 3 || s[0] != self.cfg.in_channels {
            return Err(Error::shape(
                "patch_embed",
                format!("expected {} input channels", self.cfg.in_channels),
                &[&s],
            ));
        }
        let (cols, rows) = self.cfg.grid(s[1], s[2])?;
        let n = cols * rows;
        let index = patch_gather_index(s[0], s[1], s[2], self.cfg.patch_h, self.cfg.patch_w);
        let patches = g.gather(fmap, index, &[self.cfg.patch_len(), n])?;
        let values = self.proj.forward(g, p, patches)?;
        Ok(EmbeddedPatches { values, n_patches: n, grid: (cols, rows) })
    }
}

/// `N_p × k` table of neighbor ids, nearest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborIndex {
    indices: Vec<usize>,
    n: usize,
    k: usize,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n_patches(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    /// The `m`-th nearest neighbor of every patch, in patch order.
    pub fn column(&self, m: usize) -> Vec<usize> {
        (0..self.n).map(|i| self.indices[i * self.k + m]).collect()
    }
}

/// Squared Euclidean distance between columns `i` and `j` of a `c × n` matrix.
pub fn column_distance(values: &[f64], c: usize, n: usize, i: usize, j: usize) -> f64 {
    (0..c).map(|ch| {
        let d = values[ch * n + i] - values[ch * n + j];
        d * d
    })
    .sum()
}

/// Exact k nearest neighbors between the columns of `values` (`c × N`),
/// excluding self, ordered by distance with ties going to the lower id.
pub fn knn_graph(values: &Tensor, k: usize) -> Result<NeighborIndex> {
    if values.rank() != 2 {
        return Err(Error::shape("knn_graph", "expected a c × N matrix", &[values.shape()]));
    }
    let (c, n) = (values.shape()[0], values.shape()[1]);
    if k == 0 || k >= n {
        return Err(Error::config(format!("k = {k} must satisfy 1 <= k <= N_p - 1 = {}", n as isize - 1)));
    }
    let data = values.data();
    let mut indices = Vec::with_capacity(n * k);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        cand.extend((0..n).filter(|&j| j != i).map(|j| (column_distance(data, c, n, i, j), j)));
        if k < cand.len() {
            cand.select_nth_unstable_by(k - 1, neighbor_order);
            cand.truncate(k);
        }
        cand.sort_by(neighbor_order);
        indices.extend(cand.iter().map(|&(_, j)| j));
    }
    Ok(NeighborIndex { indices, n, k })
}

/// Learnable edge function `h_theta`: a linear map from `[e_i ; e_j - e_i]`
/// (`2·c_in`) to `c_out`, then leaky ReLU.
#[derive(Clone, Debug)]
pub struct EdgeConvParams {
    pub theta: Linear,
    pub c_in: usize,
    pub c_out: usize,
}

impl EdgeConvParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self::with_bias(store, name, c_in, c_out, true, rng)
    }

    pub fn with_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let theta = Linear::with_bias(store, &format!("{name}.theta"), 2 * c_in, c_out, true, bias, rng);
        EdgeConvParams { theta, c_in, c_out }
    }
}

/// Edge features for every (neighbor rank, patch): a `k × c_out × N` tensor
/// whose slice `m` holds `h_theta(e_i, e_{j_m} - e_i)` in column `i`.
pub fn edge_features(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    nbrs: &NeighborIndex,
    params: &EdgeConvParams,
) -> Result<Var> {
    edge_features_normed(g, p, x, nbrs, params, None)
}

fn edge_features_normed(
    g: &mut Graph,
    p: &Bound,
    x: Var,
    nbrs: &NeighborIndex,
    params: &EdgeConvParams,
    norm: Option<&EdgeNorm>,
) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 2 || s[0] != params.c_in || s[1] != nbrs.n_patches() {
        return Err(Error::shape(
            "edge_features",
            format!("expected {} × {} embeddings", params.c_in, nbrs.n_patches()),
            &[&s],
        ));
    }
    let n = s[1];
    let mut pre = Vec::with_capacity(nbrs.k());
    for m in 0..nbrs.k() {
        let xj = g.select_columns(x, &nbrs.column(m))?;
        let diff = g.sub(xj, x)?;
        let cat = g.concat_channels(&[x, diff])?;
        pre.push(g.linear_columns(cat, p.var(params.theta.weight), params.theta.bias.map(|b| p.var(b)))?);
    }
    let stacked = g.concat(&pre, 1)?; // c_out × (k·N), neighbor-major columns
    let stacked = match norm {
        Some(norm) => norm.forward(g, p, stacked)?,
        None => stacked,
    };
    let act = g.leaky_relu(stacked, LEAKY_SLOPE)?;
    // c_out × k × N  ->  k × c_out × N
    let c = params.c_out;
    let k = nbrs.k();
    let mut index = Vec::with_capacity(c * k * n);
    for m in 0..k {
        for ch in 0..c {
            index.extend((0..n).map(|i| ch * k * n + m * n + i));
        }
    }
    g.gather(act, index, &[k, c, n])
}

/// Max over the neighbor axis of a `k × c × N` edge tensor.
pub fn edge_aggregate(g: &mut Graph, edges: Var) -> Result<Var> {
    let s = g.shape(edges);
    if s.len() != 3 {
        return Err(Error::shape("edge_aggregate", "expected k × c × N", &[s]));
    }
    g.reduce_max(edges, 0)
}

/// Per-channel standardization over all edges followed by a learned scale and
/// shift. Uses the statistics of the current forward pass.
#[derive(Clone, Debug)]
pub struct EdgeNorm {
    pub gamma: crate::params::ParamId,
    pub beta: crate::params::ParamId,
}

impl EdgeNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        EdgeNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let (c, n) = (s[0], s[1]);
        let mean = g.reduce_mean(x, 1)?;
        let mean = g.reshape(mean, &[c, 1])?;
        let mean = g.broadcast(mean, &s)?;
        let centered = g.sub(x, mean)?;
        let sq = g.mul(centered, centered)?;
        let var = g.reduce_mean(sq, 1)?;
        let eps = g.constant(Tensor::full(&[c], Self::EPS))?;
        let var = g.add(var, eps)?;
        let std = g.sqrt(var)?;
        let std = g.reshape(std, &[c, 1])?;
        let std = g.broadcast(std, &[c, n])?;
        let normed = g.div(centered, std)?;
        let gamma = g.reshape(p.var(self.gamma), &[c, 1])?;
        let gamma = g.broadcast(gamma, &s)?;
        let beta = g.reshape(p.var(self.beta), &[c, 1])?;
        let beta = g.broadcast(beta, &s)?;
        let scaled = g.mul(normed, gamma)?;
        g.add(scaled, beta)
    }
}

/// The EdgeConv module: k-NN graph, edge features, max over neighbors, then a
/// channel-wise MLP.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub k: usize,
    pub edge: EdgeConvParams,
    pub norm: Option<EdgeNorm>,
    pub mlp: Linear,
}

/// Intermediate results of one [`EdgeConv`] forward pass.
#[derive(Clone, Debug)]
pub struct EdgeConvTrace {
    pub neighbors: NeighborIndex,
    pub edges: Var,
    pub aggregated: Var,
    pub output: Var,
}

impl EdgeConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_edge: usize,
        c_out: usize,
        k: usize,
        edge_norm: bool,
        rng: &mut R,
    ) -> Self {
        // a shift before the normalization is cancelled by it
        let edge = EdgeConvParams::with_bias(store, &format!("{name}.edge"), c_in, c_edge, !edge_norm, rng);
        let norm = edge_norm.then(|| EdgeNorm::new(store, &format!("{name}.norm"), c_edge));
        let mlp = Linear::new(store, &format!("{name}.mlp"), c_edge, c_out, true, rng);
        EdgeConv { k, edge, norm, mlp }
    }

    pub fn c_out(&self) -> usize {
        self.mlp.c_out
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, p, x)?.output)
    }

    /// The neighbor graph is rebuilt from the current values of `x` on every
    /// call; neighbor selection itself is not differentiated.
    pub fn forward_traced(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<EdgeConvTrace> {
        let neighbors = knn_graph(g.value(x), self.k)?;
        let edges = edge_features_normed(g, p, x, &neighbors, &self.edge, self.norm.as_ref())?;
        let aggregated = edge_aggregate(g, edges)?;
        let output = self.mlp.forward(g, p, aggregated)?;
        Ok(EdgeConvTrace { neighbors, edges, aggregated, output })
    }
}

/// Orders candidate neighbors the same way [`knn_graph`] does.
pub fn neighbor_order(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

#[cfg(test)]
mod tests;
