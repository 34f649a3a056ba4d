use rand::Rng;

use crate::autodiff::{Conv2dSpec, Graph, Var};
use crate::error::Result;
use crate::nn::{Conv2d, ConvAct};
use crate::params::{Bound, ParamStore};
use crate::patch_graph::{EdgeConv, PatchEmbed, PatchEmbedConfig};

/// `c_o × N_p` local edge-feature map.
#[derive(Clone, Copy, Debug)]
pub struct EdgeFeatureMap {
    pub values: Var,
    pub n_patches: usize,
}

/// Patch-wise EdgeConv branch: 1×1 conv to `c_f` channels, patch embedding,
/// then the EdgeConv module producing `c_o` channels per patch.
#[derive(Clone, Debug)]
pub struct Pem {
    reduce: ConvAct,
    embed: PatchEmbed,
    edge: EdgeConv,
}

/// Widths of one [`Pem`].
#[derive(Clone, Copy, Debug)]
pub struct PemConfig {
    pub in_channels: usize,
    pub reduce_channels: usize,
    pub embed_dim: usize,
    pub out_channels: usize,
    pub patch: usize,
    pub k: usize,
    pub edge_norm: bool,
}

impl Pem {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: PemConfig, store: &mut ParamStore, rng: &mut R) -> Self {
        let reduce = ConvAct(Conv2d::new(
            store,
            &format!("{name}.reduce"),
            cfg.in_channels,
            cfg.reduce_channels,
            1,
            Conv2dSpec::default(),
            true,
            rng,
        ));
        let embed_cfg = PatchEmbedConfig {
            patch_w: cfg.patch,
            patch_h: cfg.patch,
            in_channels: cfg.reduce_channels,
            embed_dim: cfg.embed_dim,
        };
        // a common shift of all embeddings only reaches normalized edges
        let embed = PatchEmbed::with_bias(store, &format!("{name}.embed"), embed_cfg, !cfg.edge_norm, rng);
        let edge = EdgeConv::new(
            store,
            &format!("{name}.em"),
            cfg.embed_dim,
            cfg.out_channels,
            cfg.out_channels,
            cfg.k,
            cfg.edge_norm,
            rng,
        );
        Pem { reduce, embed, edge }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, fmap: Var) -> Result<EdgeFeatureMap> {
        let reduced = self.reduce.forward(g, p, fmap)?;
        let patches = self.embed.forward(g, p, reduced)?;
        let values = self.edge.forward(g, p, patches.values)?;
        Ok(EdgeFeatureMap { values, n_patches: patches.n_patches })
    }
}
