use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};

use super::aspp::{Aspp, AsppConfig};
use super::decoder::Decoder;
use super::eam::{eam_concat, EamState, EdgeStage, SelfAttention};
use super::encoder::{Encoder, EncoderFeatures};
use super::pem::{EdgeFeatureMap, Pem, PemConfig};
use super::ModelConfig;

#[derive(Clone, Debug)]
pub struct DepthNet {
    cfg: ModelConfig,
    pub encoder: Encoder,
    pub pem8: Option<Pem>,
    pub pem16: Option<Pem>,
    pub edge_stage: Option<EdgeStage>,
    pub attention: Option<SelfAttention>,
    pub aspp: Aspp,
    pub decoder: Decoder,
}

/// Everything a forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `1×H×W`, meters.
    pub depth: Var,
    /// `1×H×W` in (0, 1), before scaling by the maximum depth.
    pub unit: Var,
    pub features: EncoderFeatures,
    pub edge8: Option<EdgeFeatureMap>,
    pub edge16: Option<EdgeFeatureMap>,
    pub eam: Option<EamState>,
}

impl DepthNet {
    /// Registers all parameters in `store`, in construction order.
    pub fn new<R: Rng + ?Sized>(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(cfg, store, rng);
        let [_, c8, c16, c_g] = cfg.encoder_channels;
        let pem = |i: usize, c_in: usize, patch: usize| PemConfig {
            in_channels: c_in,
            reduce_channels: cfg.pem_reduce[i],
            embed_dim: cfg.pem_embed[i],
            out_channels: cfg.pem_out[i],
            patch,
            k: cfg.k,
            edge_norm: cfg.edge_norm,
        };
        let (pem8, pem16) = if cfg.use_pem {
            (Some(Pem::new("pem8", pem(0, c8, 4), store, rng)), Some(Pem::new("pem16", pem(1, c16, 2), store, rng)))
        } else {
            (None, None)
        };
        let c_t = cfg.c_t();
        let (edge_stage, attention) = if cfg.use_eam {
            (
                Some(EdgeStage::new(store, "eam.edge", c_t, cfg.k, cfg.edge_norm, rng)?),
                Some(SelfAttention::new(store, "eam.sam", c_t, rng)),
            )
        } else {
            (None, None)
        };
        // Without the attention module the edge maps have nowhere to go, so
        // ASPP sees the deepest feature alone.
        let aspp_in = if cfg.use_eam { c_t } else { c_g };
        let aspp = Aspp::new(
            store,
            "aspp",
            AsppConfig {
                in_channels: aspp_in,
                branch_channels: cfg.decoder_channels,
                out_channels: cfg.decoder_channels,
                rates: cfg.aspp_rates.clone(),
                use_pointwise: true,
                use_global: true,
            },
            rng,
        )?;
        let skips = [c16, c8, cfg.encoder_channels[0]];
        let decoder = Decoder::new(store, "dec", skips, cfg.decoder_channels, (cfg.input_h, cfg.input_w), rng);
        Ok(DepthNet { cfg: cfg.clone(), encoder, pem8, pem16, edge_stage, attention, aspp, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<ModelOutput> {
        let features = self.encoder.forward(g, p, image)?;
        let (rows, cols) = self.cfg.grid();
        let n_p = rows * cols;
        let c_g = self.cfg.c_g();

        let (edge8, edge16) = match (&self.pem8, &self.pem16) {
            (Some(a), Some(b)) => {
                let e8 = a.forward(g, p, features.s8)?;
                let e16 = b.forward(g, p, features.s16)?;
                if e8.n_patches != e16.n_patches || e8.n_patches != n_p {
                    return Err(Error::config(format!(
                        "patch counts differ: stride 8 gives {}, stride 16 gives {}, grid needs {n_p}",
                        e8.n_patches, e16.n_patches
                    )));
                }
                (Some(e8), Some(e16))
            }
            _ => (None, None),
        };

        let (top, eam) = match (&self.edge_stage, &self.attention) {
            (Some(stage), Some(sam)) => {
                let f_g = g.reshape(features.s32, &[c_g, n_p])?;
                let x_cat = match (edge8, edge16) {
                    (Some(a), Some(b)) => eam_concat(g, f_g, a.values, b.values)?,
                    _ => f_g,
                };
                let c_t = self.cfg.c_t();
                if g.shape(x_cat) != [c_t, n_p] {
                    return Err(Error::shape("eam", format!("X_cat must have {c_t} rows"), &[g.shape(x_cat)]));
                }
                let (x_r, x_xi) = stage.forward(g, p, x_cat)?;
                let att = sam.forward(g, p, x_xi)?;
                let grid = g.reshape(att.x_att, &[c_t, rows, cols])?;
                let output = self.aspp.forward(g, p, grid)?;
                let state = EamState {
                    x_cat,
                    x_r,
                    x_xi,
                    x_k: att.x_k,
                    x_q: att.x_q,
                    x_v: att.x_v,
                    attention: att.attention,
                    x_att: att.x_att,
                    output,
                };
                (output, Some(state))
            }
            _ => (self.aspp.forward(g, p, features.s32)?, None),
        };

        let unit = self.decoder.forward(g, p, top, [features.s16, features.s8, features.s4])?;
        let depth = g.scale(unit, self.cfg.max_depth)?;
        Ok(ModelOutput { depth, unit, features, edge8, edge16, eam })
    }
}
