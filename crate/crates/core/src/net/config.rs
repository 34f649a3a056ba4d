use crate::error::{Error, Result};

/// Default ASPP dilation rates.
pub const DEFAULT_ASPP_RATES: [usize; 3] = [1, 2, 3];

/// Network shape and width settings.
///
/// Maps are `channels × height × width`. The encoder produces features at
/// strides 2, 4, 8, 16 and 32; the patch grids of both edge-feature branches
/// coincide with the stride-32 grid, so `N_p = (H/32)(W/32)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_h: usize,
    pub input_w: usize,
    /// Stride-2 stem width.
    pub stem_channels: usize,
    /// Widths at strides 4, 8, 16, 32. The last one is `c_g`.
    pub encoder_channels: [usize; 4],
    /// `c_f` for the stride-8 and stride-16 branches.
    pub pem_reduce: [usize; 2],
    /// `c_e` for the stride-8 and stride-16 branches.
    pub pem_embed: [usize; 2],
    /// `c_{o/8}` and `c_{o/16}`.
    pub pem_out: [usize; 2],
    /// Neighbors per patch.
    pub k: usize,
    /// Meters.
    pub max_depth: f64,
    pub aspp_rates: Vec<usize>,
    pub decoder_channels: usize,
    pub use_pem: bool,
    pub use_eam: bool,
    /// Per-channel normalization of edge activations inside every EdgeConv.
    pub edge_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 64×64 input, small widths; `N_p = 4`.
    pub fn desk() -> Self {
        ModelConfig {
            input_h: 64,
            input_w: 64,
            stem_channels: 8,
            encoder_channels: [8, 16, 24, 32],
            pem_reduce: [8, 8],
            pem_embed: [16, 16],
            pem_out: [8, 8],
            k: 2,
            max_depth: 10.0,
            aspp_rates: DEFAULT_ASPP_RATES.to_vec(),
            decoder_channels: 16,
            use_pem: true,
            use_eam: true,
            edge_norm: false,
        }
    }

    /// 480×640 input; stride-8 map is 80×60, `N_p = 300`.
    pub fn nyu() -> Self {
        ModelConfig {
            input_h: 480,
            input_w: 640,
            k: crate::patch_graph::DEFAULT_K,
            max_depth: 10.0,
            ..Self::desk()
        }
    }

    /// 352×1216 input; stride-8 map is 152×44, `N_p = 418`.
    pub fn kitti() -> Self {
        ModelConfig {
            input_h: 352,
            input_w: 1216,
            k: crate::patch_graph::DEFAULT_K,
            max_depth: 80.0,
            ..Self::desk()
        }
    }

    pub fn c_g(&self) -> usize {
        self.encoder_channels[3]
    }

    /// Rows of the attention input: `c_g + c_{o/8} + c_{o/16}`, or `c_g`
    /// without the edge-feature branches.
    pub fn c_t(&self) -> usize {
        if self.use_pem {
            self.c_g() + self.pem_out[0] + self.pem_out[1]
        } else {
            self.c_g()
        }
    }

    /// Stride-32 grid `(rows, cols)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.input_h / 32, self.input_w / 32)
    }

    pub fn n_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::config(format!("model.{field}: {why}")));
        if self.input_h == 0 || !self.input_h.is_multiple_of(32) {
            return bad("input_h", format!("{} is not a positive multiple of 32", self.input_h));
        }
        if self.input_w == 0 || !self.input_w.is_multiple_of(32) {
            return bad("input_w", format!("{} is not a positive multiple of 32", self.input_w));
        }
        let widths = [self.stem_channels, self.decoder_channels]
            .into_iter()
            .chain(self.encoder_channels)
            .chain(self.pem_reduce)
            .chain(self.pem_embed)
            .chain(self.pem_out);
        if widths.into_iter().any(|w| w == 0) {
            return bad("channels", "all widths must be positive".into());
        }
        if !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return bad("max_depth", format!("{} must be > 0", self.max_depth));
        }
        if self.aspp_rates.is_empty() || self.aspp_rates.contains(&0) {
            return bad("aspp_rates", "need at least one rate, all >= 1".into());
        }
        if self.use_eam && !self.c_t().is_multiple_of(2) {
            return bad("c_t", format!("c_g + c_o8 + c_o16 = {} must be even", self.c_t()));
        }
        if self.use_pem || self.use_eam {
            let n = self.n_patches();
            if self.k == 0 || self.k >= n {
                return bad("k", format!("{} must be in 1..={} for {} patches", self.k, n.saturating_sub(1), n));
            }
        }
        Ok(())
    }
}
