//! Encoder, edge-feature branches, attention module, ASPP and decoder.

mod aspp;
mod config;
mod decoder;
mod eam;
mod encoder;
mod model;
mod pem;

pub use aspp::{Aspp, AsppConfig};
pub use config::{ModelConfig, DEFAULT_ASPP_RATES};
pub use decoder::Decoder;
pub use eam::{eam_concat, AttentionOut, EamState, EdgeStage, SelfAttention};
pub use encoder::{Encoder, EncoderFeatures};
pub use model::{DepthNet, ModelOutput};
pub use pem::{EdgeFeatureMap, Pem, PemConfig};

#[cfg(test)]
mod tests;
