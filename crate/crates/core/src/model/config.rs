//! Model variant configuration and derived layer dimensions.

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OUTPUT_DIM: usize = 81;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("speaker/language embeddings require the residual VAE variant")]
    SeWithoutResVae,
    #[error("output_dim must be 81 (80 mel bands + endpoint flag)")]
    BadOutputDim,
    #[error("reduction_factor must be 2")]
    BadReductionFactor,
    #[error("scale divisor must be >= 1")]
    BadScale,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    StepwiseMonotonic,
}

/// Architecture switches and base (full-scale) dimensions. The `scale`
/// divisor shrinks every learned width for desk-scale runs while leaving the
/// interface dimensions (81-dim output, 128-dim d-vectors, 32-dim locale
/// embedding, 16-dim latent) untouched.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelVariantConfig {
    pub phone_embed_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_bilstm_dim: usize,
    pub attention: AttentionKind,
    pub attention_dim: usize,
    pub prenet_layers: usize,
    pub prenet_dim: usize,
    pub decoder_lstm_layers: usize,
    pub decoder_lstm_dim: usize,
    pub postnet_conv_layers: usize,
    pub postnet_channels: usize,
    pub conv_kernel: usize,
    pub reduction_factor: usize,
    pub use_resvae: bool,
    pub resvae_latent_dim: usize,
    pub resvae_channels: Vec<usize>,
    pub resvae_gru_dim: usize,
    pub use_se_le: bool,
    pub se_dim: usize,
    pub le_dim: usize,
    pub output_dim: usize,
    /// Desk-scale divisor applied to learned widths (1 = paper scale).
    pub scale: usize,
}

impl Default for ModelVariantConfig {
    fn default() -> Self {
        ModelVariantConfig {
            phone_embed_dim: 512,
            encoder_conv_layers: 3,
            encoder_bilstm_dim: 512,
            attention: AttentionKind::StepwiseMonotonic,
            attention_dim: 128,
            prenet_layers: 2,
            prenet_dim: 256,
            decoder_lstm_layers: 2,
            decoder_lstm_dim: 1024,
            postnet_conv_layers: 5,
            postnet_channels: 512,
            conv_kernel: 5,
            reduction_factor: 2,
            use_resvae: false,
            resvae_latent_dim: 16,
            resvae_channels: vec![32, 32, 64, 64, 128, 128],
            resvae_gru_dim: 128,
            use_se_le: false,
            se_dim: 128,
            le_dim: 32,
            output_dim: OUTPUT_DIM,
            scale: 1,
        }
    }
}

impl ModelVariantConfig {
    pub fn baseline() -> Self {
        Self::default()
    }

    pub fn res_vae() -> Self {
        ModelVariantConfig { use_resvae: true, ..Self::default() }
    }

    pub fn res_vae_se_le() -> Self {
        ModelVariantConfig { use_resvae: true, use_se_le: true, ..Self::default() }
    }

    pub fn with_scale(mut self, scale: usize) -> Self {
        self.scale = scale;
        self
    }

    pub fn variant_name(&self) -> &'static str {
        match (self.use_resvae, self.use_se_le) {
            (false, false) => "baseline",
            (true, false) => "res_vae",
            (true, true) => "res_vae_se_le",
            (false, true) => "invalid",
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.use_se_le && !self.use_resvae {
            return Err(ConfigError::SeWithoutResVae);
        }
        if self.output_dim != OUTPUT_DIM {
            return Err(ConfigError::BadOutputDim);
        }
        if self.reduction_factor != 2 {
            return Err(ConfigError::BadReductionFactor);
        }
        if self.scale == 0 {
            return Err(ConfigError::BadScale);
        }
        Ok(())
    }

    fn scaled(&self, dim: usize, floor: usize) -> usize {
        (dim / self.scale).max(floor)
    }

    pub fn embed_dim(&self) -> usize {
        self.scaled(self.phone_embed_dim, 8)
    }

    pub fn encoder_conv_channels(&self) -> usize {
        self.embed_dim()
    }

    /// Total bi-LSTM output width; each direction runs at half.
    pub fn encoder_out_dim(&self) -> usize {
        let d = self.scaled(self.encoder_bilstm_dim, 8);
        d + d % 2
    }

    /// Encoder states as seen by the attention (locale embedding appended
    /// for the SE+LE variant).
    pub fn encoder_attention_dim(&self) -> usize {
        self.encoder_out_dim() + if self.use_se_le { self.le_dim } else { 0 }
    }

    pub fn attention_hidden(&self) -> usize {
        self.scaled(self.attention_dim, 4)
    }

    pub fn prenet_hidden(&self) -> usize {
        self.scaled(self.prenet_dim, 4)
    }

    pub fn decoder_hidden(&self) -> usize {
        self.scaled(self.decoder_lstm_dim, 8)
    }

    pub fn postnet_hidden(&self) -> usize {
        self.scaled(self.postnet_channels, 8)
    }

    pub fn resvae_layer_channels(&self) -> Vec<usize> {
        self.resvae_channels.iter().map(|&c| self.scaled(c, 2)).collect()
    }

    pub fn resvae_gru_hidden(&self) -> usize {
        self.scaled(self.resvae_gru_dim, 4)
    }

    pub fn n_mels(&self) -> usize {
        self.output_dim - 1
    }

    /// Width of the first decoder LSTM's input: pre-net output, previous
    /// attention context, then speaker embedding and latent when enabled.
    pub fn decoder_input_dim(&self) -> usize {
        self.prenet_hidden()
            + self.encoder_attention_dim()
            + if self.use_se_le { self.se_dim } else { 0 }
            + if self.use_resvae { self.resvae_latent_dim } else { 0 }
    }
}
