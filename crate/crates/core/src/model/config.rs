use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of dynamic-length classes (`0..=50`).
pub const LENGTH_CLASSES: usize = 51;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transformer,
    Conformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalEncoding {
    Sinusoidal,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub architecture: Architecture,
    pub num_layers: usize,
    pub attn_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    /// Depthwise convolution width; only used by conformer blocks.
    pub conv_kernel: usize,
    pub downsample_factor: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            architecture: Architecture::Conformer,
            num_layers: 2,
            attn_dim: 64,
            num_heads: 4,
            ffn_dim: 128,
            conv_kernel: 7,
            downsample_factor: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || !self.attn_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "attn_dim {} must be divisible by num_heads {}",
                self.attn_dim, self.num_heads
            )));
        }
        if self.downsample_factor == 0 {
            return Err(Error::Config("downsample_factor must be at least 1".into()));
        }
        if self.architecture == Architecture::Conformer && self.conv_kernel.is_multiple_of(2) {
            return Err(Error::Config("conv_kernel must be odd".into()));
        }
        if self.attn_dim == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("attn_dim and ffn_dim must be positive".into()));
        }
        Ok(())
    }
}

/// The decoder shares `attn_dim` with the encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            num_layers: 2,
            num_heads: 4,
            ffn_dim: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub dropout: f64,
    pub positional_encoding: PositionalEncoding,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig::default(),
            dropout: 0.1,
            positional_encoding: PositionalEncoding::Sinusoidal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.encoder.attn_dim;
        if self.decoder.num_heads == 0 || !d.is_multiple_of(self.decoder.num_heads) {
            return Err(Error::Config(format!(
                "attn_dim {d} must be divisible by decoder num_heads {}",
                self.decoder.num_heads
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::Config("input_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
