//! Architecture hyperparameters and the two named presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub n_enc_layers: usize,
    pub n_enc_heads: usize,
    pub n_fusion_layers: usize,
    pub n_dec_layers: usize,
    pub n_dec_heads: usize,
    pub d_decoder: usize,
    /// Filled in from the data when training starts.
    #[serde(default)]
    pub vocab_size: usize,
    pub l_max: usize,
    pub d_align: usize,
}

impl ModelConfig {
    /// Full-size shapes: 224px images in 16px patches, 768-wide encoders
    /// with 12 layers and 12 heads, 12 fusion layers, and a 24-layer,
    /// 16-head, 1024-wide decoder.
    pub fn paper() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            d_model: 768,
            n_enc_layers: 12,
            n_enc_heads: 12,
            n_fusion_layers: 12,
            n_dec_layers: 24,
            n_dec_heads: 16,
            d_decoder: 1024,
            vocab_size: 32_000,
            l_max: 128,
            d_align: 768,
        }
    }

    /// Laptop-scale preset used for training.
    pub fn desk() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            d_model: 64,
            n_enc_layers: 2,
            n_enc_heads: 4,
            n_fusion_layers: 2,
            n_dec_layers: 2,
            n_dec_heads: 4,
            d_decoder: 64,
            vocab_size: 64,
            l_max: 48,
            d_align: 64,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("d_model", self.d_model),
            ("n_enc_layers", self.n_enc_layers),
            ("n_enc_heads", self.n_enc_heads),
            ("n_dec_layers", self.n_dec_layers),
            ("n_dec_heads", self.n_dec_heads),
            ("d_decoder", self.d_decoder),
            ("d_align", self.d_align),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.d_model % self.n_enc_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_enc_heads {}",
                self.d_model, self.n_enc_heads
            )));
        }
        if self.d_decoder % self.n_dec_heads != 0 {
            return Err(Error::Config(format!(
                "d_decoder {} is not divisible by n_dec_heads {}",
                self.d_decoder, self.n_dec_heads
            )));
        }
        if self.vocab_size <= crate::text::N_RESERVED {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room beyond the reserved tokens",
                self.vocab_size
            )));
        }
        if self.l_max < 3 {
            return Err(Error::Config("l_max must be at least 3".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::paper().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
        assert_eq!(ModelConfig::paper().n_patches(), 196);
        assert_eq!(ModelConfig::desk().n_patches(), 64);
    }

    #[test]
    fn invariant_violations_are_reported() {
        let mut c = ModelConfig::desk();
        c.patch_size = 7;
        assert!(c.validate().unwrap_err().to_string().contains("patch_size"));
        let mut c = ModelConfig::desk();
        c.n_dec_heads = 3;
        assert!(c.validate().is_err());
    }
}
