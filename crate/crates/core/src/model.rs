//! Whole-model layout, initialization and the symbolic shape manifest.

use std::fmt;

use crate::config::ModelConfig;
use crate::encoders::{TextEncoderParams, VisualEncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{DecoderParams, DetectionHead, FusionParams};
use crate::nn::{Initializer, ParamEntry, ParamSink, ParamStore, ShapeManifest};
use crate::objectives::{AlignmentParams, PretrainHeads};
use crate::rng::{keyed, Stream};
use crate::text::Vocabulary;

/// Parameter handles for every component, in declaration order.
#[derive(Clone, Debug)]
pub struct ModelLayout {
    pub visual: VisualEncoderParams,
    pub text: TextEncoderParams,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
    pub detect: DetectionHead,
    pub align: AlignmentParams,
    pub heads: PretrainHeads,
}

impl ModelLayout {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        Self {
            visual: VisualEncoderParams::declare(sink, cfg),
            text: TextEncoderParams::declare(sink, cfg),
            fusion: FusionParams::declare(sink, cfg),
            decoder: DecoderParams::declare(sink, cfg),
            detect: DetectionHead::declare(sink, cfg),
            align: AlignmentParams::declare(sink, cfg),
            heads: PretrainHeads::declare(sink, cfg),
        }
    }
}

/// Fresh parameters for `config`, fully determined by `seed`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<(ModelLayout, ParamStore)> {
    config.validate()?;
    let mut rng = keyed(Stream::Init, &[seed]);
    let mut init = Initializer::new(&mut rng);
    let layout = ModelLayout::declare(&mut init, config);
    Ok((layout, init.store))
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub layout: ModelLayout,
    pub params: ParamStore,
}

impl Model {
    /// Randomly initialized model whose vocabulary size follows `vocab`.
    pub fn init(mut config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.vocab_size = vocab.len();
        let (layout, params) = init_params(&config, seed)?;
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    /// Assembles a model from stored tensors, which must follow the layout's
    /// names and shapes exactly.
    pub fn from_parts(config: ModelConfig, vocab: Vocabulary, tensors: Vec<(String, crate::Tensor)>) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.vocab_size {
            return Err(Error::Model(format!(
                "vocabulary has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        let mut manifest = ShapeManifest::default();
        let layout = ModelLayout::declare(&mut manifest, &config);
        if manifest.entries.len() != tensors.len() {
            return Err(Error::Model(format!(
                "expected {} tensors, found {}",
                manifest.entries.len(),
                tensors.len()
            )));
        }
        let mut params = ParamStore::new();
        for (entry, (name, t)) in manifest.entries.iter().zip(tensors) {
            if entry.name != name || entry.shape != t.shape() {
                return Err(Error::Model(format!(
                    "tensor {name} {:?} does not match layout entry {} {:?}",
                    t.shape(),
                    entry.name,
                    entry.shape
                )));
            }
            params.insert(name, t)?;
        }
        Ok(Self {
            config,
            vocab,
            layout,
            params,
        })
    }

    pub fn manifest(&self) -> Vec<ParamEntry> {
        self.params
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect()
    }
}

/// Shape-only description of a configured model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelDescription {
    pub config: ModelConfig,
    pub entries: Vec<ParamEntry>,
}

impl ModelDescription {
    pub fn total_parameters(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    /// Total over entries whose name starts with `prefix`.
    pub fn parameters_under(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(ParamEntry::numel)
            .sum()
    }
}

/// Enumerates every parameter without allocating any of them.
pub fn describe_model(config: &ModelConfig) -> Result<ModelDescription> {
    config.validate()?;
    let mut manifest = ShapeManifest::default();
    ModelLayout::declare(&mut manifest, config);
    Ok(ModelDescription {
        config: config.clone(),
        entries: manifest.entries,
    })
}

impl fmt::Display for ModelDescription {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = &self.config;
        writeln!(f, "image            {0}x{0}, patch {1}x{1}", c.image_size, c.patch_size)?;
        writeln!(f, "patches          {}", c.n_patches())?;
        writeln!(
            f,
            "visual encoder   width {}, layers {}, heads {}",
            c.d_model, c.n_enc_layers, c.n_enc_heads
        )?;
        writeln!(
            f,
            "text encoder     width {}, layers {}, heads {}",
            c.d_model, c.n_enc_layers, c.n_enc_heads
        )?;
        writeln!(
            f,
            "fusion           width {}, layers {}, heads {}",
            c.d_model, c.n_fusion_layers, c.n_enc_heads
        )?;
        writeln!(
            f,
            "decoder          width {}, layers {}, heads {}",
            c.d_decoder, c.n_dec_layers, c.n_dec_heads
        )?;
        writeln!(f, "vocabulary       {}, max length {}", c.vocab_size, c.l_max)?;
        writeln!(f, "alignment dim    {}", c.d_align)?;
        writeln!(f)?;
        for (label, prefix) in [
            ("visual", "visual."),
            ("text", "text."),
            ("fusion", "fusion."),
            ("decoder", "decoder."),
            ("detect", "detect."),
            ("align", "align."),
            ("heads", "heads."),
        ] {
            writeln!(f, "{label:<16} {:>14} parameters", self.parameters_under(prefix))?;
        }
        writeln!(f, "{:<16} {:>14} parameters", "total", self.total_parameters())?;
        writeln!(f)?;
        for e in &self.entries {
            writeln!(f, "{:<48} {:?}", e.name, e.shape)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn describe_matches_allocation() {
        let cfg = ModelConfig::desk();
        let d = describe_model(&cfg).unwrap();
        let (_, store) = init_params(&cfg, 3).unwrap();
        assert_eq!(d.total_parameters(), store.total_elements());
        let names: Vec<&str> = store.iter().map(|(n, _)| n).collect();
        let described: Vec<&str> = d.entries.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(names, described);
    }

    #[test]
    fn seed_determines_parameters() {
        let cfg = ModelConfig::desk();
        let (_, a) = init_params(&cfg, 11).unwrap();
        let (_, b) = init_params(&cfg, 11).unwrap();
        let (_, c) = init_params(&cfg, 12).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(x, y)| x.1 == y.1));
        assert!(a.iter().zip(c.iter()).any(|(x, y)| x.1 != y.1));
    }
}
