//! Visual (patch + ViT) and text transformer encoders.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{encoder_block, AttentionMask, BlockParams, Graph, InitKind, LayerNormParams, Linear, ParamId, ParamSink};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::PAD;

/// Pixels are standardized with these fixed statistics of the synthetic
/// corpus before the patch projection. Without it the projection learns
/// about ten times slower than the rest of the network.
pub const PIXEL_MEAN: f64 = 0.27;
pub const PIXEL_STD: f64 = 0.10;

/// Splits `[H, W]` into `(H/P)·(W/P)` flattened `P×P` patches, ordered
/// row-major over the patch grid.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Model(format!("image {h}x{w} is not divisible into {p}x{p} patches")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    let src = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..p {
                let start = (py * p + r) * w + px * p;
                data.extend_from_slice(&src[start..start + p]);
            }
        }
    }
    Ok(Tensor::new(vec![gh * gw, p * p], data)?)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let (n, pp) = patches.dims2()?;
    if p == 0 || h % p != 0 || w % p != 0 || pp != p * p || n != (h / p) * (w / p) {
        return Err(Error::Model(format!(
            "{n} patches of length {pp} do not tile a {h}x{w} image with patch size {p}"
        )));
    }
    let gw = w / p;
    let mut data = vec![0.0; h * w];
    for (i, patch) in patches.data().chunks(pp).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for r in 0..p {
            let start = (py * p + r) * w + px * p;
            data[start..start + p].copy_from_slice(&patch[r * p..(r + 1) * p]);
        }
    }
    Ok(Tensor::new(vec![h, w], data)?)
}

#[derive(Clone, Debug)]
pub struct VisualEncoderParams {
    pub patch_embed: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub mask_token: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub image_size: usize,
    pub patch_size: usize,
}

impl VisualEncoderParams {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            patch_embed: Linear::declare(sink, "visual.patch_embed", cfg.patch_dim(), d, true),
            cls: sink.declare("visual.cls".into(), vec![1, d], InitKind::TruncNormal),
            pos: sink.declare("visual.pos".into(), vec![cfg.n_patches() + 1, d], InitKind::TruncNormal),
            mask_token: sink.declare("visual.mask_token".into(), vec![1, d], InitKind::TruncNormal),
            blocks: (0..cfg.n_enc_layers)
                .map(|i| BlockParams::declare(sink, &format!("visual.blocks.{i}"), d, cfg.n_enc_heads, false))
                .collect(),
            final_norm: LayerNormParams::declare(sink, "visual.final_norm", d),
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
        }
    }
}

/// Patch states with the CLS row first; `pooled` is that CLS row.
#[derive(Clone, Copy, Debug)]
pub struct VisualEmbedding {
    /// `[N + 1, d_model]`
    pub patch_states: Var,
    /// `[1, d_model]`
    pub pooled: Var,
}

/// Runs the visual encoder. Patches flagged in `mim_mask` are replaced by
/// the learned mask embedding right after the patch projection.
pub fn encode_image(
    g: &mut Graph,
    params: &VisualEncoderParams,
    image: &Tensor,
    mim_mask: Option<&[bool]>,
) -> Result<VisualEmbedding> {
    let (h, w) = image.dims2()?;
    if h != params.image_size || w != params.image_size {
        return Err(Error::Model(format!(
            "image is {h}x{w}, encoder expects {0}x{0}",
            params.image_size
        )));
    }
    let patches = patchify(image, params.patch_size)?.map(|v| (v - PIXEL_MEAN) / PIXEL_STD);
    let n = patches.rows();
    let x = g.constant(patches);
    let mut tokens = params.patch_embed.forward(g, x)?;
    if let Some(mask) = mim_mask {
        if mask.len() != n {
            return Err(Error::Model(format!("MIM mask has {} entries for {n} patches", mask.len())));
        }
        let d = g.value(tokens).cols();
        let keep: Vec<f64> = mask
            .iter()
            .flat_map(|&m| std::iter::repeat(if m { 0.0 } else { 1.0 }).take(d))
            .collect();
        let keep = g.constant(Tensor::new(vec![n, d], keep)?);
        let kept = g.tape.mul(tokens, keep)?;
        let indicator = mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let indicator = g.constant(Tensor::new(vec![n, 1], indicator)?);
        let mask_token = g.p(params.mask_token);
        let fill = g.tape.matmul(indicator, mask_token)?;
        tokens = g.tape.add(kept, fill)?;
    }
    let cls = g.p(params.cls);
    let x = g.tape.concat_rows(&[cls, tokens])?;
    let pos = g.p(params.pos);
    let mut x = g.tape.add(x, pos)?;
    for block in &params.blocks {
        x = encoder_block(g, block, x, None)?;
    }
    let patch_states = params.final_norm.forward(g, x)?;
    let pooled = g.tape.slice_rows(patch_states, 0, 1)?;
    Ok(VisualEmbedding { patch_states, pooled })
}

#[derive(Clone, Debug)]
pub struct TextEncoderParams {
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub vocab_size: usize,
    pub l_max: usize,
}

impl TextEncoderParams {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_embed: sink.declare("text.token_embed".into(), vec![cfg.vocab_size, d], InitKind::TruncNormal),
            pos: sink.declare("text.pos".into(), vec![cfg.l_max, d], InitKind::TruncNormal),
            blocks: (0..cfg.n_enc_layers)
                .map(|i| BlockParams::declare(sink, &format!("text.blocks.{i}"), d, cfg.n_enc_heads, false))
                .collect(),
            final_norm: LayerNormParams::declare(sink, "text.final_norm", d),
            vocab_size: cfg.vocab_size,
            l_max: cfg.l_max,
        }
    }
}

/// Token states plus the key-validity mask every consumer must respect.
#[derive(Clone, Debug)]
pub struct TextEmbedding {
    /// `[L, d_model]`
    pub token_states: Var,
    /// `[1, d_model]`, the BOS row.
    pub pooled: Var,
    pub valid: Vec<bool>,
}

/// Encodes `ids` with PAD positions excluded from attention.
pub fn encode_text(g: &mut Graph, params: &TextEncoderParams, ids: &[usize]) -> Result<TextEmbedding> {
    let valid: Vec<bool> = ids.iter().map(|&t| t != PAD).collect();
    encode_text_masked(g, params, ids, &valid)
}

/// Encodes `ids` attending only to keys flagged in `valid`.
pub fn encode_text_masked(
    g: &mut Graph,
    params: &TextEncoderParams,
    ids: &[usize],
    valid: &[bool],
) -> Result<TextEmbedding> {
    let l = ids.len();
    if l == 0 || l > params.l_max {
        return Err(Error::Model(format!("text length {l} outside 1..={}", params.l_max)));
    }
    if valid.len() != l || !valid.iter().any(|&v| v) {
        return Err(Error::Model("text validity mask must match the ids and keep one position".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&t| t >= params.vocab_size) {
        return Err(Error::Model(format!(
            "token id {bad} out of range for vocabulary of {}",
            params.vocab_size
        )));
    }
    let table = g.p(params.token_embed);
    let tok = g.tape.gather(table, ids)?;
    let pos_table = g.p(params.pos);
    let pos = g.tape.slice_rows(pos_table, 0, l)?;
    let mut x = g.tape.add(tok, pos)?;
    let mask = AttentionMask::key_padding(l, valid);
    for block in &params.blocks {
        x = encoder_block(g, block, x, Some(&mask))?;
    }
    let token_states = params.final_norm.forward(g, x)?;
    let pooled = g.tape.slice_rows(token_states, 0, 1)?;
    Ok(TextEmbedding {
        token_states,
        pooled,
        valid: valid.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_counts() {
        let img = Tensor::zeros(&[224, 224]);
        let p = patchify(&img, 16).unwrap();
        assert_eq!(p.shape(), &[196, 256]);
        let img = Tensor::zeros(&[64, 64]);
        assert_eq!(patchify(&img, 8).unwrap().shape(), &[64, 64]);
        assert!(patchify(&Tensor::zeros(&[30, 32]), 8).is_err());
    }

    #[test]
    fn patch_layout_is_row_major() {
        let img = Tensor::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = patchify(&img, 2).unwrap();
        assert_eq!(p.row(0), &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.row(1), &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.row(2), &[8.0, 9.0, 12.0, 13.0]);
        assert_eq!(unpatchify(&p, 4, 4, 2).unwrap(), img);
    }
}
