//! Cross-modal fusion, the report decoder, generation, and the detection
//! head.

use rand::Rng;

use crate::config::ModelConfig;
use crate::corpus::N_PATHOLOGIES;
use crate::encoders::{encode_image, encode_text, TextEmbedding, VisualEmbedding};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::{
    decoder_block, multi_head_attention, AttentionParams, BlockParams, Graph, InitKind, LayerNormParams, Linear, Mlp,
    ParamId, ParamSink,
};
use crate::rng::{keyed, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::{TokenSequence, BOS, EOS, N_RESERVED};

/// Text-queries-over-image block: cross-attention then MLP, both pre-norm.
#[derive(Clone, Debug)]
pub struct FusionBlockParams {
    pub norm_q: LayerNormParams,
    pub cross_attention: AttentionParams,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct FusionParams {
    pub blocks: Vec<FusionBlockParams>,
}

impl FusionParams {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            blocks: (0..cfg.n_fusion_layers)
                .map(|i| {
                    let name = format!("fusion.blocks.{i}");
                    FusionBlockParams {
                        norm_q: LayerNormParams::declare(sink, &format!("{name}.norm_q"), d),
                        cross_attention: AttentionParams::declare(sink, &format!("{name}.cross_attn"), d, cfg.n_enc_heads),
                        norm2: LayerNormParams::declare(sink, &format!("{name}.norm2"), d),
                        mlp: Mlp::declare(sink, &format!("{name}.mlp"), d),
                    }
                })
                .collect(),
        }
    }

    pub fn zero_output_projections(&self, store: &mut crate::nn::ParamStore) {
        for b in &self.blocks {
            store.get_mut(b.cross_attention.w_o).data_mut().fill(0.0);
            store.get_mut(b.mlp.fc2.w).data_mut().fill(0.0);
            if let Some(bias) = b.mlp.fc2.b {
                store.get_mut(bias).data_mut().fill(0.0);
            }
        }
    }
}

/// Text-length states carrying image evidence.
#[derive(Clone, Debug)]
pub struct FusedEmbedding {
    /// `[L, d_model]`
    pub states: Var,
    /// Rows a consumer may attend to (the text's non-PAD positions).
    pub valid: Vec<bool>,
}

pub fn fuse(g: &mut Graph, params: &FusionParams, text: &TextEmbedding, visual: &VisualEmbedding) -> Result<FusedEmbedding> {
    let dt = g.value(text.token_states).cols();
    let dv = g.value(visual.patch_states).cols();
    if dt != dv {
        return Err(Error::Model(format!("text width {dt} does not match visual width {dv}")));
    }
    let mut x = text.token_states;
    for b in &params.blocks {
        let q = b.norm_q.forward(g, x)?;
        let a = multi_head_attention(g, &b.cross_attention, q, visual.patch_states, None)?;
        x = g.tape.add(x, a)?;
        let h = b.norm2.forward(g, x)?;
        let h = b.mlp.forward(g, h)?;
        x = g.tape.add(x, h)?;
    }
    Ok(FusedEmbedding {
        states: x,
        valid: text.valid.clone(),
    })
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Bridges `d_model` memory to `d_decoder` when the widths differ.
    pub memory_proj: Option<Linear>,
    pub token_embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: LayerNormParams,
    pub lm_head: Linear,
    pub vocab_size: usize,
    pub l_max: usize,
}

impl DecoderParams {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        let dd = cfg.d_decoder;
        Self {
            memory_proj: (cfg.d_model != dd).then(|| Linear::declare(sink, "decoder.memory_proj", cfg.d_model, dd, true)),
            token_embed: sink.declare("decoder.token_embed".into(), vec![cfg.vocab_size, dd], InitKind::TruncNormal),
            pos: sink.declare("decoder.pos".into(), vec![cfg.l_max, dd], InitKind::TruncNormal),
            blocks: (0..cfg.n_dec_layers)
                .map(|i| BlockParams::declare(sink, &format!("decoder.blocks.{i}"), dd, cfg.n_dec_heads, true))
                .collect(),
            final_norm: LayerNormParams::declare(sink, "decoder.final_norm", dd),
            lm_head: Linear::declare(sink, "decoder.lm_head", dd, cfg.vocab_size, true),
            vocab_size: cfg.vocab_size,
            l_max: cfg.l_max,
        }
    }
}

/// Next-token logits `[L, vocab]` for a BOS-initial prefix; row `i` scores
/// the token at position `i + 1`.
pub fn decode_logits(g: &mut Graph, params: &DecoderParams, prefix: &[usize], memory: &FusedEmbedding) -> Result<Var> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Model("decoder prefix must begin with BOS".into()));
    }
    if prefix.len() > params.l_max {
        return Err(Error::Model(format!("prefix length {} exceeds {}", prefix.len(), params.l_max)));
    }
    if let Some(&bad) = prefix.iter().find(|&&t| t >= params.vocab_size) {
        return Err(Error::Model(format!("token id {bad} out of range")));
    }
    let mem = match &params.memory_proj {
        Some(proj) => proj.forward(g, memory.states)?,
        None => memory.states,
    };
    let table = g.p(params.token_embed);
    let tok = g.tape.gather(table, prefix)?;
    let pos_table = g.p(params.pos);
    let pos = g.tape.slice_rows(pos_table, 0, prefix.len())?;
    let mut x = g.tape.add(tok, pos)?;
    let width = g.value(x).cols();
    if g.value(mem).cols() != width {
        return Err(Error::Model(format!(
            "memory width {} does not match decoder width {width}",
            g.value(mem).cols()
        )));
    }
    for b in &params.blocks {
        x = decoder_block(g, b, x, mem, Some(&memory.valid))?;
    }
    let x = params.final_norm.forward(g, x)?;
    params.lm_head.forward(g, x)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Strategy {
    Greedy,
    TopK { k: usize, seed: u64 },
}

/// Autoregressive report from BOS, conditioned on the fused prompt and
/// image. Returns the generated ids (without BOS), ending at EOS when one
/// is produced; at most `max_len` ids. Reserved ids other than EOS are
/// never emitted.
pub fn generate_report(
    model: &Model,
    image: &Tensor,
    prompt: &TokenSequence,
    max_len: usize,
    strategy: Strategy,
) -> Result<Vec<usize>> {
    let l_max = model.config.l_max;
    if max_len >= l_max {
        return Err(Error::Model(format!("max_len {max_len} must stay below l_max {l_max}")));
    }
    let mut g = Graph::new(&model.params, false);
    let visual = encode_image(&mut g, &model.layout.visual, image, None)?;
    let text = encode_text(&mut g, &model.layout.text, prompt.content())?;
    let memory = fuse(&mut g, &model.layout.fusion, &text, &visual)?;
    let mut rng = match strategy {
        Strategy::TopK { seed, .. } => Some(keyed(Stream::Sample, &[seed])),
        Strategy::Greedy => None,
    };
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    while out.len() < max_len {
        // Only the decoder reruns; the encoders and fusion are shared.
        let logits = decode_logits(&mut g, &model.layout.decoder, &prefix, &memory)?;
        let t = g.value(logits);
        let last = t.row(t.rows() - 1);
        let next = match strategy {
            Strategy::Greedy => argmax_allowed(last),
            Strategy::TopK { k, .. } => sample_top_k(last, k, rng.as_mut().expect("set for top-k")),
        };
        out.push(next);
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(out)
}

fn allowed(id: usize) -> bool {
    id == EOS || id >= N_RESERVED
}

/// Highest-scoring allowed id; ties go to the lowest id.
fn argmax_allowed(logits: &[f64]) -> usize {
    let mut best = EOS;
    for (i, &v) in logits.iter().enumerate() {
        if allowed(i) && v > logits[best] {
            best = i;
        }
    }
    best
}

fn sample_top_k(logits: &[f64], k: usize, rng: &mut impl Rng) -> usize {
    let mut ids: Vec<usize> = (0..logits.len()).filter(|&i| allowed(i)).collect();
    ids.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    ids.truncate(k.max(1));
    let max = logits[ids[0]];
    let weights: Vec<f64> = ids.iter().map(|&i| (logits[i] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut r = rng.gen::<f64>() * total;
    for (&id, w) in ids.iter().zip(&weights) {
        if r < *w {
            return id;
        }
        r -= w;
    }
    *ids.last().expect("k >= 1")
}

#[derive(Clone, Debug)]
pub struct DetectionHead {
    pub presence: Linear,
    pub boxes: Linear,
}

impl DetectionHead {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        Self {
            presence: Linear::declare(sink, "detect.presence", cfg.d_model, N_PATHOLOGIES, true),
            boxes: Linear::declare(sink, "detect.boxes", cfg.d_model, 4 * N_PATHOLOGIES, true),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DetectionOutput {
    /// `[6]`
    pub presence_logits: Var,
    /// `[6, 4]` as normalized `(x0, y0, x1, y1)`.
    pub boxes: Var,
}

/// Per-pathology presence logits and boxes from the pooled visual vector.
pub fn predict_detections(g: &mut Graph, head: &DetectionHead, visual: &VisualEmbedding) -> Result<DetectionOutput> {
    let logits = head.presence.forward(g, visual.pooled)?;
    let presence_logits = g.tape.reshape(logits, vec![N_PATHOLOGIES])?;
    let raw = head.boxes.forward(g, visual.pooled)?;
    let raw = g.tape.reshape(raw, vec![N_PATHOLOGIES, 4])?;
    let boxes = g.tape.box_transform(raw)?;
    Ok(DetectionOutput { presence_logits, boxes })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_ties_break_low_and_skip_reserved() {
        let mut logits = vec![9.0, 9.0, 1.0, 9.0, 9.0, 3.0, 3.0];
        assert_eq!(argmax_allowed(&logits), 5);
        logits[2] = 3.0;
        assert_eq!(argmax_allowed(&logits), EOS);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let logits = vec![0.0, 0.0, 0.5, 0.0, 0.0, 2.0, 1.0];
        let mut rng = keyed(Stream::Sample, &[1]);
        for _ in 0..20 {
            assert_eq!(sample_top_k(&logits, 1, &mut rng), 5);
        }
        for _ in 0..50 {
            let t = sample_top_k(&logits, 2, &mut rng);
            assert!(t == 5 || t == 6);
        }
    }
}
