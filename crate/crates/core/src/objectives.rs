//! Training losses: sigmoid contrastive alignment, masked image and
//! language modeling, teacher-forced generation, and detection.

use crate::config::ModelConfig;
use crate::corpus::N_PATHOLOGIES;
use crate::error::{Error, Result};
use crate::fusion::DetectionOutput;
use crate::nn::{Graph, InitKind, Linear, ParamId, ParamSink};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::PAD;

pub const INIT_TEMPERATURE: f64 = 10.0;
pub const INIT_BIAS: f64 = -10.0;

#[derive(Clone, Debug)]
pub struct AlignmentParams {
    /// `[d_model, d_align]`
    pub img_proj: ParamId,
    pub txt_proj: ParamId,
    /// Log of the temperature, so `t = exp(log_t)` stays positive.
    pub log_t: ParamId,
    pub bias: ParamId,
}

impl AlignmentParams {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        Self {
            img_proj: sink.declare("align.img_proj".into(), vec![cfg.d_model, cfg.d_align], InitKind::TruncNormal),
            txt_proj: sink.declare("align.txt_proj".into(), vec![cfg.d_model, cfg.d_align], InitKind::TruncNormal),
            log_t: sink.declare("align.log_t".into(), vec![1], InitKind::Constant(INIT_TEMPERATURE.ln())),
            bias: sink.declare("align.bias".into(), vec![1], InitKind::Constant(INIT_BIAS)),
        }
    }
}

/// Pixel-reconstruction and masked-token heads used only in pretraining.
#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub mim: Linear,
    pub mlm: Linear,
}

impl PretrainHeads {
    pub fn declare(sink: &mut dyn ParamSink, cfg: &ModelConfig) -> Self {
        Self {
            mim: Linear::declare(sink, "heads.mim", cfg.d_model, cfg.patch_dim(), true),
            mlm: Linear::declare(sink, "heads.mlm", cfg.d_model, cfg.vocab_size, true),
        }
    }
}

/// `[B, B]` pair logits `t·s_ij + b` between projected, normalized rows.
pub fn siglip_logits(g: &mut Graph, align: &AlignmentParams, img_pooled: Var, txt_pooled: Var) -> Result<Var> {
    let (bi, di) = g.value(img_pooled).dims2()?;
    let (bt, dt) = g.value(txt_pooled).dims2()?;
    if bi != bt || di != dt {
        return Err(Error::Loss(format!(
            "image batch [{bi}, {di}] does not match text batch [{bt}, {dt}]"
        )));
    }
    let (wi, wt) = (g.p(align.img_proj), g.p(align.txt_proj));
    let x = g.tape.matmul(img_pooled, wi)?;
    let x = g.tape.l2_normalize_rows(x)?;
    let y = g.tape.matmul(txt_pooled, wt)?;
    let y = g.tape.l2_normalize_rows(y)?;
    let s = g.tape.matmul_nt(x, y)?;
    let log_t = g.p(align.log_t);
    let t = g.tape.exp(log_t);
    let s = g.tape.mul_scalar(s, t)?;
    let b = g.p(align.bias);
    Ok(g.tape.add_scalar(s, b)?)
}

/// `(1/B) Σ_ij −log σ(z_ij (t·s_ij + b))` with `z = +1` on the diagonal and
/// `−1` elsewhere.
pub fn siglip_loss(g: &mut Graph, align: &AlignmentParams, img_pooled: Var, txt_pooled: Var) -> Result<Var> {
    let logits = siglip_logits(g, align, img_pooled, txt_pooled)?;
    let b = g.value(logits).rows();
    let z = (0..b * b).map(|k| if k / b == k % b { 1.0 } else { -1.0 }).collect();
    let z = g.constant(Tensor::new(vec![b, b], z)?);
    let signed = g.tape.mul(logits, z)?;
    let ls = g.tape.log_sigmoid(signed);
    let total = g.tape.sum(ls);
    Ok(g.tape.scale(total, -1.0 / b as f64))
}

/// Mean squared error over the pixels of masked patches only.
pub fn mim_loss(g: &mut Graph, pred: Var, target: &Tensor, mask: &[bool]) -> Result<Var> {
    let p = g.value(pred);
    if p.shape() != target.shape() {
        return Err(Error::Loss(format!(
            "prediction {:?} does not match target {:?}",
            p.shape(),
            target.shape()
        )));
    }
    let (n, width) = p.dims2()?;
    if mask.len() != n {
        return Err(Error::Loss(format!("mask has {} entries for {n} patches", mask.len())));
    }
    let n_masked = mask.iter().filter(|&&m| m).count();
    if n_masked == 0 {
        return Err(Error::Loss("MIM mask selects no patches".into()));
    }
    let weights = mask
        .iter()
        .flat_map(|&m| std::iter::repeat(if m { 1.0 } else { 0.0 }).take(width))
        .collect();
    let weights = g.constant(Tensor::new(vec![n, width], weights)?);
    let target = g.constant(target.clone());
    let diff = g.tape.sub(pred, target)?;
    let diff = g.tape.mul(diff, weights)?;
    let sq = g.tape.mul(diff, diff)?;
    let total = g.tape.sum(sq);
    Ok(g.tape.scale(total, 1.0 / (n_masked * width) as f64))
}

/// Mean cross-entropy over the labelled positions.
pub fn mlm_loss(g: &mut Graph, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
    if labels.iter().all(Option::is_none) {
        return Err(Error::Loss("MLM example has no labelled positions".into()));
    }
    Ok(g.tape.cross_entropy(logits, labels)?)
}

/// Labels for teacher forcing: row `i` of an `rows`-long logit matrix
/// predicts `target[i + 1]`, PAD positions excluded.
pub fn shifted_labels(target: &[usize], rows: usize) -> Vec<Option<usize>> {
    (0..rows)
        .map(|i| target.get(i + 1).copied().filter(|&t| t != PAD))
        .collect()
}

/// Mean cross-entropy of next-token predictions over non-PAD targets.
pub fn generation_loss(g: &mut Graph, logits: Var, target: &[usize]) -> Result<Var> {
    let rows = g.value(logits).dims2()?.0;
    let labels = shifted_labels(target, rows);
    if labels.iter().all(Option::is_none) {
        return Err(Error::Loss("generation target has no non-PAD tokens".into()));
    }
    Ok(g.tape.cross_entropy(logits, &labels)?)
}

/// Presence BCE averaged over the six pathologies, plus the per-box L1
/// distance averaged over the present ones.
pub fn detection_loss(
    g: &mut Graph,
    out: &DetectionOutput,
    labels: &[u8; N_PATHOLOGIES],
    boxes: &[Option<[f64; 4]>; N_PATHOLOGIES],
) -> Result<Var> {
    let signs = labels.iter().map(|&y| if y == 1 { 1.0 } else { -1.0 }).collect();
    let signs = g.constant(Tensor::new(vec![N_PATHOLOGIES], signs)?);
    let signed = g.tape.mul(out.presence_logits, signs)?;
    let ls = g.tape.log_sigmoid(signed);
    let total = g.tape.sum(ls);
    let bce = g.tape.scale(total, -1.0 / N_PATHOLOGIES as f64);

    let present = boxes.iter().filter(|b| b.is_some()).count();
    if present == 0 {
        return Ok(bce);
    }
    let mut weights = vec![0.0; N_PATHOLOGIES * 4];
    let mut targets = vec![0.0; N_PATHOLOGIES * 4];
    for (i, b) in boxes.iter().enumerate() {
        if let Some(b) = b {
            weights[i * 4..i * 4 + 4].fill(1.0);
            targets[i * 4..i * 4 + 4].copy_from_slice(b);
        }
    }
    let weights = g.constant(Tensor::new(vec![N_PATHOLOGIES, 4], weights)?);
    let targets = g.constant(Tensor::new(vec![N_PATHOLOGIES, 4], targets)?);
    let diff = g.tape.sub(out.boxes, targets)?;
    let diff = g.tape.mul(diff, weights)?;
    let l1 = g.tape.abs(diff);
    let l1 = g.tape.sum(l1);
    let l1 = g.tape.scale(l1, 1.0 / present as f64);
    Ok(g.tape.add(bce, l1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    fn align_store(log_t: f64, bias: f64, d: usize) -> (ParamStore, AlignmentParams) {
        let mut store = ParamStore::new();
        let eye: Vec<f64> = (0..d * d).map(|k| if k / d == k % d { 1.0 } else { 0.0 }).collect();
        let params = AlignmentParams {
            img_proj: store.insert("i", Tensor::new(vec![d, d], eye.clone()).unwrap()).unwrap(),
            txt_proj: store.insert("t", Tensor::new(vec![d, d], eye).unwrap()).unwrap(),
            log_t: store.insert("lt", Tensor::full(&[1], log_t)).unwrap(),
            bias: store.insert("b", Tensor::full(&[1], bias)).unwrap(),
        };
        (store, params)
    }

    #[test]
    fn siglip_orthogonal_pairs_give_two_ln2() {
        let (store, align) = align_store(0.0, 0.0, 2);
        let mut g = Graph::new(&store, false);
        let img = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap());
        let txt = g.constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap());
        let loss = siglip_loss(&mut g, &align, img, txt).unwrap();
        assert!((g.value(loss).item().unwrap() - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn siglip_saturates() {
        // s = 1, t = 10, b = 10 → logit 20.
        let (store, align) = align_store(10f64.ln(), 10.0, 2);
        let mut g = Graph::new(&store, false);
        let v = g.constant(Tensor::from_rows(&[vec![3.0, 4.0]]).unwrap());
        let loss = siglip_loss(&mut g, &align, v, v).unwrap();
        let expect = (1.0 + (-20f64).exp()).ln();
        assert!((g.value(loss).item().unwrap() - expect).abs() < 1e-15);
        assert!((expect - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn mim_constant_residual() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, true);
        let pred = g.tape.param(Tensor::full(&[2, 4], 0.5));
        let target = Tensor::zeros(&[2, 4]);
        let loss = mim_loss(&mut g, pred, &target, &[false, true]).unwrap();
        assert_eq!(g.value(loss).item().unwrap(), 0.25);
        let grads = g.tape.backward(loss).unwrap();
        assert!(grads.get(pred).unwrap().row(0).iter().all(|&v| v == 0.0));
        assert!(mim_loss(&mut g, pred, &target, &[false, false]).is_err());
    }

    #[test]
    fn uniform_logits_cost_ln_vocab() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let logits = g.constant(Tensor::zeros(&[3, 10]));
        let l = mlm_loss(&mut g, logits, &[None, Some(4), None]).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!(mlm_loss(&mut g, logits, &[None, None, None]).is_err());
        let l = generation_loss(&mut g, logits, &[1, 5, 6, 2]).unwrap();
        assert!((g.value(l).item().unwrap() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn generation_ignores_trailing_pad() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, false);
        let logits = g.constant(Tensor::new(vec![4, 7], (0..28).map(|k| (k as f64 * 0.37).sin()).collect()).unwrap());
        let a = generation_loss(&mut g, logits, &[1, 5, 2]).unwrap();
        let b = generation_loss(&mut g, logits, &[1, 5, 2, PAD, PAD]).unwrap();
        assert_eq!(g.value(a).item().unwrap(), g.value(b).item().unwrap());
        assert!(generation_loss(&mut g, logits, &[1, PAD, PAD]).is_err());
    }
}
