//! Pretraining and fine-tuning loops.
//!
//! Every random draw inside a step is keyed by `(seed, case_id, step)`, and
//! per-example gradients are reduced in batch order, so a run is a pure
//! function of the dataset and the [`TrainConfig`] no matter how examples
//! are scheduled across threads.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::corpus::{location_question, presence_question, vqa_corpus, Case, Pathology, N_PATHOLOGIES};
use crate::encoders::{encode_image, encode_text, patchify};
use crate::error::{Error, Result};
use crate::eval;
use crate::fusion::{decode_logits, fuse, predict_detections};
use crate::model::Model;
use crate::nn::{Graph, ParamId};
use crate::objectives::{detection_loss, generation_loss, mim_loss, mlm_loss, siglip_logits, siglip_loss};
use crate::optim::{clip_global_norm, AdamWHyper, AdamWState};
use crate::rng::{keyed, mix, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::{apply_mlm_mask, TokenSequence, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub siglip: f64,
    pub mim: f64,
    pub mlm: f64,
    pub caption: f64,
    pub vqa: f64,
    pub detection: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            siglip: 1.0,
            mim: 1.0,
            mlm: 1.0,
            caption: 1.0,
            vqa: 1.0,
            detection: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Architecture for pretraining; `None` selects the desk preset. The
    /// vocabulary size is always taken from the data.
    pub model: Option<ModelConfig>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub mim_ratio: f64,
    pub mlm_rate: f64,
    pub weights: LossWeights,
    pub data_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    /// Run the held-out check every this many steps; 0 disables it.
    pub eval_every: usize,
    pub eval_cases: usize,
    /// Keep the visual and text encoders fixed.
    pub freeze_encoders: bool,
    /// Chance that a training example is replaced by its left-right mirror
    /// (see [`Case::mirrored`]).
    pub mirror_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: None,
            batch_size: 32,
            steps: 500,
            learning_rate: 1e-3,
            warmup_steps: 50,
            weight_decay: 0.01,
            grad_clip: 1.0,
            seed: 0,
            mim_ratio: 0.5,
            mlm_rate: 0.15,
            weights: LossWeights::default(),
            data_dir: None,
            eval_dir: None,
            eval_every: 0,
            eval_cases: 64,
            freeze_encoders: false,
            mirror_probability: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} is invalid", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return Err(Error::Config("weight_decay must be >= 0 and grad_clip > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mirror_probability) {
            return Err(Error::Config(format!(
                "mirror_probability {} outside [0, 1]",
                self.mirror_probability
            )));
        }
        for (name, r) in [("mim_ratio", self.mim_ratio), ("mlm_rate", self.mlm_rate)] {
            if !(r > 0.0 && r < 1.0) {
                return Err(Error::Config(format!("{name} {r} outside (0, 1)")));
            }
        }
        let w = &self.weights;
        if [w.siglip, w.mim, w.mlm, w.caption, w.vqa, w.detection]
            .iter()
            .any(|v| !(*v >= 0.0 && v.is_finite()))
        {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if let Some(m) = &self.model {
            // The vocabulary comes from the data, so its size is not checked here.
            let mut m = m.clone();
            m.vocab_size = m.vocab_size.max(crate::text::N_RESERVED + 1);
            m.validate()?;
        }
        Ok(())
    }

    /// Linear warmup to the base rate, then constant.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.learning_rate;
        }
        self.learning_rate * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub learning_rate: f64,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<BTreeMap<String, f64>>,
    pub timestamp: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<StepRecord>,
}

/// Token inventory from the notes plus every VQA question and answer.
pub fn build_vocabulary(cases: &[Case]) -> Result<Vocabulary> {
    let mut corpus: Vec<String> = cases.iter().map(|c| c.note.clone()).collect();
    corpus.extend(vqa_corpus());
    Vocabulary::build(&corpus)
}

fn now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

fn content_of(vocab: &Vocabulary, text: &str, l_max: usize) -> Vec<usize> {
    vocab.tokenize(text, l_max).content().to_vec()
}

/// Owns the model and optimizer state; parameters marked frozen are never
/// handed to the optimizer.
struct Optimizer {
    trainable: Vec<usize>,
    state: AdamWState,
}

impl Optimizer {
    fn new(model: &Model, cfg: &TrainConfig) -> Self {
        let trainable: Vec<usize> = model
            .params
            .iter()
            .enumerate()
            .filter(|(_, (name, _))| !(cfg.freeze_encoders && (name.starts_with("visual.") || name.starts_with("text."))))
            .map(|(i, _)| i)
            .collect();
        let all: Vec<&Tensor> = model.params.iter().map(|(_, t)| t).collect();
        let hyper = AdamWHyper {
            learning_rate: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamWHyper::default()
        };
        let state = AdamWState::new(hyper, trainable.iter().map(|&i| all[i]));
        Self { trainable, state }
    }

    /// Clips, then applies one AdamW update. Returns the pre-clip norm.
    fn apply(&mut self, model: &mut Model, mut grads: Vec<Option<Tensor>>, lr: f64, clip: f64) -> Result<f64> {
        let mut selected: Vec<Tensor> = self
            .trainable
            .iter()
            .map(|&i| grads[i].take().unwrap_or_else(|| Tensor::zeros(model.params.get(ParamId(i)).shape())))
            .collect();
        let norm = clip_global_norm(&mut selected, clip);
        self.state.hyper.learning_rate = lr;
        let mut keep = vec![false; model.params.len()];
        for &i in &self.trainable {
            keep[i] = true;
        }
        let mut params: Vec<&mut Tensor> = model
            .params
            .tensors_mut()
            .into_iter()
            .zip(keep)
            .filter_map(|(t, k)| k.then_some(t))
            .collect();
        let refs: Vec<Option<&Tensor>> = selected.iter().map(Some).collect();
        self.state.step(&mut params, &refs)?;
        Ok(norm)
    }
}

fn sum_grads(parts: Vec<Vec<Option<Tensor>>>, n_params: usize) -> Vec<Option<Tensor>> {
    let mut acc: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
    for part in parts {
        for (slot, g) in acc.iter_mut().zip(part) {
            let Some(g) = g else { continue };
            match slot {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                None => *slot = Some(g),
            }
        }
    }
    acc
}

fn batch_indices(cfg: &TrainConfig, n: usize, step: usize) -> Vec<usize> {
    let mut rng = keyed(Stream::Batch, &[cfg.seed, step as u64]);
    index::sample(&mut rng, n, cfg.batch_size.min(n)).into_vec()
}

fn augment<'a>(cfg: &TrainConfig, case: &'a Case, step: usize) -> Cow<'a, Case> {
    if cfg.mirror_probability > 0.0
        && keyed(Stream::Mirror, &[cfg.seed, case.case_id, step as u64]).gen::<f64>() < cfg.mirror_probability
    {
        Cow::Owned(case.mirrored())
    } else {
        Cow::Borrowed(case)
    }
}

fn check_cases(cases: &[Case], cfg: &ModelConfig) -> Result<()> {
    if cases.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(c) = cases.iter().find(|c| c.height() != cfg.image_size || c.width() != cfg.image_size) {
        return Err(Error::Config(format!(
            "case {} is {}x{}, model expects {}x{}",
            c.case_id,
            c.height(),
            c.width(),
            cfg.image_size,
            cfg.image_size
        )));
    }
    Ok(())
}

// ---- pretraining -------------------------------------------------------------

struct PretrainExample<'p> {
    g: Graph<'p>,
    mim: Var,
    mlm: Option<Var>,
    img: Var,
    txt: Var,
}

/// Exactly `round(ratio · n)` patches (at least one) chosen per example.
pub fn mim_mask(n: usize, ratio: f64, keys: &[u64]) -> Vec<bool> {
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut rng = keyed(Stream::MimMask, keys);
    let mut mask = vec![false; n];
    for i in index::sample(&mut rng, n, k) {
        mask[i] = true;
    }
    mask
}

fn pretrain_forward<'p>(model: &'p Model, case: &Case, cfg: &TrainConfig, step: usize) -> Result<PretrainExample<'p>> {
    let l = &model.layout;
    let mc = &model.config;
    let keys = [cfg.seed, case.case_id, step as u64];
    let mut g = Graph::new(&model.params, true);

    let mask = mim_mask(mc.n_patches(), cfg.mim_ratio, &keys);
    let masked = encode_image(&mut g, &l.visual, &case.image, Some(&mask))?;
    let states = g.tape.slice_rows(masked.patch_states, 1, mc.n_patches())?;
    let pred = l.heads.mim.forward(&mut g, states)?;
    let target = patchify(&case.image, mc.patch_size)?;
    let mim = mim_loss(&mut g, pred, &target, &mask)?;

    let note = TokenSequence {
        ids: content_of(&model.vocab, &case.note, mc.l_max),
    };
    let mut mlm = None;
    for attempt in 0..16u64 {
        let ex = match apply_mlm_mask(&note, cfg.mlm_rate, mix(&[keys[0], keys[1], keys[2], attempt]), mc.vocab_size) {
            Ok(ex) => ex,
            Err(_) => break,
        };
        if ex.labels.iter().all(Option::is_none) {
            continue;
        }
        let text = encode_text(&mut g, &l.text, &ex.masked.ids)?;
        let logits = l.heads.mlm.forward(&mut g, text.token_states)?;
        mlm = Some(mlm_loss(&mut g, logits, &ex.labels)?);
        break;
    }

    let img = encode_image(&mut g, &l.visual, &case.image, None)?.pooled;
    let txt = encode_text(&mut g, &l.text, &note.ids)?.pooled;
    Ok(PretrainExample { g, mim, mlm, img, txt })
}

fn stack_rows(rows: &[&Tensor]) -> Result<Tensor> {
    let d = rows[0].numel();
    let data: Vec<f64> = rows.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(Tensor::new(vec![rows.len(), d], data)?)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn pretrain_step(model: &Model, cfg: &TrainConfig, batch: &[&Case], step: usize) -> Result<(BTreeMap<String, f64>, f64, Vec<Option<Tensor>>)> {
    let n_params = model.params.len();
    let examples: Vec<PretrainExample> = batch
        .par_iter()
        .map(|c| pretrain_forward(model, c, cfg, step))
        .collect::<Result<_>>()?;
    let b = examples.len();
    let w = &cfg.weights;

    let mut bg = Graph::new(&model.params, true);
    let imgs = stack_rows(&examples.iter().map(|e| e.g.value(e.img)).collect::<Vec<_>>())?;
    let txts = stack_rows(&examples.iter().map(|e| e.g.value(e.txt)).collect::<Vec<_>>())?;
    let img_var = bg.tape.param(imgs);
    let txt_var = bg.tape.param(txts);
    let sig = siglip_loss(&mut bg, &model.layout.align, img_var, txt_var)?;
    let sig_value = scalar(&bg, sig);
    let mut bgrads = bg.tape.backward(sig)?;
    let img_grad = bgrads.get(img_var).cloned().expect("tracked input");
    let txt_grad = bgrads.get(txt_var).cloned().expect("tracked input");
    let mut align_grads: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
    bg.accumulate_param_grads(&mut bgrads, &mut align_grads);
    for g in align_grads.iter_mut().flatten() {
        g.data_mut().iter_mut().for_each(|v| *v *= w.siglip);
    }

    let n_mlm = examples.iter().filter(|e| e.mlm.is_some()).count();
    let mim_mean = examples.iter().map(|e| scalar(&e.g, e.mim)).sum::<f64>() / b as f64;
    let mlm_mean = if n_mlm > 0 {
        examples.iter().filter_map(|e| e.mlm.map(|v| scalar(&e.g, v))).sum::<f64>() / n_mlm as f64
    } else {
        0.0
    };

    let d = img_grad.cols();
    let parts: Vec<Vec<Option<Tensor>>> = examples
        .into_par_iter()
        .enumerate()
        .map(|(i, e)| {
            let shape = e.g.value(e.mim).shape().to_vec();
            let mut seeds = vec![(e.mim, Tensor::full(&shape, w.mim / b as f64))];
            if let Some(v) = e.mlm {
                let s = e.g.value(v).shape().to_vec();
                seeds.push((v, Tensor::full(&s, w.mlm / n_mlm as f64)));
            }
            let row = |t: &Tensor| Tensor::from_parts(vec![1, d], t.row(i).iter().map(|v| v * w.siglip).collect());
            seeds.push((e.img, row(&img_grad)));
            seeds.push((e.txt, row(&txt_grad)));
            let mut grads = e.g.tape.backward_seeded(seeds)?;
            let mut acc: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
            e.g.accumulate_param_grads(&mut grads, &mut acc);
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut parts = parts;
    parts.push(align_grads);
    let grads = sum_grads(parts, n_params);

    let total = w.siglip * sig_value + w.mim * mim_mean + w.mlm * mlm_mean;
    let components = BTreeMap::from([
        ("siglip".to_string(), sig_value),
        ("mim".to_string(), mim_mean),
        ("mlm".to_string(), mlm_mean),
    ]);
    Ok((components, total, grads))
}

/// Trains a fresh model on the alignment, MIM and MLM objectives.
pub fn pretrain(
    cfg: &TrainConfig,
    train: &[Case],
    heldout: Option<&[Case]>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model_cfg = cfg.model.clone().unwrap_or_else(ModelConfig::desk);
    check_cases(train, &model_cfg)?;
    let vocab = build_vocabulary(train)?;
    let model = Model::init(model_cfg, vocab, cfg.seed)?;
    run(cfg, model, train, heldout, log, Phase::Pretrain)
}

// ---- fine-tuning ---------------------------------------------------------------

/// One templated VQA pair for `case`, drawn from `keys`.
pub fn sample_vqa(case: &Case, keys: &[u64]) -> (String, String) {
    let mut rng = keyed(Stream::Vqa, keys);
    let ask_location = rng.gen_bool(0.5) && !case.annotations.is_empty();
    if ask_location {
        let a = &case.annotations[rng.gen_range(0..case.annotations.len())];
        location_question(a)
    } else {
        let p = Pathology::ALL[rng.gen_range(0..N_PATHOLOGIES)];
        presence_question(p, case.labels[p.code()] == 1)
    }
}

/// Prompt-conditioned generation loss for one (prompt, target) pair.
fn conditioned_generation(g: &mut Graph, model: &Model, visual: &crate::encoders::VisualEmbedding, prompt: &str, target: &str) -> Result<Var> {
    let l = &model.layout;
    let l_max = model.config.l_max;
    let prompt_ids = content_of(&model.vocab, prompt, l_max);
    let text = encode_text(g, &l.text, &prompt_ids)?;
    let fused = fuse(g, &l.fusion, &text, visual)?;
    let target = content_of(&model.vocab, target, l_max);
    let logits = decode_logits(g, &l.decoder, &target[..target.len() - 1], &fused)?;
    generation_loss(g, logits, &target)
}

fn finetune_step(model: &Model, cfg: &TrainConfig, batch: &[&Case], step: usize) -> Result<(BTreeMap<String, f64>, f64, Vec<Option<Tensor>>)> {
    let n_params = model.params.len();
    let b = batch.len() as f64;
    let w = &cfg.weights;
    let parts: Vec<([f64; 3], Vec<Option<Tensor>>)> = batch
        .par_iter()
        .map(|case| {
            let l = &model.layout;
            let mut g = Graph::new(&model.params, true);
            let visual = encode_image(&mut g, &l.visual, &case.image, None)?;
            let det = predict_detections(&mut g, &l.detect, &visual)?;
            let boxes: [Option<[f64; 4]>; N_PATHOLOGIES] = std::array::from_fn(|p| {
                case.normalized_box(Pathology::from_code(p).expect("valid code"))
            });
            let det = detection_loss(&mut g, &det, &case.labels, &boxes)?;
            let cap = conditioned_generation(&mut g, model, &visual, case.prompt(), &case.findings())?;
            let (question, answer) = sample_vqa(case, &[cfg.seed, case.case_id, step as u64]);
            let vqa = conditioned_generation(&mut g, model, &visual, &question, &answer)?;
            let values = [scalar(&g, cap), scalar(&g, vqa), scalar(&g, det)];
            let seeds = [(cap, w.caption), (vqa, w.vqa), (det, w.detection)]
                .into_iter()
                .map(|(v, wt)| (v, Tensor::full(g.value(v).shape(), wt / b)))
                .collect();
            let mut grads = g.tape.backward_seeded(seeds)?;
            let mut acc: Vec<Option<Tensor>> = (0..n_params).map(|_| None).collect();
            g.accumulate_param_grads(&mut grads, &mut acc);
            Ok((values, acc))
        })
        .collect::<Result<_>>()?;
    let mut sums = [0.0; 3];
    let mut grads_parts = Vec::with_capacity(parts.len());
    for (v, acc) in parts {
        for k in 0..3 {
            sums[k] += v[k];
        }
        grads_parts.push(acc);
    }
    let [cap, vqa, det] = sums.map(|s| s / b);
    let total = w.caption * cap + w.vqa * vqa + w.detection * det;
    let components = BTreeMap::from([
        ("caption".to_string(), cap),
        ("vqa".to_string(), vqa),
        ("detection".to_string(), det),
    ]);
    Ok((components, total, sum_grads(grads_parts, n_params)))
}

/// Continues training `init` on captioning, VQA and detection.
pub fn finetune(
    cfg: &TrainConfig,
    init: Model,
    train: &[Case],
    heldout: Option<&[Case]>,
    log: &mut dyn FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(m) = &cfg.model {
        let mut expected = m.clone();
        expected.vocab_size = init.config.vocab_size;
        if expected != init.config {
            return Err(Error::Config(
                "model section of the config does not match the initial checkpoint".into(),
            ));
        }
    }
    check_cases(train, &init.config)?;
    run(cfg, init, train, heldout, log, Phase::Finetune)
}

// ---- shared loop ----------------------------------------------------------------

#[derive(Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    Finetune,
}

fn run(
    cfg: &TrainConfig,
    mut model: Model,
    train: &[Case],
    heldout: Option<&[Case]>,
    log: &mut dyn FnMut(&StepRecord),
    phase: Phase,
) -> Result<TrainOutcome> {
    let mut opt = Optimizer::new(&model, cfg);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Cow<Case>> = batch_indices(cfg, train.len(), step)
            .into_iter()
            .map(|i| augment(cfg, &train[i], step))
            .collect();
        let batch: Vec<&Case> = batch.iter().map(|c| c.as_ref()).collect();
        let (components, loss, grads) = match phase {
            Phase::Pretrain => pretrain_step(&model, cfg, &batch, step)?,
            Phase::Finetune => finetune_step(&model, cfg, &batch, step)?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = cfg.learning_rate_at(step);
        let grad_norm = opt.apply(&mut model, grads, lr, cfg.grad_clip)?;
        let eval = match heldout {
            Some(cases) if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 => {
                let cases = &cases[..cases.len().min(cfg.eval_cases)];
                Some(match phase {
                    Phase::Pretrain => retrieval_accuracy(&model, cases)?.as_map(),
                    Phase::Finetune => eval::quick_detection_summary(&model, cases)?,
                })
            }
            _ => None,
        };
        let record = StepRecord {
            step,
            learning_rate: lr,
            loss,
            components,
            grad_norm,
            eval,
            timestamp: now(),
        };
        log(&record);
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

// ---- retrieval ---------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Retrieval {
    pub pairs: usize,
    /// Fraction of images whose best-scoring note carries their findings.
    pub image_to_text: f64,
    /// Fraction of notes whose best-scoring image carries their findings.
    pub text_to_image: f64,
    /// Same, counting only the exact partner as correct.
    pub image_to_text_exact: f64,
    pub text_to_image_exact: f64,
}

impl Retrieval {
    fn as_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("retrieval_i2t".to_string(), self.image_to_text),
            ("retrieval_t2i".to_string(), self.text_to_image),
        ])
    }
}

fn argmax(row: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in row.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Pairwise alignment scores `[B, B]` between every image and every note.
pub fn alignment_scores(model: &Model, cases: &[Case]) -> Result<Tensor> {
    if cases.is_empty() {
        return Err(Error::Metric("retrieval needs at least one pair".into()));
    }
    let pooled: Vec<(Tensor, Tensor)> = cases
        .par_iter()
        .map(|c| {
            let mut g = Graph::new(&model.params, false);
            let img = encode_image(&mut g, &model.layout.visual, &c.image, None)?.pooled;
            let ids = content_of(&model.vocab, &c.note, model.config.l_max);
            let txt = encode_text(&mut g, &model.layout.text, &ids)?.pooled;
            Ok((g.value(img).clone(), g.value(txt).clone()))
        })
        .collect::<Result<_>>()?;
    let imgs = stack_rows(&pooled.iter().map(|p| &p.0).collect::<Vec<_>>())?;
    let txts = stack_rows(&pooled.iter().map(|p| &p.1).collect::<Vec<_>>())?;
    let mut g = Graph::new(&model.params, false);
    let (i, t) = (g.constant(imgs), g.constant(txts));
    let s = siglip_logits(&mut g, &model.layout.align, i, t)?;
    Ok(g.value(s).clone())
}

/// Top-1 retrieval in both directions. Notes of healthy cases, or of cases
/// with the same findings, are indistinguishable from the image side except
/// through their random symptom sentence, so a hit is any candidate whose
/// findings equal the query's.
pub fn retrieval_accuracy(model: &Model, cases: &[Case]) -> Result<Retrieval> {
    let s = alignment_scores(model, cases)?;
    let b = cases.len();
    let findings: Vec<String> = cases.iter().map(Case::findings).collect();
    let (mut i2t, mut t2i, mut i2t_exact, mut t2i_exact) = (0, 0, 0, 0);
    for i in 0..b {
        let j = argmax(s.row(i).iter().copied());
        i2t += usize::from(findings[j] == findings[i]);
        i2t_exact += usize::from(j == i);
        let k = argmax((0..b).map(|r| s.at(r, i)));
        t2i += usize::from(findings[k] == findings[i]);
        t2i_exact += usize::from(k == i);
    }
    let f = |n: usize| n as f64 / b as f64;
    Ok(Retrieval {
        pairs: b,
        image_to_text: f(i2t),
        text_to_image: f(t2i),
        image_to_text_exact: f(i2t_exact),
        text_to_image_exact: f(t2i_exact),
    })
}
