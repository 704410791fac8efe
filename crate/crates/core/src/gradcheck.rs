//! Central finite-difference verification of every differentiable op, the
//! transformer blocks, and each training loss.
//!
//! Every check places its inputs in a [`ParamStore`], so one harness covers
//! raw ops (whose operands are the "parameters") and whole model paths.
//! Checks with many coordinates compare a random sample of them per trial.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::corpus::N_PATHOLOGIES;
use crate::encoders::{encode_image, encode_text, TextEmbedding, VisualEmbedding};
use crate::error::Result;
use crate::fusion::{decode_logits, fuse, predict_detections, FusedEmbedding};
use crate::model::Model;
use crate::nn::{
    decoder_block, encoder_block, multi_head_attention, AttentionMask, AttentionParams, BlockParams, Graph, Initializer,
    Linear, ParamId, ParamStore,
};
use crate::objectives::{detection_loss, generation_loss, mim_loss, mlm_loss, siglip_loss};
use crate::rng::{keyed, Stream};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::text::{Vocabulary, BOS, EOS, N_RESERVED};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_TRIALS: usize = 20;
/// Coordinates compared per trial when a check has more than this many.
pub const SAMPLED_COORDINATES: usize = 48;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, with a floor on the denominator so that two
/// vanishing gradients compare equal.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    norm(&diff) / norm(analytic).max(norm(numeric)).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub elapsed: Duration,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Build = Box<dyn Fn(&mut Graph) -> Result<Var>>;

/// One trial: the values being differentiated and the scalar function.
pub struct Setup {
    pub store: ParamStore,
    pub build: Build,
}

fn forward(store: &ParamStore, build: &Build) -> Result<f64> {
    let mut g = Graph::new(store, false);
    let loss = build(&mut g)?;
    Ok(g.value(loss).data()[0])
}

/// Largest relative error between autodiff and central differences for
/// one setup.
pub fn check_setup(setup: &Setup, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut g = Graph::new(&setup.store, true);
    let loss = (setup.build)(&mut g)?;
    let mut grads = g.tape.backward(loss)?;
    let mut acc: Vec<Option<Tensor>> = (0..setup.store.len()).map(|_| None).collect();
    g.accumulate_param_grads(&mut grads, &mut acc);
    drop(g);

    let mut coords: Vec<(usize, usize)> = (0..setup.store.len())
        .flat_map(|p| (0..setup.store.get(ParamId(p)).numel()).map(move |k| (p, k)))
        .collect();
    if coords.len() > SAMPLED_COORDINATES {
        for i in 0..SAMPLED_COORDINATES {
            let j = rng.gen_range(i..coords.len());
            coords.swap(i, j);
        }
        coords.truncate(SAMPLED_COORDINATES);
    }
    let mut store = setup.store.clone();
    let mut analytic = Vec::with_capacity(coords.len());
    let mut numeric = Vec::with_capacity(coords.len());
    for (p, k) in coords {
        analytic.push(acc[p].as_ref().map_or(0.0, |t| t.data()[k]));
        let id = ParamId(p);
        let orig = store.get(id).data()[k];
        store.get_mut(id).data_mut()[k] = orig + STEP;
        let up = forward(&store, &setup.build)?;
        store.get_mut(id).data_mut()[k] = orig - STEP;
        let down = forward(&store, &setup.build)?;
        store.get_mut(id).data_mut()[k] = orig;
        numeric.push((up - down) / (2.0 * STEP));
    }
    Ok(relative_error(&analytic, &numeric))
}

/// A named family of setups; `make` draws a fresh trial.
pub struct Check {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Result<Setup>,
}

pub fn run_check(check: &Check, trials: usize, seed: u64) -> Result<CheckResult> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let mut rng = keyed(Stream::Sample, &[seed, t as u64, fxhash(check.name)]);
        let setup = (check.make)(&mut rng)?;
        worst = worst.max(check_setup(&setup, &mut rng)?);
    }
    Ok(CheckResult {
        name: check.name.to_string(),
        trials,
        max_rel_error: worst,
        elapsed: start.elapsed(),
    })
}

fn fxhash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

// ---- input helpers ---------------------------------------------------------------

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) * std).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Values bounded away from zero, for kinks such as `abs`.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    normal(rng, shape, 1.0).map(|v| if v.abs() < 0.2 { v.signum() * 0.2 + v } else { v })
}

struct Inputs {
    store: ParamStore,
    ids: Vec<ParamId>,
}

impl Inputs {
    fn new(tensors: Vec<Tensor>) -> Self {
        let mut store = ParamStore::new();
        let ids = tensors
            .into_iter()
            .enumerate()
            .map(|(i, t)| store.insert(format!("in{i}"), t).expect("unique names"))
            .collect();
        Self { store, ids }
    }
}

/// `Σ out ⊙ r`: reduces a tensor output to a scalar with fixed random weights.
fn project(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let r = g.constant(r.clone());
    let prod = g.tape.mul(out, r)?;
    Ok(g.tape.sum(prod))
}

/// Setup for an op over raw operands, reduced with random weights.
fn op_setup(
    rng: &mut ChaCha8Rng,
    operands: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> Setup {
    let inputs = Inputs::new(operands);
    let r = normal(rng, out_shape, 1.0);
    let ids = inputs.ids;
    Setup {
        store: inputs.store,
        build: Box::new(move |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.p(id)).collect();
            let out = f(g, &vars)?;
            project(g, out, &r)
        }),
    }
}

macro_rules! op_check {
    ($name:expr, |$rng:ident| $operands:expr, $shape:expr, |$g:ident, $v:ident| $body:expr) => {
        Check {
            name: $name,
            make: |$rng| {
                let operands = $operands;
                Ok(op_setup($rng, operands, &$shape, |$g, $v| Ok($body)))
            },
        }
    };
}

fn op_checks() -> Vec<Check> {
    vec![
        op_check!("matmul", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[4, 2], 1.0)], [3, 2], |g, v| g
            .tape
            .matmul(v[0], v[1])?),
        op_check!("matmul_nt", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[5, 4], 1.0)], [3, 5], |g, v| g
            .tape
            .matmul_nt(v[0], v[1])?),
        op_check!("add", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g
            .tape
            .add(v[0], v[1])?),
        op_check!("sub", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g
            .tape
            .sub(v[0], v[1])?),
        op_check!("mul", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g
            .tape
            .mul(v[0], v[1])?),
        op_check!("mul_self", |r| vec![normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g.tape.mul(v[0], v[0])?),
        op_check!("add_row", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[4], 1.0)], [3, 4], |g, v| g
            .tape
            .add_row(v[0], v[1])?),
        op_check!("scale", |r| vec![normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g.tape.scale(v[0], -1.7)),
        op_check!("mul_scalar", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[1], 1.0)], [3, 4], |g, v| g
            .tape
            .mul_scalar(v[0], v[1])?),
        op_check!("add_scalar", |r| vec![normal(r, &[3, 4], 1.0), normal(r, &[1], 1.0)], [3, 4], |g, v| g
            .tape
            .add_scalar(v[0], v[1])?),
        op_check!("gelu", |r| vec![normal(r, &[3, 4], 1.5)], [3, 4], |g, v| g.tape.gelu(v[0])),
        op_check!("sigmoid", |r| vec![normal(r, &[3, 4], 2.0)], [3, 4], |g, v| g.tape.sigmoid(v[0])),
        op_check!("log_sigmoid", |r| vec![normal(r, &[3, 4], 3.0)], [3, 4], |g, v| g.tape.log_sigmoid(v[0])),
        op_check!("exp", |r| vec![normal(r, &[3, 4], 1.0)], [3, 4], |g, v| g.tape.exp(v[0])),
        op_check!("abs", |r| vec![away_from_zero(r, &[3, 4])], [3, 4], |g, v| g.tape.abs(v[0])),
        op_check!("softmax_rows", |r| vec![normal(r, &[3, 5], 2.0)], [3, 5], |g, v| g.tape.softmax(v[0], 1)?),
        op_check!("softmax_cols", |r| vec![normal(r, &[3, 5], 2.0)], [3, 5], |g, v| g.tape.softmax(v[0], 0)?),
        op_check!(
            "layer_norm",
            |r| vec![normal(r, &[3, 6], 2.0), normal(r, &[6], 1.0), normal(r, &[6], 1.0)],
            [3, 6],
            |g, v| g.tape.layer_norm(v[0], v[1], v[2], 1e-5)?
        ),
        op_check!("sum", |r| vec![normal(r, &[3, 4], 1.0)], [], |g, v| g.tape.sum(v[0])),
        op_check!("mean", |r| vec![normal(r, &[3, 4], 1.0)], [], |g, v| g.tape.mean(v[0])),
        op_check!("reshape", |r| vec![normal(r, &[3, 4], 1.0)], [2, 6], |g, v| g
            .tape
            .reshape(v[0], vec![2, 6])?),
        op_check!("transpose", |r| vec![normal(r, &[3, 4], 1.0)], [4, 3], |g, v| g.tape.transpose(v[0])?),
        op_check!("slice_cols", |r| vec![normal(r, &[3, 6], 1.0)], [3, 2], |g, v| g
            .tape
            .slice_cols(v[0], 3, 2)?),
        op_check!("concat_cols", |r| vec![normal(r, &[3, 2], 1.0), normal(r, &[3, 4], 1.0)], [3, 6], |g, v| g
            .tape
            .concat_cols(&[v[0], v[1]])?),
        op_check!("slice_rows", |r| vec![normal(r, &[5, 3], 1.0)], [2, 3], |g, v| g
            .tape
            .slice_rows(v[0], 1, 2)?),
        op_check!("concat_rows", |r| vec![normal(r, &[2, 3], 1.0), normal(r, &[1, 3], 1.0)], [5, 3], |g, v| g
            .tape
            .concat_rows(&[v[0], v[1], v[0]])?),
        op_check!("gather", |r| vec![normal(r, &[6, 3], 1.0)], [5, 3], |g, v| g
            .tape
            .gather(v[0], &[4, 0, 4, 2, 5])?),
        op_check!("l2_normalize_rows", |r| vec![away_from_zero(r, &[3, 4])], [3, 4], |g, v| g
            .tape
            .l2_normalize_rows(v[0])?),
        op_check!("cross_entropy", |r| vec![normal(r, &[4, 6], 2.0)], [], |g, v| g
            .tape
            .cross_entropy(v[0], &[Some(1), None, Some(5), Some(1)])?),
        op_check!("box_transform", |r| vec![normal(r, &[6, 4], 1.5)], [6, 4], |g, v| g
            .tape
            .box_transform(v[0])?),
    ]
}

// ---- block and model checks ----------------------------------------------------------

/// Small shapes that still exercise every path, including the bridge
/// between encoder and decoder widths.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        patch_size: 4,
        d_model: 8,
        n_enc_layers: 1,
        n_enc_heads: 2,
        n_fusion_layers: 1,
        n_dec_layers: 1,
        n_dec_heads: 2,
        d_decoder: 6,
        vocab_size: 12,
        l_max: 8,
        d_align: 5,
    }
}

fn tiny_vocab() -> Vocabulary {
    Vocabulary::build(&["fever cough pain nodule cavity right left"]).expect("non-empty")
}

/// A tiny model with every parameter redrawn at unit-ish scale, so the
/// checks run well inside the nonlinear regime.
fn tiny_model(rng: &mut ChaCha8Rng) -> Result<Model> {
    let mut cfg = tiny_config();
    let vocab = tiny_vocab();
    cfg.vocab_size = vocab.len();
    let mut model = Model::init(cfg, vocab, rng.gen())?;
    for t in model.params.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.5;
        }
    }
    Ok(model)
}

fn random_ids(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend((1..len - 1).map(|_| rng.gen_range(N_RESERVED..vocab)));
    ids.push(EOS);
    ids
}

/// Builds a block-level setup from freshly drawn block parameters plus
/// extra input tensors appended to the same store.
fn block_setup(
    rng: &mut ChaCha8Rng,
    declare: impl FnOnce(&mut Initializer) -> BlockParams,
    inputs: Vec<Tensor>,
    out_shape: &[usize],
    f: impl Fn(&mut Graph, &BlockParams, &[Var]) -> Result<Var> + 'static,
) -> Setup {
    let mut init_rng = keyed(Stream::Init, &[rng.gen()]);
    let mut init = Initializer::new(&mut init_rng);
    let block = declare(&mut init);
    let mut store = init.store;
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.sample::<f64, _>(StandardNormal) * 0.5;
        }
    }
    let ids: Vec<ParamId> = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| store.insert(format!("input{i}"), t).expect("unique"))
        .collect();
    let r = normal(rng, out_shape, 1.0);
    Setup {
        store,
        build: Box::new(move |g| {
            let vars: Vec<Var> = ids.iter().map(|&id| g.p(id)).collect();
            let out = f(g, &block, &vars)?;
            project(g, out, &r)
        }),
    }
}

fn model_setup(model: Model, f: impl Fn(&mut Graph, &Model) -> Result<Var> + 'static) -> Setup {
    let store = model.params.clone();
    Setup {
        store,
        build: Box::new(move |g| f(g, &model)),
    }
}

fn block_checks() -> Vec<Check> {
    vec![
        Check {
            name: "attention_masked",
            make: |rng| {
                let q = normal(rng, &[4, 8], 1.0);
                let kv = normal(rng, &[5, 8], 1.0);
                let mut init_rng = keyed(Stream::Init, &[rng.gen()]);
                let mut init = Initializer::new(&mut init_rng);
                let attn = AttentionParams::declare(&mut init, "attn", 8, 2);
                let mut store = init.store;
                for t in store.tensors_mut() {
                    for v in t.data_mut() {
                        *v = rng.sample::<f64, _>(StandardNormal) * 0.5;
                    }
                }
                let qi = store.insert("q", q)?;
                let ki = store.insert("kv", kv)?;
                let r = normal(rng, &[4, 8], 1.0);
                let mask = AttentionMask::key_padding(4, &[true, true, false, true, false]);
                Ok(Setup {
                    store,
                    build: Box::new(move |g| {
                        let (q, kv) = (g.p(qi), g.p(ki));
                        let out = multi_head_attention(g, &attn, q, kv, Some(&mask))?;
                        project(g, out, &r)
                    }),
                })
            },
        },
        Check {
            name: "mlp_three_layer",
            make: |rng| {
                let mut init_rng = keyed(Stream::Init, &[rng.gen()]);
                let mut init = Initializer::new(&mut init_rng);
                let layers = [
                    Linear::declare(&mut init, "l0", 5, 7, true),
                    Linear::declare(&mut init, "l1", 7, 6, true),
                    Linear::declare(&mut init, "l2", 6, 3, true),
                ];
                let mut store = init.store;
                for t in store.tensors_mut() {
                    for v in t.data_mut() {
                        *v = rng.sample::<f64, _>(StandardNormal) * 0.7;
                    }
                }
                let x = store.insert("x", normal(rng, &[4, 5], 1.0))?;
                let r = normal(rng, &[4, 3], 1.0);
                Ok(Setup {
                    store,
                    build: Box::new(move |g| {
                        let mut h = g.p(x);
                        for (i, l) in layers.iter().enumerate() {
                            h = l.forward(g, h)?;
                            if i < 2 {
                                h = g.tape.gelu(h);
                            }
                        }
                        project(g, h, &r)
                    }),
                })
            },
        },
        Check {
            name: "encoder_block",
            make: |rng| {
                let x = normal(rng, &[5, 8], 1.0);
                Ok(block_setup(
                    rng,
                    |s| BlockParams::declare(s, "enc", 8, 2, false),
                    vec![x],
                    &[5, 8],
                    |g, b, v| {
                        let mask = AttentionMask::key_padding(5, &[true, true, true, false, true]);
                        encoder_block(g, b, v[0], Some(&mask))
                    },
                ))
            },
        },
        Check {
            name: "decoder_block",
            make: |rng| {
                let x = normal(rng, &[4, 8], 1.0);
                let mem = normal(rng, &[6, 8], 1.0);
                Ok(block_setup(
                    rng,
                    |s| BlockParams::declare(s, "dec", 8, 2, true),
                    vec![x, mem],
                    &[4, 8],
                    |g, b, v| decoder_block(g, b, v[0], v[1], Some(&[true, true, false, true, true, true])),
                ))
            },
        },
        Check {
            name: "encode_image",
            make: |rng| {
                let model = tiny_model(rng)?;
                let image = normal(rng, &[8, 8], 0.5);
                let r = normal(rng, &[5, 8], 1.0);
                let mask = [false, true, false, false];
                Ok(model_setup(model, move |g, m| {
                    let v = encode_image(g, &m.layout.visual, &image, Some(&mask))?;
                    project(g, v.patch_states, &r)
                }))
            },
        },
        Check {
            name: "encode_text",
            make: |rng| {
                let model = tiny_model(rng)?;
                let mut ids = random_ids(rng, 5, model.config.vocab_size);
                ids.extend([0, 0]);
                let r = normal(rng, &[7, 8], 1.0);
                Ok(model_setup(model, move |g, m| {
                    let t = encode_text(g, &m.layout.text, &ids)?;
                    project(g, t.token_states, &r)
                }))
            },
        },
        Check {
            name: "fuse",
            make: |rng| {
                let model = tiny_model(rng)?;
                let mut store = model.params.clone();
                let text_in = store.insert("text_states", normal(rng, &[4, 8], 1.0))?;
                let vis_in = store.insert("visual_states", normal(rng, &[5, 8], 1.0))?;
                let r = normal(rng, &[4, 8], 1.0);
                let fusion = model.layout.fusion.clone();
                Ok(Setup {
                    store,
                    build: Box::new(move |g| {
                        let ts = g.p(text_in);
                        let vs = g.p(vis_in);
                        let pooled = g.tape.slice_rows(ts, 0, 1)?;
                        let text = TextEmbedding {
                            token_states: ts,
                            pooled,
                            valid: vec![true, true, true, false],
                        };
                        let vp = g.tape.slice_rows(vs, 0, 1)?;
                        let visual = VisualEmbedding {
                            patch_states: vs,
                            pooled: vp,
                        };
                        let fused = fuse(g, &fusion, &text, &visual)?;
                        project(g, fused.states, &r)
                    }),
                })
            },
        },
        Check {
            name: "decode_logits",
            make: |rng| {
                let model = tiny_model(rng)?;
                let mut store = model.params.clone();
                let mem = store.insert("memory", normal(rng, &[3, 8], 1.0))?;
                let prefix = random_ids(rng, 5, model.config.vocab_size)[..4].to_vec();
                let r = normal(rng, &[4, model.config.vocab_size], 1.0);
                let decoder = model.layout.decoder.clone();
                Ok(Setup {
                    store,
                    build: Box::new(move |g| {
                        let states = g.p(mem);
                        let memory = FusedEmbedding {
                            states,
                            valid: vec![true, false, true],
                        };
                        let logits = decode_logits(g, &decoder, &prefix, &memory)?;
                        project(g, logits, &r)
                    }),
                })
            },
        },
    ]
}

fn loss_checks() -> Vec<Check> {
    vec![
        Check {
            name: "siglip_loss",
            make: |rng| {
                let model = tiny_model(rng)?;
                let mut store = model.params.clone();
                let img = store.insert("img_pooled", normal(rng, &[3, 8], 1.0))?;
                let txt = store.insert("txt_pooled", normal(rng, &[3, 8], 1.0))?;
                let align = model.layout.align.clone();
                // Keep t·s + b in a range where the loss is not saturated.
                store.get_mut(align.log_t).data_mut()[0] = rng.gen_range(-0.5..1.5);
                store.get_mut(align.bias).data_mut()[0] = rng.gen_range(-2.0..2.0);
                Ok(Setup {
                    store,
                    build: Box::new(move |g| {
                        let (i, t) = (g.p(img), g.p(txt));
                        siglip_loss(g, &align, i, t)
                    }),
                })
            },
        },
        Check {
            name: "mim_loss",
            make: |rng| {
                let model = tiny_model(rng)?;
                let image = normal(rng, &[8, 8], 0.5);
                let target = crate::encoders::patchify(&image, 4)?;
                let mask = [true, false, true, false];
                Ok(model_setup(model, move |g, m| {
                    let v = encode_image(g, &m.layout.visual, &image, Some(&mask))?;
                    let states = g.tape.slice_rows(v.patch_states, 1, 4)?;
                    let pred = m.layout.heads.mim.forward(g, states)?;
                    mim_loss(g, pred, &target, &mask)
                }))
            },
        },
        Check {
            name: "mlm_loss",
            make: |rng| {
                let model = tiny_model(rng)?;
                let ids = random_ids(rng, 6, model.config.vocab_size);
                let labels = vec![None, Some(ids[1]), None, Some(ids[3]), None, None];
                let mut masked = ids.clone();
                masked[1] = crate::text::MASK;
                Ok(model_setup(model, move |g, m| {
                    let t = encode_text(g, &m.layout.text, &masked)?;
                    let logits = m.layout.heads.mlm.forward(g, t.token_states)?;
                    mlm_loss(g, logits, &labels)
                }))
            },
        },
        Check {
            name: "generation_loss",
            make: |rng| {
                let model = tiny_model(rng)?;
                let image = normal(rng, &[8, 8], 0.5);
                let prompt = random_ids(rng, 4, model.config.vocab_size);
                let target = random_ids(rng, 5, model.config.vocab_size);
                Ok(model_setup(model, move |g, m| {
                    let v = encode_image(g, &m.layout.visual, &image, None)?;
                    let t = encode_text(g, &m.layout.text, &prompt)?;
                    let fused = fuse(g, &m.layout.fusion, &t, &v)?;
                    let logits = decode_logits(g, &m.layout.decoder, &target[..target.len() - 1], &fused)?;
                    generation_loss(g, logits, &target)
                }))
            },
        },
        Check {
            name: "detection_loss",
            make: |rng| {
                let model = tiny_model(rng)?;
                let image = normal(rng, &[8, 8], 0.5);
                let labels: [u8; N_PATHOLOGIES] = std::array::from_fn(|_| u8::from(rng.gen_bool(0.5)));
                let boxes: [Option<[f64; 4]>; N_PATHOLOGIES] = std::array::from_fn(|p| {
                    (labels[p] == 1).then(|| {
                        let x0 = rng.gen_range(0.0..0.5);
                        let y0 = rng.gen_range(0.0..0.5);
                        [x0, y0, x0 + rng.gen_range(0.1..0.5), y0 + rng.gen_range(0.1..0.5)]
                    })
                });
                Ok(model_setup(model, move |g, m| {
                    let v = encode_image(g, &m.layout.visual, &image, None)?;
                    let out = predict_detections(g, &m.layout.detect, &v)?;
                    detection_loss(g, &out, &labels, &boxes)
                }))
            },
        },
    ]
}

/// Every check in the suite: raw ops, blocks and model paths, then losses.
pub fn all_checks() -> Vec<Check> {
    let mut checks = op_checks();
    checks.extend(block_checks());
    checks.extend(loss_checks());
    checks
}

pub fn run_suite(trials: usize, seed: u64, mut report: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for check in all_checks() {
        let r = run_check(&check, trials, seed)?;
        report(&r);
        out.push(r);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_definition() {
        assert_eq!(relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_error(&[3.0, 4.0], &[0.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!(relative_error(&[1e-12], &[0.0]) < 1e-3);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // d/dx of sum(x ⊙ stop(x)) is x, half the true 2x; the harness must notice.
        let inputs = Inputs::new(vec![Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap()]);
        let id = inputs.ids[0];
        let setup = Setup {
            store: inputs.store,
            build: Box::new(move |g| {
                let x = g.p(id);
                let frozen = g.constant(g.value(x).clone());
                let prod = g.tape.mul(x, frozen)?;
                Ok(g.tape.sum(prod))
            }),
        };
        let mut rng = keyed(Stream::Sample, &[0]);
        let err = check_setup(&setup, &mut rng).unwrap();
        assert!((err - 0.5).abs() < 1e-6, "{err}");
    }

    #[test]
    fn every_check_passes_once() {
        for check in all_checks() {
            let r = run_check(&check, 2, 7).unwrap();
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
        }
    }
}
