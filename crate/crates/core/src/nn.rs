//! Parameter storage and the transformer building blocks shared by the
//! encoders, the fusion stack and the decoder.
//!
//! Blocks hold [`ParamId`]s into a [`ParamStore`]; a forward pass runs on a
//! [`Graph`], which binds each parameter to a tape leaf the first time it is
//! used. All blocks are pre-norm: every sublayer reads `norm(x)` and adds its
//! output back onto `x`.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitKind {
    /// Normal(0, 0.02²) truncated to two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    Constant(f64),
}

/// Receives parameter declarations while a model layout is built. The same
/// layout code drives allocation ([`ParamStore`]) and the allocation-free
/// shape listing ([`ShapeManifest`]).
pub trait ParamSink {
    fn declare(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> ParamId;
}

/// Named, ordered parameter tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Model(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(Arc::new(tensor));
        Ok(ParamId(self.names.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id.0])
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.tensors.iter_mut().map(Arc::make_mut).collect()
    }

    pub fn total_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Allocating sink: draws initial values from a seeded generator.
pub struct Initializer<'a> {
    pub store: ParamStore,
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Initializer<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store: ParamStore::new(),
            rng,
        }
    }
}

pub(crate) fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ParamSink for Initializer<'_> {
    fn declare(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> ParamId {
        let mut t = Tensor::zeros(&shape);
        match init {
            InitKind::TruncNormal => {
                for v in t.data_mut() {
                    *v = trunc_normal(self.rng, INIT_STD);
                }
            }
            InitKind::Zeros => {}
            InitKind::Ones => t.data_mut().fill(1.0),
            InitKind::Constant(c) => t.data_mut().fill(c),
        }
        self.store
            .insert(name, t)
            .expect("layouts never declare a name twice")
    }
}

/// One parameter tensor in a symbolic model description.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Non-allocating sink: records names and shapes only.
#[derive(Clone, Debug, Default)]
pub struct ShapeManifest {
    pub entries: Vec<ParamEntry>,
}

impl ParamSink for ShapeManifest {
    fn declare(&mut self, name: String, shape: Vec<usize>, _init: InitKind) -> ParamId {
        self.entries.push(ParamEntry { name, shape });
        ParamId(self.entries.len() - 1)
    }
}

/// A forward pass in progress: a tape plus the parameter bindings.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    track: bool,
}

impl<'p> Graph<'p> {
    /// `track` decides whether parameters are differentiable leaves.
    pub fn new(params: &'p ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            track,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.params.shared(id), self.track);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Adds this graph's parameter gradients into `acc` (indexed like the store).
    pub fn accumulate_param_grads(&self, grads: &mut Gradients, acc: &mut [Option<Tensor>]) {
        for (i, b) in self.bound.iter().enumerate() {
            let Some(v) = b else { continue };
            let Some(g) = grads.take(*v) else { continue };
            match &mut acc[i] {
                Some(a) => a
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(x, y)| *x += y),
                slot => *slot = Some(g),
            }
        }
    }
}

// ---- blocks ----------------------------------------------------------------

/// `x · w (+ b)` with `w: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            w: sink.declare(format!("{name}.w"), vec![d_in, d_out], InitKind::TruncNormal),
            b: bias.then(|| sink.declare(format!("{name}.b"), vec![d_out], InitKind::Zeros)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.p(self.w);
        let y = g.tape.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.p(b);
                g.tape.add_row(y, b)?
            }
            None => y,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d: usize) -> Self {
        Self {
            gain: sink.declare(format!("{name}.gain"), vec![d], InitKind::Ones),
            bias: sink.declare(format!("{name}.bias"), vec![d], InitKind::Zeros),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gain, bias) = (g.p(self.gain), g.p(self.bias));
        Ok(g.tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub n_heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d_model: usize, n_heads: usize) -> Self {
        let mut w = |part: &str| sink.declare(format!("{name}.{part}"), vec![d_model, d_model], InitKind::TruncNormal);
        Self {
            w_q: w("w_q"),
            w_k: w("w_k"),
            w_v: w("w_v"),
            w_o: w("w_o"),
            n_heads,
            d_model,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Which key positions each query may attend to.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    lq: usize,
    lk: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(lq: usize, lk: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != lq * lk {
            return Err(Error::Model(format!(
                "mask has {} entries, expected {lq}x{lk}",
                allowed.len()
            )));
        }
        Ok(Self { lq, lk, allowed })
    }

    /// Query `i` sees keys `0..=i`.
    pub fn causal(l: usize) -> Self {
        let allowed = (0..l).flat_map(|i| (0..l).map(move |j| j <= i)).collect();
        Self { lq: l, lk: l, allowed }
    }

    /// Every query sees exactly the keys flagged valid.
    pub fn key_padding(lq: usize, key_valid: &[bool]) -> Self {
        let allowed = (0..lq).flat_map(|_| key_valid.iter().copied()).collect();
        Self {
            lq,
            lk: key_valid.len(),
            allowed,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.lq, self.lk)
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.lk + j]
    }

    /// Additive form: 0 where allowed, −∞ where masked.
    pub fn additive(&self) -> Tensor {
        let data = self
            .allowed
            .iter()
            .map(|&a| if a { 0.0 } else { f64::NEG_INFINITY })
            .collect();
        Tensor::from_parts(vec![self.lq, self.lk], data)
    }
}

/// Output of [`multi_head_attention_with_weights`].
pub struct AttentionOutput {
    pub output: Var,
    /// Per-head `[Lq, Lk]` attention weights.
    pub weights: Vec<Var>,
}

pub fn multi_head_attention(
    g: &mut Graph,
    params: &AttentionParams,
    queries: Var,
    keys_values: Var,
    mask: Option<&AttentionMask>,
) -> Result<Var> {
    multi_head_attention_with_weights(g, params, queries, keys_values, mask).map(|o| o.output)
}

/// Scaled dot-product attention per head (scale `1/√head_dim`), heads
/// concatenated and projected by `w_o`.
pub fn multi_head_attention_with_weights(
    g: &mut Graph,
    params: &AttentionParams,
    queries: Var,
    keys_values: Var,
    mask: Option<&AttentionMask>,
) -> Result<AttentionOutput> {
    let (lq, dq) = g.value(queries).dims2()?;
    let (lk, dk) = g.value(keys_values).dims2()?;
    if dq != params.d_model || dk != params.d_model {
        return Err(Error::Model(format!(
            "attention expects width {}, got queries {dq} and keys {dk}",
            params.d_model
        )));
    }
    if params.n_heads == 0 || params.d_model % params.n_heads != 0 {
        return Err(Error::Model(format!(
            "d_model {} not divisible by {} heads",
            params.d_model, params.n_heads
        )));
    }
    let mask_var = match mask {
        Some(m) if m.shape() != (lq, lk) => {
            return Err(Error::Model(format!(
                "mask shape {:?} does not match attention shape ({lq}, {lk})",
                m.shape()
            )))
        }
        Some(m) => Some(g.constant(m.additive())),
        None => None,
    };
    let (wq, wk, wv, wo) = (g.p(params.w_q), g.p(params.w_k), g.p(params.w_v), g.p(params.w_o));
    let q = g.tape.matmul(queries, wq)?;
    let k = g.tape.matmul(keys_values, wk)?;
    let v = g.tape.matmul(keys_values, wv)?;
    let hd = params.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(params.n_heads);
    let mut weights = Vec::with_capacity(params.n_heads);
    for h in 0..params.n_heads {
        let (qh, kh, vh) = if params.n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.tape.slice_cols(q, h * hd, hd)?,
                g.tape.slice_cols(k, h * hd, hd)?,
                g.tape.slice_cols(v, h * hd, hd)?,
            )
        };
        let scores = g.tape.matmul_nt(qh, kh)?;
        let mut scores = g.tape.scale(scores, scale);
        if let Some(m) = mask_var {
            scores = g.tape.add(scores, m)?;
        }
        let p = g.tape.softmax(scores, 1)?;
        weights.push(p);
        heads.push(g.tape.matmul(p, vh)?);
    }
    let joined = if heads.len() == 1 {
        heads[0]
    } else {
        g.tape.concat_cols(&heads)?
    };
    let output = g.tape.matmul(joined, wo)?;
    Ok(AttentionOutput { output, weights })
}

/// `d → 4d → d` with GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d: usize) -> Self {
        Self {
            fc1: Linear::declare(sink, &format!("{name}.fc1"), d, MLP_EXPANSION * d, true),
            fc2: Linear::declare(sink, &format!("{name}.fc2"), MLP_EXPANSION * d, d, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let h = g.tape.gelu(h);
        self.fc2.forward(g, h)
    }
}

/// Cross-attention sublayer of a decoder block, with its own pre-norm.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub norm: LayerNormParams,
    pub attention: AttentionParams,
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub norm1: LayerNormParams,
    pub attention: AttentionParams,
    pub cross_attention: Option<CrossAttention>,
    pub norm2: LayerNormParams,
    pub mlp: Mlp,
}

impl BlockParams {
    pub fn declare(sink: &mut dyn ParamSink, name: &str, d: usize, n_heads: usize, with_cross: bool) -> Self {
        let norm1 = LayerNormParams::declare(sink, &format!("{name}.norm1"), d);
        let attention = AttentionParams::declare(sink, &format!("{name}.attn"), d, n_heads);
        let cross_attention = with_cross.then(|| CrossAttention {
            norm: LayerNormParams::declare(sink, &format!("{name}.norm_cross"), d),
            attention: AttentionParams::declare(sink, &format!("{name}.cross_attn"), d, n_heads),
        });
        Self {
            norm1,
            attention,
            cross_attention,
            norm2: LayerNormParams::declare(sink, &format!("{name}.norm2"), d),
            mlp: Mlp::declare(sink, &format!("{name}.mlp"), d),
        }
    }
}

fn mlp_sublayer(g: &mut Graph, params: &BlockParams, x: Var) -> Result<Var> {
    let h = params.norm2.forward(g, x)?;
    let h = params.mlp.forward(g, h)?;
    Ok(g.tape.add(x, h)?)
}

/// `x + attn(norm(x))`, then `+ mlp(norm(·))`.
pub fn encoder_block(g: &mut Graph, params: &BlockParams, x: Var, mask: Option<&AttentionMask>) -> Result<Var> {
    if params.cross_attention.is_some() {
        return Err(Error::Model("encoder block configured with cross-attention".into()));
    }
    let h = params.norm1.forward(g, x)?;
    let a = multi_head_attention(g, &params.attention, h, h, mask)?;
    let x = g.tape.add(x, a)?;
    mlp_sublayer(g, params, x)
}

/// Causal self-attention, cross-attention over `memory`, then the MLP.
/// `memory_valid` flags which memory rows may be attended.
pub fn decoder_block(
    g: &mut Graph,
    params: &BlockParams,
    x: Var,
    memory: Var,
    memory_valid: Option<&[bool]>,
) -> Result<Var> {
    let cross = params
        .cross_attention
        .as_ref()
        .ok_or_else(|| Error::Model("decoder block is missing cross-attention".into()))?;
    let lt = g.value(x).dims2()?.0;
    let h = params.norm1.forward(g, x)?;
    let a = multi_head_attention(g, &params.attention, h, h, Some(&AttentionMask::causal(lt)))?;
    let x = g.tape.add(x, a)?;
    let h = cross.norm.forward(g, x)?;
    let mem_mask = memory_valid.map(|valid| AttentionMask::key_padding(lt, valid));
    let c = multi_head_attention(g, &cross.attention, h, memory, mem_mask.as_ref())?;
    let x = g.tape.add(x, c)?;
    mlp_sublayer(g, params, x)
}

/// Zeroes every attention output projection and second MLP layer in `blocks`,
/// turning each block into the identity through its residual paths.
pub fn zero_output_projections(store: &mut ParamStore, blocks: &[BlockParams]) {
    for b in blocks {
        store.get_mut(b.attention.w_o).data_mut().fill(0.0);
        if let Some(c) = &b.cross_attention {
            store.get_mut(c.attention.w_o).data_mut().fill(0.0);
        }
        store.get_mut(b.mlp.fc2.w).data_mut().fill(0.0);
        if let Some(bias) = b.mlp.fc2.b {
            store.get_mut(bias).data_mut().fill(0.0);
        }
    }
}
