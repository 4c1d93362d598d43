use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use super::data::{Batch, BOS, EOS, PAD};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::qat::{qat_weight, LscParams, OutlierMethod, QatConfig};
use crate::rng::{stream_id, NoiseKey};
use crate::tensor::Tensor;

const LN_EPS: f32 = 1e-5;
const MASKED: f32 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantizeScope {
    EncoderOnly,
    AllDense,
}

impl QuantizeScope {
    pub fn includes(self, group: LayerGroup) -> bool {
        match self {
            QuantizeScope::EncoderOnly => group == LayerGroup::Encoder,
            QuantizeScope::AllDense => true,
        }
    }
}

/// Which part of the network a weight matrix belongs to. The output
/// projection counts as part of the embedding group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerGroup {
    Encoder,
    Decoder,
    Embedding,
}

impl LayerGroup {
    pub const ALL: [LayerGroup; 3] = [LayerGroup::Encoder, LayerGroup::Decoder, LayerGroup::Embedding];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerGroup::Encoder => "encoder",
            LayerGroup::Decoder => "decoder",
            LayerGroup::Embedding => "embedding",
        }
    }
}

impl fmt::Display for LayerGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        LayerGroup::ALL
            .into_iter()
            .find(|g| g.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown layer group {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub quantize_scope: QuantizeScope,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab_size: 32,
            quantize_scope: QuantizeScope::EncoderOnly,
        }
    }
}

/// A weight matrix `[rows, cols]` that may be quantized; rows are output channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseLayer {
    pub name: String,
    pub group: LayerGroup,
    pub rows: usize,
    pub cols: usize,
}

impl DenseLayer {
    pub fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

pub fn lsc_param_name(layer: &str) -> String {
    format!("{layer}.lsc_scale")
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        Ok(())
    }

    /// Every weight matrix, in parameter order.
    pub fn dense_layers(&self) -> Vec<DenseLayer> {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let layer = |name: String, group, rows, cols| DenseLayer { name, group, rows, cols };
        let mut out = vec![
            layer("emb.src".into(), LayerGroup::Embedding, v, d),
            layer("emb.tgt".into(), LayerGroup::Embedding, v, d),
        ];
        for i in 0..self.n_enc_layers {
            for p in ["q", "k", "v", "o"] {
                out.push(layer(format!("enc.{i}.attn.{p}"), LayerGroup::Encoder, d, d));
            }
            out.push(layer(format!("enc.{i}.ff1"), LayerGroup::Encoder, f, d));
            out.push(layer(format!("enc.{i}.ff2"), LayerGroup::Encoder, d, f));
        }
        for i in 0..self.n_dec_layers {
            for block in ["self", "cross"] {
                for p in ["q", "k", "v", "o"] {
                    out.push(layer(format!("dec.{i}.{block}.{p}"), LayerGroup::Decoder, d, d));
                }
            }
            out.push(layer(format!("dec.{i}.ff1"), LayerGroup::Decoder, f, d));
            out.push(layer(format!("dec.{i}.ff2"), LayerGroup::Decoder, d, f));
        }
        out.push(layer("out".into(), LayerGroup::Embedding, v, d));
        out
    }

    /// Weight matrices inside `quantize_scope`.
    pub fn quantizable_layers(&self) -> Vec<DenseLayer> {
        self.dense_layers().into_iter().filter(|l| self.quantize_scope.includes(l.group)).collect()
    }

    fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = Vec::new();
        let norm = |out: &mut Vec<(String, Vec<usize>)>, name: String| {
            out.push((format!("{name}.gain"), vec![d]));
            out.push((format!("{name}.bias"), vec![d]));
        };
        for l in self.dense_layers() {
            out.push((l.weight_name(), vec![l.rows, l.cols]));
            if !l.name.starts_with("emb.") {
                out.push((format!("{}.bias", l.name), vec![l.rows]));
            }
        }
        for i in 0..self.n_enc_layers {
            norm(&mut out, format!("enc.{i}.ln1"));
            norm(&mut out, format!("enc.{i}.ln2"));
        }
        norm(&mut out, "enc.ln".into());
        for i in 0..self.n_dec_layers {
            norm(&mut out, format!("dec.{i}.ln1"));
            norm(&mut out, format!("dec.{i}.ln2"));
            norm(&mut out, format!("dec.{i}.ln3"));
        }
        norm(&mut out, "dec.ln".into());
        out
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Replaces an existing tensor, keeping its position.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self.get_mut(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::dim("ParamStore::set", format!("{name}: {:?} vs {:?}", slot.shape(), tensor.shape())));
        }
        *slot = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.names == other.names && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.bit_eq(b))
    }
}

impl FromIterator<(String, Tensor)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        let mut store = ParamStore::new();
        for (name, t) in iter {
            store.insert(name, t).expect("duplicate parameter name");
        }
        store
    }
}

/// QAT configuration per layer group. Groups outside the model's
/// `quantize_scope` are ignored.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QatPlan {
    pub groups: BTreeMap<LayerGroup, QatConfig>,
}

impl QatPlan {
    pub fn none() -> Self {
        Self::default()
    }

    /// The same configuration for every group.
    pub fn uniform(cfg: &QatConfig) -> Self {
        QatPlan { groups: LayerGroup::ALL.into_iter().map(|g| (g, cfg.clone())).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        self.groups.values().try_for_each(QatConfig::validate)
    }

    /// Configuration applied to `layer` during training, if any.
    pub fn for_layer(&self, scope: QuantizeScope, layer: &DenseLayer) -> Option<&QatConfig> {
        if !scope.includes(layer.group) {
            return None;
        }
        self.groups.get(&layer.group).filter(|c| !c.is_plain())
    }
}

/// Identifies one training step's noise draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSeed {
    pub seed: u64,
    pub step: u64,
}

impl StepSeed {
    pub fn new(seed: u64, step: u64) -> Self {
        Self { seed, step }
    }

    pub fn layer_key(self, layer: &str) -> NoiseKey {
        NoiseKey::new(self.seed, stream_id(layer), self.step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialization from `seed`: Xavier-uniform weights,
    /// `N(0, 1/d_model)` embeddings, zero biases, unit layer-norm gains.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape) in config.param_shapes() {
            let n: usize = shape.iter().product();
            let mut rng = NoiseKey::new(seed, stream_id(&name), 0).rng();
            let data: Vec<f32> = if name.ends_with(".gain") {
                vec![1.0; n]
            } else if name.ends_with(".bias") {
                vec![0.0; n]
            } else if name.starts_with("emb.") {
                let dist = Normal::new(0.0, (config.d_model as f32).powf(-0.5)).expect("positive std");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f32).sqrt();
                let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            };
            params.insert(name, Tensor::from_vec(shape, data))?;
        }
        Ok(Model { config, params })
    }

    /// Adds learnable scale parameters for every layer the plan trains with LSC.
    /// Existing scales are kept.
    pub fn ensure_lsc_params(&mut self, plan: &QatPlan) -> Result<()> {
        for layer in self.config.dense_layers() {
            let Some(cfg) = plan.for_layer(self.config.quantize_scope, &layer) else { continue };
            let name = lsc_param_name(&layer.name);
            if cfg.outlier_method == OutlierMethod::Lsc && self.params.get(&name).is_none() {
                let init = LscParams::init(self.params.require(&layer.weight_name())?, cfg);
                self.params.insert(name, init.scales)?;
            }
        }
        Ok(())
    }

    /// Parameters as tape leaves, in store order.
    pub fn bind<'t>(&self, tape: &'t Tape, tracked: bool) -> Vec<Var<'t>> {
        self.params.tensors().iter().map(|t| tape.leaf(t.clone(), tracked)).collect()
    }

    /// Teacher-forced loss of `batch` with parameters `vars` from [`Model::bind`].
    pub fn loss_var<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        batch: &Batch,
        plan: &QatPlan,
        step: StepSeed,
    ) -> Result<Var<'t>> {
        self.check_batch(batch)?;
        let net = Net::new(self, tape, vars, plan, Some(step))?;
        let memory = net.encode(&batch.source, &batch.source_mask, batch.batch_size, batch.src_len)?;
        let logits = net.decode_logits(
            memory,
            &batch.source_mask,
            &batch.decoder_input,
            batch.batch_size,
            batch.src_len,
            batch.tgt_len,
        )?;
        let targets: Vec<usize> = batch.decoder_output.iter().map(|&t| t as usize).collect();
        let weights: Vec<f32> = batch.target_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        logits.cross_entropy(&targets, &weights)
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let v = self.config.vocab_size;
        if batch.max_token() as usize >= v {
            return Err(Error::dim("forward_loss", format!("token {} outside vocabulary {v}", batch.max_token())));
        }
        let (b, s, t) = (batch.batch_size, batch.src_len, batch.tgt_len);
        if batch.source.len() != b * s
            || batch.source_mask.len() != b * s
            || batch.decoder_input.len() != b * t
            || batch.decoder_output.len() != b * t
            || batch.target_mask.len() != b * t
        {
            return Err(Error::dim("forward_loss", "batch buffers disagree with batch shape"));
        }
        Ok(())
    }
}

/// Mean cross-entropy over non-pad target tokens (no gradients recorded).
pub fn forward_loss(model: &Model, batch: &Batch, plan: &QatPlan, step: StepSeed) -> Result<f32> {
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    Ok(model.loss_var(&tape, &vars, batch, plan, step)?.value().item())
}

/// Loss and one gradient per parameter, in store order.
pub fn loss_and_grads(model: &Model, batch: &Batch, plan: &QatPlan, step: StepSeed) -> Result<(f32, Vec<Tensor>)> {
    let tape = Tape::new();
    let vars = model.bind(&tape, true);
    let loss = model.loss_var(&tape, &vars, batch, plan, step)?;
    let value = loss.value().item();
    let mut grads = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|&v| grads.remove(v).unwrap_or_else(|| Tensor::zeros_like(&v.value())))
        .collect();
    Ok((value, grads))
}

/// Greedy decoding of one source; the result excludes `EOS`.
pub fn greedy_decode(model: &Model, source: &[u32], max_len: usize) -> Result<Vec<u32>> {
    Ok(greedy_decode_batch(model, &[source.to_vec()], max_len)?.remove(0))
}

/// Greedy decoding of several sources at once. Each output stops at its first
/// `EOS` (excluded) or after `max_len` tokens.
pub fn greedy_decode_batch(model: &Model, sources: &[Vec<u32>], max_len: usize) -> Result<Vec<Vec<u32>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let v = model.config.vocab_size;
    if let Some(&bad) = sources.iter().flatten().find(|&&t| t as usize >= v) {
        return Err(Error::dim("greedy_decode", format!("token {bad} outside vocabulary {v}")));
    }
    let b = sources.len();
    let s = sources.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let mut src = vec![PAD; b * s];
    let mut src_mask = vec![false; b * s];
    for (i, seq) in sources.iter().enumerate() {
        src[i * s..i * s + seq.len()].copy_from_slice(seq);
        src_mask[i * s..i * s + seq.len()].iter_mut().for_each(|m| *m = true);
        if seq.is_empty() {
            // an all-masked row would attend uniformly to padding; keep one slot visible
            src_mask[i * s] = true;
        }
    }
    let tape = Tape::new();
    let vars = model.bind(&tape, false);
    let plan = QatPlan::none();
    let net = Net::new(model, &tape, &vars, &plan, None)?;
    let memory = net.encode(&src, &src_mask, b, s)?;

    let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); b];
    let mut done = vec![false; b];
    let mut prefix: Vec<Vec<u32>> = vec![vec![BOS]; b];
    for _ in 0..max_len {
        let t = prefix[0].len();
        let dec_in: Vec<u32> = prefix.iter().flatten().copied().collect();
        let logits = net.decode_logits(memory, &src_mask, &dec_in, b, s, t)?.value();
        for i in 0..b {
            let row = logits.row(i * t + t - 1);
            let next = argmax(row) as u32;
            prefix[i].push(if done[i] { PAD } else { next });
            if !done[i] {
                if next == EOS {
                    done[i] = true;
                } else {
                    outputs[i].push(next);
                }
            }
        }
        if done.iter().all(|&d| d) {
            break;
        }
    }
    Ok(outputs)
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Sinusoidal position table `[len, d]`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f32> {
    let mut out = vec![0.0; len * d];
    for t in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = t as f64 * rate;
            out[t * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// One forward pass worth of bound parameters.
struct Net<'a, 't> {
    model: &'a Model,
    tape: &'t Tape,
    vars: &'a [Var<'t>],
    plan: &'a QatPlan,
    step: Option<StepSeed>,
    layers: HashMap<String, DenseLayer>,
}

impl<'a, 't> Net<'a, 't> {
    fn new(
        model: &'a Model,
        tape: &'t Tape,
        vars: &'a [Var<'t>],
        plan: &'a QatPlan,
        step: Option<StepSeed>,
    ) -> Result<Self> {
        if vars.len() != model.params.len() {
            return Err(Error::Contract(format!("{} vars for {} parameters", vars.len(), model.params.len())));
        }
        plan.validate()?;
        let layers = model.config.dense_layers().into_iter().map(|l| (l.name.clone(), l)).collect();
        Ok(Net { model, tape, vars, plan, step, layers })
    }

    fn param(&self, name: &str) -> Result<Var<'t>> {
        let i = self.model.params.position(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        Ok(self.vars[i])
    }

    /// The weight as seen by the forward pass, with QAT applied when planned.
    fn weight(&self, name: &str) -> Result<Var<'t>> {
        let layer = &self.layers[name];
        let w = self.param(&layer.weight_name())?;
        let Some(cfg) = self.plan.for_layer(self.model.config.quantize_scope, layer) else { return Ok(w) };
        let step = self.step.ok_or_else(|| Error::Contract("QAT forward needs a step seed".into()))?;
        let lsc = if cfg.outlier_method == OutlierMethod::Lsc {
            Some(self.param(&lsc_param_name(name))?)
        } else {
            None
        };
        qat_weight(w, cfg, lsc, step.layer_key(name))
    }

    fn dense(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul_nt(self.weight(name)?)?.add_row(self.param(&format!("{name}.bias"))?))
    }

    fn norm(&self, name: &str, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(self.param(&format!("{name}.gain"))?, self.param(&format!("{name}.bias"))?, LN_EPS))
    }

    fn embed(&self, table: &str, ids: &[u32], batch: usize, len: usize) -> Result<Var<'t>> {
        let d = self.model.config.d_model;
        let ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let x = self.weight(table)?.embedding(&ids)?.mul_scalar((d as f32).sqrt());
        let pe = positional_encoding(len, d);
        let pos: Vec<f32> = (0..batch).flat_map(|_| pe.iter().copied()).collect();
        Ok(x.add(self.tape.constant(Tensor::matrix(batch * len, d, pos))))
    }

    fn attention(
        &self,
        prefix: &str,
        xq: Var<'t>,
        xkv: Var<'t>,
        shape: (usize, usize, usize),
        mask_bias: &Tensor,
    ) -> Result<Var<'t>> {
        let (b, tq, tk) = shape;
        let h = self.model.config.n_heads;
        let dh = self.model.config.d_model / h;
        let q = self.dense(&format!("{prefix}.q"), xq)?.split_heads(b, tq, h);
        let k = self.dense(&format!("{prefix}.k"), xkv)?.split_heads(b, tk, h);
        let v = self.dense(&format!("{prefix}.v"), xkv)?.split_heads(b, tk, h);
        let scores = q.bmm(k, true)?.mul_scalar(1.0 / (dh as f32).sqrt());
        let probs = scores.add(self.tape.constant(mask_bias.clone())).softmax();
        let ctx = probs.bmm(v, false)?.merge_heads(b, tq, h);
        self.dense(&format!("{prefix}.o"), ctx)
    }

    fn feed_forward(&self, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
        let hidden = self.dense(&format!("{prefix}.ff1"), x)?.relu();
        self.dense(&format!("{prefix}.ff2"), hidden)
    }

    /// Additive attention bias `[B*H, Tq, Tk]` from key padding and optional causality.
    fn mask_bias(&self, key_mask: &[bool], b: usize, tq: usize, tk: usize, causal: bool) -> Tensor {
        let h = self.model.config.n_heads;
        let mut bias = vec![0.0; b * h * tq * tk];
        for bi in 0..b {
            for hi in 0..h {
                let base = (bi * h + hi) * tq * tk;
                for q in 0..tq {
                    for k in 0..tk {
                        if !key_mask[bi * tk + k] || (causal && k > q) {
                            bias[base + q * tk + k] = MASKED;
                        }
                    }
                }
            }
        }
        Tensor::from_vec([b * h, tq, tk], bias)
    }

    fn encode(&self, src: &[u32], src_mask: &[bool], b: usize, s: usize) -> Result<Var<'t>> {
        let bias = self.mask_bias(src_mask, b, s, s, false);
        let mut x = self.embed("emb.src", src, b, s)?;
        for i in 0..self.model.config.n_enc_layers {
            let h = self.norm(&format!("enc.{i}.ln1"), x)?;
            x = x.add(self.attention(&format!("enc.{i}.attn"), h, h, (b, s, s), &bias)?);
            let h = self.norm(&format!("enc.{i}.ln2"), x)?;
            x = x.add(self.feed_forward(&format!("enc.{i}"), h)?);
        }
        self.norm("enc.ln", x)
    }

    fn decode_logits(
        &self,
        memory: Var<'t>,
        src_mask: &[bool],
        dec_in: &[u32],
        b: usize,
        s: usize,
        t: usize,
    ) -> Result<Var<'t>> {
        let self_bias = self.mask_bias(&vec![true; b * t], b, t, t, true);
        let cross_bias = self.mask_bias(src_mask, b, t, s, false);
        let mut y = self.embed("emb.tgt", dec_in, b, t)?;
        for i in 0..self.model.config.n_dec_layers {
            let h = self.norm(&format!("dec.{i}.ln1"), y)?;
            y = y.add(self.attention(&format!("dec.{i}.self"), h, h, (b, t, t), &self_bias)?);
            let h = self.norm(&format!("dec.{i}.ln2"), y)?;
            y = y.add(self.attention(&format!("dec.{i}.cross"), h, memory, (b, t, s), &cross_bias)?);
            let h = self.norm(&format!("dec.{i}.ln3"), y)?;
            y = y.add(self.feed_forward(&format!("dec.{i}"), h)?);
        }
        let y = self.norm("dec.ln", y)?;
        self.dense("out", y)
    }
}
