//! Adam with the inverse-square-root warmup schedule, EMA shadow weights, the
//! training loop, metric traces and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, load_file, save_checkpoint, save_file,
    Checkpoint, CheckpointFile, TensorEntry, FORMAT_VERSION, MAGIC,
};

use crate::error::{Error, Result};
use crate::qat::clamp_scales;
use crate::rng::{stream_id, NoiseKey};
use crate::seq2seq::{
    greedy_decode_batch, loss_and_grads, sequence_error_rate, Batch, Dataset, Example, Model, ParamStore, QatPlan,
    StepSeed,
};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub ema_decay: f64,
    pub seed: u64,
    /// QAT configuration per layer group; empty means plain training.
    pub qat: QatPlan,
    /// Evaluate every this many steps (0 disables periodic evaluation).
    pub eval_every: usize,
    /// Cap on eval examples used by periodic evaluation (0 means all).
    pub eval_examples: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 64,
            base_lr: 1.0,
            warmup_steps: 500,
            ema_decay: 0.999,
            seed: 0,
            qat: QatPlan::none(),
            eval_every: 500,
            eval_examples: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps < 1 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay {} outside [0, 1)", self.ema_decay)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr {} must be positive", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam betas must lie in [0, 1) and eps must be positive".into()));
        }
        if matches!(self.clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        self.qat.validate()
    }
}

/// `base · d_model^-0.5 · min(step^-0.5, step · warmup^-1.5)`.
pub fn lr_schedule(step: usize, base_lr: f64, warmup: usize, d_model: usize) -> Result<f64> {
    if step < 1 {
        return Err(Error::Parameter(format!("learning-rate step {step} < 1")));
    }
    if warmup < 1 || d_model < 1 {
        return Err(Error::Parameter("warmup and d_model must be positive".into()));
    }
    let s = step as f64;
    Ok(base_lr * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { beta1: 0.9, beta2: 0.98, eps: 1e-9 }
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamState {
            t: 0,
            m: params.iter().map(Tensor::zeros_like).collect(),
            v: params.iter().map(Tensor::zeros_like).collect(),
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut AdamState, lr: f64, hp: AdamParams) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(i) = (0..params.len()).find(|&i| params[i].shape() != grads[i].shape() || params[i].shape() != state.m[i].shape()) {
        return Err(Error::Contract(format!(
            "adam: parameter {i} has shape {:?}, gradient {:?}",
            params[i].shape(),
            grads[i].shape()
        )));
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (hp.beta1 as f32, hp.beta2 as f32);
    let step = (lr / c1) as f32;
    let (inv_c2, eps) = (1.0 / c2, hp.eps);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            let gi = g.data()[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let denom = ((v[i] as f64 * inv_c2).sqrt() + eps) as f32;
            p[i] -= step * m[i] / denom;
        }
    }
    Ok(())
}

/// `shadow ← decay · shadow + (1 − decay) · params`.
pub fn ema_update(shadow: &mut [Tensor], params: &[Tensor], decay: f64) -> Result<()> {
    if shadow.len() != params.len() || shadow.iter().zip(params).any(|(s, p)| s.shape() != p.shape()) {
        return Err(Error::Contract("ema: shadow and parameters disagree".into()));
    }
    let d = decay as f32;
    let keep = (1.0 - decay) as f32;
    for (s, p) in shadow.iter_mut().zip(params) {
        for (sv, &pv) in s.data_mut().iter_mut().zip(p.data()) {
            *sv = d * *sv + keep * pv;
        }
    }
    Ok(())
}

/// Scales every gradient so the global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = (max_norm / norm) as f32;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= k));
    }
    norm
}

/// Indices of the examples drawn for `step`.
pub fn batch_indices(seed: u64, step: u64, batch_size: usize, n: usize) -> Vec<usize> {
    let mut rng = NoiseKey::new(seed, stream_id("train.batch"), step).rng();
    (0..batch_size).map(|_| rng.random_range(0..n)).collect()
}

/// Which copy of the weights a metric was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    EvalRaw,
    EvalEma,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::EvalRaw => "eval_raw",
            Split::EvalEma => "eval_ema",
        }
    }
}

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub split: Split,
    pub loss: f32,
    /// Empty for training rows.
    pub sequence_error_rate: Option<f32>,
    pub precision: String,
}

pub fn write_trace(rows: &[TraceRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["step", "split", "loss", "sequence_error_rate", "precision"])?;
    for r in rows {
        let ser = r.sequence_error_rate.map(|e| format!("{e:.8e}")).unwrap_or_default();
        w.write_record([r.step.to_string(), r.split.as_str().into(), format!("{:.8e}", r.loss), ser, r.precision.clone()])?;
    }
    w.flush().map_err(|e| Error::io("<trace>", e))?;
    Ok(())
}

pub fn write_trace_file(rows: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_trace(rows, std::io::BufWriter::new(file))
}

/// Teacher-forced loss and greedy-decoding error rate of `model` on `data`.
pub fn evaluate_model(model: &Model, data: &[Example], max_len: usize) -> Result<(f32, f32)> {
    const CHUNK: usize = 256;
    if data.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss_sum = 0.0f64;
    let mut tokens = 0usize;
    let mut predictions = Vec::with_capacity(data.len());
    let plan = QatPlan::none();
    for chunk in data.chunks(CHUNK) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let batch = Batch::from_examples(&refs)?;
        let n = batch.target_mask.iter().filter(|&&m| m).count();
        let loss = crate::seq2seq::forward_loss(model, &batch, &plan, StepSeed::new(0, 0))?;
        loss_sum += loss as f64 * n as f64;
        tokens += n;
        let sources: Vec<Vec<u32>> = chunk.iter().map(|e| e.source.clone()).collect();
        predictions.extend(greedy_decode_batch(model, &sources, max_len)?);
    }
    let targets: Vec<Vec<u32>> = data.iter().map(|e| e.target.clone()).collect();
    Ok(((loss_sum / tokens as f64) as f32, sequence_error_rate(&predictions, &targets)?))
}

/// Decoding budget for a dataset: the longest target plus one.
pub fn max_decode_len(data: &[Example]) -> usize {
    data.iter().map(|e| e.target.len()).max().unwrap_or(0) + 1
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
}

/// Trains `model` in place of a fresh copy and returns the final checkpoint.
///
/// Each step draws a batch keyed by `(seed, step)`, computes the loss with one
/// noise sample per QAT layer, applies Adam at the scheduled rate, clamps any
/// learnable scales, and updates the EMA shadow. A non-finite loss aborts with
/// [`Error::Divergence`].
pub fn train(model: &Model, train_set: &Dataset, eval_set: &Dataset, cfg: &TrainConfig, config_digest: &str) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.steps > 0 && train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    train_set.check_vocab(model.config.vocab_size)?;
    eval_set.check_vocab(model.config.vocab_size)?;
    let mut model = model.clone();
    model.ensure_lsc_params(&cfg.qat)?;
    let lsc_slots: Vec<usize> =
        (0..model.params.len()).filter(|&i| model.params.names()[i].ends_with(".lsc_scale")).collect();

    let mut ema = model.params.clone();
    let mut adam = AdamState::new(model.params.tensors());
    let hp = AdamParams { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
    let eval_data: &[Example] = match cfg.eval_examples {
        0 => &eval_set.examples,
        n => &eval_set.examples[..n.min(eval_set.len())],
    };
    let max_len = max_decode_len(eval_data);
    let mut trace = Vec::new();

    for step in 1..=cfg.steps {
        let idx = batch_indices(cfg.seed, step as u64, cfg.batch_size, train_set.len());
        let examples: Vec<&Example> = idx.iter().map(|&i| &train_set.examples[i]).collect();
        let batch = Batch::from_examples(&examples)?;
        let (loss, mut grads) = loss_and_grads(&model, &batch, &cfg.qat, StepSeed::new(cfg.seed, step as u64))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Divergence { step, loss });
        }
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        let lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps, model.config.d_model)?;
        adam_step(model.params.tensors_mut(), &grads, &mut adam, lr, hp)?;
        for &i in &lsc_slots {
            clamp_scales(&mut model.params.tensors_mut()[i]);
        }
        ema_update(ema.tensors_mut(), model.params.tensors(), cfg.ema_decay)?;

        if cfg.eval_every > 0 && (step % cfg.eval_every == 0 || step == cfg.steps) {
            trace.push(TraceRow { step, split: Split::Train, loss, sequence_error_rate: None, precision: "float".into() });
            if !eval_data.is_empty() {
                for (split, params) in [(Split::EvalRaw, &model.params), (Split::EvalEma, &ema)] {
                    let m = Model { config: model.config.clone(), params: params.clone() };
                    let (l, e) = evaluate_model(&m, eval_data, max_len)?;
                    trace.push(TraceRow { step, split, loss: l, sequence_error_rate: Some(e), precision: "float".into() });
                }
            }
        }
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            step: cfg.steps as u64,
            config_digest: config_digest.to_string(),
            params: model.params,
            ema,
        },
        trace,
    })
}

/// Rebuilds a model from checkpoint tensors, choosing raw or EMA weights.
pub fn model_from_checkpoint(config: &crate::seq2seq::ModelConfig, ckpt: &Checkpoint, use_ema: bool) -> Result<Model> {
    let template = Model::init(config.clone(), 0)?;
    let source: &ParamStore = if use_ema { &ckpt.ema } else { &ckpt.params };
    for name in template.params.names() {
        let t = source.require(name)?;
        let expected = template.params.get(name).expect("template name").shape();
        if t.shape() != expected {
            return Err(Error::dim("checkpoint", format!("{name}: {:?} vs model {:?}", t.shape(), expected)));
        }
    }
    Ok(Model { config: config.clone(), params: source.clone() })
}
