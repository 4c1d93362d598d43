//! Post-training quantization at several precisions, per-layer sensitivity,
//! greedy mixed-precision assignment, sweep grids and CSV reports.

mod report;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use report::{aggregate, read_report, read_report_file, write_report, write_report_file, AggregateRow, ReportRow, RowStatus};

use crate::error::{Error, Result};
use crate::qat::{OutlierMethod, QatConfig, QatMethod};
use crate::quant::{dequantize, quantize, Granularity, QuantSpec};
use crate::seq2seq::{generate_dataset, Dataset, DenseLayer, Model, ModelConfig, QatPlan, TaskSpec};
use crate::train::{evaluate_model, max_decode_len, train, Checkpoint, CheckpointFile, TensorEntry, TrainConfig};

/// Inference precision of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    Float,
    Int8,
    Int4,
}

impl Precision {
    pub fn bits(self) -> Option<u32> {
        match self {
            Precision::Float => None,
            Precision::Int8 => Some(8),
            Precision::Int4 => Some(4),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Float => "float",
            Precision::Int8 => "int8",
            Precision::Int4 => "int4",
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float" => Ok(Precision::Float),
            "int8" => Ok(Precision::Int8),
            "int4" => Ok(Precision::Int4),
            other => Err(Error::Parameter(format!("unknown precision {other:?}"))),
        }
    }
}

/// Precision label of a whole evaluated model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPrecision {
    Float,
    Int8,
    Int4,
    Mixed,
}

impl EvalPrecision {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalPrecision::Float => "float",
            EvalPrecision::Int8 => "int8",
            EvalPrecision::Int4 => "int4",
            EvalPrecision::Mixed => "mixed",
        }
    }
}

impl From<Precision> for EvalPrecision {
    fn from(p: Precision) -> Self {
        match p {
            Precision::Float => EvalPrecision::Float,
            Precision::Int8 => EvalPrecision::Int8,
            Precision::Int4 => EvalPrecision::Int4,
        }
    }
}

impl fmt::Display for EvalPrecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalPrecision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mixed" => Ok(EvalPrecision::Mixed),
            other => other.parse::<Precision>().map(Into::into),
        }
    }
}

/// Precision of every quantizable layer, plus the scale granularity used for
/// the integer ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrecisionAssignment {
    pub granularity: Granularity,
    pub layers: BTreeMap<String, Precision>,
}

impl PrecisionAssignment {
    /// Every layer in the model's quantization scope at `precision`.
    pub fn uniform(config: &ModelConfig, precision: Precision, granularity: Granularity) -> Self {
        PrecisionAssignment {
            granularity,
            layers: config.quantizable_layers().into_iter().map(|l| (l.name, precision)).collect(),
        }
    }

    pub fn label(&self) -> EvalPrecision {
        let mut it = self.layers.values();
        match it.next() {
            None => EvalPrecision::Float,
            Some(&first) if it.all(|&p| p == first) => first.into(),
            Some(_) => EvalPrecision::Mixed,
        }
    }

    /// Every layer in scope assigned exactly once and nothing else.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        let scope = config.quantizable_layers();
        if let Some(name) = self.layers.keys().find(|n| !scope.iter().any(|l| &l.name == *n)) {
            return Err(Error::Config(format!("unknown or out-of-scope layer {name}")));
        }
        if let Some(l) = scope.iter().find(|l| !self.layers.contains_key(&l.name)) {
            return Err(Error::Config(format!("layer {} has no precision", l.name)));
        }
        Ok(())
    }
}

fn layer_spec(precision: Precision, granularity: Granularity) -> Option<QuantSpec> {
    precision.bits().map(|bit| QuantSpec { bit, granularity })
}

/// Replaces each assigned layer's weight with `dequantize(quantize(W))` using max-abs scales.
pub fn ptq_apply_model(model: &Model, assignment: &PrecisionAssignment) -> Result<Model> {
    assignment.check(&model.config)?;
    let mut out = model.clone();
    for (layer, &precision) in &assignment.layers {
        let Some(spec) = layer_spec(precision, assignment.granularity) else { continue };
        let name = format!("{layer}.weight");
        let w = out.params.require(&name)?;
        let fq = dequantize(&quantize(w, &spec)?);
        out.params.set(&name, fq)?;
    }
    Ok(out)
}

/// [`ptq_apply_model`] on the raw or EMA weights of a checkpoint.
pub fn ptq_apply(
    config: &ModelConfig,
    ckpt: &Checkpoint,
    assignment: &PrecisionAssignment,
    use_ema: bool,
) -> Result<Model> {
    ptq_apply_model(&crate::train::model_from_checkpoint(config, ckpt, use_ema)?, assignment)
}

/// Storage artifact: integer layers as quantized entries, everything else float.
/// Learnable-scale parameters are training state and are not exported.
pub fn export_quantized(model: &Model, assignment: &PrecisionAssignment, step: u64, digest: &str) -> Result<CheckpointFile> {
    assignment.check(&model.config)?;
    let mut params = Vec::new();
    for (name, t) in model.params.iter() {
        if name.ends_with(".lsc_scale") {
            continue;
        }
        let layer = name.strip_suffix(".weight");
        let spec = layer
            .and_then(|l| assignment.layers.get(l))
            .and_then(|&p| layer_spec(p, assignment.granularity));
        let entry = match spec {
            Some(spec) => TensorEntry::Quantized(quantize(t, &spec)?),
            None => TensorEntry::Float(t.clone()),
        };
        params.push((name.to_string(), entry));
    }
    Ok(CheckpointFile { step, config_digest: digest.to_string(), params, ema: Vec::new() })
}

/// Rebuilds an inference model from [`export_quantized`] output.
pub fn import_quantized(config: &ModelConfig, file: &CheckpointFile) -> Result<Model> {
    let template = Model::init(config.clone(), 0)?;
    let mut model = template.clone();
    for name in template.params.names() {
        let entry = file
            .params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, e)| e)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        let t = match entry {
            TensorEntry::Float(t) => t.clone(),
            TensorEntry::Quantized(q) => dequantize(q),
        };
        model.params.set(name, t)?;
    }
    Ok(model)
}

/// Bytes to store one layer at `precision`: packed integers plus 4-byte scales,
/// or 4 bytes per weight for float.
pub fn layer_bytes(layer: &DenseLayer, precision: Precision, granularity: Granularity) -> usize {
    let n = layer.numel();
    let scales = 4 * granularity.scale_count(layer.rows);
    match precision {
        Precision::Float => 4 * n,
        Precision::Int8 => n + scales,
        Precision::Int4 => n.div_ceil(2) + scales,
    }
}

/// Inference model size: assigned layers at their precision, every other
/// parameter as f32.
pub fn model_size_bytes(config: &ModelConfig, assignment: &PrecisionAssignment) -> Result<usize> {
    assignment.check(config)?;
    let template = Model::init(config.clone(), 0)?;
    let layers: BTreeMap<String, DenseLayer> =
        config.dense_layers().into_iter().map(|l| (l.weight_name(), l)).collect();
    let mut total = 0;
    for (name, t) in template.params.iter() {
        let assigned = layers.get(name).and_then(|l| assignment.layers.get(&l.name).map(|&p| (l, p)));
        total += match assigned {
            Some((l, p)) => layer_bytes(l, p, assignment.granularity),
            None => 4 * t.len(),
        };
    }
    Ok(total)
}

/// Bytes of the quantizable layers only.
pub fn quantized_layer_bytes(config: &ModelConfig, assignment: &PrecisionAssignment) -> usize {
    config
        .quantizable_layers()
        .iter()
        .map(|l| layer_bytes(l, assignment.layers.get(&l.name).copied().unwrap_or(Precision::Float), assignment.granularity))
        .sum()
}

/// Identifies the training run a row came from.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub outlier_method: OutlierMethod,
    pub qat_method: QatMethod,
    pub train_bit: u32,
    pub granularity: Granularity,
    pub seed: u64,
}

impl RunLabel {
    pub fn new(cfg: &QatConfig, seed: u64) -> Self {
        RunLabel {
            outlier_method: cfg.outlier_method,
            qat_method: cfg.qat_method,
            train_bit: cfg.bit,
            granularity: cfg.granularity,
            seed,
        }
    }
}

/// Quantizes `model` per `assignment`, decodes `data` greedily and reports
/// sequence error rate, loss and size. No noise is injected.
pub fn evaluate(model: &Model, data: &Dataset, assignment: &PrecisionAssignment, label: &RunLabel) -> Result<ReportRow> {
    let q = ptq_apply_model(model, assignment)?;
    let (loss, err) = evaluate_model(&q, &data.examples, max_decode_len(&data.examples))?;
    Ok(ReportRow {
        outlier_method: label.outlier_method,
        qat_method: label.qat_method,
        train_bit: label.train_bit,
        eval_precision: assignment.label(),
        granularity: assignment.granularity,
        seed: label.seed,
        sequence_error_rate: Some(err),
        loss: Some(loss),
        model_size_bytes: model_size_bytes(&model.config, assignment)?,
        status: RowStatus::Ok,
    })
}

/// Metric change when one layer alone is quantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSensitivity {
    pub layer: String,
    pub error_delta: f32,
    pub loss_delta: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub bit: u32,
    pub granularity: Granularity,
    pub float_error: f32,
    pub float_loss: f32,
    pub layers: Vec<LayerSensitivity>,
    /// Deltas with every layer quantized at once; not the sum of the per-layer deltas.
    pub whole_model_error_delta: f32,
    pub whole_model_loss_delta: f32,
}

impl SensitivityReport {
    /// Ranking score: error-rate delta, with the loss delta breaking ties.
    pub fn scores(&self) -> BTreeMap<String, (f32, f32)> {
        self.layers.iter().map(|l| (l.layer.clone(), (l.error_delta, l.loss_delta))).collect()
    }
}

/// Quantizes each layer in scope alone at `bit` and measures the degradation
/// against the float model on `data`.
pub fn layer_sensitivity(model: &Model, data: &Dataset, bit: u32, granularity: Granularity) -> Result<SensitivityReport> {
    let precision = match bit {
        8 => Precision::Int8,
        4 => Precision::Int4,
        b => return Err(Error::Parameter(format!("sensitivity supports 4 or 8 bits, got {b}"))),
    };
    let max_len = max_decode_len(&data.examples);
    let (float_loss, float_error) = evaluate_model(model, &data.examples, max_len)?;
    let float = PrecisionAssignment::uniform(&model.config, Precision::Float, granularity);
    let layers = model
        .config
        .quantizable_layers()
        .par_iter()
        .map(|l| {
            let mut a = float.clone();
            a.layers.insert(l.name.clone(), precision);
            let (loss, err) = evaluate_model(&ptq_apply_model(model, &a)?, &data.examples, max_len)?;
            Ok(LayerSensitivity { layer: l.name.clone(), error_delta: err - float_error, loss_delta: loss - float_loss })
        })
        .collect::<Result<Vec<_>>>()?;
    let all = PrecisionAssignment::uniform(&model.config, precision, granularity);
    let (loss, err) = evaluate_model(&ptq_apply_model(model, &all)?, &data.examples, max_len)?;
    Ok(SensitivityReport {
        bit,
        granularity,
        float_error,
        float_loss,
        layers,
        whole_model_error_delta: err - float_error,
        whole_model_loss_delta: loss - float_loss,
    })
}

/// Greedy bit allocation: start with every layer at int4 and promote layers to
/// int8 in descending sensitivity while the quantizable-layer bytes stay within
/// `budget_bytes`. A layer whose promotion does not fit is skipped and smaller
/// layers further down the ranking are still considered. Ties in sensitivity
/// are broken by the second score component, then by layer name.
pub fn assign_mixed_precision(
    config: &ModelConfig,
    sensitivities: &BTreeMap<String, (f32, f32)>,
    budget_bytes: usize,
    granularity: Granularity,
) -> Result<PrecisionAssignment> {
    let mut assignment = PrecisionAssignment::uniform(config, Precision::Int4, granularity);
    if let Some(name) = sensitivities.keys().find(|n| !assignment.layers.contains_key(*n)) {
        return Err(Error::Config(format!("sensitivity for unknown layer {name}")));
    }
    let floor = quantized_layer_bytes(config, &assignment);
    if budget_bytes < floor {
        return Err(Error::Config(format!("budget {budget_bytes} bytes below the all-int4 size {floor}")));
    }
    let layers: BTreeMap<String, DenseLayer> = config.quantizable_layers().into_iter().map(|l| (l.name.clone(), l)).collect();
    let mut ranked: Vec<(&String, (f32, f32))> = sensitivities.iter().map(|(n, &s)| (n, s)).collect();
    ranked.sort_by(|a, b| {
        b.1 .0
            .total_cmp(&a.1 .0)
            .then(b.1 .1.total_cmp(&a.1 .1))
            .then_with(|| a.0.cmp(b.0))
    });
    let mut used = floor;
    for (name, _) in ranked {
        let l = &layers[name];
        let extra = layer_bytes(l, Precision::Int8, granularity) - layer_bytes(l, Precision::Int4, granularity);
        if used + extra <= budget_bytes {
            used += extra;
            assignment.layers.insert(name.clone(), Precision::Int8);
        }
    }
    Ok(assignment)
}

/// One grid cell: a QAT configuration trained once per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepCell {
    pub qat: QatConfig,
    pub seeds: Vec<u64>,
}

/// Shared settings for every cell of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSetup {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub precisions: Vec<Precision>,
    /// Evaluate EMA weights rather than raw weights.
    pub use_ema: bool,
    /// Scale granularity for evaluating runs trained without QAT.
    pub float_run_granularity: Granularity,
}

/// A trained cell: the checkpoint (absent if training diverged) and its rows.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub qat: QatConfig,
    pub seed: u64,
    pub checkpoint: Option<Checkpoint>,
    pub rows: Vec<ReportRow>,
}

/// Eval granularity for a run trained with `cfg`.
pub fn eval_granularity(cfg: &QatConfig, setup: &SweepSetup) -> Granularity {
    if cfg.is_plain() {
        setup.float_run_granularity
    } else {
        cfg.granularity
    }
}

/// Trains one `(config, seed)` pair and evaluates it at every precision of the setup.
/// Model initialization and batch order both follow `seed`; the datasets do not.
pub fn run_cell(
    cfg: &QatConfig,
    seed: u64,
    setup: &SweepSetup,
    data: &(Dataset, Dataset),
    digest: &str,
) -> Result<CellOutcome> {
    let model = Model::init(setup.model.clone(), seed)?;
    let train_cfg = TrainConfig { seed, qat: QatPlan::uniform(cfg), ..setup.train.clone() };
    let label = RunLabel::new(cfg, seed);
    let granularity = eval_granularity(cfg, setup);
    let outcome = match train(&model, &data.0, &data.1, &train_cfg, digest) {
        Ok(o) => o,
        Err(Error::Divergence { .. }) => {
            let rows = setup
                .precisions
                .iter()
                .map(|&p| {
                    let a = PrecisionAssignment::uniform(&setup.model, p, granularity);
                    Ok(ReportRow::failed(&label, p.into(), granularity, model_size_bytes(&setup.model, &a)?))
                })
                .collect::<Result<_>>()?;
            return Ok(CellOutcome { qat: cfg.clone(), seed, checkpoint: None, rows });
        }
        Err(e) => return Err(e),
    };
    let trained = crate::train::model_from_checkpoint(&setup.model, &outcome.checkpoint, setup.use_ema)?;
    let rows = setup
        .precisions
        .iter()
        .map(|&p| evaluate(&trained, &data.1, &PrecisionAssignment::uniform(&setup.model, p, granularity), &label))
        .collect::<Result<_>>()?;
    Ok(CellOutcome { qat: cfg.clone(), seed, checkpoint: Some(outcome.checkpoint), rows })
}

/// Trains every `(config, seed)` pair in parallel and returns all cells in grid order.
pub fn run_sweep_cells(grid: &[SweepCell], setup: &SweepSetup, digest: &str) -> Result<Vec<CellOutcome>> {
    if grid.is_empty() || grid.iter().all(|c| c.seeds.is_empty()) {
        return Err(Error::Config("empty sweep grid".into()));
    }
    if setup.precisions.is_empty() {
        return Err(Error::Config("no evaluation precisions".into()));
    }
    grid.iter().try_for_each(|c| c.qat.validate())?;
    setup.train.validate()?;
    let data = generate_dataset(&setup.task)?;
    let jobs: Vec<(&QatConfig, u64)> = grid.iter().flat_map(|c| c.seeds.iter().map(move |&s| (&c.qat, s))).collect();
    jobs.par_iter().map(|(cfg, seed)| run_cell(cfg, *seed, setup, &data, digest)).collect()
}

/// Report rows of a sweep, sorted by (outlier, qat, precision, seed, granularity, bit).
pub fn run_sweep(grid: &[SweepCell], setup: &SweepSetup, digest: &str) -> Result<Vec<ReportRow>> {
    let mut rows: Vec<ReportRow> = run_sweep_cells(grid, setup, digest)?.into_iter().flat_map(|c| c.rows).collect();
    report::sort_rows(&mut rows);
    Ok(rows)
}
