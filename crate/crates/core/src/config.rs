//! Experiment configuration documents.
//!
//! A config is a JSON object with the sections `task`, `model`, `train`,
//! `eval`, `grid` and `output_dir`. Every field has a default, unknown keys are
//! rejected, and `key.path=value` overrides are applied to the document before
//! it is parsed, so an override is checked exactly like a field in the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{Precision, SweepCell, SweepSetup};
use crate::quant::Granularity;
use crate::seq2seq::{ModelConfig, TaskSpec};
use crate::train::TrainConfig;

/// Name of the resolved config written into every output directory.
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub precisions: Vec<Precision>,
    pub use_ema: bool,
    /// Scale granularity used when the trained model had no QAT.
    pub granularity: Granularity,
    /// Bit width for per-layer sensitivity.
    pub sensitivity_bit: u32,
    /// Byte budget for mixed-precision assignment over the quantizable layers;
    /// `null` means halfway between all-int4 and all-int8.
    pub budget_bytes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            precisions: vec![Precision::Float, Precision::Int8, Precision::Int4],
            use_ema: true,
            granularity: Granularity::PerChannel,
            sensitivity_bit: 4,
            budget_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub grid: Vec<SweepCell>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            grid: Vec::new(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    /// Parses a document, applies `overrides` left to right, and validates.
    /// `fallback_seed` fills `train.seed` when neither the document nor an
    /// override sets it.
    pub fn resolve(document: Option<&str>, overrides: &[String], fallback_seed: Option<u64>) -> Result<Self> {
        let mut doc: Value = match document {
            Some(text) => serde_json::from_str(text)?,
            None => Value::Object(Default::default()),
        };
        if !doc.is_object() {
            return Err(Error::Config("config document must be a JSON object".into()));
        }
        if let Some(seed) = fallback_seed {
            if doc.pointer("/train/seed").is_none() {
                set_path(&mut doc, "train.seed", Value::from(seed))?;
            }
        }
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key.path=value")))?;
            set_path(&mut doc, path.trim(), parse_value(raw))?;
        }
        let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String], fallback_seed: Option<u64>) -> Result<Self> {
        let text = match path {
            Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
            None => None,
        };
        Self::resolve(text.as_deref(), overrides, fallback_seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.task.vocab_size != self.model.vocab_size {
            return Err(Error::Config(format!(
                "task.vocab_size {} differs from model.vocab_size {}",
                self.task.vocab_size, self.model.vocab_size
            )));
        }
        if ![4, 8].contains(&self.eval.sensitivity_bit) {
            return Err(Error::Config("eval.sensitivity_bit must be 4 or 8".into()));
        }
        self.grid.iter().try_for_each(|c| c.qat.validate())
    }

    /// Pretty JSON of every field, defaults included.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON form without `output_dir`, hex encoded,
    /// so the same experiment written to two places has one digest.
    pub fn digest(&self) -> String {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        if let Value::Object(map) = &mut doc {
            map.remove("output_dir");
        }
        let compact = serde_json::to_string(&doc).expect("config serializes");
        Sha256::digest(compact.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        std::fs::write(&path, self.to_json() + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn sweep_setup(&self) -> SweepSetup {
        SweepSetup {
            task: self.task.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            precisions: self.eval.precisions.clone(),
            use_ema: self.eval.use_ema,
            float_run_granularity: self.eval.granularity,
        }
    }
}

/// JSON if it parses as JSON, otherwise the raw text as a string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets a dotted path, creating intermediate objects; numeric segments index arrays.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("malformed key path {path:?}")));
    }
    let mut cur = doc;
    let segments: Vec<&str> = path.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize =
                    seg.parse().map_err(|_| Error::Config(format!("{path}: {seg:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("{path}: index {idx} out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path}: {seg:?} is inside a non-container value"))),
        };
    }
    unreachable!("loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qat::{OutlierMethod, QatMethod};
    use crate::seq2seq::{QuantizeScope, Task};

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::resolve(None, &[], None).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let again = ExperimentConfig::resolve(Some(&cfg.to_json()), &[], None).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.digest(), cfg.digest());
        assert_eq!(cfg.digest().len(), 64);
        let moved = ExperimentConfig { output_dir: "elsewhere".into(), ..cfg.clone() };
        assert_eq!(moved.digest(), cfg.digest());
    }

    #[test]
    fn overrides() {
        let cfg = ExperimentConfig::resolve(Some(r#"{"train": {"steps": 10}}"#), &["train.seed=7".into()], None).unwrap();
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.train.steps, 10);
        let mut expected = ExperimentConfig::default();
        expected.train.steps = 10;
        expected.train.seed = 7;
        assert_eq!(cfg, expected);
        assert_ne!(cfg.digest(), ExperimentConfig::default().digest());

        let sets = ["train.seed=1".to_string(), "train.seed=2".to_string(), "task.task=reverse".to_string()];
        let cfg = ExperimentConfig::resolve(None, &sets, None).unwrap();
        assert_eq!((cfg.train.seed, cfg.task.task), (2, Task::Reverse));

        let cfg = ExperimentConfig::resolve(None, &["model.quantize_scope=all_dense".into()], None).unwrap();
        assert_eq!(cfg.model.quantize_scope, QuantizeScope::AllDense);
    }

    #[test]
    fn qat_plan_and_grid_overrides() {
        let doc = r#"{"grid": [{"qat": {"qat_method": "pqn", "outlier_method": "norm"}, "seeds": [0, 1]}]}"#;
        let cfg = ExperimentConfig::resolve(Some(doc), &["grid.0.qat.granularity=per_tensor".into()], None).unwrap();
        assert_eq!(cfg.grid[0].qat.granularity, Granularity::PerTensor);
        assert_eq!(cfg.grid[0].qat.qat_method, QatMethod::Pqn);
        let cfg = ExperimentConfig::resolve(
            None,
            &[r#"train.qat.encoder={"qat_method":"ste","outlier_method":"lsc"}"#.into()],
            None,
        )
        .unwrap();
        let enc = &cfg.train.qat.groups[&crate::seq2seq::LayerGroup::Encoder];
        assert_eq!(enc.outlier_method, OutlierMethod::Lsc);
        assert!(ExperimentConfig::resolve(Some(doc), &["grid.3.seeds=[1]".into()], None).is_err());
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(ExperimentConfig::resolve(Some(r#"{"trian": {}}"#), &[], None), Err(Error::Config(_))));
        assert!(ExperimentConfig::resolve(None, &["train.stepz=3".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["train.seed".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["model.vocab_size=40".into()], None).is_err());
        assert!(ExperimentConfig::resolve(None, &["model.n_heads=5".into()], None).is_err());
        assert!(ExperimentConfig::resolve(Some("[1]"), &[], None).is_err());
    }

    #[test]
    fn fallback_seed_has_lowest_priority() {
        assert_eq!(ExperimentConfig::resolve(None, &[], Some(11)).unwrap().train.seed, 11);
        let file = r#"{"train": {"seed": 3}}"#;
        assert_eq!(ExperimentConfig::resolve(Some(file), &[], Some(11)).unwrap().train.seed, 3);
        assert_eq!(ExperimentConfig::resolve(None, &["train.seed=5".into()], Some(11)).unwrap().train.seed, 5);
    }

    #[test]
    fn resolved_file_reproduces_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::resolve(None, &["train.steps=3".into()], None).unwrap();
        let path = cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(ExperimentConfig::load(Some(&path), &[], Some(99)).unwrap(), cfg);
    }
}
