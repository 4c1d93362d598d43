use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_id, NoiseKey};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// First id available to task content.
pub const FIRST_CONTENT: u32 = 3;
/// Token for `+` in the addition task; digits occupy `3..=12`.
pub const PLUS: u32 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    Addition,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Copy => "copy",
            Task::Reverse => "reverse",
            Task::Addition => "addition",
        }
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "addition" => Ok(Task::Addition),
            other => Err(Error::Parameter(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub task: Task,
    pub vocab_size: usize,
    /// Maximum source length in tokens.
    pub seq_len: usize,
    /// Minimum source length for copy and reverse.
    pub min_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec { task: Task::Copy, vocab_size: 32, seq_len: 12, min_len: 1, n_train: 8000, n_eval: 1000, seed: 0 }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.seq_len < 1 {
            return Err(Error::Config("seq_len must be at least 1".into()));
        }
        if self.min_len < 1 || self.min_len > self.seq_len {
            return Err(Error::Config(format!("min_len {} outside 1..={}", self.min_len, self.seq_len)));
        }
        if self.task == Task::Addition {
            if self.vocab_size <= PLUS as usize {
                return Err(Error::Config(format!("addition needs vocab_size >= {}", PLUS + 1)));
            }
            if self.seq_len < 3 {
                return Err(Error::Config("addition needs seq_len >= 3".into()));
            }
        }
        Ok(())
    }

    /// Longest target a source can produce.
    pub fn max_target_len(&self) -> usize {
        match self.task {
            Task::Copy | Task::Reverse => self.seq_len,
            Task::Addition => self.addition_digits() + 1,
        }
    }

    fn addition_digits(&self) -> usize {
        ((self.seq_len - 1) / 2).min(9)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Example {
    pub fn for_task(task: Task, source: Vec<u32>) -> Result<Example> {
        let target = match task {
            Task::Copy => source.clone(),
            Task::Reverse => source.iter().rev().copied().collect(),
            Task::Addition => addition_target(&source)?,
        };
        Ok(Example { source, target })
    }
}

pub fn encode_number(n: u64) -> Vec<u32> {
    n.to_string().bytes().map(|b| FIRST_CONTENT + (b - b'0') as u32).collect()
}

fn decode_number(tokens: &[u32]) -> Option<u64> {
    if tokens.is_empty() || tokens.len() > 19 {
        return None;
    }
    tokens.iter().try_fold(0u64, |acc, &t| {
        let d = t.checked_sub(FIRST_CONTENT).filter(|&d| d < 10)?;
        Some(acc * 10 + d as u64)
    })
}

/// Digits of `a + b` for a source encoding `a + b`.
pub fn addition_target(source: &[u32]) -> Result<Vec<u32>> {
    let bad = || Error::Parameter(format!("not an addition source: {source:?}"));
    let plus = source.iter().position(|&t| t == PLUS).ok_or_else(bad)?;
    let a = decode_number(&source[..plus]).ok_or_else(bad)?;
    let b = decode_number(&source[plus + 1..]).ok_or_else(bad)?;
    Ok(encode_number(a + b))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn sources(&self) -> Vec<Vec<u32>> {
        self.examples.iter().map(|e| e.source.clone()).collect()
    }

    pub fn targets(&self) -> Vec<Vec<u32>> {
        self.examples.iter().map(|e| e.target.clone()).collect()
    }

    /// One JSON object per line: `{"source":[..],"target":[..]}`.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for e in &self.examples {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n").map_err(|e| Error::io("<dataset>", e))?;
        }
        Ok(())
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Dataset> {
        let mut examples = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<dataset>", e))?;
            if !line.trim().is_empty() {
                examples.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Dataset { examples })
    }

    pub fn check_vocab(&self, vocab_size: usize) -> Result<()> {
        let max = self.examples.iter().flat_map(|e| e.source.iter().chain(&e.target)).max();
        match max {
            Some(&m) if m as usize >= vocab_size => {
                Err(Error::Config(format!("token {m} outside vocabulary of {vocab_size}")))
            }
            _ => Ok(()),
        }
    }
}

/// Train and eval splits, each a pure function of `spec`.
pub fn generate_dataset(spec: &TaskSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let split = |name: &str, n: usize| -> Result<Dataset> {
        let stream = stream_id(name);
        let examples = (0..n)
            .map(|i| {
                let mut rng = NoiseKey::new(spec.seed, stream, i as u64).rng();
                Example::for_task(spec.task, sample_source(spec, &mut rng))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { examples })
    };
    Ok((split("data.train", spec.n_train)?, split("data.eval", spec.n_eval)?))
}

fn sample_source(spec: &TaskSpec, rng: &mut impl Rng) -> Vec<u32> {
    match spec.task {
        Task::Copy | Task::Reverse => {
            let len = rng.random_range(spec.min_len..=spec.seq_len);
            (0..len).map(|_| rng.random_range(FIRST_CONTENT..spec.vocab_size as u32)).collect()
        }
        Task::Addition => {
            let digits = spec.addition_digits();
            let a = sample_operand(digits, rng);
            let b = sample_operand(digits, rng);
            let mut source = encode_number(a);
            source.push(PLUS);
            source.extend(encode_number(b));
            source
        }
    }
}

fn sample_operand(max_digits: usize, rng: &mut impl Rng) -> u64 {
    let n = rng.random_range(1..=max_digits);
    rng.random_range(0..10u64.pow(n as u32))
}

/// A padded training batch.
///
/// `decoder_input` is `BOS` followed by the target and `decoder_output` is the
/// target followed by `EOS`; both are right-padded with `PAD`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub source: Vec<u32>,
    pub source_mask: Vec<bool>,
    pub decoder_input: Vec<u32>,
    pub decoder_output: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example]) -> Result<Batch> {
        if examples.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        if let Some(e) = examples.iter().find(|e| e.source.is_empty()) {
            return Err(Error::Contract(format!("empty source with target {:?}", e.target)));
        }
        let src_len = examples.iter().map(|e| e.source.len()).max().unwrap_or(0);
        let tgt_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let b = examples.len();
        let mut batch = Batch {
            batch_size: b,
            src_len,
            tgt_len,
            source: vec![PAD; b * src_len],
            source_mask: vec![false; b * src_len],
            decoder_input: vec![PAD; b * tgt_len],
            decoder_output: vec![PAD; b * tgt_len],
            target_mask: vec![false; b * tgt_len],
        };
        for (i, e) in examples.iter().enumerate() {
            for (j, &t) in e.source.iter().enumerate() {
                batch.source[i * src_len + j] = t;
                batch.source_mask[i * src_len + j] = true;
            }
            let row = i * tgt_len;
            batch.decoder_input[row] = BOS;
            for (j, &t) in e.target.iter().enumerate() {
                batch.decoder_input[row + j + 1] = t;
                batch.decoder_output[row + j] = t;
            }
            batch.decoder_output[row + e.target.len()] = EOS;
            for m in &mut batch.target_mask[row..row + e.target.len() + 1] {
                *m = true;
            }
        }
        Ok(batch)
    }

    pub fn max_token(&self) -> u32 {
        self.source.iter().chain(&self.decoder_input).chain(&self.decoder_output).copied().max().unwrap_or(0)
    }
}

/// Cuts a decoded sequence at its first `EOS`.
pub fn truncate_at_eos(tokens: &[u32]) -> &[u32] {
    match tokens.iter().position(|&t| t == EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    }
}

/// Fraction of sequences with any token mismatch after `EOS` truncation.
pub fn sequence_error_rate(predictions: &[Vec<u32>], targets: &[Vec<u32>]) -> Result<f32> {
    if predictions.len() != targets.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let wrong = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| truncate_at_eos(p) != truncate_at_eos(t))
        .count();
    Ok(wrong as f32 / predictions.len() as f32)
}
