use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalPrecision, RunLabel};
use crate::error::{Error, Result};
use crate::qat::{OutlierMethod, QatMethod};
use crate::quant::Granularity;

pub const COLUMNS: [&str; 10] = [
    "outlier_method",
    "qat_method",
    "train_bit",
    "eval_precision",
    "granularity",
    "seed",
    "sequence_error_rate",
    "loss",
    "model_size_bytes",
    "status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowStatus {
    Ok,
    /// Training diverged; metrics are absent.
    Failed,
}

/// One evaluated grid cell at one precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub outlier_method: OutlierMethod,
    pub qat_method: QatMethod,
    pub train_bit: u32,
    pub eval_precision: EvalPrecision,
    pub granularity: Granularity,
    pub seed: u64,
    pub sequence_error_rate: Option<f32>,
    pub loss: Option<f32>,
    pub model_size_bytes: usize,
    pub status: RowStatus,
}

impl ReportRow {
    pub fn failed(label: &RunLabel, precision: EvalPrecision, granularity: Granularity, size: usize) -> Self {
        ReportRow {
            outlier_method: label.outlier_method,
            qat_method: label.qat_method,
            train_bit: label.train_bit,
            eval_precision: precision,
            granularity,
            seed: label.seed,
            sequence_error_rate: None,
            loss: None,
            model_size_bytes: size,
            status: RowStatus::Failed,
        }
    }

    fn sort_key(&self) -> (OutlierMethod, QatMethod, EvalPrecision, u64, Granularity, u32) {
        (self.outlier_method, self.qat_method, self.eval_precision, self.seed, self.granularity, self.train_bit)
    }
}

pub(crate) fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by_key(ReportRow::sort_key);
}

fn fmt_metric(v: Option<f32>) -> String {
    v.map(|x| format!("{x:.8e}")).unwrap_or_default()
}

/// Header plus one line per row; metrics use 9 significant digits.
pub fn write_report(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record([
            r.outlier_method.as_str().to_string(),
            r.qat_method.as_str().to_string(),
            r.train_bit.to_string(),
            r.eval_precision.as_str().to_string(),
            r.granularity.as_str().to_string(),
            r.seed.to_string(),
            fmt_metric(r.sequence_error_rate),
            fmt_metric(r.loss),
            r.model_size_bytes.to_string(),
            match r.status {
                RowStatus::Ok => "ok".into(),
                RowStatus::Failed => "failed".into(),
            },
        ])?;
    }
    w.flush().map_err(|e| Error::io("<report>", e))
}

pub fn write_report_file(rows: &[ReportRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_report(rows, std::io::BufWriter::new(file))
}

pub fn read_report(input: impl Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != COLUMNS {
        return Err(Error::Format { offset: 0, detail: format!("unexpected report header {header:?}") });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let bad = |what: &str| Error::Parameter(format!("report line {line}: bad {what}"));
        let metric = |s: &str, what: &str| -> Result<Option<f32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(what))
            }
        };
        rows.push(ReportRow {
            outlier_method: rec[0].parse()?,
            qat_method: rec[1].parse()?,
            train_bit: rec[2].parse().map_err(|_| bad("train_bit"))?,
            eval_precision: rec[3].parse()?,
            granularity: rec[4].parse()?,
            seed: rec[5].parse().map_err(|_| bad("seed"))?,
            sequence_error_rate: metric(&rec[6], "sequence_error_rate")?,
            loss: metric(&rec[7], "loss")?,
            model_size_bytes: rec[8].parse().map_err(|_| bad("model_size_bytes"))?,
            status: match &rec[9] {
                "ok" => RowStatus::Ok,
                "failed" => RowStatus::Failed,
                _ => return Err(bad("status")),
            },
        });
    }
    Ok(rows)
}

pub fn read_report_file(path: impl AsRef<Path>) -> Result<Vec<ReportRow>> {
    let path = path.as_ref();
    read_report(std::fs::File::open(path).map_err(|e| Error::io(path, e))?)
}

/// Seed statistics of one (outlier, qat, bit, precision, granularity) group.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub outlier_method: OutlierMethod,
    pub qat_method: QatMethod,
    pub train_bit: u32,
    pub eval_precision: EvalPrecision,
    pub granularity: Granularity,
    /// Seeds that trained successfully.
    pub runs: usize,
    pub failed: usize,
    pub mean_error: f64,
    /// Sample standard deviation (zero for a single run).
    pub std_error: f64,
}

impl AggregateRow {
    /// `mean ± std` in percent, the notation of seed-averaged error tables.
    pub fn display_pm(&self) -> String {
        if self.runs == 0 {
            return "failed".into();
        }
        format!("{:.2} ± {:.2}", 100.0 * self.mean_error, 100.0 * self.std_error)
    }
}

pub fn aggregate(rows: &[ReportRow]) -> Vec<AggregateRow> {
    type Key = (OutlierMethod, QatMethod, u32, EvalPrecision, Granularity);
    let mut groups: BTreeMap<Key, (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let key = (r.outlier_method, r.qat_method, r.train_bit, r.eval_precision, r.granularity);
        let entry = groups.entry(key).or_default();
        match (r.status, r.sequence_error_rate) {
            (RowStatus::Ok, Some(e)) => entry.0.push(e as f64),
            _ => entry.1 += 1,
        }
    }
    groups
        .into_iter()
        .map(|((o, q, b, p, g), (errs, failed))| {
            let n = errs.len();
            let mean = if n == 0 { 0.0 } else { errs.iter().sum::<f64>() / n as f64 };
            let std = if n < 2 {
                0.0
            } else {
                (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            };
            AggregateRow {
                outlier_method: o,
                qat_method: q,
                train_bit: b,
                eval_precision: p,
                granularity: g,
                runs: n,
                failed,
                mean_error: mean,
                std_error: std,
            }
        })
        .collect()
}
