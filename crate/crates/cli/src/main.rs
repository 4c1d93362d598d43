//! `randq`: data generation, training, quantization, evaluation and sweeps
//! driven by a JSON experiment config.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use randq_core::config::ExperimentConfig;
use randq_core::eval::{
    aggregate, assign_mixed_precision, evaluate, export_quantized, layer_sensitivity, quantized_layer_bytes,
    read_report_file, run_sweep, write_report_file, Precision, PrecisionAssignment, RunLabel,
};
use randq_core::seq2seq::{generate_dataset, Dataset, Model};
use randq_core::train::{load_checkpoint, model_from_checkpoint, save_checkpoint, save_file, train, write_trace_file};
use randq_core::{Error, Granularity, QatConfig, Result};

const CHECKPOINT_FILE: &str = "checkpoint.rqck";

#[derive(Parser)]
#[command(name = "randq", version, about = "Quantization-aware training experiments on a toy seq2seq task")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply to every missing field.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `train.seed=7`. Applied left to right.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval splits as JSON lines.
    GenData,
    /// Train one model with `train.qat` and save a checkpoint plus metric trace.
    Train,
    /// Export a checkpoint with integer weights.
    Quantize {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "int4")]
        precision: Precision,
        #[arg(long)]
        granularity: Option<Granularity>,
        /// Export raw weights instead of the EMA shadow.
        #[arg(long)]
        raw: bool,
    },
    /// Evaluate a checkpoint at each configured precision.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Additionally evaluate a mixed-precision assignment (JSON).
        #[arg(long, value_name = "PATH")]
        assignment: Option<PathBuf>,
    },
    /// Per-layer sensitivity and a greedy mixed-precision assignment.
    Sensitivity {
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate every grid cell and write `report.csv`.
    Sweep,
    /// Summarize report CSVs as mean ± std over seeds.
    Report {
        /// Report files; defaults to `<output_dir>/report.csv`.
        inputs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn fallback_seed() -> Result<Option<u64>> {
    match std::env::var("RANDQ_SEED") {
        Ok(s) => s.trim().parse().map(Some).map_err(|_| Error::Config(format!("RANDQ_SEED={s:?} is not an integer"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(cli.common.config.as_deref(), &cli.common.sets, fallback_seed()?)?;
    let out = cfg.output_dir.clone();
    cfg.write_resolved(&out)?;
    match cli.command {
        Command::GenData => gen_data(&cfg, &out),
        Command::Train => train_cmd(&cfg, &out),
        Command::Quantize { checkpoint, precision, granularity, raw } => {
            let model = load_model(&cfg, checkpoint.as_deref(), !raw)?;
            let g = granularity.unwrap_or(cfg.eval.granularity);
            let assignment = PrecisionAssignment::uniform(&cfg.model, precision, g);
            let ckpt = load_checkpoint(checkpoint_path(&cfg, checkpoint.as_deref()))?;
            let file = export_quantized(&model, &assignment, ckpt.step, &cfg.digest())?;
            let path = out.join(format!("model.{}.{}.rqck", precision, g.as_str()));
            save_file(&file, &path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Eval { checkpoint, assignment } => eval_cmd(&cfg, &out, checkpoint.as_deref(), assignment.as_deref()),
        Command::Sensitivity { checkpoint } => sensitivity_cmd(&cfg, &out, checkpoint.as_deref()),
        Command::Sweep => {
            if cfg.grid.is_empty() {
                return Err(Error::Config("config has an empty grid".into()));
            }
            let runs: usize = cfg.grid.iter().map(|c| c.seeds.len()).sum();
            eprintln!("sweep: {runs} training runs x {} precisions", cfg.eval.precisions.len());
            let rows = run_sweep(&cfg.grid, &cfg.sweep_setup(), &cfg.digest())?;
            let path = out.join("report.csv");
            write_report_file(&rows, &path)?;
            println!("wrote {} rows to {}", rows.len(), path.display());
            Ok(())
        }
        Command::Report { inputs } => {
            let inputs = if inputs.is_empty() { vec![out.join("report.csv")] } else { inputs };
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_report_file(p)?);
            }
            println!("{:<8} {:<5} {:>3} {:<6} {:<12} {:>4} {:>16}", "outlier", "qat", "bit", "eval", "granularity", "runs", "error %");
            for a in aggregate(&rows) {
                println!(
                    "{:<8} {:<5} {:>3} {:<6} {:<12} {:>4} {:>16}",
                    a.outlier_method.as_str(),
                    a.qat_method.as_str(),
                    a.train_bit,
                    a.eval_precision.as_str(),
                    a.granularity.as_str(),
                    a.runs,
                    a.display_pm()
                );
            }
            Ok(())
        }
    }
}

fn datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    generate_dataset(&cfg.task)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train_set, eval_set) = datasets(cfg)?;
    for (name, data) in [("train.jsonl", &train_set), ("eval.jsonl", &eval_set)] {
        let path = out.join(name);
        let file = std::fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        data.write_jsonl(std::io::BufWriter::new(file))?;
        println!("wrote {} examples to {}", data.len(), path.display());
    }
    Ok(())
}

fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let (train_set, eval_set) = datasets(cfg)?;
    let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&model, &train_set, &eval_set, &cfg.train, &cfg.digest())?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
    write_trace_file(&outcome.trace, out.join("trace.csv"))?;
    if let Some(last) = outcome.trace.iter().rev().find(|r| r.sequence_error_rate.is_some()) {
        println!(
            "step {}: {} loss {:.4}, sequence error rate {:.4}",
            last.step,
            last.split.as_str(),
            last.loss,
            last.sequence_error_rate.unwrap_or(f32::NAN)
        );
    }
    println!("wrote {}", ckpt_path.display());
    Ok(())
}

fn checkpoint_path(cfg: &ExperimentConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_FILE))
}

fn load_model(cfg: &ExperimentConfig, explicit: Option<&Path>, use_ema: bool) -> Result<Model> {
    let ckpt = load_checkpoint(checkpoint_path(cfg, explicit))?;
    if ckpt.config_digest != cfg.digest() {
        eprintln!("note: checkpoint was written under a different config digest");
    }
    model_from_checkpoint(&cfg.model, &ckpt, use_ema)
}

/// The QAT configuration the model was trained with, for row labels.
fn train_label(cfg: &ExperimentConfig) -> (QatConfig, Granularity) {
    let qat = cfg
        .model
        .quantizable_layers()
        .iter()
        .find_map(|l| cfg.train.qat.for_layer(cfg.model.quantize_scope, l).cloned())
        .unwrap_or_else(QatConfig::none);
    let g = if qat.is_plain() { cfg.eval.granularity } else { qat.granularity };
    (qat, g)
}

fn eval_cmd(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>, assignment: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint, cfg.eval.use_ema)?;
    let (_, eval_set) = datasets(cfg)?;
    let (qat, g) = train_label(cfg);
    let label = RunLabel::new(&qat, cfg.train.seed);
    let mut rows = Vec::new();
    for &p in &cfg.eval.precisions {
        rows.push(evaluate(&model, &eval_set, &PrecisionAssignment::uniform(&cfg.model, p, g), &label)?);
    }
    if let Some(path) = assignment {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let a: PrecisionAssignment = serde_json::from_str(&text)?;
        rows.push(evaluate(&model, &eval_set, &a, &label)?);
    }
    for r in &rows {
        println!(
            "{:<6} error {:.4} loss {:.4} size {} bytes",
            r.eval_precision.as_str(),
            r.sequence_error_rate.unwrap_or(f32::NAN),
            r.loss.unwrap_or(f32::NAN),
            r.model_size_bytes
        );
    }
    let path = out.join("eval.csv");
    write_report_file(&rows, &path)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn sensitivity_cmd(cfg: &ExperimentConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let model = load_model(cfg, checkpoint, cfg.eval.use_ema)?;
    let (_, eval_set) = datasets(cfg)?;
    let (qat, g) = train_label(cfg);
    let report = layer_sensitivity(&model, &eval_set, cfg.eval.sensitivity_bit, g)?;
    let lo = quantized_layer_bytes(&cfg.model, &PrecisionAssignment::uniform(&cfg.model, Precision::Int4, g));
    let hi = quantized_layer_bytes(&cfg.model, &PrecisionAssignment::uniform(&cfg.model, Precision::Int8, g));
    let budget = cfg.eval.budget_bytes.unwrap_or(lo + (hi - lo) / 2);
    let assignment = assign_mixed_precision(&cfg.model, &report.scores(), budget, g)?;
    let write_json = |name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io { path: path.clone(), source: e })?;
        println!("wrote {}", path.display());
        Ok(())
    };
    for l in &report.layers {
        println!("{:<18} error {:+.4} loss {:+.5}", l.layer, l.error_delta, l.loss_delta);
    }
    println!(
        "whole model at int{}: error {:+.4} loss {:+.5}",
        report.bit, report.whole_model_error_delta, report.whole_model_loss_delta
    );
    write_json("sensitivity.json", serde_json::to_string_pretty(&report)?)?;
    write_json("assignment.json", serde_json::to_string_pretty(&assignment)?)?;
    let row = evaluate(&model, &eval_set, &assignment, &RunLabel::new(&qat, cfg.train.seed))?;
    println!(
        "{} assignment within {budget} bytes: error {:.4}, size {} bytes",
        row.eval_precision.as_str(),
        row.sequence_error_rate.unwrap_or(f32::NAN),
        row.model_size_bytes
    );
    Ok(())
}
