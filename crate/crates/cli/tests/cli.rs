use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: [&str; 10] = [
    "model.d_model=16",
    "model.d_ff=32",
    "model.n_heads=2",
    "model.n_enc_layers=1",
    "model.n_dec_layers=1",
    "task.n_train=64",
    "task.n_eval=16",
    "train.batch_size=8",
    "train.steps=2",
    "train.eval_every=0",
];

fn randq(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_randq"));
    cmd.args(args).env_remove("RANDQ_SEED");
    if let Some(s) = seed_env {
        cmd.env("RANDQ_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn tiny_args<'a>(sub: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v = vec![sub.to_string()];
    for s in TINY {
        v.push("--set".into());
        v.push(s.into());
    }
    v.push("--set".into());
    v.push(format!("output_dir={out}"));
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn run_tiny(sub: &str, out: &Path, extra: &[&str], seed_env: Option<&str>) -> Output {
    let args = tiny_args(sub, out.to_str().unwrap(), extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    randq(&refs, seed_env)
}

fn assert_ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstderr: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
}

fn resolved(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("config.resolved.json")).unwrap()).unwrap()
}

fn workspace_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let o = randq(&[], None);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_or_flag_exits_2() {
    assert_eq!(randq(&["frobnicate"], None).status.code(), Some(2));
    assert_eq!(randq(&["train", "--bogus"], None).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap().to_string();
    let set = format!("output_dir={out}");
    let o = randq(&["train", "--set", "train.stepz=3", "--set", &set], None);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    // No checkpoint has been written yet.
    let o = randq(&["eval", "--set", &set], None);
    assert_eq!(o.status.code(), Some(1));
    let o = randq(&["train", "--config", "/nonexistent/exp.json"], None);
    assert_eq!(o.status.code(), Some(1));
    let o = randq(&["train", "--set", &set], Some("not-a-number"));
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn set_overrides_one_key_and_last_writer_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.json");
    std::fs::write(&cfg, r#"{"train": {"steps": 2, "batch_size": 4}}"#).unwrap();
    let out = dir.path().join("out");
    let (c, o) = (cfg.to_str().unwrap(), format!("output_dir={}", out.display()));
    let run = randq(&["gen-data", "--config", c, "--set", &o, "--set", "train.seed=7"], None);
    assert_ok(&run);
    let base = resolved(&out);
    assert_eq!(base["train"]["seed"], 7);
    assert_eq!(base["train"]["batch_size"], 4);

    let run = randq(&["gen-data", "--config", c, "--set", &o], None);
    assert_ok(&run);
    let mut without = resolved(&out);
    assert_eq!(without["train"]["seed"], 0);
    without["train"]["seed"] = 7.into();
    assert_eq!(without, base, "the override touched exactly one key");

    let run = randq(&["gen-data", "--config", c, "--set", &o, "--set", "train.seed=1", "--set", "train.seed=9"], None);
    assert_ok(&run);
    assert_eq!(resolved(&out)["train"]["seed"], 9);
}

#[test]
fn seed_environment_variable_is_a_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = format!("output_dir={}", dir.path().display());
    assert_ok(&randq(&["gen-data", "--set", &out], Some("5")));
    assert_eq!(resolved(dir.path())["train"]["seed"], 5);
    assert_ok(&randq(&["gen-data", "--set", &out, "--set", "train.seed=3"], Some("5")));
    assert_eq!(resolved(dir.path())["train"]["seed"], 3);
}

#[test]
fn pipeline_writes_every_artifact_and_reruns_bit_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        assert_ok(&run_tiny("gen-data", dir, &[], None));
        assert_ok(&run_tiny("train", dir, &[], None));
        assert_ok(&run_tiny("eval", dir, &[], None));
        assert_ok(&run_tiny("sensitivity", dir, &[], None));
        assert_ok(&run_tiny("quantize", dir, &["--precision", "int8"], None));
    }
    for f in [
        "train.jsonl",
        "eval.jsonl",
        "checkpoint.rqck",
        "trace.csv",
        "eval.csv",
        "sensitivity.json",
        "assignment.json",
        "model.int8.per_channel.rqck",
    ] {
        let x = std::fs::read(a.path().join(f)).unwrap_or_else(|e| panic!("{f}: {e}"));
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between identical runs");
    }

    // Re-running from the resolved config alone reproduces the checkpoint.
    let c = tempfile::tempdir().unwrap();
    let cfg = a.path().join("config.resolved.json");
    let set = format!("output_dir={}", c.path().display());
    assert_ok(&randq(&["train", "--config", cfg.to_str().unwrap(), "--set", &set], None));
    assert_eq!(
        std::fs::read(a.path().join("checkpoint.rqck")).unwrap(),
        std::fs::read(c.path().join("checkpoint.rqck")).unwrap()
    );

    let assignment = a.path().join("assignment.json");
    let o = run_tiny("eval", a.path(), &["--assignment", assignment.to_str().unwrap()], None);
    assert_ok(&o);
    let report = std::fs::read_to_string(a.path().join("eval.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4);

    // A corrupted checkpoint is a domain error, not a crash.
    let ck = a.path().join("checkpoint.rqck");
    let bytes = std::fs::read(&ck).unwrap();
    std::fs::write(&ck, &bytes[..bytes.len() / 2]).unwrap();
    let o = run_tiny("eval", a.path(), &[], None);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn grid_sweep_emits_90_rows_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = workspace_file("configs/table3.json");
    let o = run_tiny("sweep", dir.path(), &["--config", cfg.to_str().unwrap()], None);
    assert_ok(&o);
    let report = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines[0], "outlier_method,qat_method,train_bit,eval_precision,granularity,seed,sequence_error_rate,loss,model_size_bytes,status");
    assert_eq!(lines.len(), 1 + 90);

    let o = run_tiny("report", dir.path(), &["--config", cfg.to_str().unwrap()], None);
    assert_ok(&o);
    let table = String::from_utf8(o.stdout).unwrap();
    // Header plus one line per (outlier, qat, precision) group.
    assert_eq!(table.lines().count(), 1 + 18);
    assert!(table.lines().skip(1).all(|l| l.contains('±') && l.contains(" 5 ")));
}

#[test]
fn example_configs_resolve() {
    for name in ["table3.json", "mixed_scale.json", "single_run.json"] {
        let dir = tempfile::tempdir().unwrap();
        let cfg = workspace_file(&format!("configs/{name}"));
        let set = format!("output_dir={}", dir.path().display());
        let o = randq(&["gen-data", "--config", cfg.to_str().unwrap(), "--set", &set, "--set", "task.n_train=8"], None);
        assert_ok(&o);
    }
}
