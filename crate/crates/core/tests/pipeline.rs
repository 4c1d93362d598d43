use randq_core::eval::{
    assign_mixed_precision, evaluate, export_quantized, import_quantized, layer_sensitivity, model_size_bytes,
    ptq_apply_model, quantized_layer_bytes, RunLabel,
};
use randq_core::seq2seq::{generate_dataset, Model, ModelConfig, QuantizeScope, Task, TaskSpec};
use randq_core::train::{decode_checkpoint, encode_checkpoint, model_from_checkpoint, train, Split, TrainConfig};
use randq_core::{EvalPrecision, Granularity, OutlierMethod, Precision, PrecisionAssignment, QatConfig, QatPlan};

fn setup() -> (TaskSpec, ModelConfig, TrainConfig) {
    let task = TaskSpec { task: Task::Copy, seq_len: 5, n_train: 512, n_eval: 64, vocab_size: 12, ..TaskSpec::default() };
    let model = ModelConfig {
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab_size: 12,
        quantize_scope: QuantizeScope::AllDense,
    };
    let train = TrainConfig {
        steps: 300,
        batch_size: 32,
        warmup_steps: 50,
        ema_decay: 0.95,
        eval_every: 25,
        eval_examples: 64,
        qat: QatPlan::uniform(&QatConfig::pqn(4, Granularity::PerChannel, OutlierMethod::Norm)),
        ..TrainConfig::default()
    };
    (task, model, train)
}

#[test]
fn pqn_training_learns_copy_and_survives_quantization() {
    let (task, config, cfg) = setup();
    let (train_set, eval_set) = generate_dataset(&task).unwrap();
    let out = train(&Model::init(config.clone(), 1).unwrap(), &train_set, &eval_set, &cfg, "pipeline").unwrap();

    let losses: Vec<f32> = out.trace.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
    assert_eq!(losses.len(), cfg.steps / cfg.eval_every);
    let (head, tail) = (losses[0], losses[losses.len() - 1]);
    assert!(tail < 0.5 * head, "training loss {head} -> {tail}");
    let ema_rows = out.trace.iter().filter(|r| r.split == Split::EvalEma).count();
    assert_eq!(ema_rows, losses.len());

    let model = model_from_checkpoint(&config, &out.checkpoint, true).unwrap();
    let label = RunLabel::new(&QatConfig::pqn(4, Granularity::PerChannel, OutlierMethod::Norm), 1);
    let row = |p| evaluate(&model, &eval_set, &PrecisionAssignment::uniform(&config, p, Granularity::PerChannel), &label).unwrap();
    let (f, e8, e4) = (row(Precision::Float), row(Precision::Int8), row(Precision::Int4));
    assert!(f.sequence_error_rate.unwrap() < 0.5, "float error {:?}", f.sequence_error_rate);
    assert!(e4.sequence_error_rate.unwrap() < 0.5, "int4 error {:?}", e4.sequence_error_rate);
    assert!(f.model_size_bytes > e8.model_size_bytes && e8.model_size_bytes > e4.model_size_bytes);

    // The exported integer artifact decodes to exactly the fake-quantized model.
    let int4 = PrecisionAssignment::uniform(&config, Precision::Int4, Granularity::PerChannel);
    let file = export_quantized(&model, &int4, out.checkpoint.step, "pipeline").unwrap();
    let back = decode_checkpoint(&encode_checkpoint(&file)).unwrap();
    let imported = import_quantized(&config, &back).unwrap();
    let simulated = ptq_apply_model(&model, &int4).unwrap();
    for (name, t) in simulated.params.iter() {
        if name.ends_with(".lsc_scale") {
            continue;
        }
        assert!(imported.params.get(name).unwrap().bit_eq(t), "{name}");
    }
}

#[test]
fn sensitivity_drives_a_budgeted_mixed_assignment() {
    let (task, config, mut cfg) = setup();
    cfg.qat = QatPlan::none();
    cfg.steps = 100;
    let (train_set, eval_set) = generate_dataset(&task).unwrap();
    let out = train(&Model::init(config.clone(), 2).unwrap(), &train_set, &eval_set, &cfg, "s").unwrap();
    let model = model_from_checkpoint(&config, &out.checkpoint, true).unwrap();
    let g = Granularity::PerChannel;
    let report = layer_sensitivity(&model, &eval_set, 4, g).unwrap();
    assert_eq!(report.layers.len(), config.quantizable_layers().len());

    let all4 = quantized_layer_bytes(&config, &PrecisionAssignment::uniform(&config, Precision::Int4, g));
    let all8 = quantized_layer_bytes(&config, &PrecisionAssignment::uniform(&config, Precision::Int8, g));
    let budget = all4 + (all8 - all4) / 2;
    let a = assign_mixed_precision(&config, &report.scores(), budget, g).unwrap();
    assert_eq!(a.label(), EvalPrecision::Mixed);
    let used = quantized_layer_bytes(&config, &a);
    assert!(all4 < used && used <= budget);
    let mixed = model_size_bytes(&config, &a).unwrap();
    let size = |p| model_size_bytes(&config, &PrecisionAssignment::uniform(&config, p, g)).unwrap();
    assert!(size(Precision::Int4) < mixed && mixed < size(Precision::Int8));
    assert_eq!(assign_mixed_precision(&config, &report.scores(), all8, g).unwrap().label(), EvalPrecision::Int8);
}
