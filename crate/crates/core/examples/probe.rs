// Scratch probe: census fractions on the reference config and a desk-scale
// learning run. Not part of the deliverable test suite.

use mtpeft_core::backbone::BackboneConfig;
use mtpeft_core::data::synthetic::{
    generate_synthetic_tasks, pair_samples, query_code_samples, text_samples, SyntheticSpec,
};
use mtpeft_core::data::{Metric, MultiTaskData, TaskKind, TaskSpec, TaskSplits};
use mtpeft_core::mtl::LossWeighting;
use mtpeft_core::peft::{PeftConfig, PeftMethod};
use mtpeft_core::trainer::{build_model, census_report, train, TrainConfig, TrainMode};

fn four_tasks() -> Vec<TaskSpec> {
    vec![
        TaskSpec::new(0, "clone", TaskKind::PairClassification, Metric::F1),
        TaskSpec::new(1, "defect", TaskKind::BinaryClassification, Metric::Accuracy),
        TaskSpec::new(2, "flaky", TaskKind::BinaryClassification, Metric::F1),
        TaskSpec::new(3, "search", TaskKind::Retrieval, Metric::Mrr),
    ]
}

fn census() {
    let backbone = BackboneConfig::reference_125m();
    println!(
        "reference backbone parameter count: {}",
        backbone.parameter_count()
    );
    for method in [
        PeftMethod::SerialAdapter,
        PeftMethod::ParallelAdapter,
        PeftMethod::Lora,
        PeftMethod::Prefix,
    ] {
        let mut config = TrainConfig::new(TrainMode::Peft);
        config.peft = Some(PeftConfig::new(method));
        config.max_seq_len = backbone.max_seq_len;
        let t0 = std::time::Instant::now();
        let model = build_model::<f32>(&backbone, &config, &four_tasks()).unwrap();
        let report = census_report(&model);
        println!(
            "{:<18} total {:>11} peft {:>9} peft% {:.4} trainable% {:.4} ({:.1?})",
            method.as_str(),
            report.total_params,
            report.peft_params,
            100.0 * report.peft_fraction,
            100.0 * report.trainable_fraction,
            t0.elapsed()
        );
    }
}

fn learn(mode: TrainMode, tasks_filter: Option<usize>) {
    let spec = SyntheticSpec::default();
    let raw = generate_synthetic_tasks(&spec).unwrap();
    let max_len = 64;
    let all_tasks = four_tasks();
    let all_splits = vec![
        TaskSplits {
            train: pair_samples(&raw.clone[0], 0, max_len),
            valid: pair_samples(&raw.clone[1], 0, max_len),
            test: pair_samples(&raw.clone[2], 0, max_len),
        },
        TaskSplits {
            train: text_samples(&raw.defect[0], 1, max_len),
            valid: text_samples(&raw.defect[1], 1, max_len),
            test: text_samples(&raw.defect[2], 1, max_len),
        },
        TaskSplits {
            train: text_samples(&raw.flaky[0], 2, max_len),
            valid: text_samples(&raw.flaky[1], 2, max_len),
            test: text_samples(&raw.flaky[2], 2, max_len),
        },
        TaskSplits {
            train: query_code_samples(&raw.search[0], 3, max_len),
            valid: query_code_samples(&raw.search[1], 3, max_len),
            test: query_code_samples(&raw.search[2], 3, max_len),
        },
    ];

    let (tasks, splits) = match tasks_filter {
        Some(t) => {
            let mut task = all_tasks[t].clone();
            task.task_id = 0;
            let mut split = all_splits[t].clone();
            for s in split
                .train
                .iter_mut()
                .chain(split.valid.iter_mut())
                .chain(split.test.iter_mut())
            {
                s.task_id = 0;
            }
            (vec![task], vec![split])
        }
        None => (all_tasks, all_splits),
    };
    let data = MultiTaskData::new(tasks, splits).unwrap();

    let mut config = TrainConfig::new(mode);
    if mode == TrainMode::Peft {
        config.peft = Some(PeftConfig::new(PeftMethod::SerialAdapter));
    }
    config.max_seq_len = max_len;
    config.learning_rate = std::env::var("PROBE_LR").map(|v| v.parse().unwrap()).unwrap_or(1e-3);
    config.max_epochs = std::env::var("PROBE_EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(8);
    config.early_stop_patience = 2;
    config.per_task_batch = std::env::var("PROBE_BATCH").map(|v| v.parse().unwrap()).unwrap_or(8);
    config.head_dropout = std::env::var("PROBE_HDROP").map(|v| v.parse().unwrap()).unwrap_or(0.1);
    config.loss_weighting = LossWeighting::Learnable;

    let mut backbone = BackboneConfig::desk_default();
    backbone.dropout = 0.0;
    let t0 = std::time::Instant::now();
    let model = build_model::<f32>(&backbone, &config, &data.tasks).unwrap();
    let report = train(&model, &data, &config, "probe").unwrap();
    println!(
        "mode {:?} filter {:?}: epochs {} best {} wall {:.1}s",
        mode,
        tasks_filter,
        report.epochs_run,
        report.best_epoch,
        t0.elapsed().as_secs_f64()
    );
    for rec in &report.epochs {
        println!(
            "  epoch {}: train loss {:?} valid metric {:?} batched {:?} alpha {:?}",
            rec.epoch, rec.train_loss, rec.valid_metric, rec.valid_mrr_batched, rec.alpha
        );
    }
    println!(
        "  TEST {:?} batched {:?}",
        report.test_metrics, report.test_mrr_batched
    );
}

fn linear_probe() {
    use mtpeft_core::backbone::build_backbone;
    use mtpeft_core::data::TokenBatch;
    use mtpeft_core::tensor::nn::{bce_with_logits, Phase};
    use mtpeft_core::tensor::ops::{add, matmul_tb};
    use mtpeft_core::tensor::{backward, Tensor};
    use mtpeft_core::trainer::adam::{Adam, AdamConfig};
    use mtpeft_core::ParamRegistry;

    let spec = SyntheticSpec::default();
    let raw = generate_synthetic_tasks(&spec).unwrap();
    let max_len = 64;
    let samples = text_samples(&raw.defect[0], 0, max_len);
    let mut backbone_cfg = BackboneConfig::desk_default();
    backbone_cfg.dropout = 0.0;
    let backbone = build_backbone::<f64>(&backbone_cfg, 42).unwrap();

    // Frozen pooled features for every sample.
    let mut feats: Vec<f64> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for chunk in samples.chunks(64) {
        let rows: Vec<&[u32]> = chunk.iter().map(|s| &s.input_ids[..]).collect();
        let batch = TokenBatch::from_rows(&rows);
        let (_, pooled) = backbone.encode(&batch, &[], &mut Phase::Eval).unwrap();
        feats.extend(pooled.to_f64_vec());
        labels.extend(chunk.iter().map(|s| f64::from(s.label)));
    }
    let n = labels.len();
    let d = 128;
    let x = Tensor::<f64>::from_f64(&[n, d], &feats).unwrap();

    // Logistic regression on the frozen features.
    let w = Tensor::<f64>::leaf(&[1, d], vec![0.0; d], true).unwrap();
    let b = Tensor::<f64>::leaf(&[1], vec![0.0], true).unwrap();
    let mut reg = ParamRegistry::new();
    reg.add("w", w.clone()).unwrap();
    reg.add("b", b.clone()).unwrap();
    let mut adam: Adam<f64> = Adam::new(AdamConfig {
        learning_rate: 0.05,
        ..AdamConfig::default()
    });
    for step in 0..300 {
        reg.zero_grads();
        let logits = add(&matmul_tb(&x, &w).unwrap(), &b).unwrap();
        let logits = mtpeft_core::tensor::ops::reshape(&logits, &[n]).unwrap();
        let loss = bce_with_logits(&logits, &labels).unwrap();
        backward(&loss).unwrap();
        adam.step(&reg).unwrap();
        if step % 50 == 0 {
            let correct = logits
                .data()
                .iter()
                .zip(&labels)
                .filter(|(&z, &y)| (z > 0.0) == (y == 1.0))
                .count();
            println!(
                "step {step}: loss {:.4} train acc {:.3}",
                loss.value(),
                correct as f64 / n as f64
            );
        }
    }
}

fn step_timing() {
    use mtpeft_core::data::MultiTaskData;
    use mtpeft_core::mtl::{assemble_global_batch, batch_groups, round_robin_batches};
    use mtpeft_core::tensor::backward;
    use mtpeft_core::tensor::nn::Phase;
    use mtpeft_core::trainer::adam::{Adam, AdamConfig};

    let spec = SyntheticSpec::default();
    let raw = generate_synthetic_tasks(&spec).unwrap();
    let max_len = 64;
    let tasks = four_tasks();
    let splits = vec![
        TaskSplits {
            train: pair_samples(&raw.clone[0], 0, max_len),
            valid: pair_samples(&raw.clone[1], 0, max_len),
            test: pair_samples(&raw.clone[2], 0, max_len),
        },
        TaskSplits {
            train: text_samples(&raw.defect[0], 1, max_len),
            valid: text_samples(&raw.defect[1], 1, max_len),
            test: text_samples(&raw.defect[2], 1, max_len),
        },
        TaskSplits {
            train: text_samples(&raw.flaky[0], 2, max_len),
            valid: text_samples(&raw.flaky[1], 2, max_len),
            test: text_samples(&raw.flaky[2], 2, max_len),
        },
        TaskSplits {
            train: query_code_samples(&raw.search[0], 3, max_len),
            valid: query_code_samples(&raw.search[1], 3, max_len),
            test: query_code_samples(&raw.search[2], 3, max_len),
        },
    ];
    let data = MultiTaskData::new(tasks, splits).unwrap();

    let mut config = TrainConfig::new(TrainMode::Peft);
    config.peft = Some(PeftConfig::new(PeftMethod::SerialAdapter));
    config.max_seq_len = max_len;
    config.per_task_batch = 16;
    let mut backbone = BackboneConfig::desk_default();
    backbone.dropout = 0.0;
    let model = build_model::<f32>(&backbone, &config, &data.tasks).unwrap();

    let concat = data.train_concat().unwrap();
    let kinds = model.task_kinds();
    let batch = round_robin_batches(&concat, 16, 1).unwrap().next().unwrap();
    let groups = batch_groups(&data, &batch).unwrap();
    let global = assemble_global_batch(&groups, &kinds).unwrap();
    let mut adam: Adam<f32> = Adam::new(AdamConfig::default());

    let reps = 10;
    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        let losses = model.task_losses(&global, &mut Phase::Eval).unwrap();
        std::hint::black_box(losses);
    }
    let fwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        model.registry().zero_grads();
        let losses = model.task_losses(&global, &mut Phase::Eval).unwrap();
        let combined = model.combined_loss(&losses).unwrap();
        backward(&combined).unwrap();
    }
    let fwd_bwd = t0.elapsed().as_secs_f64() / reps as f64;

    let t0 = std::time::Instant::now();
    for _ in 0..reps {
        adam.step(model.registry()).unwrap();
    }
    let step = t0.elapsed().as_secs_f64() / reps as f64;

    println!("forward {fwd:.3}s  forward+backward {fwd_bwd:.3}s  adam {step:.4}s");
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    match args.get(1).map(String::as_str) {
        Some("census") => census(),
        Some("mft") => learn(TrainMode::Peft, None),
        Some("sft") => {
            let t: usize = args[2].parse().unwrap();
            learn(TrainMode::Peft, Some(t))
        }
        Some("linear") => linear_probe(),
        Some("timing") => step_timing(),
        _ => {
            census();
            learn(TrainMode::Peft, None);
        }
    }
}
