//! Optimization loop, early stopping, metric computation and cost accounting.

pub mod adam;
pub mod metrics;

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_backbone, BackboneConfig};
use crate::data::{MultiTaskData, Sample, Split, TaskKind, TokenBatch};
use crate::error::{Error, Result};
use crate::mtl::{
    assemble_global_batch, batch_groups, build_multitask_model, classification_loss,
    retrieval_loss, round_robin_batches, LossWeighting, MultiTaskModel,
};
use crate::peft::{inject_peft, AdaptedModel, PeftConfig};
use crate::rng::{derive_seed, rng_for};
use crate::tensor::nn::Phase;
use crate::tensor::param::CensusFilter;
use crate::tensor::{backward, Element};

use adam::{Adam, AdamConfig};
use metrics::{accuracy, compute_mrr, compute_mrr_batched, f1_score};

pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Chunk size for deterministic evaluation forward passes.
const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Full,
    Peft,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Full => "full",
            TrainMode::Peft => "peft",
        }
    }

    /// Conventional defaults: 1e-4 for PEFT, 2e-5 for full fine-tuning.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            TrainMode::Full => 2e-5,
            TrainMode::Peft => 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub peft: Option<PeftConfig>,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub epsilon: f64,
    pub per_task_batch: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub max_seq_len: usize,
    pub retrieval_temperature: f64,
    pub head_dropout: f64,
    pub loss_weighting: LossWeighting,
}

impl TrainConfig {
    pub fn new(mode: TrainMode) -> Self {
        TrainConfig {
            mode,
            peft: None,
            learning_rate: mode.default_learning_rate(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            epsilon: 1e-8,
            per_task_batch: 8,
            max_epochs: 10,
            early_stop_patience: 2,
            seed: 42,
            max_seq_len: 128,
            retrieval_temperature: 0.05,
            head_dropout: 0.1,
            loss_weighting: LossWeighting::Learnable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::InvalidConfig {
                field: format!("train.{field}"),
                reason,
            })
        };
        if self.learning_rate <= 0.0 {
            return fail("learning_rate", "must be positive".into());
        }
        if self.early_stop_patience == 0 {
            return fail("early_stop_patience", "must be at least 1".into());
        }
        if self.per_task_batch == 0 {
            return fail("per_task_batch", "must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs", "must be at least 1".into());
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len", "must be at least 2".into());
        }
        if self.retrieval_temperature <= 0.0 {
            return fail("retrieval_temperature", "must be positive".into());
        }
        if self.mode == TrainMode::Peft && self.peft.is_none() {
            return fail("peft", "peft mode requires a peft section".into());
        }
        Ok(())
    }

    fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.epsilon,
        }
    }
}

/// Build the full model stack for a run: backbone, optional PEFT injection,
/// heads and loss weights. Deterministic in `config.seed`.
pub fn build_model<F: Element>(
    backbone_config: &BackboneConfig,
    config: &TrainConfig,
    tasks: &[crate::data::TaskSpec],
) -> Result<MultiTaskModel<F>> {
    config.validate()?;
    if config.max_seq_len > backbone_config.max_seq_len {
        return Err(Error::InvalidConfig {
            field: "train.max_seq_len".into(),
            reason: format!(
                "{} exceeds backbone.max_seq_len {}",
                config.max_seq_len, backbone_config.max_seq_len
            ),
        });
    }
    let backbone = build_backbone::<F>(backbone_config, config.seed)?;
    let adapted = match config.mode {
        TrainMode::Full => AdaptedModel::full(backbone)?,
        TrainMode::Peft => {
            let peft = config.peft.as_ref().ok_or_else(|| Error::InvalidConfig {
                field: "train.peft".into(),
                reason: "peft mode requires a peft section".into(),
            })?;
            inject_peft(backbone, peft, derive_seed(config.seed, "peft"))?
        }
    };
    build_multitask_model(
        adapted,
        tasks,
        config.loss_weighting,
        config.retrieval_temperature,
        config.head_dropout,
        derive_seed(config.seed, "heads"),
    )
}

/// Both census denominators: the trainable fraction over all parameters and
/// the PEFT-modules-only fraction over the same total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CensusReport {
    pub total_params: usize,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    pub peft_params: usize,
    pub peft_fraction: f64,
    pub backbone_params: usize,
    pub head_params: usize,
    pub loss_weight_params: usize,
}

pub fn census_report<F: Element>(model: &MultiTaskModel<F>) -> CensusReport {
    let reg = model.registry();
    let total = reg.census(CensusFilter::All);
    let trainable = reg.census(CensusFilter::Trainable);
    let peft = reg.census(CensusFilter::Prefix("peft."));
    let backbone = reg.census(CensusFilter::Prefix("backbone."));
    let heads = reg.census(CensusFilter::Prefix("head."));
    let theta = reg.census(CensusFilter::Prefix("loss_weights."));
    CensusReport {
        total_params: total.count,
        trainable_params: trainable.count,
        trainable_fraction: trainable.fraction_of_total,
        peft_params: peft.count,
        peft_fraction: peft.fraction_of_total,
        backbone_params: backbone.count,
        head_params: heads.count,
        loss_weight_params: theta.count,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: BTreeMap<String, f64>,
    pub valid_loss: BTreeMap<String, f64>,
    pub valid_metric: BTreeMap<String, f64>,
    /// Within-batch MRR for retrieval tasks (batch = per_task_batch).
    pub valid_mrr_batched: BTreeMap<String, f64>,
    /// Uniform mean of per-task validation losses; the early-stopping signal.
    pub valid_loss_mean: f64,
    pub alpha: Vec<f64>,
    pub min_alpha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopInfo {
    pub patience: usize,
    /// Aggregate the stopper watches; uniform mean, not alpha-weighted.
    pub aggregate: String,
    pub triggered: bool,
}

/// Full record of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub format_version: u32,
    pub name: String,
    pub mode: String,
    pub peft_method: Option<String>,
    pub loss_weighting: String,
    pub precision: String,
    pub seed: u64,
    pub tasks: Vec<crate::data::TaskSpec>,
    pub per_task_batch: usize,
    /// Samples per optimizer step: task count x per-task batch.
    pub global_batch_size: usize,
    pub max_seq_len: usize,
    pub steps_per_epoch: usize,
    pub epochs_run: usize,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    /// Optimizer steps taken up to the best validation checkpoint.
    pub updates_to_best: u64,
    /// updates_to_best x global_batch_size x max_seq_len.
    pub tokens_to_best: u64,
    pub early_stop: EarlyStopInfo,
    pub census: CensusReport,
    pub test_metrics: BTreeMap<String, f64>,
    pub test_mrr_batched: BTreeMap<String, f64>,
    pub alpha_final: Vec<f64>,
    pub warnings: Vec<String>,
    pub wall_clock_seconds: f64,
}

/// Token cost of reaching the best validation score:
/// updates x global batch size x sequence length.
pub fn token_cost(updates_to_best: u64, global_batch_size: usize, max_seq_len: usize) -> u64 {
    updates_to_best * global_batch_size as u64 * max_seq_len as u64
}

/// Early stopping on a validation signal: stop once the signal has failed to
/// improve strictly for `patience` consecutive epochs.
struct EarlyStopper {
    patience: usize,
    best: f64,
    epochs_since_best: usize,
}

enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            epochs_since_best: 0,
        }
    }

    fn observe(&mut self, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.epochs_since_best = 0;
            StopDecision::Improved
        } else {
            self.epochs_since_best += 1;
            if self.epochs_since_best >= self.patience {
                StopDecision::Stop
            } else {
                StopDecision::Continue
            }
        }
    }
}

fn chunked<'a>(samples: &'a [Sample], chunk: usize) -> impl Iterator<Item = &'a [Sample]> {
    samples.chunks(chunk)
}

fn classification_split_loss<F: Element>(
    model: &MultiTaskModel<F>,
    samples: &[Sample],
) -> Result<f64> {
    let mut total = 0.0;
    let mut rows = 0usize;
    for chunk in chunked(samples, EVAL_CHUNK) {
        let batch = TokenBatch::from_rows(&chunk.iter().map(|s| &s.input_ids[..]).collect::<Vec<_>>());
        let logits = model.logits_for_task(chunk[0].task_id, &batch, &mut Phase::Eval)?;
        let labels: Vec<u8> = chunk.iter().map(|s| s.label).collect();
        let loss = classification_loss(&logits, &labels)?;
        total += loss.value().into_f64() * chunk.len() as f64;
        rows += chunk.len();
    }
    Ok(total / rows as f64)
}

fn retrieval_split_loss<F: Element>(
    model: &MultiTaskModel<F>,
    samples: &[Sample],
    per_task_batch: usize,
) -> Result<f64> {
    let chunk_size = per_task_batch.max(2);
    let mut total = 0.0;
    let mut chunks = 0usize;
    for chunk in chunked(samples, chunk_size) {
        if chunk.len() < 2 {
            break;
        }
        let task_id = chunk[0].task_id;
        let queries = TokenBatch::from_rows(
            &chunk.iter().map(|s| &s.input_ids[..]).collect::<Vec<_>>(),
        );
        let codes = TokenBatch::from_rows(
            &chunk
                .iter()
                .map(|s| s.second_input_ids.as_deref().expect("retrieval sample"))
                .collect::<Vec<_>>(),
        );
        let q = model.embed_for_task(task_id, &queries, &mut Phase::Eval)?;
        let c = model.embed_for_task(task_id, &codes, &mut Phase::Eval)?;
        let loss = retrieval_loss(&q, &c, model.temperature())?;
        total += loss.value().into_f64();
        chunks += 1;
    }
    Ok(total / chunks as f64)
}

fn split_embeddings<F: Element>(
    model: &MultiTaskModel<F>,
    samples: &[Sample],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut queries = Vec::with_capacity(samples.len());
    let mut codes = Vec::with_capacity(samples.len());
    for chunk in chunked(samples, EVAL_CHUNK) {
        let task_id = chunk[0].task_id;
        let q_batch = TokenBatch::from_rows(
            &chunk.iter().map(|s| &s.input_ids[..]).collect::<Vec<_>>(),
        );
        let c_batch = TokenBatch::from_rows(
            &chunk
                .iter()
                .map(|s| s.second_input_ids.as_deref().expect("retrieval sample"))
                .collect::<Vec<_>>(),
        );
        let q = model.embed_for_task(task_id, &q_batch, &mut Phase::Eval)?;
        let c = model.embed_for_task(task_id, &c_batch, &mut Phase::Eval)?;
        let dim = q.shape()[1];
        let qv = q.to_f64_vec();
        let cv = c.to_f64_vec();
        for r in 0..chunk.len() {
            queries.push(qv[r * dim..(r + 1) * dim].to_vec());
            codes.push(cv[r * dim..(r + 1) * dim].to_vec());
        }
    }
    Ok((queries, codes))
}

fn classification_predictions<F: Element>(
    model: &MultiTaskModel<F>,
    samples: &[Sample],
) -> Result<(Vec<bool>, Vec<bool>)> {
    let mut predictions = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for chunk in chunked(samples, EVAL_CHUNK) {
        let batch = TokenBatch::from_rows(&chunk.iter().map(|s| &s.input_ids[..]).collect::<Vec<_>>());
        let logits = model.logits_for_task(chunk[0].task_id, &batch, &mut Phase::Eval)?;
        // Classification threshold fixed at logit zero.
        predictions.extend(logits.data().iter().map(|&z| z > F::zero()));
        labels.extend(chunk.iter().map(|s| s.label == 1));
    }
    Ok((predictions, labels))
}

/// Evaluate one task on one split: F1 or accuracy for classification tasks,
/// split-level MRR for retrieval.
pub fn evaluate<F: Element>(
    model: &MultiTaskModel<F>,
    data: &MultiTaskData,
    task_id: usize,
    split: Split,
) -> Result<f64> {
    let task = data
        .tasks
        .get(task_id)
        .ok_or(Error::UnknownTask { task_id })?;
    let samples = data.split(task_id, split)?;
    match task.kind {
        TaskKind::Retrieval => {
            let (queries, codes) = split_embeddings(model, samples)?;
            let truth: Vec<usize> = (0..queries.len()).collect();
            Ok(compute_mrr(&queries, &codes, &truth))
        }
        TaskKind::BinaryClassification | TaskKind::PairClassification => {
            let (predictions, labels) = classification_predictions(model, samples)?;
            Ok(match task.metric {
                crate::data::Metric::F1 => f1_score(&predictions, &labels),
                crate::data::Metric::Accuracy => accuracy(&predictions, &labels),
                crate::data::Metric::Mrr => unreachable!("validated at construction"),
            })
        }
    }
}

/// Within-batch MRR for a retrieval task.
pub fn evaluate_mrr_batched<F: Element>(
    model: &MultiTaskModel<F>,
    data: &MultiTaskData,
    task_id: usize,
    split: Split,
    batch: usize,
) -> Result<f64> {
    let samples = data.split(task_id, split)?;
    let (queries, codes) = split_embeddings(model, samples)?;
    Ok(compute_mrr_batched(&queries, &codes, batch.max(2)))
}

/// Run the full training protocol: round-robin global batches, weighted loss
/// combination, Adam over the trainable set, per-epoch validation with early
/// stopping on the uniform mean of per-task validation losses, best
/// checkpoint restoration and report assembly.
pub fn train<F: Element>(
    model: &MultiTaskModel<F>,
    data: &MultiTaskData,
    config: &TrainConfig,
    run_name: &str,
) -> Result<RunReport> {
    config.validate()?;
    if model.tasks() != data.tasks {
        return Err(Error::InvalidConfig {
            field: "tasks".into(),
            reason: "model and dataset task lists differ".into(),
        });
    }
    let started = Instant::now();
    let num_tasks = data.num_tasks();
    let global_batch_size = num_tasks * config.per_task_batch;
    let train_concat = data.train_concat()?;
    let kinds = model.task_kinds();

    let mut adam: Adam<F> = Adam::new(config.adam_config());
    let mut dropout_rng = rng_for(config.seed, "dropout");
    let mut warnings: Vec<String> = Vec::new();
    let mut records: Vec<EpochRecord> = Vec::new();

    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best_epoch = 0usize;
    let mut best_updates = 0u64;
    let mut best_snapshot = model.registry().snapshot();
    let mut triggered = false;
    let mut steps_per_epoch = 0usize;
    let mut global_step: u64 = 0;

    for epoch in 1..=config.max_epochs {
        let sampler = round_robin_batches(
            &train_concat,
            config.per_task_batch,
            derive_seed(config.seed, &format!("epoch{epoch}")),
        )?;
        steps_per_epoch = sampler.steps_per_epoch();

        let mut train_loss_sums = vec![0.0f64; num_tasks];
        let mut steps_this_epoch = 0usize;
        for batch in sampler {
            global_step += 1;
            steps_this_epoch += 1;
            let groups = batch_groups(data, &batch)?;
            let global = assemble_global_batch(&groups, &kinds)?;

            model.registry().zero_grads();
            let mut phase = Phase::Train {
                dropout_rng: &mut dropout_rng,
            };
            let losses = model.task_losses(&global, &mut phase)?;
            for (sum, loss) in train_loss_sums.iter_mut().zip(&losses) {
                *sum += loss.value().into_f64();
            }
            let combined = model.combined_loss(&losses)?;
            let combined_value = combined.value().into_f64();
            if !combined_value.is_finite() || combined_value > DIVERGENCE_LIMIT {
                return Err(Error::Divergence {
                    step: global_step,
                    loss: combined_value,
                });
            }
            backward(&combined)?;
            adam.step(model.registry())?;
        }

        let mut train_loss = BTreeMap::new();
        let mut valid_loss = BTreeMap::new();
        let mut valid_metric = BTreeMap::new();
        let mut valid_mrr_batched = BTreeMap::new();
        let mut loss_sum = 0.0;
        for task in &data.tasks {
            let name = task.name.clone();
            train_loss.insert(
                name.clone(),
                train_loss_sums[task.task_id] / steps_this_epoch as f64,
            );
            let samples = data.split(task.task_id, Split::Valid)?;
            let vloss = match task.kind {
                TaskKind::Retrieval => {
                    retrieval_split_loss(model, samples, config.per_task_batch)?
                }
                _ => classification_split_loss(model, samples)?,
            };
            loss_sum += vloss;
            valid_loss.insert(name.clone(), vloss);
            valid_metric.insert(name.clone(), evaluate(model, data, task.task_id, Split::Valid)?);
            if task.kind == TaskKind::Retrieval {
                valid_mrr_batched.insert(
                    name.clone(),
                    evaluate_mrr_batched(
                        model,
                        data,
                        task.task_id,
                        Split::Valid,
                        config.per_task_batch,
                    )?,
                );
            }
        }
        let valid_loss_mean = loss_sum / num_tasks as f64;

        let alpha = model.loss_weights().alpha_values();
        let min_alpha = alpha.iter().copied().fold(f64::INFINITY, f64::min);
        if min_alpha < 0.01 {
            let w = format!("epoch {epoch}: min task weight collapsed to {min_alpha:.4}");
            eprintln!("warning: {w}");
            warnings.push(w);
        }

        records.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            valid_metric,
            valid_mrr_batched,
            valid_loss_mean,
            alpha: alpha.clone(),
            min_alpha,
        });

        match stopper.observe(valid_loss_mean) {
            StopDecision::Improved => {
                best_epoch = epoch;
                best_updates = adam.steps_taken();
                best_snapshot = model.registry().snapshot();
            }
            StopDecision::Continue => {}
            StopDecision::Stop => {
                triggered = true;
                break;
            }
        }
    }

    // Restore the best validation checkpoint before final evaluation.
    model.registry().restore(&best_snapshot)?;

    let mut test_metrics = BTreeMap::new();
    let mut test_mrr_batched = BTreeMap::new();
    for task in &data.tasks {
        test_metrics.insert(
            task.name.clone(),
            evaluate(model, data, task.task_id, Split::Test)?,
        );
        if task.kind == TaskKind::Retrieval {
            test_mrr_batched.insert(
                task.name.clone(),
                evaluate_mrr_batched(model, data, task.task_id, Split::Test, config.per_task_batch)?,
            );
        }
    }

    Ok(RunReport {
        format_version: 1,
        name: run_name.to_string(),
        mode: config.mode.as_str().to_string(),
        peft_method: config.peft.as_ref().map(|p| p.method.as_str().to_string()),
        loss_weighting: config.loss_weighting.as_str().to_string(),
        precision: F::DTYPE.as_str().to_string(),
        seed: config.seed,
        tasks: data.tasks.clone(),
        per_task_batch: config.per_task_batch,
        global_batch_size,
        max_seq_len: config.max_seq_len,
        steps_per_epoch,
        epochs_run: records.len(),
        epochs: records,
        best_epoch,
        best_valid_loss: stopper.best,
        updates_to_best: best_updates,
        tokens_to_best: token_cost(best_updates, global_batch_size, config.max_seq_len),
        early_stop: EarlyStopInfo {
            patience: config.early_stop_patience,
            aggregate: "uniform_mean".to_string(),
            triggered,
        },
        census: census_report(model),
        test_metrics,
        test_mrr_batched,
        alpha_final: model.loss_weights().alpha_values(),
        warnings,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::Architecture;
    use crate::data::synthetic::{
        generate_synthetic_tasks, pair_samples, query_code_samples, text_samples, SyntheticSpec,
    };
    use crate::data::{Metric, TaskPaths, TaskSpec, TaskSplits};
    use crate::peft::PeftMethod;

    fn tiny_backbone_config() -> BackboneConfig {
        BackboneConfig {
            architecture: Architecture::EncoderOnly,
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            d_ffn: 32,
            vocab_size: 300,
            max_seq_len: 24,
            dropout: 0.0,
        }
    }

    fn tiny_data(max_len: usize, train: usize) -> MultiTaskData {
        let spec = SyntheticSpec {
            train_per_task: train.max(32),
            valid_per_task: 32,
            test_per_task: 32,
            ..SyntheticSpec::default()
        };
        let raw = generate_synthetic_tasks(&spec).unwrap();
        let tasks = vec![
            TaskSpec::new(0, "defect", TaskKind::BinaryClassification, Metric::Accuracy),
            TaskSpec::new(1, "search", TaskKind::Retrieval, Metric::Mrr),
        ];
        let splits = vec![
            TaskSplits {
                train: text_samples(&raw.defect[0][..train], 0, max_len),
                valid: text_samples(&raw.defect[1], 0, max_len),
                test: text_samples(&raw.defect[2], 0, max_len),
            },
            TaskSplits {
                train: query_code_samples(&raw.search[0][..train], 1, max_len),
                valid: query_code_samples(&raw.search[1], 1, max_len),
                test: query_code_samples(&raw.search[2], 1, max_len),
            },
        ];
        MultiTaskData::new(tasks, splits).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            max_epochs: 2,
            per_task_batch: 4,
            max_seq_len: 20,
            learning_rate: 1e-3,
            head_dropout: 0.0,
            ..TrainConfig::new(TrainMode::Full)
        }
    }

    #[test]
    fn token_cost_formula() {
        assert_eq!(token_cost(10, 8, 512), 40_960);
        assert_eq!(token_cost(0, 8, 512), 0);
    }

    #[test]
    fn train_produces_consistent_report() {
        let data = tiny_data(20, 32);
        let config = quick_config();
        let model = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();
        let report = train(&model, &data, &config, "smoke").unwrap();

        assert_eq!(report.global_batch_size, 8);
        assert_eq!(report.steps_per_epoch, 8);
        assert_eq!(
            report.tokens_to_best,
            report.updates_to_best * report.global_batch_size as u64 * report.max_seq_len as u64
        );
        assert!(report.epochs_run >= 1);
        assert!(report.best_epoch >= 1);
        assert_eq!(report.census.trainable_fraction, 1.0);
        assert!(report.test_metrics.contains_key("defect"));
        assert!(report.test_mrr_batched.contains_key("search"));
    }

    #[test]
    fn same_seed_reproduces_the_report_bitwise() {
        let data = tiny_data(20, 32);
        let config = quick_config();
        let m1 = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();
        let r1 = train(&m1, &data, &config, "det").unwrap();
        let m2 = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();
        let r2 = train(&m2, &data, &config, "det").unwrap();

        let mut a = serde_json::to_value(&r1).unwrap();
        let mut b = serde_json::to_value(&r2).unwrap();
        a["wall_clock_seconds"] = 0.into();
        b["wall_clock_seconds"] = 0.into();
        assert_eq!(a, b);
    }

    #[test]
    fn peft_mode_leaves_backbone_bit_identical() {
        let data = tiny_data(20, 32);
        let mut config = quick_config();
        config.mode = TrainMode::Peft;
        config.peft = Some(PeftConfig::new(PeftMethod::SerialAdapter));
        config.learning_rate = 1e-3;
        let model = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();

        let before: Vec<(String, Vec<u64>)> = model
            .registry()
            .iter()
            .filter(|p| p.name().starts_with("backbone."))
            .map(|p| {
                (
                    p.name().to_string(),
                    p.tensor().data().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();

        train(&model, &data, &config, "freeze").unwrap();

        for (name, bits) in before {
            let after: Vec<u64> = model
                .registry()
                .get(&name)
                .unwrap()
                .tensor()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(bits, after, "{name} drifted during peft training");
        }
    }

    #[test]
    fn strictly_worsening_validation_stops_after_two_epochs() {
        // Patience 1 with strictly worsening validation loss: the first epoch
        // sets the best, the second fails to improve and stops the run.
        let mut stopper = EarlyStopper::new(1);
        assert!(matches!(stopper.observe(1.0), StopDecision::Improved));
        assert!(matches!(stopper.observe(1.5), StopDecision::Stop));

        // Patience 2 tolerates one bad epoch.
        let mut stopper = EarlyStopper::new(2);
        assert!(matches!(stopper.observe(1.0), StopDecision::Improved));
        assert!(matches!(stopper.observe(1.5), StopDecision::Continue));
        assert!(matches!(stopper.observe(0.9), StopDecision::Improved));
        assert!(matches!(stopper.observe(1.1), StopDecision::Continue));
        assert!(matches!(stopper.observe(1.2), StopDecision::Stop));

        // Equal loss is not an improvement.
        let mut stopper = EarlyStopper::new(1);
        assert!(matches!(stopper.observe(1.0), StopDecision::Improved));
        assert!(matches!(stopper.observe(1.0), StopDecision::Stop));
    }

    #[test]
    fn losses_are_bit_identical_across_reruns_for_100_steps() {
        let data = tiny_data(16, 40);
        let config = TrainConfig {
            max_epochs: 10,
            per_task_batch: 4,
            max_seq_len: 16,
            learning_rate: 1e-3,
            head_dropout: 0.0,
            ..TrainConfig::new(TrainMode::Full)
        };

        let run = || -> Vec<u64> {
            let model = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();
            let concat = data.train_concat().unwrap();
            let mut adam: Adam<f64> = Adam::new(config.adam_config());
            let mut dropout_rng = rng_for(config.seed, "dropout");
            let kinds = model.task_kinds();
            let mut losses = Vec::new();
            'outer: for epoch in 1.. {
                let sampler = round_robin_batches(
                    &concat,
                    config.per_task_batch,
                    derive_seed(config.seed, &format!("epoch{epoch}")),
                )
                .unwrap();
                for batch in sampler {
                    let groups = batch_groups(&data, &batch).unwrap();
                    let global = assemble_global_batch(&groups, &kinds).unwrap();
                    model.registry().zero_grads();
                    let mut phase = Phase::Train {
                        dropout_rng: &mut dropout_rng,
                    };
                    let task_losses = model.task_losses(&global, &mut phase).unwrap();
                    let combined = model.combined_loss(&task_losses).unwrap();
                    losses.push(combined.value().to_bits());
                    backward(&combined).unwrap();
                    adam.step(model.registry()).unwrap();
                    if losses.len() == 100 {
                        break 'outer;
                    }
                }
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn evaluate_rejects_unknown_task_and_empty_split() {
        let data = tiny_data(16, 32);
        let config = quick_config();
        let model = build_model::<f64>(&tiny_backbone_config(), &config, &data.tasks).unwrap();
        assert!(matches!(
            evaluate(&model, &data, 9, Split::Test),
            Err(Error::UnknownTask { task_id: 9 })
        ));

        let mut empty = data.clone();
        empty.splits[0].test.clear();
        assert!(matches!(
            evaluate(&model, &empty, 0, Split::Test),
            Err(Error::EmptySplit { .. })
        ));
    }

    #[test]
    fn task_paths_survive_in_reports() {
        let mut task = TaskSpec::new(0, "defect", TaskKind::BinaryClassification, Metric::Accuracy);
        task.paths = Some(TaskPaths {
            train: "a.jsonl".into(),
            valid: "b.jsonl".into(),
            test: "c.jsonl".into(),
            code_map: None,
        });
        let json = serde_json::to_string(&task).unwrap();
        let back: TaskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(task, back);
    }
}
