//! Hard-parameter-sharing multi-task model: task heads, routing by task
//! label, per-task losses and learnable softmax loss weighting.
//!
//! One shared (possibly PEFT-adapted) backbone encodes the whole global
//! batch; the pooled rows are sliced by the recorded task order and each
//! sub-batch is directed to its task's head. Heads and the weighting vector
//! stay trainable in both full and PEFT modes.

use serde::{Deserialize, Serialize};

use crate::data::{MultiTaskBatch, Sample, TaskKind, TaskSpec, TokenBatch};
use crate::error::{Error, Result};
use crate::peft::AdaptedModel;
use crate::rng::rng_for;
use crate::tensor::nn::{
    bce_with_logits, ce_with_logits, dropout_phase, l2_normalize_rows, relu, softmax_last,
    weighted_sum, Phase,
};
use crate::tensor::ops::{matmul_tb, reshape, scale, slice};
use crate::tensor::param::ParamRegistry;
use crate::tensor::{Element, Tensor};

pub use crate::data::sampler::round_robin_batches;

/// Width of the retrieval embedding space.
pub const RETRIEVAL_EMBED_DIM: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// Softmax over a trainable vector, updated alongside the model.
    Learnable,
    /// The vector stays frozen at zero: exact uniform weighting.
    Uniform,
}

impl LossWeighting {
    pub fn as_str(self) -> &'static str {
        match self {
            LossWeighting::Learnable => "learnable",
            LossWeighting::Uniform => "uniform",
        }
    }
}

/// Two affine layers d -> d/2 -> 1 with a relu and dropout inside.
pub struct ClassificationHead<F: Element> {
    fc1_weight: Tensor<F>,
    fc1_bias: Tensor<F>,
    fc2_weight: Tensor<F>,
    fc2_bias: Tensor<F>,
    dropout: f64,
}

impl<F: Element> ClassificationHead<F> {
    fn init<R: rand::Rng>(d: usize, dropout: f64, rng: &mut R) -> Self {
        let hidden = (d / 2).max(1);
        let std = crate::backbone::WEIGHT_INIT_STD;
        ClassificationHead {
            fc1_weight: Tensor::randn(&[hidden, d], std, rng),
            fc1_bias: Tensor::leaf(&[hidden], vec![F::zero(); hidden], true).unwrap(),
            fc2_weight: Tensor::randn(&[1, hidden], std, rng),
            fc2_bias: Tensor::leaf(&[1], vec![F::zero()], true).unwrap(),
            dropout,
        }
    }

    /// One logit per input row: `[n, d] -> [n]`.
    pub fn forward(&self, pooled: &Tensor<F>, phase: &mut Phase) -> Result<Tensor<F>> {
        let h = relu(&crate::tensor::ops::add(
            &matmul_tb(pooled, &self.fc1_weight)?,
            &self.fc1_bias,
        )?);
        let h = dropout_phase(&h, self.dropout, phase)?;
        let logits = crate::tensor::ops::add(&matmul_tb(&h, &self.fc2_weight)?, &self.fc2_bias)?;
        reshape(&logits, &[pooled.shape()[0]])
    }
}

/// Single affine projection d -> 512 producing fixed-width embeddings.
pub struct RetrievalHead<F: Element> {
    weight: Tensor<F>,
    bias: Tensor<F>,
}

impl<F: Element> RetrievalHead<F> {
    fn init<R: rand::Rng>(d: usize, rng: &mut R) -> Self {
        let std = crate::backbone::WEIGHT_INIT_STD;
        RetrievalHead {
            weight: Tensor::randn(&[RETRIEVAL_EMBED_DIM, d], std, rng),
            bias: Tensor::leaf(
                &[RETRIEVAL_EMBED_DIM],
                vec![F::zero(); RETRIEVAL_EMBED_DIM],
                true,
            )
            .unwrap(),
        }
    }

    pub fn forward(&self, pooled: &Tensor<F>) -> Result<Tensor<F>> {
        crate::tensor::ops::add(&matmul_tb(pooled, &self.weight)?, &self.bias)
    }
}

pub enum Head<F: Element> {
    Classification(ClassificationHead<F>),
    Retrieval(RetrievalHead<F>),
}

/// The learnable per-task weighting vector, initialized to zero so the
/// initial weighting is uniform.
pub struct LossWeights<F: Element> {
    theta: Tensor<F>,
}

impl<F: Element> LossWeights<F> {
    pub fn new(num_tasks: usize, trainable: bool) -> Self {
        LossWeights {
            theta: Tensor::leaf(&[num_tasks], vec![F::zero(); num_tasks], trainable).unwrap(),
        }
    }

    pub fn theta(&self) -> &Tensor<F> {
        &self.theta
    }

    /// Normalized weights `alpha = softmax(theta)`; always sums to one with
    /// every entry positive.
    pub fn alphas(&self) -> Result<Tensor<F>> {
        softmax_last(&self.theta)
    }

    pub fn alpha_values(&self) -> Vec<f64> {
        self.alphas()
            .expect("theta is non-empty")
            .to_f64_vec()
    }
}

/// `L = sum_k alpha_k * L_k` with gradient flow into both the task losses and
/// the weighting vector.
pub fn combine_losses<F: Element>(
    losses: &[Tensor<F>],
    weights: &LossWeights<F>,
    task_names: &[String],
) -> Result<Tensor<F>> {
    for (loss, name) in losses.iter().zip(task_names) {
        if !loss.value().into_f64().is_finite() {
            return Err(Error::NonFiniteLoss { task: name.clone() });
        }
    }
    let alphas = weights.alphas()?;
    weighted_sum(&alphas, losses)
}

/// Mean binary cross-entropy over a classification sub-batch.
pub fn classification_loss<F: Element>(logits: &Tensor<F>, labels: &[u8]) -> Result<Tensor<F>> {
    for (row, &label) in labels.iter().enumerate() {
        if label > 1 {
            return Err(Error::InvalidLabel { label, row });
        }
    }
    let targets: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    bce_with_logits(logits, &targets)
}

/// In-batch retrieval loss: L2-normalized embeddings, similarity matrix
/// scaled by the temperature, categorical cross-entropy with the diagonal as
/// targets (each query's positive is its own code).
pub fn retrieval_loss<F: Element>(
    query_emb: &Tensor<F>,
    code_emb: &Tensor<F>,
    temperature: f64,
) -> Result<Tensor<F>> {
    if query_emb.shape() != code_emb.shape() {
        return Err(Error::ShapeMismatch {
            op: "retrieval_loss",
            lhs: query_emb.shape().to_vec(),
            rhs: code_emb.shape().to_vec(),
        });
    }
    let n = query_emb.shape()[0];
    if n < 2 {
        return Err(Error::BatchTooSmall { rows: n });
    }
    if temperature <= 0.0 {
        return Err(Error::InvalidConfig {
            field: "retrieval_temperature".into(),
            reason: format!("{temperature} must be positive"),
        });
    }
    let q = l2_normalize_rows(query_emb)?;
    let c = l2_normalize_rows(code_emb)?;
    let sims = scale(&matmul_tb(&q, &c)?, 1.0 / temperature);
    let targets: Vec<usize> = (0..n).collect();
    ce_with_logits(&sims, &targets)
}

/// Row layout of one task's slice of the global batch.
#[derive(Debug, Clone)]
pub struct Segment {
    pub task_id: usize,
    /// Rows this task occupies in the pooled batch (2x the sample count for
    /// retrieval: queries then codes).
    pub rows: usize,
    pub labels: Vec<u8>,
    pub is_retrieval: bool,
}

/// A merged global batch: all sub-batches stacked into one token batch plus
/// the record of which rows belong to which task.
pub struct GlobalBatch {
    pub tokens: TokenBatch,
    pub segments: Vec<Segment>,
}

/// Stack per-task sub-batches (already in task-id order) into a global batch.
pub fn assemble_global_batch(
    groups: &[(usize, Vec<&Sample>)],
    kinds: &[TaskKind],
) -> Result<GlobalBatch> {
    let mut rows: Vec<&[u32]> = Vec::new();
    let mut segments = Vec::with_capacity(groups.len());
    for (task_id, samples) in groups {
        let kind = kinds.get(*task_id).ok_or(Error::UnknownTask { task_id: *task_id })?;
        match kind {
            TaskKind::Retrieval => {
                for s in samples {
                    rows.push(&s.input_ids);
                }
                for s in samples {
                    rows.push(s.second_input_ids.as_deref().ok_or_else(|| {
                        Error::InvalidConfig {
                            field: "sample.second_input_ids".into(),
                            reason: "retrieval sample lacks a code side".into(),
                        }
                    })?);
                }
                segments.push(Segment {
                    task_id: *task_id,
                    rows: samples.len() * 2,
                    labels: Vec::new(),
                    is_retrieval: true,
                });
            }
            TaskKind::BinaryClassification | TaskKind::PairClassification => {
                for s in samples {
                    rows.push(&s.input_ids);
                }
                segments.push(Segment {
                    task_id: *task_id,
                    rows: samples.len(),
                    labels: samples.iter().map(|s| s.label).collect(),
                    is_retrieval: false,
                });
            }
        }
    }
    Ok(GlobalBatch {
        tokens: TokenBatch::from_rows(&rows),
        segments,
    })
}

/// Resolve a sampler batch into sample references grouped per task.
pub fn batch_groups<'a>(
    data: &'a crate::data::MultiTaskData,
    batch: &MultiTaskBatch,
) -> Result<Vec<(usize, Vec<&'a Sample>)>> {
    let mut groups = Vec::with_capacity(batch.task_order.len());
    for (&task_id, indices) in batch.task_order.iter().zip(&batch.sub_batches) {
        let train = &data
            .splits
            .get(task_id)
            .ok_or(Error::UnknownTask { task_id })?
            .train;
        groups.push((task_id, indices.iter().map(|&i| &train[i]).collect()));
    }
    Ok(groups)
}

/// Per-task outputs of one routed forward pass.
pub enum TaskOutput<F: Element> {
    /// Logits `[n]` for a classification sub-batch.
    Logits(Tensor<F>),
    /// Query and code embeddings `[n, 512]` each.
    Embeddings(Tensor<F>, Tensor<F>),
}

/// The shared model with one head per task and the loss weighting vector.
pub struct MultiTaskModel<F: Element> {
    model: AdaptedModel<F>,
    tasks: Vec<TaskSpec>,
    heads: Vec<Head<F>>,
    loss_weights: LossWeights<F>,
    weighting: LossWeighting,
    temperature: f64,
    head_dropout: f64,
    registry: ParamRegistry<F>,
}

/// Attach heads and the weighting vector to an adapted backbone. Heads are
/// always trainable regardless of the backbone freeze state.
pub fn build_multitask_model<F: Element>(
    model: AdaptedModel<F>,
    tasks: &[TaskSpec],
    weighting: LossWeighting,
    temperature: f64,
    head_dropout: f64,
    seed: u64,
) -> Result<MultiTaskModel<F>> {
    if tasks.is_empty() {
        return Err(Error::InvalidConfig {
            field: "tasks".into(),
            reason: "at least one task is required".into(),
        });
    }
    for (i, task) in tasks.iter().enumerate() {
        if tasks[..i].iter().any(|t| t.task_id == task.task_id) {
            return Err(Error::DuplicateTask {
                task_id: task.task_id,
            });
        }
        task.validate()?;
    }

    let d = model.backbone().config().d_model;
    let mut registry = ParamRegistry::new();
    registry.absorb(model.registry())?;
    let mut rng = rng_for(seed, "heads-init");

    let mut heads = Vec::with_capacity(tasks.len());
    for task in tasks {
        let base = format!("head.{}", task.name);
        let head = match task.kind {
            TaskKind::Retrieval => {
                let h = RetrievalHead::init(d, &mut rng);
                registry.add(format!("{base}.proj.weight"), h.weight.clone())?;
                registry.add(format!("{base}.proj.bias"), h.bias.clone())?;
                Head::Retrieval(h)
            }
            TaskKind::BinaryClassification | TaskKind::PairClassification => {
                let h = ClassificationHead::init(d, head_dropout, &mut rng);
                registry.add(format!("{base}.fc1.weight"), h.fc1_weight.clone())?;
                registry.add(format!("{base}.fc1.bias"), h.fc1_bias.clone())?;
                registry.add(format!("{base}.fc2.weight"), h.fc2_weight.clone())?;
                registry.add(format!("{base}.fc2.bias"), h.fc2_bias.clone())?;
                Head::Classification(h)
            }
        };
        heads.push(head);
    }

    let loss_weights = LossWeights::new(tasks.len(), weighting == LossWeighting::Learnable);
    registry.add("loss_weights.theta", loss_weights.theta.clone())?;

    Ok(MultiTaskModel {
        model,
        tasks: tasks.to_vec(),
        heads,
        loss_weights,
        weighting,
        temperature,
        head_dropout,
        registry,
    })
}

impl<F: Element> MultiTaskModel<F> {
    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn task_kinds(&self) -> Vec<TaskKind> {
        self.tasks.iter().map(|t| t.kind).collect()
    }

    pub fn adapted(&self) -> &AdaptedModel<F> {
        &self.model
    }

    pub fn registry(&self) -> &ParamRegistry<F> {
        &self.registry
    }

    pub fn loss_weights(&self) -> &LossWeights<F> {
        &self.loss_weights
    }

    pub fn weighting(&self) -> LossWeighting {
        self.weighting
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn head_dropout(&self) -> f64 {
        self.head_dropout
    }

    pub fn encode(&self, batch: &TokenBatch, phase: &mut Phase) -> Result<(Tensor<F>, Tensor<F>)> {
        self.model.encode(batch, phase)
    }

    /// Slice the pooled batch by the recorded task order and apply each
    /// task's head; head `t` sees only task-`t` rows.
    pub fn route(
        &self,
        pooled: &Tensor<F>,
        segments: &[Segment],
        phase: &mut Phase,
    ) -> Result<Vec<TaskOutput<F>>> {
        let total: usize = segments.iter().map(|s| s.rows).sum();
        if pooled.shape()[0] != total {
            return Err(Error::ShapeMismatch {
                op: "route",
                lhs: pooled.shape().to_vec(),
                rhs: vec![total],
            });
        }
        let mut outputs = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for segment in segments {
            let head = self
                .heads
                .get(segment.task_id)
                .ok_or(Error::UnknownTask {
                    task_id: segment.task_id,
                })?;
            let rows = slice(pooled, 0, offset, segment.rows)?;
            offset += segment.rows;
            let output = match head {
                Head::Classification(h) => TaskOutput::Logits(h.forward(&rows, phase)?),
                Head::Retrieval(h) => {
                    let emb = h.forward(&rows)?;
                    let n = segment.rows / 2;
                    let queries = slice(&emb, 0, 0, n)?;
                    let codes = slice(&emb, 0, n, n)?;
                    TaskOutput::Embeddings(queries, codes)
                }
            };
            outputs.push(output);
        }
        Ok(outputs)
    }

    /// One loss per task for a global batch, in task-id order of `segments`.
    pub fn task_losses(
        &self,
        batch: &GlobalBatch,
        phase: &mut Phase,
    ) -> Result<Vec<Tensor<F>>> {
        let (_, pooled) = self.encode(&batch.tokens, phase)?;
        let outputs = self.route(&pooled, &batch.segments, phase)?;
        let mut losses = Vec::with_capacity(outputs.len());
        for (segment, output) in batch.segments.iter().zip(outputs) {
            let loss = match output {
                TaskOutput::Logits(logits) => classification_loss(&logits, &segment.labels)?,
                TaskOutput::Embeddings(q, c) => retrieval_loss(&q, &c, self.temperature)?,
            };
            losses.push(loss);
        }
        Ok(losses)
    }

    /// Weighted combination of per-task losses.
    pub fn combined_loss(&self, losses: &[Tensor<F>]) -> Result<Tensor<F>> {
        let names: Vec<String> = self.tasks.iter().map(|t| t.name.clone()).collect();
        combine_losses(losses, &self.loss_weights, &names)
    }

    /// Retrieval embeddings for evaluation: `[n, 512]` for an arbitrary set
    /// of token rows through the given task's head.
    pub fn embed_for_task(
        &self,
        task_id: usize,
        tokens: &TokenBatch,
        phase: &mut Phase,
    ) -> Result<Tensor<F>> {
        let head = self.heads.get(task_id).ok_or(Error::UnknownTask { task_id })?;
        let Head::Retrieval(h) = head else {
            return Err(Error::InvalidConfig {
                field: "task".into(),
                reason: format!("task {task_id} has no retrieval head"),
            });
        };
        let (_, pooled) = self.encode(tokens, phase)?;
        h.forward(&pooled)
    }

    /// Classification logits for evaluation.
    pub fn logits_for_task(
        &self,
        task_id: usize,
        tokens: &TokenBatch,
        phase: &mut Phase,
    ) -> Result<Tensor<F>> {
        let head = self.heads.get(task_id).ok_or(Error::UnknownTask { task_id })?;
        let Head::Classification(h) = head else {
            return Err(Error::InvalidConfig {
                field: "task".into(),
                reason: format!("task {task_id} has no classification head"),
            });
        };
        let (_, pooled) = self.encode(tokens, phase)?;
        h.forward(&pooled, phase)
    }
}
