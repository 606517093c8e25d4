//! Data pipeline: byte-level tokenization, uniform sizing, task labeling,
//! dataset concatenation, JSONL loaders and synthetic task generation.

pub mod loader;
pub mod sampler;
pub mod synthetic;

pub use sampler::MultiTaskBatch;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Padding token id.
pub const PAD: u32 = 256;
/// Beginning-of-sequence token id, prepended to every sample.
pub const BOS: u32 = 257;
/// Separator between the two segments of a pair encoding.
pub const SEP: u32 = 258;
/// Vocabulary size of the byte-level tokenizer: 256 byte values + 3 specials.
pub const VOCAB: usize = 259;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    BinaryClassification,
    PairClassification,
    Retrieval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    F1,
    Accuracy,
    Mrr,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::F1 => "f1",
            Metric::Accuracy => "accuracy",
            Metric::Mrr => "mrr",
        }
    }
}

/// Dataset file locations for a file-backed task.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPaths {
    pub train: String,
    pub valid: String,
    pub test: String,
    /// Index-to-code map file for the pair-with-index schema.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code_map: Option<String>,
}

/// A task's identity: dense id, kind and evaluation metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<TaskPaths>,
}

impl TaskSpec {
    pub fn new(task_id: usize, name: impl Into<String>, kind: TaskKind, metric: Metric) -> Self {
        TaskSpec {
            task_id,
            name: name.into(),
            kind,
            metric,
            paths: None,
        }
    }

    /// Metric must match the task kind (retrieval implies MRR, classification
    /// implies F1 or accuracy).
    pub fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            TaskKind::Retrieval => self.metric == Metric::Mrr,
            TaskKind::BinaryClassification | TaskKind::PairClassification => {
                self.metric != Metric::Mrr
            }
        };
        if !ok {
            return Err(Error::InvalidConfig {
                field: format!("tasks[{}].metric", self.task_id),
                reason: format!("{:?} is inconsistent with kind {:?}", self.metric, self.kind),
            });
        }
        Ok(())
    }
}

/// One tokenized example. `input_ids` always has the configured uniform
/// length; retrieval samples carry the code side in `second_input_ids`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub task_id: usize,
    pub input_ids: Vec<u32>,
    pub second_input_ids: Option<Vec<u32>>,
    pub label: u8,
}

/// Byte-level tokenization: BOS + raw bytes, truncated to `max_len`, padded
/// with PAD. Any string tokenizes; output length is exactly `max_len`.
pub fn tokenize(text: &str, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must be at least 2");
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    for &b in text.as_bytes() {
        if ids.len() == max_len {
            break;
        }
        ids.push(u32::from(b));
    }
    while ids.len() < max_len {
        ids.push(PAD);
    }
    ids
}

/// Pair encoding: BOS + segment a + SEP + segment b, padded to `max_len`.
/// When the two segments overflow the budget they are truncated
/// proportionally to their byte lengths.
pub fn encode_pair(a: &str, b: &str, max_len: usize) -> Vec<u32> {
    assert!(max_len >= 2, "max_len must be at least 2");
    let (ab, bb) = (a.as_bytes(), b.as_bytes());
    let budget = max_len.saturating_sub(2);
    let (keep_a, keep_b) = if ab.len() + bb.len() <= budget {
        (ab.len(), bb.len())
    } else {
        let total = ab.len() + bb.len();
        let mut keep_a = budget * ab.len() / total;
        if ab.len() > 0 && keep_a == 0 && budget >= 2 {
            keep_a = 1;
        }
        let keep_b = (budget - keep_a).min(bb.len());
        keep_a = (budget - keep_b).min(ab.len());
        (keep_a, keep_b)
    };
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    ids.extend(ab[..keep_a].iter().map(|&b| u32::from(b)));
    if ids.len() < max_len {
        ids.push(SEP);
    }
    ids.extend(bb[..keep_b].iter().map(|&b| u32::from(b)));
    ids.truncate(max_len);
    while ids.len() < max_len {
        ids.push(PAD);
    }
    ids
}

/// Number of leading non-PAD positions of a row (padding is always a suffix).
pub fn content_length(ids: &[u32]) -> usize {
    ids.iter().position(|&id| id == PAD).unwrap_or(ids.len())
}

/// A batch of equal-length token rows ready for the backbone.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    /// Row-major `[rows * seq_len]` ids.
    pub ids: Vec<u32>,
    pub rows: usize,
    pub seq_len: usize,
    /// Non-pad length per row.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    pub fn from_rows<R: AsRef<[u32]>>(rows: &[R]) -> Self {
        let seq_len = rows.first().map_or(0, |r| r.as_ref().len());
        let mut ids = Vec::with_capacity(rows.len() * seq_len);
        let mut lengths = Vec::with_capacity(rows.len());
        for row in rows {
            let row = row.as_ref();
            debug_assert_eq!(row.len(), seq_len, "ragged rows in a token batch");
            ids.extend_from_slice(row);
            lengths.push(content_length(row));
        }
        TokenBatch {
            ids,
            rows: rows.len(),
            seq_len,
            lengths,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig {
                field: "split".into(),
                reason: format!("unknown split `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TaskSplits {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Every task's spec and splits for one run.
#[derive(Debug, Clone)]
pub struct MultiTaskData {
    pub tasks: Vec<TaskSpec>,
    pub splits: Vec<TaskSplits>,
}

impl MultiTaskData {
    pub fn new(tasks: Vec<TaskSpec>, splits: Vec<TaskSplits>) -> Result<Self> {
        if tasks.len() != splits.len() {
            return Err(Error::InvalidConfig {
                field: "tasks".into(),
                reason: format!("{} specs for {} datasets", tasks.len(), splits.len()),
            });
        }
        for (i, task) in tasks.iter().enumerate() {
            if task.task_id != i {
                return Err(Error::InvalidConfig {
                    field: format!("tasks[{i}].task_id"),
                    reason: format!("ids must be dense 0..K-1, got {}", task.task_id),
                });
            }
            task.validate()?;
        }
        Ok(MultiTaskData { tasks, splits })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn split(&self, task_id: usize, split: Split) -> Result<&[Sample]> {
        let splits = self.splits.get(task_id).ok_or(Error::UnknownTask { task_id })?;
        let samples = match split {
            Split::Train => &splits.train,
            Split::Valid => &splits.valid,
            Split::Test => &splits.test,
        };
        if samples.is_empty() {
            return Err(Error::EmptySplit {
                task: self.tasks[task_id].name.clone(),
                split: split.as_str().into(),
            });
        }
        Ok(samples)
    }

    /// Concatenated view over the train splits, for the sampler.
    pub fn train_concat(&self) -> Result<ConcatenatedDataset<Sample>> {
        ConcatenatedDataset::new(self.splits.iter().map(|s| s.train.clone()).collect())
    }
}

/// Per-task datasets glued together with cumulative offsets; the global index
/// maps bijectively to (task, local index).
pub struct ConcatenatedDataset<T> {
    parts: Vec<Vec<T>>,
    offsets: Vec<usize>,
}

impl<T> ConcatenatedDataset<T> {
    pub fn new(parts: Vec<Vec<T>>) -> Result<Self> {
        for (i, p) in parts.iter().enumerate() {
            if p.is_empty() {
                return Err(Error::EmptyDataset {
                    name: format!("task {i}"),
                });
            }
        }
        let mut offsets = Vec::with_capacity(parts.len() + 1);
        let mut acc = 0;
        for p in &parts {
            offsets.push(acc);
            acc += p.len();
        }
        offsets.push(acc);
        Ok(ConcatenatedDataset { parts, offsets })
    }

    pub fn num_tasks(&self) -> usize {
        self.parts.len()
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_len(&self, task: usize) -> usize {
        self.parts[task].len()
    }

    pub fn task_slice(&self, task: usize) -> &[T] {
        &self.parts[task]
    }

    pub fn global_index(&self, task: usize, local: usize) -> usize {
        debug_assert!(local < self.parts[task].len());
        self.offsets[task] + local
    }

    pub fn split_index(&self, global: usize) -> (usize, usize) {
        debug_assert!(global < self.len());
        let task = match self.offsets.binary_search(&global) {
            Ok(exact) => exact,
            Err(insert) => insert - 1,
        };
        (task, global - self.offsets[task])
    }

    pub fn get(&self, global: usize) -> &T {
        let (task, local) = self.split_index(global);
        &self.parts[task][local]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenize_matches_byte_layout() {
        assert_eq!(tokenize("ab", 5), vec![257, 97, 98, 256, 256]);
    }

    #[test]
    fn tokenize_empty_is_bos_then_pads() {
        let ids = tokenize("", 4);
        assert_eq!(ids, vec![257, 256, 256, 256]);
    }

    #[test]
    fn encode_pair_layout_and_order_sensitivity() {
        assert_eq!(encode_pair("x", "y", 6), vec![257, 120, 258, 121, 256, 256]);
        assert_eq!(encode_pair("x", "y", 6), encode_pair("x", "y", 6));
        assert_ne!(encode_pair("x", "y", 6), encode_pair("y", "x", 6));
    }

    #[test]
    fn encode_pair_truncates_proportionally() {
        let a = "aaaaaaaa"; // 8 bytes
        let b = "bbbb"; // 4 bytes
        let ids = encode_pair(a, b, 8); // budget 6 -> keep 4 of a, 2 of b
        assert_eq!(ids.len(), 8);
        let a_kept = ids.iter().filter(|&&t| t == 97).count();
        let b_kept = ids.iter().filter(|&&t| t == 98).count();
        assert_eq!((a_kept, b_kept), (4, 2));
        assert!(ids.contains(&SEP));
    }

    #[test]
    fn concat_dataset_rejects_empty_task() {
        assert!(ConcatenatedDataset::new(vec![vec![1], vec![]]).is_err());
    }

    #[test]
    fn metric_kind_consistency_is_enforced() {
        let bad = TaskSpec::new(0, "search", TaskKind::Retrieval, Metric::F1);
        assert!(bad.validate().is_err());
        let good = TaskSpec::new(0, "search", TaskKind::Retrieval, Metric::Mrr);
        assert!(good.validate().is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn tokenize_is_always_uniform_length(text in ".{0,300}", max_len in 2usize..64) {
            prop_assert_eq!(tokenize(&text, max_len).len(), max_len);
        }

        #[test]
        fn encode_pair_is_always_uniform_length(a in ".{0,100}", b in ".{0,100}", max_len in 2usize..64) {
            prop_assert_eq!(encode_pair(&a, &b, max_len).len(), max_len);
        }

        #[test]
        fn concat_index_round_trips(sizes in prop::collection::vec(1usize..20, 1..6)) {
            let parts: Vec<Vec<usize>> = sizes.iter().map(|&n| (0..n).collect()).collect();
            let ds = ConcatenatedDataset::new(parts).unwrap();
            for g in 0..ds.len() {
                let (task, local) = ds.split_index(g);
                prop_assert_eq!(ds.global_index(task, local), g);
            }
            for task in 0..ds.num_tasks() {
                for local in 0..ds.task_len(task) {
                    let g = ds.global_index(task, local);
                    prop_assert_eq!(ds.split_index(g), (task, local));
                }
            }
        }
    }
}
