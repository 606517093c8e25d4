//! Round-robin multi-task batch sampler.
//!
//! Each global step draws one fixed-size sub-batch per task, in task-id
//! order. Tasks iterate their samples in a seed-determined shuffled order;
//! when a task runs out mid-epoch its index resets with a freshly derived
//! shuffle and sampling continues, which oversamples smaller datasets. One
//! epoch is one full pass over the largest task:
//! `ceil(max_task_size / per_task_batch)` global steps.

use rand::seq::SliceRandom;

use super::ConcatenatedDataset;
use crate::error::Result;
use crate::rng::rng_for;

/// A global batch: one sub-batch of local sample indices per task, recorded
/// in task-id order.
#[derive(Debug, Clone)]
pub struct MultiTaskBatch {
    /// `task_order[k]` is the task id owning `sub_batches[k]`.
    pub task_order: Vec<usize>,
    /// Local indices into each task's dataset.
    pub sub_batches: Vec<Vec<usize>>,
}

struct TaskStream {
    order: Vec<usize>,
    cursor: usize,
    resets: u64,
    size: usize,
    seed: u64,
    task: usize,
}

impl TaskStream {
    fn new(task: usize, size: usize, seed: u64) -> Self {
        let mut stream = TaskStream {
            order: Vec::new(),
            cursor: 0,
            resets: 0,
            size,
            seed,
            task,
        };
        stream.reshuffle();
        stream
    }

    fn reshuffle(&mut self) {
        let tag = format!("sampler/task{}/reset{}", self.task, self.resets);
        let mut rng = rng_for(self.seed, &tag);
        self.order = (0..self.size).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    fn next_index(&mut self) -> usize {
        if self.cursor == self.order.len() {
            self.resets += 1;
            self.reshuffle();
        }
        let idx = self.order[self.cursor];
        self.cursor += 1;
        idx
    }
}

pub struct RoundRobinBatches {
    streams: Vec<TaskStream>,
    per_task_batch: usize,
    epoch_steps: usize,
    step: usize,
}

impl RoundRobinBatches {
    pub fn steps_per_epoch(&self) -> usize {
        self.epoch_steps
    }
}

/// Iterate one epoch of global batches over the concatenated datasets.
pub fn round_robin_batches<T>(
    data: &ConcatenatedDataset<T>,
    per_task_batch: usize,
    seed: u64,
) -> Result<RoundRobinBatches> {
    assert!(per_task_batch >= 1, "per_task_batch must be at least 1");
    let max_size = (0..data.num_tasks())
        .map(|t| data.task_len(t))
        .max()
        .unwrap_or(0);
    let epoch_steps = max_size.div_ceil(per_task_batch);
    let streams = (0..data.num_tasks())
        .map(|t| TaskStream::new(t, data.task_len(t), seed))
        .collect();
    Ok(RoundRobinBatches {
        streams,
        per_task_batch,
        epoch_steps,
        step: 0,
    })
}

impl Iterator for RoundRobinBatches {
    type Item = MultiTaskBatch;

    fn next(&mut self) -> Option<MultiTaskBatch> {
        if self.step == self.epoch_steps {
            return None;
        }
        self.step += 1;
        let mut task_order = Vec::with_capacity(self.streams.len());
        let mut sub_batches = Vec::with_capacity(self.streams.len());
        for stream in &mut self.streams {
            task_order.push(stream.task);
            sub_batches.push(
                (0..self.per_task_batch)
                    .map(|_| stream.next_index())
                    .collect(),
            );
        }
        Some(MultiTaskBatch {
            task_order,
            sub_batches,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn dataset(sizes: &[usize]) -> ConcatenatedDataset<usize> {
        ConcatenatedDataset::new(sizes.iter().map(|&n| (0..n).collect()).collect()).unwrap()
    }

    #[test]
    fn small_task_is_oversampled_by_the_reset_rule() {
        // Tasks {A: 6, B: 2}, batch 2 -> 3 steps; B's two samples appear in
        // every step (3x oversampled), A's six samples appear once each.
        let data = dataset(&[6, 2]);
        let batches: Vec<_> = round_robin_batches(&data, 2, 7).unwrap().collect();
        assert_eq!(batches.len(), 3);

        let mut a_counts: HashMap<usize, usize> = HashMap::new();
        let mut b_counts: HashMap<usize, usize> = HashMap::new();
        for batch in &batches {
            assert_eq!(batch.task_order, vec![0, 1]);
            assert_eq!(batch.sub_batches[0].len(), 2);
            assert_eq!(batch.sub_batches[1].len(), 2);
            for &i in &batch.sub_batches[0] {
                *a_counts.entry(i).or_default() += 1;
            }
            for &i in &batch.sub_batches[1] {
                *b_counts.entry(i).or_default() += 1;
            }
        }
        assert_eq!(a_counts.len(), 6);
        assert!(a_counts.values().all(|&c| c == 1));
        assert_eq!(b_counts.len(), 2);
        assert!(b_counts.values().all(|&c| c == 3));
    }

    #[test]
    fn equal_sizes_have_no_repeats_within_an_epoch() {
        let data = dataset(&[8, 8, 8]);
        let batches: Vec<_> = round_robin_batches(&data, 2, 3).unwrap().collect();
        assert_eq!(batches.len(), 4);
        for t in 0..3 {
            let mut seen = Vec::new();
            for batch in &batches {
                seen.extend_from_slice(&batch.sub_batches[t]);
            }
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 8, "task {t} repeated a sample");
        }
    }

    #[test]
    fn every_batch_has_one_sub_batch_per_task_in_id_order() {
        let data = dataset(&[5, 3, 9, 4]);
        for batch in round_robin_batches(&data, 3, 11).unwrap() {
            assert_eq!(batch.task_order, vec![0, 1, 2, 3]);
            assert!(batch.sub_batches.iter().all(|s| s.len() == 3));
        }
    }

    #[test]
    fn same_seed_reproduces_the_same_batches() {
        let data = dataset(&[10, 4]);
        let a: Vec<_> = round_robin_batches(&data, 3, 42)
            .unwrap()
            .map(|b| b.sub_batches)
            .collect();
        let b: Vec<_> = round_robin_batches(&data, 3, 42)
            .unwrap()
            .map(|b| b.sub_batches)
            .collect();
        assert_eq!(a, b);
        let c: Vec<_> = round_robin_batches(&data, 3, 43)
            .unwrap()
            .map(|b| b.sub_batches)
            .collect();
        assert_ne!(a, c);
    }

    #[test]
    fn reshuffle_on_reset_changes_the_visit_order() {
        // One task of 4 samples, batch 4, so each epoch step is one full
        // traversal. Two epochs' worth of draws should not repeat the same
        // permutation after the reset.
        let data = dataset(&[4]);
        let mut sampler = round_robin_batches(&data, 4, 5).unwrap();
        let first = sampler.next().unwrap().sub_batches[0].clone();
        // Force a reset by drawing a second epoch from a fresh sampler whose
        // stream continues beyond the first traversal.
        let mut long = round_robin_batches(&dataset(&[8, 4]), 4, 5).unwrap();
        let b1 = long.next().unwrap().sub_batches[1].clone();
        let b2 = long.next().unwrap().sub_batches[1].clone();
        let mut sorted1 = b1.clone();
        sorted1.sort_unstable();
        let mut sorted2 = b2.clone();
        sorted2.sort_unstable();
        assert_eq!(sorted1, vec![0, 1, 2, 3]);
        assert_eq!(sorted2, vec![0, 1, 2, 3]);
        assert_ne!((b1, b2.clone()), (first.clone(), first));
    }
}
