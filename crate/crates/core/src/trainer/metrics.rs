//! Classification and retrieval metrics.

/// F1 score of the positive class; 0 when the denominator vanishes.
pub fn f1_score(predictions: &[bool], labels: &[bool]) -> f64 {
    debug_assert_eq!(predictions.len(), labels.len());
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

pub fn accuracy(predictions: &[bool], labels: &[bool]) -> f64 {
    debug_assert_eq!(predictions.len(), labels.len());
    if predictions.is_empty() {
        return 0.0;
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    correct as f64 / predictions.len() as f64
}

fn l2_normalized(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|row| {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            row.iter().map(|v| v / norm).collect()
        })
        .collect()
}

/// Mean reciprocal rank under cosine similarity. For each query, all codes
/// are ranked by similarity descending with ties broken by ascending index;
/// `truth[i]` names the correct code for query `i`.
pub fn compute_mrr(query_embs: &[Vec<f64>], code_embs: &[Vec<f64>], truth: &[usize]) -> f64 {
    debug_assert_eq!(query_embs.len(), truth.len());
    if query_embs.is_empty() {
        return 0.0;
    }
    let queries = l2_normalized(query_embs);
    let codes = l2_normalized(code_embs);
    let mut total = 0.0;
    for (query, &target) in queries.iter().zip(truth) {
        let sims: Vec<f64> = codes
            .iter()
            .map(|code| query.iter().zip(code).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let target_sim = sims[target];
        // rank = 1 + better scores + equal scores at smaller indices
        let mut rank = 1usize;
        for (j, &s) in sims.iter().enumerate() {
            if s > target_sim || (s == target_sim && j < target) {
                rank += 1;
            }
        }
        total += 1.0 / rank as f64;
    }
    total / queries.len() as f64
}

/// Mean of within-batch MRR over consecutive chunks of `batch` pairs; the
/// batch-level counterpart of [`compute_mrr`]. A trailing chunk of fewer than
/// two pairs is skipped.
pub fn compute_mrr_batched(
    query_embs: &[Vec<f64>],
    code_embs: &[Vec<f64>],
    batch: usize,
) -> f64 {
    debug_assert!(batch >= 2);
    let n = query_embs.len();
    let mut total = 0.0;
    let mut chunks = 0usize;
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        if end - start < 2 {
            break;
        }
        let truth: Vec<usize> = (0..end - start).collect();
        total += compute_mrr(
            &query_embs[start..end].to_vec(),
            &code_embs[start..end].to_vec(),
            &truth,
        );
        chunks += 1;
        start = end;
    }
    if chunks == 0 {
        0.0
    } else {
        total / chunks as f64
    }
}
