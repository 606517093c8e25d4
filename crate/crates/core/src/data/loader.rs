//! JSON-lines task file loaders and writers.
//!
//! Three schemas, one object per line, UTF-8:
//!
//! - single function: `{"func": "...", "target": 0|1}`
//! - code pair with index: a pairs file `{"id1": n, "id2": n, "label": 0|1}`
//!   plus an index-to-code map file `{"idx": n, "func": "..."}`
//! - query/code: `{"query": "...", "code": "..."}` (`docstring` is accepted
//!   as an alias for `query`)
//!
//! Malformed lines are counted and skipped; a file that is empty or over half
//! malformed is an error. Samples whose text is empty after tokenization are
//! dropped by the filter stage and counted in the summary.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::synthetic::{PairExample, QueryCodeExample, TextExample};
use super::{encode_pair, tokenize, Sample};
use crate::error::{Error, Result};

/// Outcome of loading one split: how many samples were kept and how many
/// lines were skipped by parsing or filtering.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoadSummary {
    pub task: String,
    pub split: String,
    pub kept: usize,
    pub skipped: usize,
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| dataset_err(path, e.to_string()))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| dataset_err(path, e.to_string()))
}

fn check_health(path: &Path, kept: usize, skipped: usize) -> Result<()> {
    if kept == 0 {
        return Err(dataset_err(path, "no usable samples"));
    }
    if skipped * 2 > kept + skipped {
        return Err(dataset_err(
            path,
            format!("{skipped} of {} lines malformed", kept + skipped),
        ));
    }
    Ok(())
}

#[derive(Deserialize)]
struct SingleFunctionLine {
    func: String,
    target: u8,
}

/// Load a `{"func", "target"}` file into classification samples.
pub fn load_single_function(
    path: &Path,
    task: &str,
    split: &str,
    task_id: usize,
    max_len: usize,
) -> Result<(Vec<Sample>, LoadSummary)> {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for line in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SingleFunctionLine>(&line) {
            Ok(rec) if rec.target <= 1 && !rec.func.is_empty() => samples.push(Sample {
                task_id,
                input_ids: tokenize(&rec.func, max_len),
                second_input_ids: None,
                label: rec.target,
            }),
            _ => skipped += 1,
        }
    }
    check_health(path, samples.len(), skipped)?;
    let kept = samples.len();
    Ok((
        samples,
        LoadSummary {
            task: task.into(),
            split: split.into(),
            kept,
            skipped,
        },
    ))
}

#[derive(Deserialize)]
struct PairLine {
    id1: u64,
    id2: u64,
    label: u8,
}

#[derive(Deserialize)]
struct MapLine {
    idx: u64,
    func: String,
}

/// Load a pair-id file against an index-to-code map file.
pub fn load_code_pairs(
    pairs_path: &Path,
    map_path: &Path,
    task: &str,
    split: &str,
    task_id: usize,
    max_len: usize,
) -> Result<(Vec<Sample>, LoadSummary)> {
    let mut code: HashMap<u64, String> = HashMap::new();
    let mut map_skipped = 0usize;
    for line in read_lines(map_path)? {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MapLine>(&line) {
            Ok(rec) => {
                code.insert(rec.idx, rec.func);
            }
            Err(_) => map_skipped += 1,
        }
    }
    if code.is_empty() {
        return Err(dataset_err(map_path, "no usable code entries"));
    }

    let mut samples = Vec::new();
    let mut skipped = map_skipped;
    for line in read_lines(pairs_path)? {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<PairLine>(&line) {
            Ok(rec) if rec.label <= 1 => {
                match (code.get(&rec.id1), code.get(&rec.id2)) {
                    (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                        samples.push(Sample {
                            task_id,
                            input_ids: encode_pair(a, b, max_len),
                            second_input_ids: None,
                            label: rec.label,
                        });
                    }
                    _ => skipped += 1,
                }
            }
            _ => skipped += 1,
        }
    }
    check_health(pairs_path, samples.len(), skipped)?;
    let kept = samples.len();
    Ok((
        samples,
        LoadSummary {
            task: task.into(),
            split: split.into(),
            kept,
            skipped,
        },
    ))
}

#[derive(Deserialize)]
struct QueryCodeLine {
    #[serde(alias = "docstring")]
    query: String,
    code: String,
}

/// Load a `{"query"/"docstring", "code"}` retrieval file.
pub fn load_query_code(
    path: &Path,
    task: &str,
    split: &str,
    task_id: usize,
    max_len: usize,
) -> Result<(Vec<Sample>, LoadSummary)> {
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for line in read_lines(path)? {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<QueryCodeLine>(&line) {
            Ok(rec) if !rec.query.is_empty() && !rec.code.is_empty() => samples.push(Sample {
                task_id,
                input_ids: tokenize(&rec.query, max_len),
                second_input_ids: Some(tokenize(&rec.code, max_len)),
                label: 0,
            }),
            _ => skipped += 1,
        }
    }
    check_health(path, samples.len(), skipped)?;
    let kept = samples.len();
    Ok((
        samples,
        LoadSummary {
            task: task.into(),
            split: split.into(),
            kept,
            skipped,
        },
    ))
}

fn writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).map_err(|e| dataset_err(path, e.to_string()))?,
    ))
}

pub fn write_single_function_jsonl(path: &Path, examples: &[TextExample]) -> Result<()> {
    let mut w = writer(path)?;
    for ex in examples {
        let line = json!({"func": ex.text, "target": ex.label});
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Write clone pairs as a pairs file plus a shared index-to-code map.
/// `id_base` offsets the indices so several splits can share one map file.
pub fn write_pairs_jsonl(
    pairs_path: &Path,
    map_path: &Path,
    examples: &[PairExample],
    id_base: u64,
    append_map: bool,
) -> Result<()> {
    let mut pw = writer(pairs_path)?;
    let mut mw = BufWriter::new(if append_map {
        File::options()
            .create(true)
            .append(true)
            .open(map_path)
            .map_err(|e| dataset_err(map_path, e.to_string()))?
    } else {
        File::create(map_path).map_err(|e| dataset_err(map_path, e.to_string()))?
    });
    for (i, ex) in examples.iter().enumerate() {
        let id1 = id_base + 2 * i as u64;
        let id2 = id1 + 1;
        writeln!(mw, "{}", json!({"idx": id1, "func": ex.a}))?;
        writeln!(mw, "{}", json!({"idx": id2, "func": ex.b}))?;
        writeln!(pw, "{}", json!({"id1": id1, "id2": id2, "label": ex.label}))?;
    }
    Ok(())
}

pub fn write_query_code_jsonl(path: &Path, examples: &[QueryCodeExample]) -> Result<()> {
    let mut w = writer(path)?;
    for ex in examples {
        writeln!(w, "{}", json!({"query": ex.query, "code": ex.code}))?;
    }
    Ok(())
}
