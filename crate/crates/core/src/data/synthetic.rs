//! Deterministic synthetic surrogate tasks.
//!
//! Four desk-scale datasets with the same shapes as the real corpora:
//!
//! - `clone`: pairs of code-like token sequences; positives are
//!   identifier-renamed copies, negatives are unrelated sequences;
//! - `defect`: sequences containing or lacking a planted bug-motif n-gram;
//! - `flaky`: same construction with a nondeterminism motif plus label noise,
//!   for a noisier signal;
//! - `search`: a query made of a sequence's salient tokens, shuffled.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{encode_pair, tokenize, Sample};
use crate::error::{Error, Result};
use crate::rng::rng_for;

/// Bug motif planted into positive defect samples. Its bytes never appear in
/// background text, so the signal is unambiguous.
pub const DEFECT_MOTIF: &str = "@#@!";
/// Nondeterminism motif for the flakiness surrogate.
pub const FLAKY_MOTIF: &str = "&%&?";

fn default_seed() -> u64 {
    7
}
fn default_train() -> usize {
    1024
}
fn default_eval() -> usize {
    128
}
fn default_noise() -> f64 {
    0.1
}
fn default_rename() -> f64 {
    0.25
}
fn default_seq_hint() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_train")]
    pub train_per_task: usize,
    #[serde(default = "default_eval")]
    pub valid_per_task: usize,
    #[serde(default = "default_eval")]
    pub test_per_task: usize,
    /// Label flip probability for the flakiness surrogate.
    #[serde(default = "default_noise")]
    pub flaky_noise: f64,
    /// Probability that each identifier of a clone positive is renamed.
    #[serde(default = "default_rename")]
    pub clone_rename_rate: f64,
    /// Sequence length the tokenizer will enforce; generated texts are sized
    /// to survive it without truncation (pair sides share the budget).
    #[serde(default = "default_seq_hint")]
    pub seq_len_hint: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: default_seed(),
            train_per_task: default_train(),
            valid_per_task: default_eval(),
            test_per_task: default_eval(),
            flaky_noise: default_noise(),
            clone_rename_rate: default_rename(),
            seq_len_hint: default_seq_hint(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TextExample {
    pub text: String,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairExample {
    pub a: String,
    pub b: String,
    pub label: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QueryCodeExample {
    pub query: String,
    pub code: String,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

#[derive(Debug, Clone)]
pub struct SyntheticTasks {
    /// train / valid / test.
    pub clone: [Vec<PairExample>; 3],
    pub defect: [Vec<TextExample>; 3],
    pub flaky: [Vec<TextExample>; 3],
    pub search: [Vec<QueryCodeExample>; 3],
}

/// A code-like token sequence with identifier slots that can be renamed
/// consistently.
#[derive(Clone)]
struct Program {
    idents: Vec<String>,
    tokens: Vec<ProgToken>,
}

#[derive(Clone)]
enum ProgToken {
    Kw(&'static str),
    Ident(usize),
    Lit(String),
}

const KEYWORDS: [&str; 8] = ["fn", "ret", "if", "set", "for", "int", "end", "call"];

fn random_word_of(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| {
            let i = rng.gen_range(0..52);
            if i < 26 {
                char::from(b'a' + i)
            } else {
                char::from(b'A' + i - 26)
            }
        })
        .collect()
}

fn random_word(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(3..=4);
    random_word_of(rng, len)
}

fn random_literal(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(2..=4);
    (0..len)
        .map(|_| char::from(b'0' + rng.gen_range(0..10)))
        .collect()
}

impl Program {
    /// Generate a program whose rendering never exceeds `max_bytes`
    /// (statements are added only while they fit).
    fn generate(rng: &mut ChaCha8Rng, max_bytes: usize) -> Program {
        let n_idents = rng.gen_range(2..=3);
        let idents: Vec<String> = (0..n_idents).map(|_| random_word(rng)).collect();
        let mut tokens = vec![
            ProgToken::Kw("fn"),
            ProgToken::Ident(0),
            ProgToken::Kw("("),
            ProgToken::Ident(1 % n_idents),
            ProgToken::Kw(")"),
        ];
        let token_len = |t: &ProgToken, idents: &[String]| match t {
            ProgToken::Kw(k) => k.len(),
            ProgToken::Ident(slot) => idents[*slot].len(),
            ProgToken::Lit(l) => l.len(),
        };
        let mut rendered: usize = tokens.iter().map(|t| token_len(t, &idents)).sum::<usize>()
            + tokens.len()
            - 1;
        for _ in 0..3 {
            let kw = KEYWORDS[rng.gen_range(0..KEYWORDS.len())];
            let statement = [
                ProgToken::Kw(kw),
                ProgToken::Ident(rng.gen_range(0..n_idents)),
                ProgToken::Kw(if rng.gen_bool(0.5) { "=" } else { "+" }),
                ProgToken::Lit(random_literal(rng)),
                ProgToken::Kw(";"),
            ];
            let added: usize =
                statement.iter().map(|t| token_len(t, &idents)).sum::<usize>() + statement.len();
            if rendered + added > max_bytes {
                break;
            }
            rendered += added;
            tokens.extend(statement);
        }
        Program { idents, tokens }
    }

    fn render(&self) -> String {
        let parts: Vec<&str> = self
            .tokens
            .iter()
            .map(|t| match t {
                ProgToken::Kw(k) => *k,
                ProgToken::Ident(slot) => self.idents[*slot].as_str(),
                ProgToken::Lit(l) => l.as_str(),
            })
            .collect();
        parts.join(" ")
    }

    /// Copy with each identifier independently renamed at `rate`. Fresh names
    /// keep the original length so the rendering budget still holds.
    fn renamed(&self, rate: f64, rng: &mut ChaCha8Rng) -> Program {
        let mut copy = self.clone();
        for ident in copy.idents.iter_mut() {
            if rng.gen::<f64>() < rate {
                *ident = random_word_of(rng, ident.len());
            }
        }
        copy
    }

    /// Referenced identifier words plus one literal, shuffled: the retrieval
    /// query.
    fn salient_query(&self, rng: &mut ChaCha8Rng) -> String {
        let mut words: Vec<String> = Vec::new();
        for token in &self.tokens {
            if let ProgToken::Ident(slot) = token {
                let word = &self.idents[*slot];
                if !words.contains(word) {
                    words.push(word.clone());
                }
            }
        }
        if let Some(lit) = self.tokens.iter().find_map(|t| match t {
            ProgToken::Lit(l) => Some(l.clone()),
            _ => None,
        }) {
            words.push(lit);
        }
        words.shuffle(rng);
        words.join(" ")
    }

    /// Insert `count` motif tokens at random positions.
    fn with_motif(&self, motif: &str, count: usize, rng: &mut ChaCha8Rng) -> String {
        let mut parts: Vec<String> = self
            .tokens
            .iter()
            .map(|t| match t {
                ProgToken::Kw(k) => (*k).to_string(),
                ProgToken::Ident(slot) => self.idents[*slot].clone(),
                ProgToken::Lit(l) => l.clone(),
            })
            .collect();
        for _ in 0..count {
            let at = rng.gen_range(0..=parts.len());
            parts.insert(at, motif.to_string());
        }
        parts.join(" ")
    }
}

fn motif_split(
    rng: &mut ChaCha8Rng,
    n: usize,
    motif: &str,
    noise: f64,
    seq_hint: usize,
) -> Vec<TextExample> {
    // Up to three motif tokens plus their spaces must survive tokenization.
    let budget = seq_hint.saturating_sub(2 + 3 * (motif.len() + 1)).max(16);
    (0..n)
        .map(|i| {
            let program = Program::generate(rng, budget);
            let positive = i % 2 == 0;
            let text = if positive {
                let count = rng.gen_range(1..=3);
                program.with_motif(motif, count, rng)
            } else {
                program.render()
            };
            let mut label = u8::from(positive);
            if noise > 0.0 && rng.gen::<f64>() < noise {
                label = 1 - label;
            }
            TextExample { text, label }
        })
        .collect()
}

fn clone_split(
    rng: &mut ChaCha8Rng,
    n: usize,
    rename_rate: f64,
    seq_hint: usize,
) -> Vec<PairExample> {
    // Both sides share the pair budget.
    let budget = (seq_hint.saturating_sub(2) / 2).max(16);
    (0..n)
        .map(|i| {
            let left = Program::generate(rng, budget);
            let positive = i % 2 == 0;
            if positive {
                let right = left.renamed(rename_rate, rng);
                PairExample {
                    a: left.render(),
                    b: right.render(),
                    label: 1,
                }
            } else {
                let right = Program::generate(rng, budget);
                PairExample {
                    a: left.render(),
                    b: right.render(),
                    label: 0,
                }
            }
        })
        .collect()
}

fn search_split(rng: &mut ChaCha8Rng, n: usize, seq_hint: usize) -> Vec<QueryCodeExample> {
    let budget = seq_hint.saturating_sub(8).max(16);
    (0..n)
        .map(|_| {
            let program = Program::generate(rng, budget);
            QueryCodeExample {
                query: program.salient_query(rng),
                code: program.render(),
            }
        })
        .collect()
}

/// Generate all four surrogate tasks. Deterministic in `spec.seed`.
pub fn generate_synthetic_tasks(spec: &SyntheticSpec) -> Result<SyntheticTasks> {
    let sizes = [spec.train_per_task, spec.valid_per_task, spec.test_per_task];
    for (name, &n) in SPLIT_NAMES.iter().zip(&sizes) {
        if n < 32 {
            return Err(Error::InvalidConfig {
                field: format!("synthetic.{name}_per_task"),
                reason: format!("split size {n} below the minimum of 32"),
            });
        }
    }
    fn gen3<T>(
        seed: u64,
        sizes: [usize; 3],
        task: &str,
        f: impl Fn(&mut ChaCha8Rng, usize) -> Vec<T>,
    ) -> [Vec<T>; 3] {
        SPLIT_NAMES
            .iter()
            .zip(sizes)
            .map(|(split, n)| {
                let mut rng = rng_for(seed, &format!("synthetic/{task}/{split}"));
                f(&mut rng, n)
            })
            .collect::<Vec<_>>()
            .try_into()
            .ok()
            .expect("three splits")
    }

    let hint = spec.seq_len_hint;
    Ok(SyntheticTasks {
        clone: gen3(spec.seed, sizes, "clone", |rng, n| {
            clone_split(rng, n, spec.clone_rename_rate, hint)
        }),
        defect: gen3(spec.seed, sizes, "defect", |rng, n| {
            motif_split(rng, n, DEFECT_MOTIF, 0.0, hint)
        }),
        flaky: gen3(spec.seed, sizes, "flaky", |rng, n| {
            motif_split(rng, n, FLAKY_MOTIF, spec.flaky_noise, hint)
        }),
        search: gen3(spec.seed, sizes, "search", |rng, n| {
            search_split(rng, n, hint)
        }),
    })
}

/// Tokenize single-sequence classification examples into samples.
pub fn text_samples(examples: &[TextExample], task_id: usize, max_len: usize) -> Vec<Sample> {
    examples
        .iter()
        .map(|ex| Sample {
            task_id,
            input_ids: tokenize(&ex.text, max_len),
            second_input_ids: None,
            label: ex.label,
        })
        .collect()
}

/// Encode pair-classification examples as one SEP-joined sequence each.
pub fn pair_samples(examples: &[PairExample], task_id: usize, max_len: usize) -> Vec<Sample> {
    examples
        .iter()
        .map(|ex| Sample {
            task_id,
            input_ids: encode_pair(&ex.a, &ex.b, max_len),
            second_input_ids: None,
            label: ex.label,
        })
        .collect()
}

/// Tokenize query/code retrieval examples; the code side rides in
/// `second_input_ids`.
pub fn query_code_samples(
    examples: &[QueryCodeExample],
    task_id: usize,
    max_len: usize,
) -> Vec<Sample> {
    examples
        .iter()
        .map(|ex| Sample {
            task_id,
            input_ids: tokenize(&ex.query, max_len),
            second_input_ids: Some(tokenize(&ex.code, max_len)),
            label: 0,
        })
        .collect()
}
