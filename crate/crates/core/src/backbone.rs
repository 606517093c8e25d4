//! Desk-scale transformer backbone with per-parameter freeze control.
//!
//! Encoder-style (padding mask, first-token pooling) or decoder-style
//! (causal mask, last-non-pad pooling). Post-norm blocks; every insertion
//! point of the PEFT methods is exposed through [`BlockHooks`].

use serde::{Deserialize, Serialize};

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::peft::BlockHooks;
use crate::rng::rng_for;
use crate::tensor::nn::{dropout_phase, gelu, layer_norm, softmax_last, Phase};
use crate::tensor::ops::{
    add, concat, embedding, expand_leading, gather_rows, matmul, matmul_tb, permute, reshape,
    scale,
};
use crate::tensor::param::ParamRegistry;
use crate::tensor::{Element, Tensor};

/// Initialization scale for embeddings and small trainable modules.
pub const WEIGHT_INIT_STD: f64 = 0.02;
/// Projection weights use width-scaled normals, `std = 1/sqrt(fan_in)`, so
/// sublayer outputs keep a healthy share of the residual stream even when the
/// backbone stays frozen at its random initialization.
pub fn projection_init_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    EncoderOnly,
    DecoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub architecture: Architecture,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::desk_default()
    }
}

impl BackboneConfig {
    /// Trains in minutes on CPU while exercising every code path.
    pub fn desk_default() -> Self {
        BackboneConfig {
            architecture: Architecture::EncoderOnly,
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ffn: 512,
            vocab_size: crate::data::VOCAB,
            max_seq_len: 128,
            dropout: 0.1,
        }
    }

    /// 12-layer, d=768 encoder sized to ~125M total parameters; used for
    /// parameter-fraction accounting, not for training.
    pub fn reference_125m() -> Self {
        BackboneConfig {
            architecture: Architecture::EncoderOnly,
            n_layers: 12,
            d_model: 768,
            n_heads: 12,
            d_ffn: 3072,
            vocab_size: 51_416,
            max_seq_len: 512,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::InvalidConfig {
                field: format!("backbone.{field}"),
                reason,
            })
        };
        if self.n_layers == 0 {
            return fail("n_layers", "must be at least 1".into());
        }
        if self.d_model == 0 {
            return fail("d_model", "must be at least 1".into());
        }
        if self.n_heads == 0 {
            return fail("n_heads", "must be at least 1".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(
                "n_heads",
                format!("{} does not divide d_model {}", self.n_heads, self.d_model),
            );
        }
        if self.d_ffn == 0 {
            return fail("d_ffn", "must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size", "must be at least 1".into());
        }
        if self.max_seq_len == 0 {
            return fail("max_seq_len", "must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout", format!("{} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Closed-form parameter count implied by the config.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let emb = self.vocab_size * d + self.max_seq_len * d;
        let attn = 4 * (d * d + d);
        let ffn = self.d_ffn * d + self.d_ffn + d * self.d_ffn + d;
        let norms = 2 * 2 * d;
        emb + self.n_layers * (attn + ffn + norms)
    }
}

/// Affine projection with `[out, in]` weight layout.
pub struct Linear<F: Element> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Linear<F> {
    fn init<R: rand::Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[out_dim, in_dim], projection_init_std(in_dim), rng),
            bias: Tensor::leaf(&[out_dim], vec![F::zero(); out_dim], true).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        add(&matmul_tb(x, &self.weight)?, &self.bias)
    }
}

pub struct Norm<F: Element> {
    pub gain: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Element> Norm<F> {
    fn init(d: usize) -> Self {
        Norm {
            gain: Tensor::leaf(&[d], vec![F::one(); d], true).unwrap(),
            bias: Tensor::leaf(&[d], vec![F::zero(); d], true).unwrap(),
        }
    }

    pub fn forward(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        layer_norm(x, &self.gain, &self.bias, LAYER_NORM_EPS)
    }
}

struct Block<F: Element> {
    q_proj: Linear<F>,
    k_proj: Linear<F>,
    v_proj: Linear<F>,
    out_proj: Linear<F>,
    fc1: Linear<F>,
    fc2: Linear<F>,
    norm1: Norm<F>,
    norm2: Norm<F>,
}

pub struct Backbone<F: Element> {
    config: BackboneConfig,
    token_embedding: Tensor<F>,
    position_embedding: Tensor<F>,
    blocks: Vec<Block<F>>,
    registry: ParamRegistry<F>,
}

/// Deterministic construction: scaled-normal weights, zero biases, unit norm
/// gains; the same seed yields bit-identical parameters.
pub fn build_backbone<F: Element>(config: &BackboneConfig, seed: u64) -> Result<Backbone<F>> {
    config.validate()?;
    let mut rng = rng_for(seed, "backbone-init");
    let d = config.d_model;

    let token_embedding = Tensor::randn(&[config.vocab_size, d], WEIGHT_INIT_STD, &mut rng);
    let position_embedding = Tensor::randn(&[config.max_seq_len, d], WEIGHT_INIT_STD, &mut rng);

    let mut registry = ParamRegistry::new();
    registry.add("backbone.embed.token.weight", token_embedding.clone())?;
    registry.add("backbone.embed.position.weight", position_embedding.clone())?;

    let mut blocks = Vec::with_capacity(config.n_layers);
    for layer in 0..config.n_layers {
        let block = Block {
            q_proj: Linear::init(d, d, &mut rng),
            k_proj: Linear::init(d, d, &mut rng),
            v_proj: Linear::init(d, d, &mut rng),
            out_proj: Linear::init(d, d, &mut rng),
            fc1: Linear::init(config.d_ffn, d, &mut rng),
            fc2: Linear::init(d, config.d_ffn, &mut rng),
            norm1: Norm::init(d),
            norm2: Norm::init(d),
        };
        let base = format!("backbone.layer{layer}");
        for (name, linear) in [
            ("attn.q_proj", &block.q_proj),
            ("attn.k_proj", &block.k_proj),
            ("attn.v_proj", &block.v_proj),
            ("attn.out_proj", &block.out_proj),
            ("ffn.fc1", &block.fc1),
            ("ffn.fc2", &block.fc2),
        ] {
            registry.add(format!("{base}.{name}.weight"), linear.weight.clone())?;
            registry.add(format!("{base}.{name}.bias"), linear.bias.clone())?;
        }
        for (name, norm) in [("norm1", &block.norm1), ("norm2", &block.norm2)] {
            registry.add(format!("{base}.{name}.gain"), norm.gain.clone())?;
            registry.add(format!("{base}.{name}.bias"), norm.bias.clone())?;
        }
        blocks.push(block);
    }

    Ok(Backbone {
        config: config.clone(),
        token_embedding,
        position_embedding,
        blocks,
        registry,
    })
}

/// Additive attention mask, `[rows, heads, seq, prefix + seq]`. Prefix
/// columns are always attendable; the causal rule applies to real positions
/// of decoder-style models, the padding rule to encoder-style keys.
fn attention_mask<F: Element>(
    arch: Architecture,
    rows: usize,
    heads: usize,
    seq: usize,
    lengths: &[usize],
    prefix_len: usize,
) -> Tensor<F> {
    let key_len = prefix_len + seq;
    let neg = F::neg_infinity();
    let mut data = vec![F::zero(); rows * heads * seq * key_len];
    for b in 0..rows {
        for q in 0..seq {
            for j in 0..seq {
                let blocked = match arch {
                    Architecture::DecoderOnly => j > q,
                    Architecture::EncoderOnly => j >= lengths[b],
                };
                if blocked {
                    let col = prefix_len + j;
                    for h in 0..heads {
                        data[((b * heads + h) * seq + q) * key_len + col] = neg;
                    }
                }
            }
        }
    }
    Tensor::constant(&[rows, heads, seq, key_len], data).expect("mask shape")
}

impl<F: Element> Backbone<F> {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn registry(&self) -> &ParamRegistry<F> {
        &self.registry
    }

    pub fn set_frozen(&self, pred: impl Fn(&str) -> bool, frozen: bool) -> usize {
        self.registry.set_frozen_where(pred, frozen)
    }

    /// Hidden states `[rows, seq, d]` and the pooled representation
    /// `[rows, d]`: first token for encoder-style, last non-pad token for
    /// decoder-style.
    pub fn encode(
        &self,
        batch: &TokenBatch,
        hooks: &[BlockHooks<F>],
        phase: &mut Phase,
    ) -> Result<(Tensor<F>, Tensor<F>)> {
        if batch.seq_len > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                got: batch.seq_len,
                max: self.config.max_seq_len,
            });
        }
        if !hooks.is_empty() && hooks.len() != self.config.n_layers {
            return Err(Error::InvalidConfig {
                field: "hooks".into(),
                reason: format!(
                    "{} hook sets for {} layers",
                    hooks.len(),
                    self.config.n_layers
                ),
            });
        }
        let (rows, seq) = (batch.rows, batch.seq_len);
        let d = self.config.d_model;

        let token = embedding(&self.token_embedding, &batch.ids)?;
        let token = reshape(&token, &[rows, seq, d])?;
        let pos_ids: Vec<u32> = (0..seq as u32).collect();
        let pos = embedding(&self.position_embedding, &pos_ids)?;
        let mut x = add(&token, &pos)?;
        x = dropout_phase(&x, self.config.dropout, phase)?;

        let prefix_len = hooks
            .first()
            .and_then(|h| h.prefix_kv.as_ref())
            .map_or(0, |(k, _)| k.shape()[0]);
        let mask = attention_mask::<F>(
            self.config.architecture,
            rows,
            self.config.n_heads,
            seq,
            &batch.lengths,
            prefix_len,
        );

        let default_hooks = BlockHooks::default();
        for (layer, block) in self.blocks.iter().enumerate() {
            let hook = hooks.get(layer).unwrap_or(&default_hooks);

            let attn_out = self.attention(block, &x, &mask, hook, rows, seq, phase)?;
            let attn_out = match &hook.post_attn_adapter {
                Some(adapter) => adapter.apply(&attn_out)?,
                None => attn_out,
            };
            x = block.norm1.forward(&add(&x, &attn_out)?)?;

            let ffn_in = x.clone();
            let mut h = block.fc2.forward(&gelu(&block.fc1.forward(&ffn_in)?))?;
            h = dropout_phase(&h, self.config.dropout, phase)?;
            if let Some(adapter) = &hook.post_ffn_adapter {
                h = adapter.apply(&h)?;
            }
            if let Some(adapter) = &hook.parallel_ffn_adapter {
                h = adapter.apply(&ffn_in, &h)?;
            }
            x = block.norm2.forward(&add(&x, &h)?)?;
        }

        let pool_idx: Vec<usize> = match self.config.architecture {
            Architecture::EncoderOnly => vec![0; rows],
            Architecture::DecoderOnly => batch
                .lengths
                .iter()
                .map(|&len| len.saturating_sub(1))
                .collect(),
        };
        let pooled = gather_rows(&x, &pool_idx)?;
        Ok((x, pooled))
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        block: &Block<F>,
        x: &Tensor<F>,
        mask: &Tensor<F>,
        hook: &BlockHooks<F>,
        rows: usize,
        seq: usize,
        phase: &mut Phase,
    ) -> Result<Tensor<F>> {
        let heads = self.config.n_heads;
        let dh = self.config.head_dim();
        let split = |t: &Tensor<F>| -> Result<Tensor<F>> {
            permute(&reshape(t, &[rows, seq, heads, dh])?, &[0, 2, 1, 3])
        };

        let q = match &hook.lora_q {
            Some(lora) => add(
                &crate::peft::apply_lora(x, &block.q_proj.weight, lora)?,
                &block.q_proj.bias,
            )?,
            None => block.q_proj.forward(x)?,
        };
        let k = block.k_proj.forward(x)?;
        let v = match &hook.lora_v {
            Some(lora) => add(
                &crate::peft::apply_lora(x, &block.v_proj.weight, lora)?,
                &block.v_proj.bias,
            )?,
            None => block.v_proj.forward(x)?,
        };

        let q = split(&q)?;
        let mut k = split(&k)?;
        let mut v = split(&v)?;

        if let Some((k_prefix, v_prefix)) = &hook.prefix_kv {
            let expand = |p: &Tensor<F>| -> Result<Tensor<F>> {
                let p_len = p.shape()[0];
                let heads_first = permute(&reshape(p, &[p_len, heads, dh])?, &[1, 0, 2])?;
                expand_leading(&heads_first, rows)
            };
            k = concat(&[expand(k_prefix)?, k], 2)?;
            v = concat(&[expand(v_prefix)?, v], 2)?;
        }

        let scores = scale(&matmul_tb(&q, &k)?, 1.0 / (dh as f64).sqrt());
        let scores = add(&scores, mask)?;
        let attn = softmax_last(&scores)?;
        let attn = dropout_phase(&attn, self.config.dropout, phase)?;

        let ctx = matmul(&attn, &v)?;
        let merged = reshape(&permute(&ctx, &[0, 2, 1, 3])?, &[rows, seq, self.config.d_model])?;
        let out = block.out_proj.forward(&merged)?;
        dropout_phase(&out, self.config.dropout, phase)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{tokenize, TokenBatch, PAD};
    use crate::tensor::param::CensusFilter;

    fn tiny_config() -> BackboneConfig {
        BackboneConfig {
            architecture: Architecture::EncoderOnly,
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            vocab_size: 300,
            max_seq_len: 16,
            dropout: 0.0,
        }
    }

    fn batch(texts: &[&str], len: usize) -> TokenBatch {
        let rows: Vec<Vec<u32>> = texts.iter().map(|t| tokenize(t, len)).collect();
        TokenBatch::from_rows(&rows)
    }

    #[test]
    fn census_matches_closed_form() {
        let config = tiny_config();
        let backbone = build_backbone::<f64>(&config, 1).unwrap();
        assert_eq!(
            backbone.registry().total_params(),
            config.parameter_count()
        );
        assert_eq!(
            backbone.registry().census(CensusFilter::All).fraction_of_total,
            1.0
        );
    }

    #[test]
    fn invalid_head_split_is_rejected() {
        let mut config = tiny_config();
        config.n_heads = 3;
        let err = match build_backbone::<f64>(&config, 1) {
            Err(e) => e,
            Ok(_) => panic!("expected a config error"),
        };
        assert!(err.to_string().contains("n_heads"));
    }

    #[test]
    fn same_seed_gives_bit_identical_parameters() {
        let config = tiny_config();
        let a = build_backbone::<f64>(&config, 42).unwrap();
        let b = build_backbone::<f64>(&config, 42).unwrap();
        for (pa, pb) in a.registry().iter().zip(b.registry().iter()) {
            assert_eq!(pa.name(), pb.name());
            let da = pa.tensor().data();
            let db = pb.tensor().data();
            assert!(da.iter().zip(db.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = build_backbone::<f64>(&config, 43).unwrap();
        let first_a = a.registry().iter().next().unwrap().tensor().data()[0];
        let first_c = c.registry().iter().next().unwrap().tensor().data()[0];
        assert_ne!(first_a, first_c);
    }

    #[test]
    fn identical_rows_pool_identically() {
        let backbone = build_backbone::<f64>(&tiny_config(), 3).unwrap();
        let b = batch(&["fn main", "fn main"], 12);
        let (_, pooled) = backbone.encode(&b, &[], &mut Phase::Eval).unwrap();
        let v = pooled.to_f64_vec();
        assert_eq!(&v[..8], &v[8..]);
    }

    #[test]
    fn encoder_pooled_ignores_pad_content() {
        let backbone = build_backbone::<f64>(&tiny_config(), 3).unwrap();
        let clean = batch(&["abc"], 10);
        // Corrupt a pad position's token; the pooled vector must not move.
        let mut ids = clean.ids.clone();
        let pad_pos = clean.lengths[0];
        assert_eq!(ids[pad_pos], PAD);
        ids[pad_pos] = 65;
        let corrupted = TokenBatch {
            ids,
            rows: 1,
            seq_len: 10,
            lengths: clean.lengths.clone(),
        };
        let (_, a) = backbone.encode(&clean, &[], &mut Phase::Eval).unwrap();
        let (_, b) = backbone.encode(&corrupted, &[], &mut Phase::Eval).unwrap();
        assert_eq!(a.to_f64_vec(), b.to_f64_vec());
    }

    #[test]
    fn causal_mask_gives_prefix_independence() {
        let mut config = tiny_config();
        config.architecture = Architecture::DecoderOnly;
        let backbone = build_backbone::<f64>(&config, 5).unwrap();

        let mut ids_a = tokenize("abcdef", 10);
        let mut ids_b = ids_a.clone();
        // Change tokens after position t; hidden states at <= t must agree.
        let t = 4usize;
        ids_b[6] = 120;
        ids_b[7] = 121;
        ids_a[6] = 97;
        ids_a[7] = 98;
        let ba = TokenBatch::from_rows(&[ids_a]);
        let bb = TokenBatch::from_rows(&[ids_b]);
        let (ha, _) = backbone.encode(&ba, &[], &mut Phase::Eval).unwrap();
        let (hb, _) = backbone.encode(&bb, &[], &mut Phase::Eval).unwrap();
        let (va, vb) = (ha.to_f64_vec(), hb.to_f64_vec());
        let d = config.d_model;
        for pos in 0..=t {
            assert_eq!(
                &va[pos * d..(pos + 1) * d],
                &vb[pos * d..(pos + 1) * d],
                "position {pos} leaked future content"
            );
        }
        assert_ne!(&va[6 * d..7 * d], &vb[6 * d..7 * d]);
    }

    #[test]
    fn batch_rows_are_permutation_equivariant() {
        let backbone = build_backbone::<f64>(&tiny_config(), 7).unwrap();
        let fwd = batch(&["one", "two", "three"], 8);
        let rev = batch(&["three", "two", "one"], 8);
        let (_, pf) = backbone.encode(&fwd, &[], &mut Phase::Eval).unwrap();
        let (_, pr) = backbone.encode(&rev, &[], &mut Phase::Eval).unwrap();
        let (vf, vr) = (pf.to_f64_vec(), pr.to_f64_vec());
        assert_eq!(&vf[..8], &vr[16..]);
        assert_eq!(&vf[8..16], &vr[8..16]);
        assert_eq!(&vf[16..], &vr[..8]);
    }

    #[test]
    fn overlong_sequence_is_rejected() {
        let backbone = build_backbone::<f64>(&tiny_config(), 1).unwrap();
        let b = batch(&["0123456789abcdef0123"], 24);
        assert!(matches!(
            backbone.encode(&b, &[], &mut Phase::Eval),
            Err(Error::SequenceTooLong { got: 24, max: 16 })
        ));
    }

    #[test]
    fn freeze_all_empties_the_trainable_census() {
        let backbone = build_backbone::<f64>(&tiny_config(), 1).unwrap();
        let changed = backbone.set_frozen(|_| true, true);
        assert!(changed > 0);
        assert_eq!(
            backbone.registry().census(CensusFilter::Trainable).count,
            0
        );
    }
}
