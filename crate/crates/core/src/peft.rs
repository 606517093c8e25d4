//! Parameter-efficient fine-tuning modules and their injection points.
//!
//! Four methods over a frozen backbone:
//!
//! - serial adapters: a bottleneck block after the attention sublayer and
//!   another after the FFN sublayer of every block;
//! - parallel adapters: one bottleneck side path per block, parallel to the
//!   FFN sublayer and reading that sublayer's input;
//! - LoRA: low-rank additive updates on the configured attention projections;
//! - prefix tuning: learnable key/value prefixes per layer, produced by a
//!   shared reparameterization network.
//!
//! Serial, parallel and LoRA zero-initialize their up/output matrices, so an
//! injected model's forward pass at init equals the frozen backbone's exactly.

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::nn::{relu, Phase};
use crate::tensor::ops::{add, matmul, matmul_tb, scale};
use crate::tensor::param::ParamRegistry;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeftMethod {
    SerialAdapter,
    ParallelAdapter,
    Lora,
    Prefix,
}

impl PeftMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            PeftMethod::SerialAdapter => "serial_adapter",
            PeftMethod::ParallelAdapter => "parallel_adapter",
            PeftMethod::Lora => "lora",
            PeftMethod::Prefix => "prefix",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Value,
}

fn default_bottleneck() -> usize {
    64
}
fn default_lora_rank() -> usize {
    16
}
fn default_lora_targets() -> Vec<LoraTarget> {
    vec![LoraTarget::Query, LoraTarget::Value]
}
fn default_lora_scaling() -> f64 {
    1.0
}
fn default_prefix_length() -> usize {
    20
}
fn default_prefix_width() -> usize {
    512
}

/// Which PEFT method is injected, where, and with what capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftConfig {
    pub method: PeftMethod,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_r: usize,
    #[serde(default = "default_lora_rank")]
    pub lora_rank: usize,
    #[serde(default = "default_lora_targets")]
    pub lora_targets: Vec<LoraTarget>,
    #[serde(default = "default_lora_scaling")]
    pub lora_scaling: f64,
    #[serde(default = "default_prefix_length")]
    pub prefix_length: usize,
    #[serde(default = "default_prefix_width")]
    pub prefix_reparam_width: usize,
}

impl PeftConfig {
    pub fn new(method: PeftMethod) -> Self {
        PeftConfig {
            method,
            bottleneck_r: default_bottleneck(),
            lora_rank: default_lora_rank(),
            lora_targets: default_lora_targets(),
            lora_scaling: default_lora_scaling(),
            prefix_length: default_prefix_length(),
            prefix_reparam_width: default_prefix_width(),
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::InvalidConfig {
                field: format!("peft.{field}"),
                reason,
            })
        };
        if self.bottleneck_r == 0 {
            return fail("bottleneck_r", "must be at least 1".into());
        }
        if self.lora_rank == 0 {
            return fail("lora_rank", "must be at least 1".into());
        }
        if self.prefix_length == 0 {
            return fail("prefix_length", "must be at least 1".into());
        }
        if self.prefix_reparam_width == 0 {
            return fail("prefix_reparam_width", "must be at least 1".into());
        }
        if self.method == PeftMethod::Lora {
            if self.lora_targets.is_empty() {
                return fail("lora_targets", "must not be empty".into());
            }
            if self.lora_rank > d_model {
                return Err(Error::DegenerateRank {
                    rank: self.lora_rank,
                    dim: d_model,
                });
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Modules
// ---------------------------------------------------------------------------

/// Bottleneck adapter `h + W_up(relu(W_down h + b_down)) + b_up`.
/// `W_up` starts at zero, so the module is the identity at init.
#[derive(Clone)]
pub struct SerialAdapter<F: Element> {
    pub w_down: Tensor<F>,
    pub b_down: Tensor<F>,
    pub w_up: Tensor<F>,
    pub b_up: Tensor<F>,
}

impl<F: Element> SerialAdapter<F> {
    pub fn init<R: rand::Rng>(d: usize, r: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        SerialAdapter {
            w_down: Tensor::rand_uniform(&[d, r], -bound, bound, rng),
            b_down: Tensor::leaf(&[r], vec![F::zero(); r], true).unwrap(),
            w_up: Tensor::leaf(&[r, d], vec![F::zero(); r * d], true).unwrap(),
            b_up: Tensor::leaf(&[d], vec![F::zero(); d], true).unwrap(),
        }
    }

    pub fn apply(&self, h: &Tensor<F>) -> Result<Tensor<F>> {
        apply_serial_adapter(h, self)
    }

    pub fn parameter_count(&self) -> usize {
        self.w_down.numel() + self.b_down.numel() + self.w_up.numel() + self.b_up.numel()
    }
}

/// Bottleneck side path `sublayer_output + W_up(relu(W_down sublayer_input))`.
#[derive(Clone)]
pub struct ParallelAdapter<F: Element> {
    pub w_down: Tensor<F>,
    pub w_up: Tensor<F>,
}

impl<F: Element> ParallelAdapter<F> {
    pub fn init<R: rand::Rng>(d: usize, r: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        ParallelAdapter {
            w_down: Tensor::rand_uniform(&[d, r], -bound, bound, rng),
            w_up: Tensor::leaf(&[r, d], vec![F::zero(); r * d], true).unwrap(),
        }
    }

    pub fn apply(&self, sublayer_input: &Tensor<F>, sublayer_output: &Tensor<F>) -> Result<Tensor<F>> {
        apply_parallel_adapter(sublayer_input, sublayer_output, self)
    }

    pub fn parameter_count(&self) -> usize {
        self.w_down.numel() + self.w_up.numel()
    }
}

/// Low-rank update `x W^T + scaling * x A^T B^T` beside a frozen projection.
/// `B` starts at zero, so the adapted projection equals the frozen one at init.
#[derive(Clone)]
pub struct LoraModule<F: Element> {
    /// `[rank, d_in]`
    pub a: Tensor<F>,
    /// `[d_out, rank]`
    pub b: Tensor<F>,
    pub scaling: f64,
}

impl<F: Element> LoraModule<F> {
    pub fn init<R: rand::Rng>(d: usize, rank: usize, scaling: f64, rng: &mut R) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        LoraModule {
            a: Tensor::rand_uniform(&[rank, d], -bound, bound, rng),
            b: Tensor::leaf(&[d, rank], vec![F::zero(); d * rank], true).unwrap(),
            scaling,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

/// Prefix table plus a two-layer reparameterization network producing
/// per-layer key/value prefixes.
#[derive(Clone)]
pub struct PrefixModule<F: Element> {
    pub embed: Tensor<F>,
    pub fc1_weight: Tensor<F>,
    pub fc1_bias: Tensor<F>,
    pub fc2_weight: Tensor<F>,
    pub fc2_bias: Tensor<F>,
    pub n_layers: usize,
    pub prefix_length: usize,
    pub d_model: usize,
}

impl<F: Element> PrefixModule<F> {
    pub fn init<R: rand::Rng>(
        d: usize,
        n_layers: usize,
        prefix_length: usize,
        width: usize,
        rng: &mut R,
    ) -> Self {
        let std = crate::backbone::WEIGHT_INIT_STD;
        let out = n_layers * 2 * d;
        PrefixModule {
            embed: Tensor::randn(&[prefix_length, d], std, rng),
            fc1_weight: Tensor::randn(&[width, d], std, rng),
            fc1_bias: Tensor::leaf(&[width], vec![F::zero(); width], true).unwrap(),
            fc2_weight: Tensor::randn(&[out, width], std, rng),
            fc2_bias: Tensor::leaf(&[out], vec![F::zero(); out], true).unwrap(),
            n_layers,
            prefix_length,
            d_model: d,
        }
    }

    /// Run the reparameterization once, yielding `(key, value)` prefixes of
    /// shape `[prefix_length, d]` for every layer. Part of the autodiff graph.
    pub fn layer_prefixes(&self) -> Result<Vec<(Tensor<F>, Tensor<F>)>> {
        let hidden = relu(&add(
            &matmul_tb(&self.embed, &self.fc1_weight)?,
            &self.fc1_bias,
        )?);
        let kv = add(&matmul_tb(&hidden, &self.fc2_weight)?, &self.fc2_bias)?;
        let d = self.d_model;
        let mut per_layer = Vec::with_capacity(self.n_layers);
        for layer in 0..self.n_layers {
            let k = crate::tensor::ops::slice(&kv, 1, (2 * layer) * d, d)?;
            let v = crate::tensor::ops::slice(&kv, 1, (2 * layer + 1) * d, d)?;
            per_layer.push((k, v));
        }
        Ok(per_layer)
    }

    pub fn parameter_count(&self) -> usize {
        self.embed.numel()
            + self.fc1_weight.numel()
            + self.fc1_bias.numel()
            + self.fc2_weight.numel()
            + self.fc2_bias.numel()
    }
}

// ---------------------------------------------------------------------------
// Functional forms
// ---------------------------------------------------------------------------

/// `W_up(relu(W_down h + b_down)) + b_up + h`.
pub fn apply_serial_adapter<F: Element>(
    h: &Tensor<F>,
    module: &SerialAdapter<F>,
) -> Result<Tensor<F>> {
    let pre = add(&matmul(h, &module.w_down)?, &module.b_down)?;
    let up = add(&matmul(&relu(&pre), &module.w_up)?, &module.b_up)?;
    add(&up, h)
}

/// `sublayer_output + W_up(relu(W_down sublayer_input))`; the side path reads
/// the sublayer's input, not its output.
pub fn apply_parallel_adapter<F: Element>(
    sublayer_input: &Tensor<F>,
    sublayer_output: &Tensor<F>,
    module: &ParallelAdapter<F>,
) -> Result<Tensor<F>> {
    let side = matmul(&relu(&matmul(sublayer_input, &module.w_down)?), &module.w_up)?;
    add(sublayer_output, &side)
}

/// `x W^T + scaling * x A^T B^T` with only `A` and `B` trainable.
pub fn apply_lora<F: Element>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    module: &LoraModule<F>,
) -> Result<Tensor<F>> {
    let rank = module.a.shape()[0];
    let d_in = w.shape()[1];
    if rank > d_in {
        return Err(Error::DegenerateRank { rank, dim: d_in });
    }
    let base = matmul_tb(x, w)?;
    let low = matmul_tb(x, &module.a)?;
    let up = matmul_tb(&low, &module.b)?;
    add(&base, &scale(&up, module.scaling))
}

/// Prepend this layer's learnable prefixes to keys and values
/// (`[batch, heads, seq, head_dim]` each). The query stream is unchanged and
/// every query may attend to every prefix position.
pub fn apply_prefix<F: Element>(
    keys: &Tensor<F>,
    values: &Tensor<F>,
    module: &PrefixModule<F>,
    layer_index: usize,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if layer_index >= module.n_layers {
        return Err(Error::InvalidAxis {
            op: "apply_prefix",
            axis: layer_index,
            shape: vec![module.n_layers],
        });
    }
    let (k_prefix, v_prefix) = module.layer_prefixes()?.swap_remove(layer_index);
    let (batch, heads, _, dh) = (
        keys.shape()[0],
        keys.shape()[1],
        keys.shape()[2],
        keys.shape()[3],
    );
    let expand = |p: &Tensor<F>| -> Result<Tensor<F>> {
        let p_len = p.shape()[0];
        let heads_first = crate::tensor::ops::permute(
            &crate::tensor::ops::reshape(p, &[p_len, heads, dh])?,
            &[1, 0, 2],
        )?;
        crate::tensor::ops::expand_leading(&heads_first, batch)
    };
    let k = crate::tensor::ops::concat(&[expand(&k_prefix)?, keys.clone()], 2)?;
    let v = crate::tensor::ops::concat(&[expand(&v_prefix)?, values.clone()], 2)?;
    Ok((k, v))
}

// ---------------------------------------------------------------------------
// Injection
// ---------------------------------------------------------------------------

/// Per-block insertion points consumed by the backbone's forward pass.
pub struct BlockHooks<F: Element> {
    pub post_attn_adapter: Option<SerialAdapter<F>>,
    pub post_ffn_adapter: Option<SerialAdapter<F>>,
    pub parallel_ffn_adapter: Option<ParallelAdapter<F>>,
    pub lora_q: Option<LoraModule<F>>,
    pub lora_v: Option<LoraModule<F>>,
    pub prefix_kv: Option<(Tensor<F>, Tensor<F>)>,
}

impl<F: Element> Default for BlockHooks<F> {
    fn default() -> Self {
        BlockHooks {
            post_attn_adapter: None,
            post_ffn_adapter: None,
            parallel_ffn_adapter: None,
            lora_q: None,
            lora_v: None,
            prefix_kv: None,
        }
    }
}

enum PeftModules<F: Element> {
    Serial(Vec<(SerialAdapter<F>, SerialAdapter<F>)>),
    Parallel(Vec<ParallelAdapter<F>>),
    Lora(Vec<(Option<LoraModule<F>>, Option<LoraModule<F>>)>),
    Prefix(PrefixModule<F>),
}

/// A backbone plus optionally injected PEFT modules. In full fine-tuning mode
/// nothing is injected and the backbone stays trainable.
pub struct AdaptedModel<F: Element> {
    backbone: Backbone<F>,
    peft_config: Option<PeftConfig>,
    modules: Option<PeftModules<F>>,
    registry: ParamRegistry<F>,
}

impl<F: Element> AdaptedModel<F> {
    /// Full fine-tuning: no modules, every backbone parameter trainable.
    pub fn full(backbone: Backbone<F>) -> Result<Self> {
        let mut registry = ParamRegistry::new();
        registry.absorb(backbone.registry())?;
        Ok(AdaptedModel {
            backbone,
            peft_config: None,
            modules: None,
            registry,
        })
    }

    pub fn backbone(&self) -> &Backbone<F> {
        &self.backbone
    }

    pub fn peft_config(&self) -> Option<&PeftConfig> {
        self.peft_config.as_ref()
    }

    pub fn registry(&self) -> &ParamRegistry<F> {
        &self.registry
    }

    fn block_hooks(&self) -> Result<Vec<BlockHooks<F>>> {
        let n_layers = self.backbone.config().n_layers;
        let Some(modules) = &self.modules else {
            return Ok(Vec::new());
        };
        let mut hooks: Vec<BlockHooks<F>> = (0..n_layers).map(|_| BlockHooks::default()).collect();
        match modules {
            PeftModules::Serial(per_layer) => {
                for (hook, (attn, ffn)) in hooks.iter_mut().zip(per_layer) {
                    hook.post_attn_adapter = Some(attn.clone());
                    hook.post_ffn_adapter = Some(ffn.clone());
                }
            }
            PeftModules::Parallel(per_layer) => {
                for (hook, adapter) in hooks.iter_mut().zip(per_layer) {
                    hook.parallel_ffn_adapter = Some(adapter.clone());
                }
            }
            PeftModules::Lora(per_layer) => {
                for (hook, (q, v)) in hooks.iter_mut().zip(per_layer) {
                    hook.lora_q = q.clone();
                    hook.lora_v = v.clone();
                }
            }
            PeftModules::Prefix(module) => {
                for (hook, kv) in hooks.iter_mut().zip(module.layer_prefixes()?) {
                    hook.prefix_kv = Some(kv);
                }
            }
        }
        Ok(hooks)
    }

    pub fn encode(&self, batch: &TokenBatch, phase: &mut Phase) -> Result<(Tensor<F>, Tensor<F>)> {
        let hooks = self.block_hooks()?;
        self.backbone.encode(batch, &hooks, phase)
    }
}

/// Freeze the whole backbone and inject the configured PEFT method. Injected
/// parameters are registered trainable under the `peft.` prefix.
pub fn inject_peft<F: Element>(
    backbone: Backbone<F>,
    config: &PeftConfig,
    seed: u64,
) -> Result<AdaptedModel<F>> {
    let d = backbone.config().d_model;
    let n_layers = backbone.config().n_layers;
    config.validate(d)?;

    backbone.set_frozen(|_| true, true);
    let mut registry = ParamRegistry::new();
    registry.absorb(backbone.registry())?;
    let mut rng = rng_for(seed, "peft-init");

    let modules = match config.method {
        PeftMethod::SerialAdapter => {
            let mut per_layer = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let attn = SerialAdapter::init(d, config.bottleneck_r, &mut rng);
                let ffn = SerialAdapter::init(d, config.bottleneck_r, &mut rng);
                for (tag, m) in [("adapter_attn", &attn), ("adapter_ffn", &ffn)] {
                    let base = format!("peft.layer{layer}.{tag}");
                    registry.add(format!("{base}.w_down"), m.w_down.clone())?;
                    registry.add(format!("{base}.b_down"), m.b_down.clone())?;
                    registry.add(format!("{base}.w_up"), m.w_up.clone())?;
                    registry.add(format!("{base}.b_up"), m.b_up.clone())?;
                }
                per_layer.push((attn, ffn));
            }
            PeftModules::Serial(per_layer)
        }
        PeftMethod::ParallelAdapter => {
            let mut per_layer = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let adapter = ParallelAdapter::init(d, config.bottleneck_r, &mut rng);
                let base = format!("peft.layer{layer}.parallel_ffn");
                registry.add(format!("{base}.w_down"), adapter.w_down.clone())?;
                registry.add(format!("{base}.w_up"), adapter.w_up.clone())?;
                per_layer.push(adapter);
            }
            PeftModules::Parallel(per_layer)
        }
        PeftMethod::Lora => {
            let mut per_layer = Vec::with_capacity(n_layers);
            for layer in 0..n_layers {
                let mut q = None;
                let mut v = None;
                for target in &config.lora_targets {
                    let module = LoraModule::init(d, config.lora_rank, config.lora_scaling, &mut rng);
                    let tag = match target {
                        LoraTarget::Query => "lora_q",
                        LoraTarget::Value => "lora_v",
                    };
                    let base = format!("peft.layer{layer}.{tag}");
                    registry.add(format!("{base}.a"), module.a.clone())?;
                    registry.add(format!("{base}.b"), module.b.clone())?;
                    match target {
                        LoraTarget::Query => q = Some(module),
                        LoraTarget::Value => v = Some(module),
                    }
                }
                per_layer.push((q, v));
            }
            PeftModules::Lora(per_layer)
        }
        PeftMethod::Prefix => {
            let module = PrefixModule::init(
                d,
                n_layers,
                config.prefix_length,
                config.prefix_reparam_width,
                &mut rng,
            );
            registry.add("peft.prefix.embed", module.embed.clone())?;
            registry.add("peft.prefix.reparam_fc1.weight", module.fc1_weight.clone())?;
            registry.add("peft.prefix.reparam_fc1.bias", module.fc1_bias.clone())?;
            registry.add("peft.prefix.reparam_fc2.weight", module.fc2_weight.clone())?;
            registry.add("peft.prefix.reparam_fc2.bias", module.fc2_bias.clone())?;
            PeftModules::Prefix(module)
        }
    };

    Ok(AdaptedModel {
        backbone,
        peft_config: Some(config.clone()),
        modules: Some(modules),
        registry,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_backbone, Architecture, BackboneConfig};
    use crate::data::{tokenize, TokenBatch};
    use crate::rng::rng_for;
    use crate::tensor::check::check_loss_gradients;
    use crate::tensor::ops::{mean_all, sum_all};
    use crate::tensor::param::{CensusFilter, Parameter};

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

    fn batch(texts: &[&str]) -> TokenBatch {
        let rows: Vec<Vec<u32>> = texts.iter().map(|t| tokenize(t, 10)).collect();
        TokenBatch::from_rows(&rows)
    }

    #[test]
    fn serial_adapter_zero_init_is_identity() {
        let mut rng = rng_for(1, "t");
        let adapter = SerialAdapter::<f64>::init(4, 2, &mut rng);
        let h = Tensor::from_f64(&[2, 4], &[0.1, -0.2, 0.3, 0.4, 1.0, 2.0, -3.0, 0.0]).unwrap();
        let out = apply_serial_adapter(&h, &adapter).unwrap();
        assert_eq!(*out.data(), *h.data());
    }

    #[test]
    fn serial_adapter_hand_arithmetic() {
        // d=2, r=1, W_down = [1, 2]^T, W_up = [0.5, -0.5], zero biases,
        // h = [1, 1]: pre-activation 3, output [2.5, -0.5].
        let adapter = SerialAdapter::<f64> {
            w_down: Tensor::from_f64(&[2, 1], &[1.0, 2.0]).unwrap(),
            b_down: Tensor::zeros(&[1]),
            w_up: Tensor::from_f64(&[1, 2], &[0.5, -0.5]).unwrap(),
            b_up: Tensor::zeros(&[2]),
        };
        let h = Tensor::from_f64(&[1, 2], &[1.0, 1.0]).unwrap();
        let out = apply_serial_adapter(&h, &adapter).unwrap();
        assert_eq!(*out.data(), vec![2.5, -0.5]);
    }

    #[test]
    fn serial_adapter_gradients_match_finite_differences() {
        let mut rng = rng_for(2, "t");
        let adapter = SerialAdapter::<f64>::init(8, 3, &mut rng);
        // Give W_up real values so gradients flow everywhere.
        for v in adapter.w_up.data_mut().iter_mut() {
            *v = crate::rng::standard_normal(&mut rng) * 0.3;
        }
        let h = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let params = [
            Parameter::new("w_down", adapter.w_down.clone()),
            Parameter::new("b_down", adapter.b_down.clone()),
            Parameter::new("w_up", adapter.w_up.clone()),
            Parameter::new("b_up", adapter.b_up.clone()),
            Parameter::new("input", h.clone()),
        ];
        let refs: Vec<&Parameter<f64>> = params.iter().collect();
        let err = check_loss_gradients(&refs, 1e-5, &mut || {
            Ok(sum_all(&apply_serial_adapter(&h, &adapter)?))
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn parallel_adapter_zero_init_passes_sublayer_output_through() {
        let mut rng = rng_for(3, "t");
        let adapter = ParallelAdapter::<f64>::init(4, 2, &mut rng);
        let input = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let output = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let out = apply_parallel_adapter(&input, &output, &adapter).unwrap();
        assert_eq!(*out.data(), *output.data());
    }

    #[test]
    fn parallel_equals_serial_on_identity_sublayer_with_zero_biases() {
        let mut rng = rng_for(4, "t");
        let d = 6;
        let r = 3;
        let parallel = ParallelAdapter::<f64>::init(d, r, &mut rng);
        for v in parallel.w_up.data_mut().iter_mut() {
            *v = crate::rng::standard_normal(&mut rng) * 0.2;
        }
        let serial = SerialAdapter::<f64> {
            w_down: Tensor::constant(&[d, r], parallel.w_down.data().clone()).unwrap(),
            b_down: Tensor::zeros(&[r]),
            w_up: Tensor::constant(&[r, d], parallel.w_up.data().clone()).unwrap(),
            b_up: Tensor::zeros(&[d]),
        };
        let h = Tensor::randn(&[5, d], 1.0, &mut rng);
        let via_serial = apply_serial_adapter(&h, &serial).unwrap();
        let via_parallel = apply_parallel_adapter(&h, &h, &parallel).unwrap();
        for (a, b) in via_serial.data().iter().zip(via_parallel.data().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_adapter_gradients_match_finite_differences() {
        let mut rng = rng_for(5, "t");
        let adapter = ParallelAdapter::<f64>::init(8, 3, &mut rng);
        for v in adapter.w_up.data_mut().iter_mut() {
            *v = crate::rng::standard_normal(&mut rng) * 0.3;
        }
        let input = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let output = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let params = [
            Parameter::new("w_down", adapter.w_down.clone()),
            Parameter::new("w_up", adapter.w_up.clone()),
        ];
        let refs: Vec<&Parameter<f64>> = params.iter().collect();
        let err = check_loss_gradients(&refs, 1e-5, &mut || {
            Ok(sum_all(&apply_parallel_adapter(&input, &output, &adapter)?))
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn lora_zero_init_equals_frozen_projection() {
        let mut rng = rng_for(6, "t");
        let module = LoraModule::<f64>::init(4, 2, 1.0, &mut rng);
        let w = Tensor::randn(&[4, 4], 0.5, &mut rng);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let adapted = apply_lora(&x, &w, &module).unwrap();
        let frozen = matmul_tb(&x, &w).unwrap();
        assert_eq!(*adapted.data(), *frozen.data());
    }

    #[test]
    fn lora_hand_arithmetic() {
        // d=2, rank=1, A=[[1,0]], B=[[1],[0]], x=[1,2], W=I -> [2, 2]
        let module = LoraModule::<f64> {
            a: Tensor::from_f64(&[1, 2], &[1.0, 0.0]).unwrap(),
            b: Tensor::from_f64(&[2, 1], &[1.0, 0.0]).unwrap(),
            scaling: 1.0,
        };
        let w = Tensor::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
        let out = apply_lora(&x, &w, &module).unwrap();
        assert_eq!(*out.data(), vec![2.0, 2.0]);
    }

    #[test]
    fn lora_full_rank_equals_dense_update() {
        // rank = d with B*A = dW reduces to x (W + dW)^T.
        let mut rng = rng_for(7, "t");
        let d = 3;
        let a = Tensor::<f64>::randn(&[d, d], 0.5, &mut rng);
        let b = Tensor::<f64>::randn(&[d, d], 0.5, &mut rng);
        let module = LoraModule {
            a: a.clone(),
            b: b.clone(),
            scaling: 1.0,
        };
        let w = Tensor::<f64>::randn(&[d, d], 0.5, &mut rng);
        let x = Tensor::<f64>::randn(&[2, d], 1.0, &mut rng);

        // dW = B @ A, dense.
        let delta = matmul(&b, &a).unwrap();
        let w_plus = add(&w, &delta).unwrap();
        let expect = matmul_tb(&x, &w_plus).unwrap();
        let got = apply_lora(&x, &w, &module).unwrap();
        for (g, e) in got.data().iter().zip(expect.data().iter()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lora_rank_above_dimension_is_rejected() {
        let mut rng = rng_for(8, "t");
        let module = LoraModule::<f64>::init(2, 3, 1.0, &mut rng);
        let w = Tensor::zeros(&[2, 2]);
        let x = Tensor::zeros(&[1, 2]);
        assert!(matches!(
            apply_lora(&x, &w, &module),
            Err(Error::DegenerateRank { rank: 3, dim: 2 })
        ));
    }

    #[test]
    fn prefix_extends_keys_and_values_only() {
        let mut rng = rng_for(9, "t");
        let module = PrefixModule::<f64>::init(8, 2, 5, 16, &mut rng);
        let keys = Tensor::randn(&[3, 2, 7, 4], 1.0, &mut rng);
        let values = Tensor::randn(&[3, 2, 7, 4], 1.0, &mut rng);
        let (k, v) = apply_prefix(&keys, &values, &module, 1).unwrap();
        assert_eq!(k.shape(), &[3, 2, 12, 4]);
        assert_eq!(v.shape(), &[3, 2, 12, 4]);
        // Original content is preserved after the prefix block.
        let tail = crate::tensor::ops::slice(&k, 2, 5, 7).unwrap();
        assert_eq!(*tail.data(), *keys.data());
        assert!(apply_prefix(&keys, &values, &module, 2).is_err());
    }

    #[test]
    fn default_prefix_length_adds_twenty_positions() {
        let mut rng = rng_for(10, "t");
        let config = PeftConfig::new(PeftMethod::Prefix);
        let module = PrefixModule::<f64>::init(8, 1, config.prefix_length, 16, &mut rng);
        let keys = Tensor::randn(&[1, 2, 6, 4], 1.0, &mut rng);
        let values = Tensor::randn(&[1, 2, 6, 4], 1.0, &mut rng);
        let (k, _) = apply_prefix(&keys, &values, &module, 0).unwrap();
        assert_eq!(k.shape()[2], 20 + 6);
    }

    #[test]
    fn injection_freezes_backbone_and_registers_peft() {
        let backbone = build_backbone::<f64>(&tiny_config(), 11).unwrap();
        let model = inject_peft(backbone, &PeftConfig::new(PeftMethod::SerialAdapter), 11).unwrap();
        let reg = model.registry();
        let trainable = reg.census(CensusFilter::Trainable);
        let peft = reg.census(CensusFilter::Prefix("peft."));
        assert_eq!(trainable.count, peft.count);
        assert!(peft.count > 0);
        let backbone_census = reg.census(CensusFilter::Prefix("backbone."));
        assert_eq!(
            backbone_census.count + peft.count,
            reg.census(CensusFilter::All).count
        );
    }

    #[test]
    fn init_identity_holds_for_serial_parallel_and_lora() {
        for method in [
            PeftMethod::SerialAdapter,
            PeftMethod::ParallelAdapter,
            PeftMethod::Lora,
        ] {
            let frozen = build_backbone::<f64>(&tiny_config(), 13).unwrap();
            let b = batch(&["fn f ( x )", "ret y + 12 ;"]);
            let (_, base) = frozen.encode(&b, &[], &mut Phase::Eval).unwrap();

            let backbone = build_backbone::<f64>(&tiny_config(), 13).unwrap();
            let mut config = PeftConfig::new(method);
            config.lora_rank = 4; // tiny d_model
            let model = inject_peft(backbone, &config, 99).unwrap();
            let (_, adapted) = model.encode(&b, &mut Phase::Eval).unwrap();
            assert_eq!(
                *base.data(),
                *adapted.data(),
                "{method:?} broke init identity"
            );
        }
    }

    #[test]
    fn capacity_scales_linearly_with_bottleneck_and_rank() {
        let mut rng = rng_for(14, "t");
        let d = 16;
        let small = SerialAdapter::<f64>::init(d, 4, &mut rng);
        let large = SerialAdapter::<f64>::init(d, 8, &mut rng);
        // Doubling r doubles the module count up to the fixed output bias.
        assert_eq!(large.parameter_count(), 2 * small.parameter_count() - d);

        let lora_small = LoraModule::<f64>::init(d, 4, 1.0, &mut rng);
        let lora_large = LoraModule::<f64>::init(d, 8, 1.0, &mut rng);
        assert_eq!(lora_large.parameter_count(), 2 * lora_small.parameter_count());
    }

    #[test]
    fn prefix_gradients_flow_through_reparameterization() {
        let config = BackboneConfig {
            dropout: 0.0,
            ..tiny_config()
        };
        let backbone = build_backbone::<f64>(&config, 15).unwrap();
        let mut peft = PeftConfig::new(PeftMethod::Prefix);
        peft.prefix_length = 3;
        peft.prefix_reparam_width = 8;
        let model = inject_peft(backbone, &peft, 15).unwrap();
        let b = batch(&["if x = 3 ;"]);

        let params: Vec<Parameter<f64>> = model
            .registry()
            .iter()
            .filter(|p| !p.frozen())
            .cloned()
            .collect();
        let refs: Vec<&Parameter<f64>> = params.iter().collect();
        let err = check_loss_gradients(&refs, 1e-5, &mut || {
            let (_, pooled) = model.encode(&b, &mut Phase::Eval)?;
            Ok(mean_all(&pooled))
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
