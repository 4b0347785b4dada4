//! Toy decoder-only language model with per-layer attention mode and the
//! MoBA-then-full hybrid training schedule.
//!
//! Pre-norm residual blocks over byte tokens:
//! `x = tok_emb[t] + pos_emb[p]`, then per layer
//! `x += Wo·attn(LN(x)Wq, LN(x)Wk, LN(x)Wv)` and `x += FFN(LN(x))`, then a
//! final norm and an untied vocabulary projection. MoBA layers and full layers
//! share the same parameter shapes; only the attention routing differs.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionMode};
use crate::autodiff::{log_sum_exp, AttentionRouting, AttentionSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::gating::{route_moba, route_sink, route_swa, BlockPartition, RoutingTable};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    Moba,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerStackConfig {
    pub num_layers: usize,
    pub layer_modes: Vec<LayerMode>,
    /// Sparse pattern used by `moba` layers; heads and head size apply to all layers.
    pub attention: AttentionConfig,
    pub d_model: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub max_context: usize,
}

impl LayerStackConfig {
    /// Default toy dimensions: 2 layers, 2 heads of 16, byte vocabulary.
    pub fn toy(block_size: usize, top_k: usize) -> Self {
        Self {
            num_layers: 2,
            layer_modes: vec![LayerMode::Moba; 2],
            attention: AttentionConfig::moba(block_size, top_k, 2, 16),
            d_model: 32,
            ffn_width: 64,
            vocab_size: 256,
            max_context: 512,
        }
    }

    pub fn all_moba(mut self) -> Self {
        self.layer_modes = vec![LayerMode::Moba; self.num_layers];
        self
    }

    pub fn all_full(mut self) -> Self {
        self.layer_modes = vec![LayerMode::Full; self.num_layers];
        self
    }

    /// Last `full_layers` layers full, the rest MoBA.
    pub fn layerwise_hybrid(mut self, full_layers: usize) -> Result<Self> {
        if full_layers > self.num_layers {
            return Err(Error::Config(format!(
                "{full_layers} full layers requested in a {}-layer stack",
                self.num_layers
            )));
        }
        let split = self.num_layers - full_layers;
        self.layer_modes = (0..self.num_layers)
            .map(|l| if l < split { LayerMode::Moba } else { LayerMode::Full })
            .collect();
        Ok(self)
    }

    pub fn attention_width(&self) -> usize {
        self.attention.num_heads * self.attention.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.layer_modes.len() != self.num_layers {
            return Err(Error::Config(format!(
                "{} layer modes for {} layers",
                self.layer_modes.len(),
                self.num_layers
            )));
        }
        if self.num_layers == 0 || self.d_model == 0 || self.ffn_width == 0 || self.max_context == 0 {
            return Err(Error::Config("layer count and model dimensions must be positive".into()));
        }
        if !(1..=256).contains(&self.vocab_size) {
            return Err(Error::Config(format!("vocab size {} outside 1..=256", self.vocab_size)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Flat parameter list in a fixed order derived from the config.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

const PER_LAYER: usize = 12;
const LAYER_PARAMS: [&str; PER_LAYER] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.wk", "attn.wv", "attn.wo", "ln2.gain", "ln2.bias", "ffn.w1", "ffn.b1",
    "ffn.w2", "ffn.b2",
];

/// `(name, shape)` of every parameter, in storage order.
pub fn param_layout(config: &LayerStackConfig) -> Vec<(String, Vec<usize>)> {
    let (d, a, f, v) = (config.d_model, config.attention_width(), config.ffn_width, config.vocab_size);
    let mut out = vec![
        ("tok_emb".to_string(), vec![v, d]),
        ("pos_emb".to_string(), vec![config.max_context, d]),
    ];
    for l in 0..config.num_layers {
        let shapes = [
            vec![1, d],
            vec![1, d],
            vec![d, a],
            vec![d, a],
            vec![d, a],
            vec![a, d],
            vec![1, d],
            vec![1, d],
            vec![d, f],
            vec![1, f],
            vec![f, d],
            vec![1, d],
        ];
        for (name, shape) in LAYER_PARAMS.iter().zip(shapes) {
            out.push((format!("layers.{l}.{name}"), shape));
        }
    }
    out.push(("ln_f.gain".to_string(), vec![1, d]));
    out.push(("ln_f.bias".to_string(), vec![1, d]));
    out.push(("head".to_string(), vec![d, v]));
    out
}

impl ModelParams {
    pub fn init(config: &LayerStackConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(seed);
        let depth_scale = 1.0 / ((2 * config.num_layers) as f64).sqrt();
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in param_layout(config) {
            let std = if name.ends_with("gain") {
                None
            } else if name.ends_with("bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                Some(0.0)
            } else if name == "tok_emb" {
                Some(0.3)
            } else if name == "pos_emb" {
                Some(0.1)
            } else {
                let fan_in = shape[0] as f64;
                let residual = name.ends_with("wo") || name.ends_with("w2");
                Some(fan_in.sqrt().recip() * if residual { depth_scale } else { 1.0 })
            };
            let len: usize = shape.iter().product();
            let data = match std {
                None => vec![1.0; len],
                Some(s) => (0..len).map(|_| s * rng.normal()).collect(),
            };
            tensors.push(Tensor::new(&shape, data)?);
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    pub fn from_named(config: &LayerStackConfig, named: Vec<NamedTensor>) -> Result<Self> {
        let layout = param_layout(config);
        if layout.len() != named.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.len(),
                named.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), entry) in layout.into_iter().zip(named) {
            if entry.name != name || entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} {:?} does not match expected {name} {shape:?}",
                    entry.name, entry.shape
                )));
            }
            tensors.push(Tensor::new(&shape, entry.data)?);
            names.push(name);
        }
        Ok(Self { names, tensors })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.tensors.iter().map(|t| t.shape().to_vec()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| NamedTensor {
                name: name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect()
    }
}

/// Routing for one layer given its projected queries and keys (`[N, h·d]`).
pub fn layer_routing(config: &LayerStackConfig, mode: LayerMode, q: &Tensor, k: &Tensor) -> Result<AttentionRouting> {
    let att = &config.attention;
    let n = q.dims2()?.0;
    let shape = [n, att.num_heads, att.head_dim];
    let table = match (mode, att.mode) {
        (LayerMode::Full, _) | (LayerMode::Moba, AttentionMode::DenseCausal) => return Ok(AttentionRouting::DenseCausal),
        (LayerMode::Moba, AttentionMode::Moba { block_size, top_k }) => {
            let partition = BlockPartition::new(n, block_size)?;
            route_moba(&q.reshape(&shape)?, &k.reshape(&shape)?, &partition, top_k)?
        }
        (LayerMode::Moba, AttentionMode::Swa { block_size, window }) => {
            route_swa(&BlockPartition::new(n, block_size)?, att.num_heads, window)?
        }
        (
            LayerMode::Moba,
            AttentionMode::Sink {
                block_size,
                num_sink,
                num_recent,
            },
        ) => route_sink(&BlockPartition::new(n, block_size)?, att.num_heads, num_sink, num_recent)?,
    };
    Ok(AttentionRouting::Routed(Arc::new(table)))
}

/// Handles produced by [`forward_on_tape`].
#[derive(Debug)]
pub struct ForwardVars {
    pub logits: Var,
    /// Residual stream after each layer.
    pub layer_outputs: Vec<Var>,
    /// Routing used by each MoBA layer (`None` for full layers).
    pub routing: Vec<Option<Arc<RoutingTable>>>,
}

fn in_layer<T>(layer: Option<usize>, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFinite(what) => Error::NonFiniteLoss {
            step: 0,
            layer,
            statistic: format!("non-finite value in {what}"),
        },
        other => other,
    })
}

/// Records the forward pass for `tokens` on `tape`; `params` are the tape
/// variables of a [`ModelParams`] in storage order.
pub fn forward_on_tape(
    tape: &mut Tape,
    params: &[Var],
    tokens: &[usize],
    config: &LayerStackConfig,
    modes: &[LayerMode],
) -> Result<ForwardVars> {
    let n = tokens.len();
    if n == 0 {
        return Err(Error::EmptyInput("token sequence"));
    }
    if n > config.max_context {
        return Err(Error::ContextOverflow {
            len: n,
            max: config.max_context,
        });
    }
    if modes.len() != config.num_layers || params.len() != param_layout(config).len() {
        return Err(Error::Config("layer modes or parameter count do not match the config".into()));
    }
    let positions: Vec<usize> = (0..n).collect();
    let tok = tape.embedding(params[0], tokens)?;
    let pos = tape.embedding(params[1], &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut layer_outputs = Vec::new();
    let mut routing = Vec::new();
    for (l, &mode) in modes.iter().enumerate() {
        let p = &params[2 + l * PER_LAYER..2 + (l + 1) * PER_LAYER];
        let (out, table) = in_layer(Some(l), layer_on_tape(tape, p, x, config, mode))?;
        x = out;
        layer_outputs.push(x);
        routing.push(table);
    }
    let base = 2 + config.num_layers * PER_LAYER;
    let logits = in_layer(None, (|| {
        let h = tape.layer_norm(x, params[base], params[base + 1])?;
        tape.matmul(h, params[base + 2])
    })())?;
    Ok(ForwardVars {
        logits,
        layer_outputs,
        routing,
    })
}

fn layer_on_tape(
    tape: &mut Tape,
    p: &[Var],
    x: Var,
    config: &LayerStackConfig,
    mode: LayerMode,
) -> Result<(Var, Option<Arc<RoutingTable>>)> {
    let h = tape.layer_norm(x, p[0], p[1])?;
    let q = tape.matmul(h, p[2])?;
    let k = tape.matmul(h, p[3])?;
    let v = tape.matmul(h, p[4])?;
    let routing = layer_routing(config, mode, tape.value(q), tape.value(k))?;
    let table = match &routing {
        AttentionRouting::Routed(t) => Some(t.clone()),
        AttentionRouting::DenseCausal => None,
    };
    let spec = AttentionSpec {
        num_heads: config.attention.num_heads,
        head_dim: config.attention.head_dim,
        scale: config.attention.scale,
        routing,
    };
    let a = tape.attention(q, k, v, spec)?;
    let proj = tape.matmul(a, p[5])?;
    let x = tape.add(x, proj)?;
    let h = tape.layer_norm(x, p[6], p[7])?;
    let f = tape.matmul(h, p[8])?;
    let f = tape.add_row_bias(f, p[9])?;
    let f = tape.gelu(f)?;
    let f = tape.matmul(f, p[10])?;
    let f = tape.add_row_bias(f, p[11])?;
    Ok((tape.add(x, f)?, table))
}

/// Logits `[N, V]` with the configured per-layer modes.
pub fn layer_stack_forward(params: &ModelParams, tokens: &[usize], config: &LayerStackConfig) -> Result<Tensor> {
    forward_with_modes(params, tokens, config, &config.layer_modes)
}

pub fn forward_with_modes(
    params: &ModelParams,
    tokens: &[usize],
    config: &LayerStackConfig,
    modes: &[LayerMode],
) -> Result<Tensor> {
    config.validate()?;
    check_tokens(tokens, config)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors.iter().map(|t| tape.constant(t.clone())).collect();
    let fwd = forward_on_tape(&mut tape, &vars, tokens, config, modes)?;
    Ok(tape.value(fwd.logits).clone())
}

fn check_tokens(tokens: &[usize], config: &LayerStackConfig) -> Result<()> {
    match tokens.iter().find(|&&t| t >= config.vocab_size) {
        Some(t) => Err(Error::Parameter(format!("token {t} outside vocabulary of {}", config.vocab_size))),
        None => Ok(()),
    }
}

/// Cross-entropy of each row of `logits` against its target.
pub fn per_token_losses(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let (n, v) = logits.dims2()?;
    if targets.len() != n {
        return Err(Error::Dimension {
            op: "per_token_losses",
            left: vec![n, v],
            right: vec![targets.len()],
        });
    }
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            if t >= v {
                return Err(Error::Parameter(format!("target {t} outside vocabulary of {v}")));
            }
            let row = &logits.data()[r * v..(r + 1) * v];
            Ok(log_sum_exp(row) - row[t])
        })
        .collect()
}

/// Mean cross-entropy over positions where `loss_mask` is true.
pub fn lm_loss(logits: &Tensor, targets: &[usize], loss_mask: &[bool]) -> Result<f64> {
    let losses = per_token_losses(logits, targets)?;
    if loss_mask.len() != losses.len() {
        return Err(Error::Dimension {
            op: "lm_loss",
            left: vec![losses.len()],
            right: vec![loss_mask.len()],
        });
    }
    let kept: Vec<f64> = losses.iter().zip(loss_mask).filter(|(_, &m)| m).map(|(l, _)| *l).collect();
    if kept.is_empty() {
        return Err(Error::Degenerate("every target position is masked".into()));
    }
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSchedule {
    /// Token budget; the run has `total_tokens / (seq_len·batch_size)` steps.
    pub total_tokens: usize,
    /// Fraction of the budget trained with the configured sparse layers.
    pub switch_fraction: f64,
    pub seq_len: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: AdamConfig,
    pub seed: u64,
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl TrainSchedule {
    pub fn tokens_per_step(&self) -> usize {
        self.seq_len * self.batch_size
    }

    pub fn num_steps(&self) -> usize {
        self.total_tokens / self.tokens_per_step().max(1)
    }

    /// `floor(ρ·T)`. The product is nudged by a relative 1e-12 so decimal
    /// fractions such as 0.29·100 land on the integer they denote.
    pub fn switch_tokens(&self) -> usize {
        let exact = self.switch_fraction * self.total_tokens as f64;
        (exact + exact.abs() * 1e-12).floor() as usize
    }

    /// Whether step `s` (0-based) still trains with the sparse layers.
    pub fn before_switch(&self, step: usize) -> bool {
        step * self.tokens_per_step() < self.switch_tokens()
    }

    /// First step trained in full attention, if the run reaches it.
    pub fn switch_step(&self) -> Option<usize> {
        let tps = self.tokens_per_step();
        let s = self.switch_tokens().div_ceil(tps);
        (s < self.num_steps()).then_some(s)
    }

    pub fn validate(&self, config: &LayerStackConfig) -> Result<()> {
        if !(0.0..=1.0).contains(&self.switch_fraction) {
            return Err(Error::Config(format!("switch fraction {} outside [0, 1]", self.switch_fraction)));
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return Err(Error::Config("seq_len and batch_size must be positive".into()));
        }
        if self.seq_len > config.max_context {
            return Err(Error::ContextOverflow {
                len: self.seq_len,
                max: config.max_context,
            });
        }
        if self.num_steps() == 0 {
            return Err(Error::Config(format!(
                "budget of {} tokens is less than one step of {}",
                self.total_tokens,
                self.tokens_per_step()
            )));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// Attention regime active during a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepMode {
    Moba,
    /// Sparse and full layers mixed within the stack.
    Hybrid,
    Full,
}

impl StepMode {
    pub fn of(modes: &[LayerMode]) -> Self {
        let moba = modes.iter().filter(|&&m| m == LayerMode::Moba).count();
        match moba {
            0 => StepMode::Full,
            m if m == modes.len() => StepMode::Moba,
            _ => StepMode::Hybrid,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StepMode::Moba => "moba",
            StepMode::Hybrid => "hybrid",
            StepMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Tokens consumed including this step's batch.
    pub tokens_seen: usize,
    pub mode: StepMode,
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub records: Vec<StepRecord>,
    pub switch_step: Option<usize>,
    pub params: ModelParams,
    pub checkpoints: Vec<PathBuf>,
}

struct Adam {
    config: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &[Option<&Tensor>]) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (i, tensor) in params.tensors.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in tensor.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                *p -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
    }
}

/// Trains freshly initialized weights (seeded by the schedule).
pub fn train_run(
    corpus: &[usize],
    config: &LayerStackConfig,
    schedule: &TrainSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    let params = ModelParams::init(config, schedule.seed)?;
    train_from(params, corpus, config, schedule, checkpoint_dir)
}

/// Trains `params` in place. Before the switch the configured layer modes are
/// used, afterwards every layer is full; weights and optimizer moments carry
/// over unchanged.
pub fn train_from(
    mut params: ModelParams,
    corpus: &[usize],
    config: &LayerStackConfig,
    schedule: &TrainSchedule,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    config.validate()?;
    schedule.validate(config)?;
    check_tokens(corpus, config)?;
    if corpus.len() < schedule.seq_len + 1 {
        return Err(Error::Config(format!(
            "corpus of {} tokens is shorter than one window of {}",
            corpus.len(),
            schedule.seq_len + 1
        )));
    }
    if params.shapes() != param_layout(config).into_iter().map(|(_, s)| s).collect::<Vec<_>>() {
        return Err(Error::Config("parameters do not match the layer stack config".into()));
    }
    let mut data_rng = SeededRng::new(schedule.seed ^ 0x5eed_da7a);
    let mut adam = Adam::new(schedule.optimizer, &params);
    let full = vec![LayerMode::Full; config.num_layers];
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let windows = corpus.len() - schedule.seq_len;
    for step in 0..schedule.num_steps() {
        let modes = if schedule.before_switch(step) {
            &config.layer_modes
        } else {
            &full
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let mut total: Option<Var> = None;
        for _ in 0..schedule.batch_size {
            let start = data_rng.below(windows);
            let window = &corpus[start..start + schedule.seq_len + 1];
            let loss = step_context(step, (|| {
                let fwd = forward_on_tape(&mut tape, &vars, &window[..schedule.seq_len], config, modes)?;
                tape.cross_entropy(fwd.logits, &window[1..], &vec![true; schedule.seq_len])
            })())?;
            total = Some(match total {
                None => loss,
                Some(acc) => step_context(step, tape.add(acc, loss))?,
            });
        }
        let total = total.expect("batch_size >= 1");
        let loss = step_context(step, tape.scale(total, 1.0 / schedule.batch_size as f64))?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;
        let grad_refs: Vec<Option<&Tensor>> = vars.iter().map(|&v| grads.get(v)).collect();
        adam.step(&mut params, &grad_refs);
        if let Some((name, _)) = params
            .names
            .iter()
            .zip(&params.tensors)
            .find(|(_, t)| t.data().iter().any(|x| !x.is_finite()))
        {
            return Err(Error::NonFiniteLoss {
                step,
                layer: None,
                statistic: format!("parameter {name} became non-finite after the update"),
            });
        }
        records.push(StepRecord {
            step,
            tokens_seen: (step + 1) * schedule.tokens_per_step(),
            mode: StepMode::of(modes),
            loss: loss_value,
        });
        if let (Some(dir), Some(every)) = (checkpoint_dir, schedule.checkpoint_every) {
            if (step + 1) % every == 0 {
                let path = dir.join(format!("step_{:06}.json", step + 1));
                Checkpoint::new(config, schedule, step + 1, &params).write_atomic(&path)?;
                checkpoints.push(path);
            }
        }
    }
    if let Some(dir) = checkpoint_dir {
        let path = dir.join("final.json");
        Checkpoint::new(config, schedule, schedule.num_steps(), &params).write_atomic(&path)?;
        checkpoints.push(path);
    }
    Ok(TrainReport {
        records,
        switch_step: schedule.switch_step(),
        params,
        checkpoints,
    })
}

fn step_context<T>(step: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::NonFiniteLoss { layer, statistic, .. } => Error::NonFiniteLoss { step, layer, statistic },
        Error::NonFinite(what) => Error::NonFiniteLoss {
            step,
            layer: None,
            statistic: format!("non-finite value in {what}"),
        },
        other => other,
    })
}

pub const CHECKPOINT_FORMAT: &str = "moba-toy-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: LayerStackConfig,
    pub schedule: TrainSchedule,
    pub step: usize,
    pub seed: u64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: &LayerStackConfig, schedule: &TrainSchedule, step: usize, params: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: config.clone(),
            schedule: schedule.clone(),
            step,
            seed: schedule.seed,
            params: params.to_named(),
        }
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn write_atomic(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, json)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        Ok(ckpt)
    }

    pub fn params(&self) -> Result<ModelParams> {
        ModelParams::from_named(&self.config, self.params.clone())
    }
}

/// Seeded byte text built from a small lexicon with a fixed successor
/// structure, so a small model can learn it quickly.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<usize> {
    const WORDS: [&str; 12] = [
        "the", "block", "gate", "routes", "each", "query", "to", "a", "few", "keys", "and", "attends",
    ];
    let mut rng = SeededRng::new(seed);
    let mut text = String::with_capacity(len + 16);
    let mut word = rng.below(WORDS.len());
    let mut in_sentence = 0;
    while text.len() < len {
        text.push_str(WORDS[word]);
        in_sentence += 1;
        if in_sentence >= 6 && rng.below(3) == 0 {
            text.push_str(". ");
            in_sentence = 0;
        } else {
            text.push(' ');
        }
        // each word has two likely successors
        word = (word * 5 + 1 + rng.below(2) * 3) % WORDS.len();
    }
    text.bytes().take(len).map(usize::from).collect()
}

/// Byte-level tokens of a text file.
pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 2 {
        return Err(Error::Config(format!("corpus {} has fewer than 2 bytes", path.display())));
    }
    Ok(bytes.into_iter().map(usize::from).collect())
}
