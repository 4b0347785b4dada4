//! Dense attention, MoBA attention and online-softmax recombination.
//!
//! Inputs `Q`, `K`, `V` are `[N, h, d]` tensors. Three MoBA routes exist:
//!
//! - [`moba_attention_oracle`] gathers the selected key indices per query and
//!   runs one softmax over them.
//! - [`grouped_block_attention`] follows the block-grouped layout: every
//!   query attends its own block causally, queries routed to each history
//!   block are packed into a contiguous buffer and attend that block without
//!   a mask, the partial results are scattered back and merged with online
//!   softmax in ascending block order.
//! - [`moba_attention_pipeline`] scores blocks, applies the causal gate mask,
//!   takes top-k and then runs the grouped executor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{causal_gate_mask, make_partition, route_sink, route_swa, top_k_blocks};
use crate::gating::{BlockPartition, RoutingRow, RoutingTable};
use crate::tensor::{block_mean_pool, matmul, stable_softmax_rows, Element, Mask, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    DenseCausal,
    Moba {
        block_size: usize,
        top_k: usize,
    },
    Swa {
        block_size: usize,
        window: usize,
    },
    Sink {
        block_size: usize,
        num_sink: usize,
        num_recent: usize,
    },
}

/// Serialized as one flat table: `mode` plus the fields that mode needs.
/// Unknown keys and keys belonging to another mode are rejected.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "AttentionConfigRepr", into = "AttentionConfigRepr")]
pub struct AttentionConfig {
    pub mode: AttentionMode,
    /// Multiply logits by `1/sqrt(head_dim)`.
    pub scale: bool,
    pub num_heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ModeName {
    DenseCausal,
    Moba,
    Swa,
    Sink,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AttentionConfigRepr {
    mode: ModeName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    block_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    top_k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_sink: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_recent: Option<usize>,
    #[serde(default = "default_scale")]
    scale: bool,
    num_heads: usize,
    head_dim: usize,
}

fn default_scale() -> bool {
    true
}

impl TryFrom<AttentionConfigRepr> for AttentionConfig {
    type Error = String;

    fn try_from(r: AttentionConfigRepr) -> std::result::Result<Self, String> {
        let given = [
            ("block_size", r.block_size),
            ("top_k", r.top_k),
            ("window", r.window),
            ("num_sink", r.num_sink),
            ("num_recent", r.num_recent),
        ];
        let wanted: &[&str] = match r.mode {
            ModeName::DenseCausal => &[],
            ModeName::Moba => &["block_size", "top_k"],
            ModeName::Swa => &["block_size", "window"],
            ModeName::Sink => &["block_size", "num_sink", "num_recent"],
        };
        for (name, value) in given {
            match (wanted.contains(&name), value) {
                (true, None) => return Err(format!("mode {:?} needs `{name}`", r.mode)),
                (false, Some(_)) => return Err(format!("`{name}` does not apply to mode {:?}", r.mode)),
                _ => {}
            }
        }
        let need = |v: Option<usize>| v.unwrap_or_default();
        let mode = match r.mode {
            ModeName::DenseCausal => AttentionMode::DenseCausal,
            ModeName::Moba => AttentionMode::Moba {
                block_size: need(r.block_size),
                top_k: need(r.top_k),
            },
            ModeName::Swa => AttentionMode::Swa {
                block_size: need(r.block_size),
                window: need(r.window),
            },
            ModeName::Sink => AttentionMode::Sink {
                block_size: need(r.block_size),
                num_sink: need(r.num_sink),
                num_recent: need(r.num_recent),
            },
        };
        Ok(AttentionConfig {
            mode,
            scale: r.scale,
            num_heads: r.num_heads,
            head_dim: r.head_dim,
        })
    }
}

impl From<AttentionConfig> for AttentionConfigRepr {
    fn from(c: AttentionConfig) -> Self {
        let mut r = AttentionConfigRepr {
            mode: ModeName::DenseCausal,
            block_size: None,
            top_k: None,
            window: None,
            num_sink: None,
            num_recent: None,
            scale: c.scale,
            num_heads: c.num_heads,
            head_dim: c.head_dim,
        };
        match c.mode {
            AttentionMode::DenseCausal => {}
            AttentionMode::Moba { block_size, top_k } => {
                r.mode = ModeName::Moba;
                r.block_size = Some(block_size);
                r.top_k = Some(top_k);
            }
            AttentionMode::Swa { block_size, window } => {
                r.mode = ModeName::Swa;
                r.block_size = Some(block_size);
                r.window = Some(window);
            }
            AttentionMode::Sink {
                block_size,
                num_sink,
                num_recent,
            } => {
                r.mode = ModeName::Sink;
                r.block_size = Some(block_size);
                r.num_sink = Some(num_sink);
                r.num_recent = Some(num_recent);
            }
        }
        r
    }
}

impl AttentionConfig {
    pub fn moba(block_size: usize, top_k: usize, num_heads: usize, head_dim: usize) -> Self {
        Self {
            mode: AttentionMode::Moba { block_size, top_k },
            scale: true,
            num_heads,
            head_dim,
        }
    }

    pub fn dense(num_heads: usize, head_dim: usize) -> Self {
        Self {
            mode: AttentionMode::DenseCausal,
            scale: true,
            num_heads,
            head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return Err(Error::Config("num_heads and head_dim must be positive".into()));
        }
        let positive = match self.mode {
            AttentionMode::DenseCausal => true,
            AttentionMode::Moba { block_size, top_k } => block_size > 0 && top_k > 0,
            AttentionMode::Swa { block_size, window } => block_size > 0 && window > 0,
            AttentionMode::Sink {
                block_size,
                num_sink,
                num_recent,
            } => block_size > 0 && num_sink > 0 && num_recent > 0,
        };
        if positive {
            Ok(())
        } else {
            Err(Error::Config(format!("mode parameters must be positive: {:?}", self.mode)))
        }
    }

    pub fn scale_factor(&self) -> f64 {
        scale_factor(self.scale, self.head_dim)
    }
}

pub(crate) fn scale_factor(scale: bool, head_dim: usize) -> f64 {
    if scale {
        1.0 / (head_dim as f64).sqrt()
    } else {
        1.0
    }
}

fn check_qkv<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let dims = q.dims3()?;
    for other in [k, v] {
        if other.shape() != q.shape() {
            return Err(Error::Dimension {
                op: "attention",
                left: q.shape().to_vec(),
                right: other.shape().to_vec(),
            });
        }
    }
    if dims.0 == 0 {
        return Err(Error::EmptyInput("attention"));
    }
    Ok(dims)
}

fn head_f64<E: Element>(t: &Tensor<E>, head: usize) -> Result<Tensor<f64>> {
    Ok(t.head(head)?.cast())
}

fn assemble<E: Element>(n: usize, h: usize, d: usize, heads: Vec<Vec<f64>>) -> Result<Tensor<E>> {
    let mut out = vec![0.0; n * h * d];
    for (head, vals) in heads.into_iter().enumerate() {
        for p in 0..n {
            out[(p * h + head) * d..(p * h + head + 1) * d].copy_from_slice(&vals[p * d..(p + 1) * d]);
        }
    }
    Tensor::from_f64(&[n, h, d], &out)
}

/// `softmax(c·QKᵀ + mask)·V` per head, with `c = 1/sqrt(d)` when `scale` is set.
pub fn dense_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    causal: bool,
    scale: bool,
) -> Result<Tensor<E>> {
    let (n, _, _) = check_qkv(q, k, v)?;
    let mask = causal.then(|| Mask::causal(n));
    attention_with_mask(q, k, v, mask.as_ref(), scale)
}

/// Dense attention under an explicit `[N, N]` mask shared by all heads.
pub fn masked_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: &Mask,
    scale: bool,
) -> Result<Tensor<E>> {
    attention_with_mask(q, k, v, Some(mask), scale)
}

fn attention_with_mask<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    mask: Option<&Mask>,
    scale: bool,
) -> Result<Tensor<E>> {
    let (n, h, d) = check_qkv(q, k, v)?;
    let c = scale_factor(scale, d);
    let heads = (0..h)
        .map(|head| {
            let qh = head_f64(q, head)?;
            let kh = head_f64(k, head)?;
            let vh = head_f64(v, head)?;
            let logits = matmul(&qh, &kh.transpose()?)?;
            let logits = Tensor::<f64>::from_fn(&[n, n], |i| logits.data()[i] * c)?;
            let probs = stable_softmax_rows(&logits, mask)?;
            Ok(matmul(&probs, &vh)?.into_data())
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(n, h, d, heads)
}

/// Key rows (0-based, ascending) each `(query, head)` attends to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionPattern {
    num_queries: usize,
    num_heads: usize,
    keys: Vec<Vec<usize>>,
}

impl AttentionPattern {
    pub fn dense_causal(num_queries: usize, num_heads: usize) -> Self {
        let keys = (0..num_queries)
            .flat_map(|r| std::iter::repeat_n((0..=r).collect::<Vec<_>>(), num_heads))
            .collect();
        Self {
            num_queries,
            num_heads,
            keys,
        }
    }

    /// Union of the selected block ranges, cut at the query inside its own block.
    pub fn from_routing(routing: &RoutingTable) -> Self {
        let partition = routing.partition();
        let keys = routing
            .rows()
            .iter()
            .map(|row| gather_row(row, partition))
            .collect();
        Self {
            num_queries: partition.context_len(),
            num_heads: routing.num_heads(),
            keys,
        }
    }

    pub fn num_queries(&self) -> usize {
        self.num_queries
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    /// Keys for 0-based query row `row` and `head`.
    pub fn keys(&self, row: usize, head: usize) -> &[usize] {
        &self.keys[row * self.num_heads + head]
    }

    pub fn total_keys(&self) -> usize {
        self.keys.iter().map(Vec::len).sum()
    }
}

fn gather_row(row: &RoutingRow, partition: &BlockPartition) -> Vec<usize> {
    let last = row.query_pos; // exclusive 0-based bound
    row.selected
        .iter()
        .flat_map(|&b| partition.span(b))
        .filter(|&r| r < last)
        .collect()
}

/// Attention restricted to an explicit key pattern: one softmax per
/// `(query, head)` over the gathered logits.
pub fn pattern_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    pattern: &AttentionPattern,
    scale: bool,
) -> Result<Tensor<E>> {
    let (n, h, d) = check_qkv(q, k, v)?;
    if pattern.num_queries != n || pattern.num_heads != h {
        return Err(Error::Routing(format!(
            "pattern is {}x{} but inputs are {n}x{h}",
            pattern.num_queries, pattern.num_heads
        )));
    }
    let c = scale_factor(scale, d);
    let at = |t: &Tensor<E>, row: usize, head: usize, j: usize| t.data()[(row * h + head) * d + j].to_f64();
    let mut out = vec![0.0; n * h * d];
    let mut logits = Vec::new();
    for row in 0..n {
        for head in 0..h {
            let keys = pattern.keys(row, head);
            if keys.is_empty() {
                return Err(Error::DegenerateRow { row });
            }
            logits.clear();
            logits.extend(keys.iter().map(|&kr| c * (0..d).map(|j| at(q, row, head, j) * at(k, kr, head, j)).sum::<f64>()));
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            let dst = &mut out[(row * h + head) * d..(row * h + head + 1) * d];
            for (&kr, &s) in keys.iter().zip(&logits) {
                let w = (s - max).exp();
                denom += w;
                for (j, o) in dst.iter_mut().enumerate() {
                    *o += w * at(v, kr, head, j);
                }
            }
            for o in dst.iter_mut() {
                *o /= denom;
            }
        }
    }
    Tensor::from_f64(&[n, h, d], &out)
}

/// Reference MoBA: per query and head, gather the keys of the selected blocks
/// (own block cut causally) and apply a single softmax.
pub fn moba_attention_oracle<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    routing: &RoutingTable,
    partition: &BlockPartition,
    scale: bool,
) -> Result<Tensor<E>> {
    let (n, h, _) = check_qkv(q, k, v)?;
    check_routing(routing, partition, n, h)?;
    pattern_attention(q, k, v, &AttentionPattern::from_routing(routing), scale)
}

fn check_routing(routing: &RoutingTable, partition: &BlockPartition, n: usize, h: usize) -> Result<()> {
    if routing.partition() != partition {
        return Err(Error::Routing(format!(
            "routing built for {:?}, called with {:?}",
            routing.partition(),
            partition
        )));
    }
    if partition.context_len() != n || routing.num_heads() != h {
        return Err(Error::Routing(format!(
            "routing covers {} tokens x {} heads, inputs are {n} x {h}",
            partition.context_len(),
            routing.num_heads()
        )));
    }
    Ok(())
}

/// Un-normalized attention for a group of query rows.
///
/// `out` holds `Σ exp(s − m)·v`, `row_max` the running max `m` and
/// `normalizer` the sum `l = Σ exp(s − m)`. A row that saw no key has
/// `m = -inf`, `l = 0` and a zero output.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialAttention {
    rows: usize,
    dim: usize,
    out: Vec<f64>,
    row_max: Vec<f64>,
    normalizer: Vec<f64>,
}

impl PartialAttention {
    pub fn new(rows: usize, dim: usize, out: Vec<f64>, row_max: Vec<f64>, normalizer: Vec<f64>) -> Result<Self> {
        if out.len() != rows * dim || row_max.len() != rows || normalizer.len() != rows {
            return Err(Error::Shape {
                shape: vec![rows, dim],
                len: out.len(),
            });
        }
        for r in 0..rows {
            let l = normalizer[r];
            if !(l >= 0.0 && l.is_finite()) || (l > 0.0 && !row_max[r].is_finite()) {
                return Err(Error::Parameter(format!(
                    "row {r}: normalizer {l} with max {}",
                    row_max[r]
                )));
            }
        }
        Ok(Self {
            rows,
            dim,
            out,
            row_max,
            normalizer,
        })
    }

    pub fn empty(rows: usize, dim: usize) -> Self {
        Self {
            rows,
            dim,
            out: vec![0.0; rows * dim],
            row_max: vec![f64::NEG_INFINITY; rows],
            normalizer: vec![0.0; rows],
        }
    }

    /// Partial attention of `logits: [rows, m]` against `values: [m, d]`.
    /// Masked-out entries are skipped; a fully masked row stays empty.
    pub fn from_logits(logits: &Tensor, values: &Tensor, mask: Option<&Mask>) -> Result<Self> {
        let (rows, m) = logits.dims2()?;
        let (m2, dim) = values.dims2()?;
        if m != m2 {
            return Err(Error::Dimension {
                op: "PartialAttention::from_logits",
                left: logits.shape().to_vec(),
                right: values.shape().to_vec(),
            });
        }
        let mut part = Self::empty(rows, dim);
        for r in 0..rows {
            let allowed = |c: usize| mask.is_none_or(|mk| mk.allowed(r, c));
            let row = &logits.data()[r * m..(r + 1) * m];
            let max = (0..m).filter(|&c| allowed(c)).map(|c| row[c]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            part.row_max[r] = max;
            for c in (0..m).filter(|&c| allowed(c)) {
                let w = (row[c] - max).exp();
                part.normalizer[r] += w;
                for (o, val) in part.out[r * dim..(r + 1) * dim].iter_mut().zip(&values.data()[c * dim..(c + 1) * dim]) {
                    *o += w * val;
                }
            }
        }
        Ok(part)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn out(&self) -> &[f64] {
        &self.out
    }

    pub fn row_max(&self) -> &[f64] {
        &self.row_max
    }

    pub fn normalizer(&self) -> &[f64] {
        &self.normalizer
    }

    /// Merges two partials over disjoint key sets without normalizing.
    pub fn merge(&self, other: &PartialAttention) -> Result<PartialAttention> {
        self.check_compatible(other)?;
        let mut merged = PartialAttention::empty(self.rows, self.dim);
        for r in 0..self.rows {
            let m = self.row_max[r].max(other.row_max[r]);
            if m == f64::NEG_INFINITY {
                continue;
            }
            merged.row_max[r] = m;
            let mut acc_row = |src: &PartialAttention| {
                if src.normalizer[r] == 0.0 {
                    return;
                }
                let w = (src.row_max[r] - m).exp();
                merged.normalizer[r] += w * src.normalizer[r];
                for (o, x) in merged.out[r * self.dim..(r + 1) * self.dim]
                    .iter_mut()
                    .zip(&src.out[r * self.dim..(r + 1) * self.dim])
                {
                    *o += w * x;
                }
            };
            acc_row(self);
            acc_row(other);
        }
        Ok(merged)
    }

    /// `out / l` row by row.
    pub fn normalize(&self) -> Result<Tensor> {
        online_softmax_combine(std::slice::from_ref(self))
    }

    fn check_compatible(&self, other: &PartialAttention) -> Result<()> {
        if (self.rows, self.dim) != (other.rows, other.dim) {
            return Err(Error::Dimension {
                op: "PartialAttention",
                left: vec![self.rows, self.dim],
                right: vec![other.rows, other.dim],
            });
        }
        Ok(())
    }
}

/// Combines partial results over disjoint key sets into normalized outputs:
/// `Σ_j e^{m_j − m*}·out_j / Σ_j e^{m_j − m*}·l_j` with `m* = max_j m_j`.
pub fn online_softmax_combine(parts: &[PartialAttention]) -> Result<Tensor> {
    let first = parts.first().ok_or(Error::EmptyInput("online_softmax_combine"))?;
    for p in &parts[1..] {
        first.check_compatible(p)?;
    }
    let (rows, dim) = (first.rows, first.dim);
    let mut result = vec![0.0; rows * dim];
    for r in 0..rows {
        let m_star = parts
            .iter()
            .filter(|p| p.normalizer[r] > 0.0)
            .map(|p| p.row_max[r])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        let dst = &mut result[r * dim..(r + 1) * dim];
        for p in parts.iter().filter(|p| p.normalizer[r] > 0.0) {
            let w = (p.row_max[r] - m_star).exp();
            denom += w * p.normalizer[r];
            for (o, x) in dst.iter_mut().zip(&p.out[r * dim..(r + 1) * dim]) {
                *o += w * x;
            }
        }
        if !(denom > 0.0) {
            return Err(Error::DegenerateRow { row: r });
        }
        for o in dst.iter_mut() {
            *o /= denom;
        }
    }
    Tensor::from_f64(&[rows, dim], &result)
}

/// Partial attention of a packed query group against one key block.
/// `visible(i)` gives how many leading keys query `i` of the group may see.
fn group_partial(
    queries: &[f64],
    keys: &[f64],
    values: &[f64],
    dim: usize,
    c: f64,
    visible: impl Fn(usize) -> usize,
) -> PartialAttention {
    let rows = queries.len() / dim;
    let mut part = PartialAttention::empty(rows, dim);
    let mut logits = Vec::with_capacity(keys.len() / dim);
    for i in 0..rows {
        let qrow = &queries[i * dim..(i + 1) * dim];
        let count = visible(i);
        if count == 0 {
            continue;
        }
        logits.clear();
        logits.extend(
            keys.chunks_exact(dim)
                .take(count)
                .map(|kr| c * qrow.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>()),
        );
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        part.row_max[i] = max;
        let dst = &mut part.out[i * dim..(i + 1) * dim];
        for (s, vrow) in logits.iter().zip(values.chunks_exact(dim)) {
            let w = (s - max).exp();
            part.normalizer[i] += w;
            for (o, x) in dst.iter_mut().zip(vrow) {
                *o += w * x;
            }
        }
    }
    part
}

/// Block-grouped MoBA executor for a given routing.
///
/// Per head: the current-block group is computed causally for every query;
/// for each history block the routed queries are packed contiguously (the
/// permutation is kept), attended without a mask, scattered back into
/// per-query slots ordered by ascending block, and everything is merged with
/// [`online_softmax_combine`].
pub fn grouped_block_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    routing: &RoutingTable,
    scale: bool,
) -> Result<Tensor<E>> {
    let (n, h, d) = check_qkv(q, k, v)?;
    let partition = *routing.partition();
    check_routing(routing, &partition, n, h)?;
    let c = scale_factor(scale, d);
    let heads = (0..h)
        .into_par_iter()
        .map(|head| {
            let qh = head_f64(q, head)?.into_data();
            let kh = head_f64(k, head)?.into_data();
            let vh = head_f64(v, head)?.into_data();
            grouped_head(&qh, &kh, &vh, d, c, routing, &partition, head)
        })
        .collect::<Result<Vec<_>>>()?;
    assemble(n, h, d, heads)
}

#[allow(clippy::too_many_arguments)]
fn grouped_head(
    qh: &[f64],
    kh: &[f64],
    vh: &[f64],
    d: usize,
    c: f64,
    routing: &RoutingTable,
    partition: &BlockPartition,
    head: usize,
) -> Result<Vec<f64>> {
    let n = partition.context_len();
    let nb = partition.num_blocks();
    let mut coverage = vec![0usize; n];

    // Current-block groups: queries of block i against keys of block i, causal.
    let mut self_part = PartialAttention::empty(n, d);
    for block in 1..=nb {
        let span = partition.span(block);
        let start = span.start;
        let routed: Vec<usize> = span.clone().filter(|&r| routing.row(r + 1, head).contains(block)).collect();
        if routed.is_empty() {
            continue;
        }
        let queries: Vec<f64> = routed.iter().flat_map(|&r| qh[r * d..(r + 1) * d].iter().copied()).collect();
        let group = group_partial(&queries, &kh[span.start * d..span.end * d], &vh[span.start * d..span.end * d], d, c, |i| {
            routed[i] - start + 1
        });
        for (i, &r) in routed.iter().enumerate() {
            copy_row(&group, i, &mut self_part, r);
            coverage[r] += 1;
        }
    }

    // History groups: bucket (block, query) pairs by block, keeping query order.
    let mut by_block: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nb + 1];
    let mut slots_used = vec![0usize; n];
    for r in 0..n {
        let current = partition.block_of(r + 1);
        for &block in routing.row(r + 1, head).selected.iter().filter(|&&b| b != current) {
            by_block[block].push((r, slots_used[r]));
            slots_used[r] += 1;
        }
    }
    let num_slots = slots_used.iter().copied().max().unwrap_or(0);
    let order: Vec<(usize, usize)> = by_block.iter().flatten().copied().collect();
    let mut cu_seqlens = Vec::with_capacity(nb + 2);
    cu_seqlens.push(0);
    for group in &by_block {
        cu_seqlens.push(cu_seqlens.last().unwrap() + group.len());
    }
    let packed_q: Vec<f64> = order.iter().flat_map(|&(r, _)| qh[r * d..(r + 1) * d].iter().copied()).collect();
    let mut packed_out = PartialAttention::empty(order.len(), d);
    for block in 1..=nb {
        let (lo, hi) = (cu_seqlens[block], cu_seqlens[block + 1]);
        if lo == hi {
            continue;
        }
        let span = partition.span(block);
        let len = span.len();
        let group = group_partial(
            &packed_q[lo * d..hi * d],
            &kh[span.start * d..span.end * d],
            &vh[span.start * d..span.end * d],
            d,
            c,
            |_| len,
        );
        for i in 0..hi - lo {
            copy_row(&group, i, &mut packed_out, lo + i);
        }
    }

    // Inverse permutation: packed row e belongs to query order[e].0, slot order[e].1.
    let mut parts: Vec<PartialAttention> = (0..num_slots).map(|_| PartialAttention::empty(n, d)).collect();
    for (e, &(r, slot)) in order.iter().enumerate() {
        copy_row(&packed_out, e, &mut parts[slot], r);
        coverage[r] += 1;
    }
    if let Some(r) = coverage.iter().position(|&c| c == 0) {
        return Err(Error::Pipeline(format!("query row {r} of head {head} was assigned no block group")));
    }
    parts.push(self_part);
    Ok(online_softmax_combine(&parts)?.into_data())
}

fn copy_row(src: &PartialAttention, from: usize, dst: &mut PartialAttention, to: usize) {
    let d = src.dim;
    dst.out[to * d..(to + 1) * d].copy_from_slice(&src.out[from * d..(from + 1) * d]);
    dst.row_max[to] = src.row_max[from];
    dst.normalizer[to] = src.normalizer[from];
}

/// Scores every block for every query and head (`Q·mean_pool(K)ᵀ`), adds the
/// causal gate mask and keeps the top-k blocks.
pub fn pipeline_routing<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    partition: &BlockPartition,
    top_k: usize,
) -> Result<RoutingTable> {
    if top_k == 0 {
        return Err(Error::Parameter("top-k must be at least 1".into()));
    }
    let (n, h, _) = q.dims3()?;
    if k.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "pipeline_routing",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let nb = partition.num_blocks();
    let pooled = block_mean_pool(k, partition)?;
    let mut score_rows = Vec::with_capacity(h);
    for head in 0..h {
        let s = matmul(&head_f64(q, head)?, &head_f64(&pooled, head)?.transpose()?)?;
        score_rows.push(s.into_data());
    }
    let mut rows = Vec::with_capacity(n * h);
    for pos in 1..=n {
        let gate_mask = causal_gate_mask(pos, partition);
        for (head, s) in score_rows.iter().enumerate() {
            let raw = &s[(pos - 1) * nb..pos * nb];
            let masked: Vec<f64> = raw.iter().zip(&gate_mask).map(|(a, m)| a + m).collect();
            let selected = top_k_blocks(&masked, top_k);
            let recorded = raw
                .iter()
                .zip(&gate_mask)
                .map(|(&a, &m)| if m == f64::NEG_INFINITY { m } else { a })
                .collect();
            rows.push(RoutingRow {
                query_pos: pos,
                head,
                selected,
                scores: Some(recorded),
            });
        }
    }
    RoutingTable::from_rows(*partition, h, Some(top_k), rows)
}

/// Full MoBA forward: split, score, mask, top-k, grouped attention, combine.
pub fn moba_attention_pipeline<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    config: &AttentionConfig,
) -> Result<Tensor<E>> {
    config.validate()?;
    let AttentionMode::Moba { block_size, top_k } = config.mode else {
        return Err(Error::Config(format!("pipeline requires moba mode, got {:?}", config.mode)));
    };
    let (n, h, d) = check_qkv(q, k, v)?;
    check_config_dims(config, h, d)?;
    let partition = make_partition(n, block_size)?;
    let routing = pipeline_routing(q, k, &partition, top_k)?;
    grouped_block_attention(q, k, v, &routing, config.scale)
}

fn check_config_dims(config: &AttentionConfig, h: usize, d: usize) -> Result<()> {
    if (config.num_heads, config.head_dim) != (h, d) {
        return Err(Error::Config(format!(
            "config expects {} heads x {} dims, inputs have {h} x {d}",
            config.num_heads, config.head_dim
        )));
    }
    Ok(())
}

/// Dispatches on `config.mode`.
pub fn attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    config: &AttentionConfig,
) -> Result<Tensor<E>> {
    config.validate()?;
    let (n, h, d) = check_qkv(q, k, v)?;
    check_config_dims(config, h, d)?;
    match config.mode {
        AttentionMode::DenseCausal => dense_attention(q, k, v, true, config.scale),
        AttentionMode::Moba { .. } => moba_attention_pipeline(q, k, v, config),
        AttentionMode::Swa { block_size, window } => {
            let routing = route_swa(&make_partition(n, block_size)?, h, window)?;
            grouped_block_attention(q, k, v, &routing, config.scale)
        }
        AttentionMode::Sink {
            block_size,
            num_sink,
            num_recent,
        } => {
            let routing = route_sink(&make_partition(n, block_size)?, h, num_sink, num_recent)?;
            grouped_block_attention(q, k, v, &routing, config.scale)
        }
    }
}

/// Token-level mask equivalent to sliding-window block routing:
/// causal, and the key's block is among the `window` most recent.
pub fn swa_band_mask(partition: &BlockPartition, window: usize) -> Mask {
    let b = partition.block_size();
    let n = partition.context_len();
    Mask::from_fn(n, n, |r, c| c <= r && c / b + window > r / b)
}

/// Token-level mask equivalent to attention-sink block routing.
pub fn sink_band_mask(partition: &BlockPartition, num_sink: usize, num_recent: usize) -> Mask {
    let b = partition.block_size();
    let n = partition.context_len();
    Mask::from_fn(n, n, |r, c| c <= r && (c / b < num_sink || c / b + num_recent > r / b))
}
