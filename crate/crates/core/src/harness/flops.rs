//! Operation counts for dense causal and MoBA attention.
//!
//! A query attending `m` keys costs `4·m·d·h`: one multiply-add (two flops)
//! per element for `QKᵀ` and again for `PV`. Gate scoring is charged
//! `N·n·d·h`, one unit per query, block and channel.

use num_rational::Ratio;
use serde::Serialize;

use crate::attention::{AttentionConfig, AttentionMode, AttentionPattern};
use crate::error::{Error, Result};
use crate::gating::{BlockPartition, RoutingTable};
use crate::metrics::{ratio_to_f64, sparsity_ratio};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopReport {
    pub n: usize,
    pub block_size: usize,
    pub top_k: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub sparsity: f64,
    pub dense_flops: u64,
    /// Attention plus gate scoring.
    pub moba_flops: u64,
    pub moba_attention_flops: u64,
    pub gate_flops: u64,
    /// `moba_attention_flops / dense_flops`.
    pub ratio: f64,
    /// `moba_flops / dense_flops`.
    pub total_ratio: f64,
    /// Keys seen by the last query over keys seen by it densely.
    pub late_query_ratio: f64,
    /// `1 − sparsity`.
    pub theoretical_ratio: f64,
}

/// Keys gathered by 1-based query `pos`: every selected history block is
/// complete, and the current block contributes its first `offset` keys.
pub fn gathered_keys(pos: usize, partition: &BlockPartition, top_k: usize) -> usize {
    let b = partition.block_size();
    let block = partition.block_of(pos);
    let offset = pos - (block - 1) * b;
    (top_k.min(block) - 1) * b + offset
}

fn overflow() -> Error {
    Error::Parameter("operation count overflows u64".into())
}

fn checked(a: u64, b: u64) -> Result<u64> {
    a.checked_mul(b).ok_or_else(overflow)
}

fn moba_params(config: &AttentionConfig) -> Result<(usize, usize)> {
    config.validate()?;
    match config.mode {
        AttentionMode::Moba { block_size, top_k } => Ok((block_size, top_k)),
        other => Err(Error::Config(format!("flop counting needs moba mode, got {other:?}"))),
    }
}

/// Closed-form counts for a MoBA config at context length `n`.
pub fn flop_report(config: &AttentionConfig, n: usize) -> Result<FlopReport> {
    let (block_size, top_k) = moba_params(config)?;
    let partition = BlockPartition::new(n, block_size)?;
    let keys: u64 = (1..=n).map(|p| gathered_keys(p, &partition, top_k) as u64).sum();
    let all_heads = checked(keys, config.num_heads as u64)?;
    build(config, &partition, top_k, all_heads, gathered_keys(n, &partition, top_k))
}

/// Counts tallied from an explicit routing table.
pub fn flop_report_from_routing(routing: &RoutingTable, head_dim: usize) -> Result<FlopReport> {
    let partition = *routing.partition();
    let top_k = routing
        .top_k()
        .ok_or_else(|| Error::Routing("routing table has no top-k".into()))?;
    let h = routing.num_heads();
    let pattern = AttentionPattern::from_routing(routing);
    let n = partition.context_len();
    let late = (0..h).map(|head| pattern.keys(n - 1, head).len()).max().unwrap_or(0);
    let config = AttentionConfig::moba(partition.block_size(), top_k, h, head_dim);
    build(&config, &partition, top_k, pattern.total_keys() as u64, late)
}

/// `head_keys` sums gathered keys over every query and head.
fn build(config: &AttentionConfig, partition: &BlockPartition, top_k: usize, head_keys: u64, late: usize) -> Result<FlopReport> {
    let n = partition.context_len() as u64;
    let (h, d) = (config.num_heads as u64, config.head_dim as u64);
    let unit = checked(4, checked(d, h)?)?;
    let dense_keys = checked(n, n + 1)? / 2;
    let sparsity: Ratio<u64> = sparsity_ratio(partition.context_len(), partition.block_size(), top_k)?;
    let report = FlopReport {
        n: partition.context_len(),
        block_size: partition.block_size(),
        top_k,
        num_heads: config.num_heads,
        head_dim: config.head_dim,
        sparsity: ratio_to_f64(sparsity),
        dense_flops: checked(unit, dense_keys)?,
        moba_flops: 0,
        moba_attention_flops: checked(4 * d, head_keys)?,
        gate_flops: checked(checked(n, partition.num_blocks() as u64)?, checked(d, h)?)?,
        ratio: 0.0,
        total_ratio: 0.0,
        late_query_ratio: late as f64 / partition.context_len() as f64,
        theoretical_ratio: 1.0 - ratio_to_f64(sparsity),
    };
    finish(report)
}

fn finish(mut r: FlopReport) -> Result<FlopReport> {
    r.moba_flops = r.moba_attention_flops.checked_add(r.gate_flops).ok_or_else(overflow)?;
    r.ratio = r.moba_attention_flops as f64 / r.dense_flops as f64;
    r.total_ratio = r.moba_flops as f64 / r.dense_flops as f64;
    Ok(r)
}
