//! Fixed-sparsity sweeps over block granularity.

use serde::Serialize;

use crate::attention::{dense_attention, moba_attention_pipeline, AttentionConfig};
use crate::error::{Error, Result};
use crate::harness::flops::flop_report;
use crate::tensor::{seeded_random, Tensor};

/// Scaled-down forward comparison run at each granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepProbe {
    pub context_len: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub num_blocks: usize,
    pub block_size: usize,
    pub top_k: usize,
    pub sparsity: f64,
    pub dense_flops: u64,
    pub moba_attention_flops: u64,
    pub ratio: f64,
    /// Largest `|moba − dense|` at probe scale; empty without a probe.
    pub probe_max_abs_dev: Option<f64>,
    pub probe_mean_abs_dev: Option<f64>,
}

/// One row per block count `n`, with `B = N/n` and `k = (1 − target)·n`.
pub fn segmentation_sweep(
    context_len: usize,
    sparsity_target: f64,
    block_counts: &[usize],
    num_heads: usize,
    head_dim: usize,
    probe: Option<SweepProbe>,
) -> Result<Vec<SweepRow>> {
    if !(0.0..1.0).contains(&sparsity_target) {
        return Err(Error::Config(format!("sparsity target {sparsity_target} outside [0, 1)")));
    }
    block_counts
        .iter()
        .map(|&count| {
            if count == 0 || !context_len.is_multiple_of(count) {
                return Err(Error::Config(format!("{count} blocks do not divide {context_len} tokens")));
            }
            let exact = (1.0 - sparsity_target) * count as f64;
            let top_k = exact.round() as usize;
            if top_k == 0 || (exact - top_k as f64).abs() > 1e-9 * count as f64 {
                return Err(Error::Config(format!(
                    "sparsity {sparsity_target} is not reachable with {count} blocks"
                )));
            }
            let block_size = context_len / count;
            let report = flop_report(&AttentionConfig::moba(block_size, top_k, num_heads, head_dim), context_len)?;
            let (max_dev, mean_dev) = match probe {
                Some(p) => {
                    let (max, mean) = probe_deviation(&p, count, top_k)?;
                    (Some(max), Some(mean))
                }
                None => (None, None),
            };
            Ok(SweepRow {
                num_blocks: count,
                block_size,
                top_k,
                sparsity: report.sparsity,
                dense_flops: report.dense_flops,
                moba_attention_flops: report.moba_attention_flops,
                ratio: report.ratio,
                probe_max_abs_dev: max_dev,
                probe_mean_abs_dev: mean_dev,
            })
        })
        .collect()
}

fn probe_deviation(p: &SweepProbe, count: usize, top_k: usize) -> Result<(f64, f64)> {
    if !p.context_len.is_multiple_of(count) {
        return Err(Error::Config(format!(
            "{count} blocks do not divide the probe length {}",
            p.context_len
        )));
    }
    let shape = [p.context_len, p.num_heads, p.head_dim];
    let q: Tensor = seeded_random(&shape, p.seed);
    let k: Tensor = seeded_random(&shape, p.seed.wrapping_add(1));
    let v: Tensor = seeded_random(&shape, p.seed.wrapping_add(2));
    let config = AttentionConfig::moba(p.context_len / count, top_k, p.num_heads, p.head_dim);
    let moba = moba_attention_pipeline(&q, &k, &v, &config)?;
    let dense = dense_attention(&q, &k, &v, true, true)?;
    let diffs: Vec<f64> = moba.data().iter().zip(dense.data()).map(|(a, b)| (a - b).abs()).collect();
    let max = diffs.iter().copied().fold(0.0, f64::max);
    Ok((max, diffs.iter().sum::<f64>() / diffs.len() as f64))
}
