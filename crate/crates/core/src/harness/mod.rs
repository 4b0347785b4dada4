//! Benchmarks, sweeps and self-checks behind the command-line tool.

mod flops;
mod sweep;
mod verify;

pub use flops::{flop_report, flop_report_from_routing, gathered_keys, FlopReport};
pub use sweep::{segmentation_sweep, SweepProbe, SweepRow};
pub use verify::{run_suites, SuiteResult, SUITE_NAMES};

use crate::error::Result;
use crate::gating::{route_moba, BlockPartition, RoutingTable};
use crate::tensor::{seeded_random, Tensor};

/// Routing of seeded standard-normal queries and keys (`[N, h, d]`).
pub fn gate_trace(
    context_len: usize,
    block_size: usize,
    top_k: usize,
    num_heads: usize,
    head_dim: usize,
    seed: u64,
) -> Result<RoutingTable> {
    let partition = BlockPartition::new(context_len, block_size)?;
    let shape = [context_len, num_heads, head_dim];
    let q: Tensor = seeded_random(&shape, seed);
    let k: Tensor = seeded_random(&shape, seed.wrapping_add(1));
    route_moba(&q, &k, &partition, top_k)
}
