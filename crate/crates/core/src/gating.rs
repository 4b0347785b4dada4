//! Block partitioning and gating.
//!
//! Positions and block indices are 1-based throughout this module: block `i`
//! covers tokens `[(i-1)·B + 1, i·B]`, clipped to the context length for a
//! ragged last block. Heads are 0-based. Tensor rows elsewhere in the crate
//! are 0-based, so query row `r` corresponds to position `r + 1`.
//!
//! A block is *future* for a query at position `p` when its first token comes
//! after `p`. The block containing `p` is the *current* block: it is always
//! selected and is attended with a causal mask by the attention layer.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{block_mean_pool, Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockPartition {
    context_len: usize,
    block_size: usize,
    num_blocks: usize,
}

/// Splits `context_len` tokens into blocks of `block_size`.
pub fn make_partition(context_len: usize, block_size: usize) -> Result<BlockPartition> {
    BlockPartition::new(context_len, block_size)
}

impl BlockPartition {
    pub fn new(context_len: usize, block_size: usize) -> Result<Self> {
        if context_len == 0 || block_size == 0 {
            return Err(Error::Parameter(format!(
                "context length and block size must be positive (got N={context_len}, B={block_size})"
            )));
        }
        Ok(Self {
            context_len,
            block_size,
            num_blocks: context_len.div_ceil(block_size),
        })
    }

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn num_blocks(&self) -> usize {
        self.num_blocks
    }

    /// Inclusive 1-based token range `[start, end]` of `block`.
    pub fn range(&self, block: usize) -> (usize, usize) {
        self.check_block(block);
        let start = (block - 1) * self.block_size + 1;
        let end = (block * self.block_size).min(self.context_len);
        (start, end)
    }

    pub fn ranges(&self) -> Vec<(usize, usize)> {
        (1..=self.num_blocks).map(|b| self.range(b)).collect()
    }

    /// 0-based half-open row span of `block`.
    pub fn span(&self, block: usize) -> Range<usize> {
        let (start, end) = self.range(block);
        start - 1..end
    }

    pub fn block_len(&self, block: usize) -> usize {
        let (start, end) = self.range(block);
        end + 1 - start
    }

    /// Block containing 1-based position `pos`.
    pub fn block_of(&self, pos: usize) -> usize {
        assert!(
            (1..=self.context_len).contains(&pos),
            "position {pos} outside [1, {}]",
            self.context_len
        );
        (pos - 1) / self.block_size + 1
    }

    fn check_block(&self, block: usize) {
        assert!(
            (1..=self.num_blocks).contains(&block),
            "block {block} outside [1, {}]",
            self.num_blocks
        );
    }

    fn check_pos(&self, pos: usize) -> Result<()> {
        if (1..=self.context_len).contains(&pos) {
            Ok(())
        } else {
            Err(Error::Parameter(format!(
                "query position {pos} outside [1, {}]",
                self.context_len
            )))
        }
    }
}

/// Gate decision for one `(query position, head)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRow {
    pub query_pos: usize,
    pub head: usize,
    /// Selected blocks, ascending.
    pub selected: Vec<usize>,
    /// Affinity scores after the causal mask (`-inf` for future blocks).
    /// Static gates carry no scores.
    pub scores: Option<Vec<f64>>,
}

impl RoutingRow {
    pub fn contains(&self, block: usize) -> bool {
        self.selected.binary_search(&block).is_ok()
    }

    /// Hard gate values `g_i ∈ {0, 1}` for blocks `1..=num_blocks`.
    pub fn gate_values(&self, num_blocks: usize) -> Vec<u8> {
        (1..=num_blocks).map(|i| u8::from(self.contains(i))).collect()
    }
}

/// Routing for every query position and head of one attention call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingTable {
    partition: BlockPartition,
    num_heads: usize,
    top_k: Option<usize>,
    rows: Vec<RoutingRow>,
}

impl RoutingTable {
    /// Assembles a table from rows ordered by position, then head.
    pub fn from_rows(
        partition: BlockPartition,
        num_heads: usize,
        top_k: Option<usize>,
        rows: Vec<RoutingRow>,
    ) -> Result<Self> {
        let table = Self {
            partition,
            num_heads,
            top_k,
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn top_k(&self) -> Option<usize> {
        self.top_k
    }

    pub fn rows(&self) -> &[RoutingRow] {
        &self.rows
    }

    pub fn row(&self, pos: usize, head: usize) -> &RoutingRow {
        &self.rows[(pos - 1) * self.num_heads + head]
    }

    /// Checks the structural invariants: row layout, forced current block,
    /// no future block, and `|S| = min(k, block(p))` for top-k tables.
    pub fn validate(&self) -> Result<()> {
        let n = self.partition.context_len();
        if self.num_heads == 0 {
            return Err(Error::Routing("zero heads".into()));
        }
        if self.rows.len() != n * self.num_heads {
            return Err(Error::Routing(format!(
                "expected {} rows, found {}",
                n * self.num_heads,
                self.rows.len()
            )));
        }
        for (idx, row) in self.rows.iter().enumerate() {
            let (pos, head) = (idx / self.num_heads + 1, idx % self.num_heads);
            if row.query_pos != pos || row.head != head {
                return Err(Error::Routing(format!(
                    "row {idx} labelled ({}, {}) but expected ({pos}, {head})",
                    row.query_pos, row.head
                )));
            }
            let current = self.partition.block_of(pos);
            if !row.selected.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Routing(format!("row ({pos}, {head}) not strictly ascending")));
            }
            if !row.contains(current) {
                return Err(Error::Routing(format!(
                    "row ({pos}, {head}) misses its current block {current}"
                )));
            }
            if row.selected.iter().any(|&b| b == 0 || b > current) {
                return Err(Error::Routing(format!(
                    "row ({pos}, {head}) selects a future block: {:?}",
                    row.selected
                )));
            }
            if let Some(k) = self.top_k {
                if row.selected.len() != k.min(current) {
                    return Err(Error::Routing(format!(
                        "row ({pos}, {head}) selects {} blocks, expected {}",
                        row.selected.len(),
                        k.min(current)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Inner products of one query with every pooled block key.
pub fn affinity_scores<E: Element>(q: &[E], pooled_keys: &Tensor<E>) -> Result<Vec<f64>> {
    let (n, d) = pooled_keys.dims2()?;
    if q.len() != d {
        return Err(Error::Dimension {
            op: "affinity_scores",
            left: vec![1, q.len()],
            right: vec![n, d],
        });
    }
    Ok(pooled_keys
        .data()
        .chunks_exact(d)
        .map(|key| q.iter().zip(key).map(|(a, b)| a.to_f64() * b.to_f64()).sum())
        .collect())
}

/// Indices (1-based) of the `k` largest scores; ties go to the lower index.
///
/// Blocks scored `-inf` are never chosen, so at most the number of finite or
/// `+inf` entries is returned. The result is ascending.
pub fn top_k_blocks(masked_scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masked_scores.len())
        .filter(|&i| masked_scores[i] != f64::NEG_INFINITY)
        .collect();
    order.sort_by(|&a, &b| masked_scores[b].total_cmp(&masked_scores[a]).then(a.cmp(&b)));
    order.truncate(k);
    let mut picked: Vec<usize> = order.into_iter().map(|i| i + 1).collect();
    picked.sort_unstable();
    picked
}

/// Additive gate mask for one query: `-inf` on future blocks, `+inf` on the
/// current block, `0` elsewhere.
pub fn causal_gate_mask(pos: usize, partition: &BlockPartition) -> Vec<f64> {
    let current = partition.block_of(pos);
    (1..=partition.num_blocks())
        .map(|i| match i.cmp(&current) {
            std::cmp::Ordering::Less => 0.0,
            std::cmp::Ordering::Equal => f64::INFINITY,
            std::cmp::Ordering::Greater => f64::NEG_INFINITY,
        })
        .collect()
}

/// Top-k MoBA gate for the query at `pos`.
///
/// Future blocks are masked to `-inf`, the current block is forced in, and
/// the remaining `k - 1` slots go to the highest-scoring past blocks.
pub fn moba_gate(scores: &[f64], pos: usize, partition: &BlockPartition, k: usize) -> Result<RoutingRow> {
    if k == 0 {
        return Err(Error::Parameter("top-k must be at least 1 to keep the current block".into()));
    }
    if scores.len() != partition.num_blocks() {
        return Err(Error::Dimension {
            op: "moba_gate",
            left: vec![scores.len()],
            right: vec![partition.num_blocks()],
        });
    }
    partition.check_pos(pos)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("moba_gate"));
    }
    let mask = causal_gate_mask(pos, partition);
    let ranked: Vec<f64> = scores.iter().zip(&mask).map(|(s, m)| s + m).collect();
    let selected = top_k_blocks(&ranked, k);
    let current = partition.block_of(pos);
    let recorded = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if i + 1 > current { f64::NEG_INFINITY } else { s })
        .collect();
    Ok(RoutingRow {
        query_pos: pos,
        head: 0,
        selected,
        scores: Some(recorded),
    })
}

/// Sliding-window gate: the `window` most recent visible blocks.
pub fn swa_gate(pos: usize, partition: &BlockPartition, window: usize) -> Result<RoutingRow> {
    if window == 0 {
        return Err(Error::Parameter("window must cover at least one block".into()));
    }
    partition.check_pos(pos)?;
    let current = partition.block_of(pos);
    let first = current.saturating_sub(window - 1).max(1);
    Ok(RoutingRow {
        query_pos: pos,
        head: 0,
        selected: (first..=current).collect(),
        scores: None,
    })
}

/// Attention-sink gate: the first `num_sink` and last `num_recent` visible blocks.
pub fn sink_gate(
    pos: usize,
    partition: &BlockPartition,
    num_sink: usize,
    num_recent: usize,
) -> Result<RoutingRow> {
    if num_sink == 0 || num_recent == 0 {
        return Err(Error::Parameter("sink and recent block counts must be positive".into()));
    }
    partition.check_pos(pos)?;
    let current = partition.block_of(pos);
    let recent_start = current.saturating_sub(num_recent - 1).max(1);
    let mut selected: Vec<usize> = (1..=num_sink.min(current)).chain(recent_start..=current).collect();
    selected.sort_unstable();
    selected.dedup();
    Ok(RoutingRow {
        query_pos: pos,
        head: 0,
        selected,
        scores: None,
    })
}

/// Routes every query of `q`/`k` (both `[N, h, d]`) with the MoBA gate,
/// independently per head.
pub fn route_moba<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    partition: &BlockPartition,
    top_k: usize,
) -> Result<RoutingTable> {
    let (n, h, d) = q.dims3()?;
    if k.shape() != q.shape() {
        return Err(Error::Dimension {
            op: "route_moba",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    if n != partition.context_len() {
        return Err(Error::Partition(format!(
            "partition covers {} tokens but inputs have {n}",
            partition.context_len()
        )));
    }
    let pooled = block_mean_pool(k, partition)?;
    let pooled_heads = (0..h).map(|head| pooled.head(head)).collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(n * h);
    for pos in 1..=n {
        for (head, pooled_head) in pooled_heads.iter().enumerate() {
            let qrow = &q.data()[((pos - 1) * h + head) * d..((pos - 1) * h + head + 1) * d];
            let scores = affinity_scores(qrow, pooled_head)?;
            let mut row = moba_gate(&scores, pos, partition, top_k)?;
            row.head = head;
            rows.push(row);
        }
    }
    RoutingTable::from_rows(*partition, h, Some(top_k), rows)
}

/// Sliding-window routing for all positions and heads.
pub fn route_swa(partition: &BlockPartition, num_heads: usize, window: usize) -> Result<RoutingTable> {
    route_static(partition, num_heads, |pos| swa_gate(pos, partition, window))
}

/// Attention-sink routing for all positions and heads.
pub fn route_sink(
    partition: &BlockPartition,
    num_heads: usize,
    num_sink: usize,
    num_recent: usize,
) -> Result<RoutingTable> {
    route_static(partition, num_heads, |pos| sink_gate(pos, partition, num_sink, num_recent))
}

fn route_static(
    partition: &BlockPartition,
    num_heads: usize,
    gate: impl Fn(usize) -> Result<RoutingRow>,
) -> Result<RoutingTable> {
    let mut rows = Vec::with_capacity(partition.context_len() * num_heads);
    for pos in 1..=partition.context_len() {
        let row = gate(pos)?;
        for head in 0..num_heads {
            rows.push(RoutingRow { head, ..row.clone() });
        }
    }
    RoutingTable::from_rows(*partition, num_heads, None, rows)
}
