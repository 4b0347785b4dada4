//! Sparsity arithmetic, long-context loss breakdowns and power-law fits.

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width of the default position bucket.
pub const DEFAULT_BUCKET_SIZE: usize = 2048;

/// Exact `1 − min(B·k, N)/N`.
pub fn sparsity_ratio(context_len: usize, block_size: usize, top_k: usize) -> Result<Ratio<u64>> {
    if context_len == 0 || block_size == 0 || top_k == 0 {
        return Err(Error::Parameter(format!(
            "sparsity needs positive N, B, k (got {context_len}, {block_size}, {top_k})"
        )));
    }
    let n = context_len as u64;
    let attended = (block_size as u64).saturating_mul(top_k as u64).min(n);
    Ok(Ratio::new(n - attended, n))
}

pub fn ratio_to_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Mean loss over positions `[lo, hi)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBucket {
    pub lo: usize,
    pub hi: usize,
    pub mean_loss: f64,
    pub token_count: usize,
    /// Sequences shorter than this were excluded.
    pub min_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PositionwiseLoss {
    pub buckets: Vec<LossBucket>,
    /// `[lo, hi)` ranges no sequence was long enough to populate.
    pub omitted: Vec<(usize, usize)>,
}

fn check_batch(losses: &[Vec<f64>], seq_lengths: &[usize]) -> Result<()> {
    if losses.len() != seq_lengths.len() {
        return Err(Error::Dimension {
            op: "loss batch",
            left: vec![losses.len()],
            right: vec![seq_lengths.len()],
        });
    }
    for (i, (row, &len)) in losses.iter().zip(seq_lengths).enumerate() {
        if row.len() < len {
            return Err(Error::Parameter(format!(
                "sequence {i} has length {len} but only {} losses",
                row.len()
            )));
        }
        if row[..len].iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("per-token loss"));
        }
    }
    Ok(())
}

/// Mean loss of positions `[lo, hi)` over sequences of length `>= hi`;
/// `None` when no sequence qualifies.
pub fn bucket_loss(losses: &[Vec<f64>], seq_lengths: &[usize], lo: usize, hi: usize) -> Result<Option<LossBucket>> {
    check_batch(losses, seq_lengths)?;
    if lo >= hi {
        return Err(Error::Parameter(format!("empty bucket [{lo}, {hi})")));
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (row, _) in losses.iter().zip(seq_lengths).filter(|(_, &len)| len >= hi) {
        sum += row[lo..hi].iter().sum::<f64>();
        count += hi - lo;
    }
    Ok((count > 0).then(|| LossBucket {
        lo,
        hi,
        mean_loss: sum / count as f64,
        token_count: count,
        min_len: hi,
    }))
}

/// Splits positions into `bucket_size`-wide ranges across the padded batch
/// width (longest loss row); the last range may be shorter.
pub fn positionwise_lm_loss(losses: &[Vec<f64>], seq_lengths: &[usize], bucket_size: usize) -> Result<PositionwiseLoss> {
    if bucket_size == 0 {
        return Err(Error::Parameter("bucket size must be positive".into()));
    }
    check_batch(losses, seq_lengths)?;
    let longest = losses.iter().map(Vec::len).max().unwrap_or(0);
    let mut out = PositionwiseLoss {
        buckets: Vec::new(),
        omitted: Vec::new(),
    };
    for lo in (0..longest).step_by(bucket_size) {
        let hi = (lo + bucket_size).min(longest);
        match bucket_loss(losses, seq_lengths, lo, hi)? {
            Some(b) => out.buckets.push(b),
            None => out.omitted.push((lo, hi)),
        }
    }
    Ok(out)
}

/// Mean loss over the last `tail_len` positions of sequences whose length is
/// exactly `max_len`.
pub fn trailing_lm_loss(losses: &[Vec<f64>], seq_lengths: &[usize], max_len: usize, tail_len: usize) -> Result<f64> {
    if tail_len == 0 || tail_len > max_len {
        return Err(Error::Parameter(format!("tail {tail_len} must be in 1..={max_len}")));
    }
    check_batch(losses, seq_lengths)?;
    let mut sum = 0.0;
    let mut count = 0;
    for (row, _) in losses.iter().zip(seq_lengths).filter(|(_, &len)| len == max_len) {
        sum += row[max_len - tail_len..max_len].iter().sum::<f64>();
        count += tail_len;
    }
    if count == 0 {
        return Err(Error::Degenerate(format!("no sequence reaches length {max_len}")));
    }
    Ok(sum / count as f64)
}

/// `L(C) = a·C^b`, fit in log space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub b: f64,
    /// RMS of `ln L − ln(a·C^b)`.
    pub residual: f64,
    pub points: usize,
}

impl PowerLawFit {
    pub fn predict(&self, c: f64) -> f64 {
        self.a * c.powf(self.b)
    }
}

pub fn fit_power_law(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::Parameter(format!("need at least 2 points, got {}", points.len())));
    }
    if let Some(&(c, l)) = points.iter().find(|(c, l)| !(*c > 0.0 && *l > 0.0 && c.is_finite() && l.is_finite())) {
        return Err(Error::Domain(format!("power-law fit needs C > 0 and L > 0, got ({c}, {l})")));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Degenerate("all compute values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let b = sxy / sxx;
    let intercept = my - b * mx;
    let residual = (xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - b * x).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    Ok(PowerLawFit {
        a: intercept.exp(),
        b,
        residual,
        points: points.len(),
    })
}
