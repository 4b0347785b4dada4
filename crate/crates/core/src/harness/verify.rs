//! Seeded self-checks: every suite compares an implementation path with an
//! independent reference and reports the largest residual.

use std::sync::Arc;

use num_rational::Ratio;
use serde::Serialize;

use crate::attention::{
    dense_attention, grouped_block_attention, masked_attention, moba_attention_oracle, moba_attention_pipeline,
    online_softmax_combine, pipeline_routing, sink_band_mask, swa_band_mask, AttentionConfig, PartialAttention,
};
use crate::autodiff::{finite_difference_gradient, relative_error, routing_is_stable, AttentionRouting, AttentionSpec, Tape};
use crate::error::Result;
use crate::gating::{route_moba, route_sink, route_swa, BlockPartition};
use crate::harness::flops::{flop_report, flop_report_from_routing};
use crate::metrics::{bucket_loss, fit_power_law, sparsity_ratio, trailing_lm_loss};
use crate::model::{layer_stack_forward, LayerStackConfig, ModelParams};
use crate::tensor::{SeededRng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub cases: usize,
    pub max_residual: f64,
    pub tolerance: f64,
    /// Error text when the suite could not run to completion.
    pub error: Option<String>,
}

pub const SUITE_NAMES: [&str; 12] = [
    "saturation",
    "pipeline-oracle",
    "online-softmax",
    "causality",
    "gating",
    "swa-sink",
    "sparsity",
    "gradients",
    "power-law",
    "flops",
    "metrics",
    "model",
];

type Suite = fn(&mut SeededRng) -> Result<(usize, f64)>;

/// Runs the named suites (all when `only` is empty). Suites draw from
/// independent generators derived from `seed`, so results do not depend on
/// which other suites run.
pub fn run_suites(seed: u64, only: &[String]) -> Vec<SuiteResult> {
    let suites: [(&'static str, Suite, f64); 12] = [
        ("saturation", saturation, 1e-10),
        ("pipeline-oracle", pipeline_oracle, 1e-10),
        ("online-softmax", online_softmax, 1e-12),
        ("causality", causality, 0.0),
        ("gating", gating, 0.0),
        ("swa-sink", swa_sink, 1e-10),
        ("sparsity", sparsity, 0.0),
        ("gradients", gradients, 1e-4),
        ("power-law", power_law, 1e-9),
        ("flops", flops, 0.0),
        ("metrics", metrics, 1e-12),
        ("model", model, 1e-8),
    ];
    suites
        .iter()
        .enumerate()
        .filter(|(_, (name, _, _))| only.is_empty() || only.iter().any(|o| o == name))
        .map(|(i, &(name, suite, tolerance))| {
            let mut rng = SeededRng::new(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64));
            match suite(&mut rng) {
                Ok((cases, residual)) => SuiteResult {
                    name,
                    passed: residual <= tolerance,
                    cases,
                    max_residual: residual,
                    tolerance,
                    error: None,
                },
                Err(e) => SuiteResult {
                    name,
                    passed: false,
                    cases: 0,
                    max_residual: f64::NAN,
                    tolerance,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

fn qkv(rng: &mut SeededRng, n: usize, h: usize, d: usize) -> (Tensor, Tensor, Tensor) {
    let shape = [n, h, d];
    (rng.normal_tensor(&shape), rng.normal_tensor(&shape), rng.normal_tensor(&shape))
}

fn saturation(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, h, d) = (rng.range_inclusive(1, 128), rng.range_inclusive(1, 3), rng.range_inclusive(1, 8));
        let b = rng.range_inclusive(1, n);
        let k = n.div_ceil(b) + rng.below(3);
        let (q, kk, v) = qkv(rng, n, h, d);
        let moba = moba_attention_pipeline(&q, &kk, &v, &AttentionConfig::moba(b, k, h, d))?;
        worst = worst.max(moba.max_abs_diff(&dense_attention(&q, &kk, &v, true, true)?)?);
    }
    Ok((10, worst))
}

fn pipeline_oracle(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, h, d) = (rng.range_inclusive(1, 96), rng.range_inclusive(1, 3), rng.range_inclusive(1, 8));
        let b = rng.range_inclusive(1, n);
        let k = rng.range_inclusive(1, n.div_ceil(b));
        let (q, kk, v) = qkv(rng, n, h, d);
        let partition = BlockPartition::new(n, b)?;
        let routing = route_moba(&q, &kk, &partition, k)?;
        let oracle = moba_attention_oracle(&q, &kk, &v, &routing, &partition, true)?;
        let piped = moba_attention_pipeline(&q, &kk, &v, &AttentionConfig::moba(b, k, h, d))?;
        worst = worst.max(piped.max_abs_diff(&oracle)?);
    }
    Ok((20, worst))
}

fn online_softmax(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let m = rng.range_inclusive(5, 40);
        let dim = rng.range_inclusive(1, 4);
        let logits: Vec<f64> = (0..m).map(|_| 5.0 * rng.normal()).collect();
        let values: Vec<f64> = (0..m * dim).map(|_| rng.normal()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = weights.iter().sum();
        let direct: Vec<f64> = (0..dim)
            .map(|c| (0..m).map(|j| weights[j] * values[j * dim + c]).sum::<f64>() / z)
            .collect();
        let parts_count = rng.range_inclusive(2, 5);
        let mut cuts: Vec<usize> = (1..m).collect();
        rng.shuffle(&mut cuts);
        let mut cuts: Vec<usize> = cuts[..parts_count - 1].to_vec();
        cuts.sort_unstable();
        cuts.insert(0, 0);
        cuts.push(m);
        let mut parts = Vec::new();
        for w in cuts.windows(2) {
            let l = Tensor::from_f64(&[1, w[1] - w[0]], &logits[w[0]..w[1]])?;
            let vv = Tensor::from_f64(&[w[1] - w[0], dim], &values[w[0] * dim..w[1] * dim])?;
            parts.push(PartialAttention::from_logits(&l, &vv, None)?);
        }
        let combined = online_softmax_combine(&parts)?;
        let mut shuffled = parts.clone();
        rng.shuffle(&mut shuffled);
        let permuted = online_softmax_combine(&shuffled)?;
        let folded = parts[1..].iter().try_fold(parts[0].clone(), |acc, p| acc.merge(p))?.normalize()?;
        for c in 0..dim {
            for other in [&combined, &permuted, &folded] {
                worst = worst.max((other.data()[c] - direct[c]).abs());
            }
        }
    }
    Ok((200, worst))
}

fn causality(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (n, h, d) = (rng.range_inclusive(2, 80), rng.range_inclusive(1, 2), rng.range_inclusive(1, 6));
        let b = rng.range_inclusive(1, n);
        let top_k = rng.range_inclusive(1, n.div_ceil(b));
        let cut = rng.range_inclusive(1, n - 1);
        let (q, kk, v) = qkv(rng, n, h, d);
        let (mut k2, mut v2) = (kk.clone(), v.clone());
        for i in cut * h * d..n * h * d {
            k2.data_mut()[i] += 10.0 * rng.normal();
            v2.data_mut()[i] += 10.0 * rng.normal();
        }
        let config = AttentionConfig::moba(b, top_k, h, d);
        let partition = BlockPartition::new(n, b)?;
        let oracle = |keys: &Tensor, values: &Tensor| -> Result<Tensor> {
            let routing = route_moba(&q, keys, &partition, top_k)?;
            moba_attention_oracle(&q, keys, values, &routing, &partition, true)
        };
        let pairs = [
            (dense_attention(&q, &kk, &v, true, true)?, dense_attention(&q, &k2, &v2, true, true)?),
            (oracle(&kk, &v)?, oracle(&k2, &v2)?),
            (
                moba_attention_pipeline(&q, &kk, &v, &config)?,
                moba_attention_pipeline(&q, &k2, &v2, &config)?,
            ),
        ];
        for (a, b) in &pairs {
            for i in 0..cut * h * d {
                worst = worst.max((a.data()[i] - b.data()[i]).abs());
            }
        }
    }
    Ok((20, worst))
}

/// The unique size-`m` subset of `candidates` in which every member beats
/// every non-member (higher score, or equal score and lower index).
fn brute_force_history(scores: &[f64], candidates: &[usize], m: usize) -> Vec<usize> {
    let beats = |i: usize, j: usize| scores[i - 1] > scores[j - 1] || (scores[i - 1] == scores[j - 1] && i < j);
    let total = candidates.len();
    let mut found = Vec::new();
    for mask in 0u64..(1 << total) {
        if mask.count_ones() as usize != m {
            continue;
        }
        let inside: Vec<usize> = (0..total).filter(|b| mask >> b & 1 == 1).map(|b| candidates[b]).collect();
        let outside: Vec<usize> = (0..total).filter(|b| mask >> b & 1 == 0).map(|b| candidates[b]).collect();
        if inside.iter().all(|&i| outside.iter().all(|&j| beats(i, j))) {
            found.push(inside);
        }
    }
    assert_eq!(found.len(), 1, "strict order yields one subset");
    found.pop().unwrap()
}

fn gating(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let (n, b) = (64, 8);
    let partition = BlockPartition::new(n, b)?;
    let mut mismatches = 0usize;
    let mut cases = 0;
    for k in 1..=3 {
        let q: Tensor = rng.normal_tensor(&[n, 1, 4]);
        // quantized keys make pooled scores collide, exercising tie-breaks
        let mut kk: Tensor = rng.normal_tensor(&[n, 1, 4]);
        kk.data_mut().iter_mut().for_each(|x| *x = x.round());
        let routing = route_moba(&q, &kk, &partition, k)?;
        for row in routing.rows() {
            let current = partition.block_of(row.query_pos);
            let scores = row.scores.as_ref().expect("moba rows carry scores");
            let past: Vec<usize> = (1..current).collect();
            let mut expect = brute_force_history(scores, &past, k.min(current) - 1);
            expect.push(current);
            expect.sort_unstable();
            cases += 1;
            if row.selected != expect {
                mismatches += 1;
            }
        }
    }
    Ok((cases, mismatches as f64))
}

fn swa_sink(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, h, d) = (rng.range_inclusive(8, 72), rng.range_inclusive(1, 2), rng.range_inclusive(1, 6));
        let b = rng.range_inclusive(1, 12);
        let partition = BlockPartition::new(n, b)?;
        let (q, kk, v) = qkv(rng, n, h, d);
        let window = rng.range_inclusive(1, 4);
        let swa = grouped_block_attention(&q, &kk, &v, &route_swa(&partition, h, window)?, true)?;
        worst = worst.max(swa.max_abs_diff(&masked_attention(&q, &kk, &v, &swa_band_mask(&partition, window), true)?)?);
        let (sink, recent) = (rng.range_inclusive(1, 2), rng.range_inclusive(1, 3));
        let s = grouped_block_attention(&q, &kk, &v, &route_sink(&partition, h, sink, recent)?, true)?;
        worst = worst.max(s.max_abs_diff(&masked_attention(&q, &kk, &v, &sink_band_mask(&partition, sink, recent), true)?)?);
    }
    Ok((20, worst))
}

fn sparsity(_: &mut SeededRng) -> Result<(usize, f64)> {
    let cases = [
        ((8192, 512, 3), Ratio::new(8125, 10000)),
        ((32768, 512, 3), Ratio::new(953125, 1000000)),
        ((1048576, 4096, 12), Ratio::new(953125, 1000000)),
        ((131072, 4096, 12), Ratio::new(625, 1000)),
    ];
    let mut wrong = 0;
    for ((n, b, k), expect) in cases {
        if sparsity_ratio(n, b, k)? != expect {
            wrong += 1;
        }
    }
    Ok((cases.len(), wrong as f64))
}

fn gradients(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut attempts = 0;
    while checked < 4 && attempts < 100 {
        attempts += 1;
        let (n, h, d) = (rng.range_inclusive(4, 12), 1, rng.range_inclusive(2, 4));
        let b = rng.range_inclusive(2, 4);
        let top_k = rng.range_inclusive(1, 2);
        let (q, kk, v) = qkv(rng, n, h, d);
        let partition = BlockPartition::new(n, b)?;
        let routing = if checked % 2 == 0 {
            AttentionRouting::DenseCausal
        } else {
            if !routing_is_stable(&q, &kk, &partition, top_k, eps)? {
                continue;
            }
            AttentionRouting::Routed(Arc::new(route_moba(&q, &kk, &partition, top_k)?))
        };
        let spec = AttentionSpec {
            num_heads: h,
            head_dim: d,
            scale: true,
            routing,
        };
        let inputs = [q.reshape(&[n, h * d])?, kk.reshape(&[n, h * d])?, v.reshape(&[n, h * d])?];
        let loss = |which: usize, x: &Tensor, tape: &mut Tape| -> Result<(crate::autodiff::Var, crate::autodiff::Var)> {
            let vars: Vec<_> = (0..3)
                .map(|i| if i == which { tape.leaf(x.clone()) } else { tape.constant(inputs[i].clone()) })
                .collect();
            let o = tape.attention(vars[0], vars[1], vars[2], spec.clone())?;
            let sq = tape.mul(o, o)?;
            Ok((vars[which], tape.sum(sq)?))
        };
        for which in 0..3 {
            let mut tape = Tape::new();
            let (x, root) = loss(which, &inputs[which], &mut tape)?;
            let analytic = tape.backward(root)?.get(x).expect("leaf gradient").clone();
            let fd = finite_difference_gradient(
                |p| {
                    let mut t = Tape::new();
                    let (_, r) = loss(which, p, &mut t)?;
                    Ok(t.value(r).data()[0])
                },
                &inputs[which],
                eps,
            )?;
            worst = worst.max(relative_error(&analytic, &fd));
        }
        checked += 1;
    }
    if checked < 4 {
        return Err(crate::error::Error::Oracle("too few routing-stable instances".into()));
    }
    Ok((checked, worst))
}

fn power_law(_: &mut SeededRng) -> Result<(usize, f64)> {
    let curves = [(2.625, -0.063), (2.622, -0.063), (1.546, -0.108), (1.464, -0.097)];
    let mut worst = 0.0f64;
    for (a, b) in curves {
        let pts: Vec<(f64, f64)> = [0.1, 0.3, 1.0, 3.0, 10.0].iter().map(|&c| (c, a * f64::powf(c, b))).collect();
        let fit = fit_power_law(&pts)?;
        worst = worst.max((fit.a - a).abs()).max((fit.b - b).abs());
    }
    Ok((curves.len(), worst))
}

fn flops(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (n, h, d) = (rng.range_inclusive(1, 200), rng.range_inclusive(1, 3), rng.range_inclusive(1, 4));
        let b = rng.range_inclusive(1, 32);
        let k = rng.range_inclusive(1, 6);
        let (q, kk, _) = qkv(rng, n, h, d);
        let partition = BlockPartition::new(n, b)?;
        let routing = pipeline_routing(&q, &kk, &partition, k)?;
        let tallied = flop_report_from_routing(&routing, d)?;
        let closed = flop_report(&AttentionConfig::moba(b, k, h, d), n)?;
        worst = worst.max(tallied.moba_flops.abs_diff(closed.moba_flops) as f64);
    }
    Ok((10, worst))
}

fn metrics(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let max_len = rng.range_inclusive(4, 64);
        let tail = rng.range_inclusive(1, max_len);
        let count = rng.range_inclusive(1, 6);
        let mut lengths: Vec<usize> = (0..count).map(|_| rng.range_inclusive(1, max_len)).collect();
        lengths[0] = max_len;
        let losses: Vec<Vec<f64>> = lengths.iter().map(|_| (0..max_len).map(|_| rng.uniform() * 5.0).collect()).collect();
        let trailing = trailing_lm_loss(&losses, &lengths, max_len, tail)?;
        let bucket = bucket_loss(&losses, &lengths, max_len - tail, max_len)?.expect("one full-length sequence");
        worst = worst.max((trailing - bucket.mean_loss).abs());
    }
    Ok((20, worst))
}

fn model(rng: &mut SeededRng) -> Result<(usize, f64)> {
    let mut config = LayerStackConfig::toy(8, 8);
    config.max_context = 64;
    let params = ModelParams::init(&config, rng.below(1 << 30) as u64)?;
    let tokens: Vec<usize> = (0..rng.range_inclusive(16, 64)).map(|_| rng.below(256)).collect();
    let moba = layer_stack_forward(&params, &tokens, &config)?;
    let full = layer_stack_forward(&params, &tokens, &config.clone().all_full())?;
    Ok((1, moba.max_abs_diff(&full)?))
}
