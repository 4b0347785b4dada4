//! Minimal dense numerics.
//!
//! Tensors are row-major and contiguous with an explicit shape; nothing
//! broadcasts implicitly. Storage is either `f32` or `f64` (see [`Element`]),
//! while every reduction accumulates in `f64`.
//!
//! Random tensors come from [`SeededRng`]: ChaCha8 (`rand_chacha`) seeded
//! through `SeedableRng::seed_from_u64`, uniforms built from the top 53 bits
//! of `next_u64`, and standard normals from the Box–Muller transform applied
//! to consecutive uniform pairs (cosine branch first, then sine branch).

use std::fmt::Debug;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gating::BlockPartition;

/// Storage scalar. All arithmetic in this crate is carried out in `f64`;
/// the element type only decides how results are stored.
pub trait Element: Copy + Default + Debug + PartialEq + Send + Sync + 'static {
    const NAME: &'static str;
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Element for f64 {
    const NAME: &'static str = "f64";
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

impl Element for f32 {
    const NAME: &'static str = "f32";
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E: Element = f64> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    /// Builds a tensor, rejecting a length mismatch or any non-finite value.
    pub fn new(shape: &[usize], data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        if data.iter().any(|x| !x.to_f64().is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![E::default(); shape.iter().product()],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| E::from_f64(x)).collect())
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Result<Self> {
        let len = shape.iter().product();
        Self::new(shape, (0..len).map(|i| E::from_f64(f(i))).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    /// Mutable access to storage. Callers are responsible for keeping values finite.
    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64()).collect()
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Dimension {
                op: "reshape",
                left: self.shape.clone(),
                right: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Dimension {
                op: "dims2",
                left: other.to_vec(),
                right: vec![0, 0],
            }),
        }
    }

    /// `(N, h, d)` of a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape.as_slice() {
            &[n, h, d] => Ok((n, h, d)),
            other => Err(Error::Dimension {
                op: "dims3",
                left: other.to_vec(),
                right: vec![0, 0, 0],
            }),
        }
    }

    pub fn get(&self, index: &[usize]) -> E {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of bounds for axis {i} of extent {ext}");
            flat = flat * ext + ix;
        }
        self.data[flat]
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![E::default(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Extracts head `head` of a `[N, h, d]` tensor as an `[N, d]` matrix.
    pub fn head(&self, head: usize) -> Result<Self> {
        let (n, h, d) = self.dims3()?;
        if head >= h {
            return Err(Error::Parameter(format!("head {head} out of range for {h} heads")));
        }
        let mut out = Vec::with_capacity(n * d);
        for p in 0..n {
            let base = (p * h + head) * d;
            out.extend_from_slice(&self.data[base..base + d]);
        }
        Ok(Self {
            shape: vec![n, d],
            data: out,
        })
    }

    /// Max absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff<F: Element>(&self, other: &Tensor<F>) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op: "max_abs_diff",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }
}

/// Boolean attention mask: `true` marks an allowed (unmasked) entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape {
                shape: vec![rows, cols],
                len: allowed.len(),
            });
        }
        Ok(Self { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                allowed.push(f(r, c));
            }
        }
        Self { rows, cols, allowed }
    }

    /// Converts an additive mask whose entries are `0` or `-inf`.
    pub fn from_additive(rows: usize, cols: usize, values: &[f64]) -> Result<Self> {
        let allowed = values
            .iter()
            .map(|&v| {
                if v == 0.0 {
                    Ok(true)
                } else if v == f64::NEG_INFINITY {
                    Ok(false)
                } else {
                    Err(Error::Parameter(format!(
                        "additive mask entries must be 0 or -inf, got {v}"
                    )))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, allowed)
    }

    /// Lower-triangular mask including the diagonal.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| c <= r)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn allowed(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::Dimension {
                op: "Mask::and",
                left: vec![self.rows, self.cols],
                right: vec![other.rows, other.cols],
            });
        }
        Ok(Mask {
            rows: self.rows,
            cols: self.cols,
            allowed: self
                .allowed
                .iter()
                .zip(&other.allowed)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }
}

/// `c = a · b` for `a: [m, k]`, `b: [k, p]`.
pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let (m, k) = a.dims2()?;
    let (k2, p) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut acc = vec![0.0f64; m * p];
    for i in 0..m {
        let row = &mut acc[i * p..(i + 1) * p];
        for t in 0..k {
            let av = a.data[i * k + t].to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[t * p..(t + 1) * p];
            for (c, bv) in row.iter_mut().zip(brow) {
                *c += av * bv.to_f64();
            }
        }
    }
    finish("matmul", &[m, p], acc)
}

/// Max-subtracted softmax over each row, honoring an optional mask.
///
/// Masked entries come out as exact zeros. A row with no allowed entry is an
/// error rather than a NaN.
pub fn stable_softmax_rows<E: Element>(x: &Tensor<E>, mask: Option<&Mask>) -> Result<Tensor<E>> {
    let (m, n) = x.dims2()?;
    if let Some(mask) = mask {
        if (mask.rows, mask.cols) != (m, n) {
            return Err(Error::Dimension {
                op: "stable_softmax_rows",
                left: vec![m, n],
                right: vec![mask.rows, mask.cols],
            });
        }
    }
    let is_allowed = |r: usize, c: usize| mask.is_none_or(|mk| mk.allowed(r, c));
    let mut out = vec![0.0f64; m * n];
    for r in 0..m {
        let row = &x.data[r * n..(r + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for (c, v) in row.iter().enumerate() {
            if is_allowed(r, c) {
                max = max.max(v.to_f64());
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let dst = &mut out[r * n..(r + 1) * n];
        let mut sum = 0.0;
        for (c, v) in row.iter().enumerate() {
            if is_allowed(r, c) {
                let e = (v.to_f64() - max).exp();
                dst[c] = e;
                sum += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= sum;
        }
    }
    finish("stable_softmax_rows", &[m, n], out)
}

/// Mean of the rows of each block along the first axis.
///
/// Accepts `[N, d]` (returns `[n, d]`) or `[N, h, d]` (returns `[n, h, d]`).
/// A ragged last block is averaged over its true length.
pub fn block_mean_pool<E: Element>(k: &Tensor<E>, partition: &BlockPartition) -> Result<Tensor<E>> {
    let Some((&rows, rest)) = k.shape.split_first() else {
        return Err(Error::EmptyInput("block_mean_pool"));
    };
    if rest.is_empty() {
        return Err(Error::Dimension {
            op: "block_mean_pool",
            left: k.shape.clone(),
            right: vec![partition.context_len(), 0],
        });
    }
    if rows != partition.context_len() {
        return Err(Error::Partition(format!(
            "partition covers {} rows but tensor has {rows}",
            partition.context_len()
        )));
    }
    let width: usize = rest.iter().product();
    let n = partition.num_blocks();
    let mut out = vec![0.0f64; n * width];
    for block in 1..=n {
        let span = partition.span(block);
        if span.is_empty() {
            return Err(Error::Partition(format!("block {block} is empty")));
        }
        let len = span.len() as f64;
        let dst = &mut out[(block - 1) * width..block * width];
        for r in span {
            for (o, v) in dst.iter_mut().zip(&k.data[r * width..(r + 1) * width]) {
                *o += v.to_f64();
            }
        }
        for o in dst.iter_mut() {
            *o /= len;
        }
    }
    let mut shape = vec![n];
    shape.extend_from_slice(rest);
    finish("block_mean_pool", &shape, out)
}

/// Standard-normal tensor, bitwise reproducible for a given `(shape, seed)`.
pub fn seeded_random<E: Element>(shape: &[usize], seed: u64) -> Tensor<E> {
    let mut rng = SeededRng::new(seed);
    rng.normal_tensor(shape)
}

fn finish<E: Element>(op: &'static str, shape: &[usize], values: Vec<f64>) -> Result<Tensor<E>> {
    let data: Vec<E> = values.into_iter().map(E::from_f64).collect();
    if data.iter().any(|v| !v.to_f64().is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

/// Deterministic random source shared by initialization, data sampling and tests.
#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "empty range");
        ((self.uniform() * bound as f64) as usize).min(bound - 1)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * (1.0 - u1).ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    pub fn normal_tensor<E: Element>(&mut self, shape: &[usize]) -> Tensor<E> {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(|_| E::from_f64(self.normal())).collect(),
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::make_partition;
    use proptest::prelude::*;

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i * k + t] * b[t * p + j];
                }
                c[i * p + j] = s;
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_zero() {
        let eye = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(matmul(&eye, &b).unwrap(), b);
        let z = Tensor::<f64>::zeros(&[3, 2]);
        let out = matmul(&z, &b).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert_eq!(out.shape(), &[3, 2]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a: Tensor = seeded_random(&[5, 4], 11);
        let b: Tensor = seeded_random(&[4, 3], 12);
        let expect = naive_matmul(a.data(), b.data(), 5, 4, 3);
        let got = matmul(&a, &b).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_reports_both_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[2, 3]);
        match matmul(&a, &b) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[2.5, 2.5, 2.5]).unwrap();
        let y = stable_softmax_rows(&x, None).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -1.2]).unwrap();
        let b = Tensor::<f64>::from_f64(&[1, 2], &[1000.3, 998.8]).unwrap();
        let ya = stable_softmax_rows(&a, None).unwrap();
        let yb = stable_softmax_rows(&b, None).unwrap();
        assert!(ya.max_abs_diff(&yb).unwrap() <= 1e-12);
    }

    #[test]
    fn softmax_matches_extended_precision_oracle() {
        // Reference probabilities computed with 60-digit arithmetic.
        let cases: &[(&[f64], &[f64])] = &[
            (&[1e4, 0.0], &[1.0, 0.0]),
            (
                &[1e4, 9999.0, 9997.5],
                &[0.689_672_086_124_503_5, 0.253_716_181_635_025_2, 0.056_611_732_240_471_28],
            ),
            (
                &[-700.25, -701.0, -699.5, -703.0],
                &[
                    0.273_725_542_522_617_06,
                    0.129_298_790_918_572_65,
                    0.579_476_978_067_693_7,
                    0.017_498_688_491_116_595,
                ],
            ),
            (&[30.0, -30.0, 0.1], &[0.999_999_999_999_896_6, 8.756_510_762_695_615e-27, 1.034_177_276_747_779_4e-13]),
        ];
        for (logits, expect) in cases {
            let x = Tensor::<f64>::from_f64(&[1, logits.len()], logits).unwrap();
            let y = stable_softmax_rows(&x, None).unwrap();
            for (g, e) in y.data().iter().zip(expect.iter()) {
                assert!((g - e).abs() <= 1e-12, "{logits:?}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn softmax_masked_entries_are_exact_zero() {
        let x = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mask = Mask::from_additive(2, 3, &[0.0, f64::NEG_INFINITY, 0.0, 0.0, 0.0, f64::NEG_INFINITY]).unwrap();
        let y = stable_softmax_rows(&x, Some(&mask)).unwrap();
        assert_eq!(y.get(&[0, 1]), 0.0);
        assert_eq!(y.get(&[1, 2]), 0.0);
        for r in 0..2 {
            let s: f64 = (0..3).map(|c| y.get(&[r, c])).sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn softmax_fully_masked_row_errors() {
        let x = Tensor::<f64>::zeros(&[2, 2]);
        let mask = Mask::new(2, 2, vec![true, true, false, false]).unwrap();
        assert!(matches!(
            stable_softmax_rows(&x, Some(&mask)),
            Err(Error::DegenerateRow { row: 1 })
        ));
    }

    #[test]
    fn additive_mask_rejects_other_values() {
        assert!(Mask::from_additive(1, 2, &[0.0, -1.0]).is_err());
    }

    #[test]
    fn mean_pool_basics() {
        let p = make_partition(2, 2).unwrap();
        let same = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]).unwrap();
        let pooled = block_mean_pool(&same, &p).unwrap();
        assert_eq!(pooled.data(), &[1.0, 2.0, 3.0]);
        let sym = Tensor::<f64>::from_f64(&[2, 3], &[0.0, 0.0, 0.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(block_mean_pool(&sym, &p).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_pool_ragged_matches_direct_sum() {
        let k: Tensor = seeded_random(&[8, 4], 3);
        let p = make_partition(8, 3).unwrap();
        let pooled = block_mean_pool(&k, &p).unwrap();
        assert_eq!(pooled.shape(), &[3, 4]);
        let blocks: [&[usize]; 3] = [&[0, 1, 2], &[3, 4, 5], &[6, 7]];
        for (b, rows) in blocks.iter().enumerate() {
            for c in 0..4 {
                let direct: f64 = rows.iter().map(|&r| k.get(&[r, c])).sum::<f64>() / rows.len() as f64;
                assert!((pooled.get(&[b, c]) - direct).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn mean_pool_three_dims() {
        let k: Tensor = seeded_random(&[6, 2, 3], 9);
        let p = make_partition(6, 4).unwrap();
        let pooled = block_mean_pool(&k, &p).unwrap();
        assert_eq!(pooled.shape(), &[2, 2, 3]);
        let direct = (k.get(&[4, 1, 2]) + k.get(&[5, 1, 2])) / 2.0;
        assert!((pooled.get(&[1, 1, 2]) - direct).abs() <= 1e-12);
    }

    #[test]
    fn mean_pool_rejects_wrong_coverage() {
        let k: Tensor = seeded_random(&[7, 2], 1);
        let p = make_partition(8, 4).unwrap();
        assert!(matches!(block_mean_pool(&k, &p), Err(Error::Partition(_))));
    }

    #[test]
    fn seeded_random_is_deterministic() {
        let a: Tensor = seeded_random(&[4, 5], 42);
        let b: Tensor = seeded_random(&[4, 5], 42);
        let c: Tensor = seeded_random(&[4, 5], 43);
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn seeded_random_moments() {
        let t: Tensor = seeded_random(&[10_000], 0);
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.05, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 0.05, "std {}", var.sqrt());
    }

    #[test]
    fn f32_storage_tracks_f64() {
        let a: Tensor = seeded_random(&[6, 5], 5);
        let b: Tensor = seeded_random(&[5, 4], 6);
        let wide = matmul(&a, &b).unwrap();
        let narrow = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        assert!(wide.max_abs_diff(&narrow).unwrap() < 1e-5);
    }

    proptest! {
        #[test]
        fn matmul_agrees_with_oracle(m in 1usize..=32, k in 1usize..=32, p in 1usize..=32, seed in any::<u64>()) {
            let a: Tensor = seeded_random(&[m, k], seed);
            let b: Tensor = seeded_random(&[k, p], seed.wrapping_add(1));
            let expect = naive_matmul(a.data(), b.data(), m, k, p);
            let got = matmul(&a, &b).unwrap();
            for (g, e) in got.data().iter().zip(&expect) {
                prop_assert!((g - e).abs() <= 1e-10);
            }
        }

        #[test]
        fn softmax_shift_invariance(seed in any::<u64>(), shift in -500.0f64..500.0, n in 1usize..12) {
            let x: Tensor = seeded_random(&[3, n], seed);
            let shifted = Tensor::<f64>::from_fn(&[3, n], |i| x.data()[i] + shift).unwrap();
            let a = stable_softmax_rows(&x, None).unwrap();
            let b = stable_softmax_rows(&shifted, None).unwrap();
            prop_assert!(a.max_abs_diff(&b).unwrap() <= 1e-12);
            for r in 0..3 {
                let argmax = |t: &Tensor| (0..n).max_by(|&i, &j| t.get(&[r, i]).total_cmp(&t.get(&[r, j]))).unwrap();
                prop_assert_eq!(argmax(&a), argmax(&b));
                let s: f64 = (0..n).map(|c| a.get(&[r, c])).sum();
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn pooled_blocks_center_to_zero(seed in any::<u64>(), n in 1usize..40, b in 1usize..9) {
            let k: Tensor = seeded_random(&[n, 3], seed);
            let part = make_partition(n, b).unwrap();
            let pooled = block_mean_pool(&k, &part).unwrap();
            for block in 1..=part.num_blocks() {
                for c in 0..3 {
                    let centered: f64 = part.span(block).map(|r| k.get(&[r, c]) - pooled.get(&[block - 1, c])).sum();
                    prop_assert!(centered.abs() <= 1e-12);
                }
            }
        }
    }
}
