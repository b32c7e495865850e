//! Dense row-major tensors, the handful of activations the rest of the crate
//! needs, a pinned splitmix64 generator, numerical rank, and a
//! central-difference gradient oracle.

use crate::error::{Error, Result};

/// Dense row-major `f64` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting a length mismatch or any non-finite entry.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!("shape {shape:?} needs {expected} values, got {}", data.len())));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} is {}", data[pos])));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Vector of shape `[n]`.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Uniform entries in `[-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
        Self { shape: shape.to_vec(), data }
    }

    /// Normal entries with the given standard deviation.
    pub fn normal(shape: &[usize], std: f64, rng: &mut SplitMix64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| std * rng.standard_normal()).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("transpose needs a matrix, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!("shape mismatch {:?} vs {:?}", self.shape, other.shape)));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Pinned splitmix64 stream. Identical seeds give identical streams everywhere.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

pub type RngState = SplitMix64;

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Current internal state; `SplitMix64::new(rng.state())` continues the stream.
    pub fn state(&self) -> u64 {
        self.state
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        // Lemire's multiply-shift; bias is negligible for the small ranges used here.
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    /// Box-Muller, one sample per call.
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Derives an independent child stream.
    pub fn fork(&mut self) -> Self {
        Self::new(self.next_u64())
    }
}

/// `a[m×k] · b[k×n]`, accumulating left to right along `k`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!("cannot multiply {:?} by {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a.data[i * k + p] * b.data[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    Ok(Tensor { shape: vec![m, n], data: out })
}

/// Matrix-vector product on raw slices: `out = W x` with `W` stored `[rows × cols]`.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        let r = &w[i * cols..(i + 1) * cols];
        *o = r.iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// `out = Wᵀ g` with `W` stored `[rows × cols]`, accumulating into `out`.
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, g: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        let gi = g[i];
        if gi == 0.0 {
            continue;
        }
        let r = &w[i * cols..(i + 1) * cols];
        for (o, a) in out.iter_mut().zip(r) {
            *o += a * gi;
        }
    }
}

/// `G += g xᵀ` with `G` stored `[g.len() × x.len()]`.
pub fn outer_acc(g: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (i, &gi) in g.iter().enumerate() {
        if gi == 0.0 {
            continue;
        }
        let r = &mut out[i * cols..(i + 1) * cols];
        for (o, xv) in r.iter_mut().zip(x) {
            *o += gi * xv;
        }
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

/// d/dx of `x·σ(x)`.
#[inline]
pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s + x * s * (1.0 - s)
}

#[inline]
pub fn half_tanh_scalar(x: f64) -> f64 {
    0.5 * x.tanh()
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

/// `½·tanh(x)`, range `(-0.5, 0.5)`.
///
/// `tanh` rounds to exactly ±1 for |x| beyond roughly 19, so the result is
/// clamped one epsilon inside the interval, which also keeps `1 + y` inside
/// `(0.5, 1.5)` after rounding.
pub fn half_tanh(x: &Tensor) -> Tensor {
    x.map(half_tanh_open)
}

/// `½·tanh(x)` kept strictly inside the open interval.
#[inline]
pub fn half_tanh_open(x: f64) -> f64 {
    const EDGE: f64 = 0.5 - f64::EPSILON;
    half_tanh_scalar(x).clamp(-EDGE, EDGE)
}

/// Row-wise softmax over the last dimension with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let n = *x.shape.last().ok_or_else(|| Error::Dimension("softmax of a scalar".into()))?;
    if n == 0 {
        return Err(Error::Dimension("softmax over an empty row".into()));
    }
    let mut out = x.clone();
    for row in out.data.chunks_mut(n) {
        softmax_in_place(row);
    }
    Ok(out)
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log Σ exp(row)`, computed stably.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Numerical rank by Gaussian elimination with partial pivoting.
///
/// A pivot counts when its magnitude exceeds `rel_tol · max|a|`.
pub fn matrix_rank(a: &Tensor, rel_tol: f64) -> Result<usize> {
    if a.shape.len() != 2 {
        return Err(Error::Dimension(format!("rank needs a matrix, got {:?}", a.shape)));
    }
    if !(rel_tol > 0.0) {
        return Err(Error::Range(format!("rank tolerance must be positive, got {rel_tol}")));
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    if m == 0 || n == 0 {
        return Ok(0);
    }
    let scale = a.max_abs();
    if scale == 0.0 {
        return Ok(0);
    }
    let tol = rel_tol * scale;
    let mut w = a.data.clone();
    let mut rank = 0;
    for col in 0..n {
        if rank == m {
            break;
        }
        let (pivot_row, pivot_abs) =
            (rank..m)
                .map(|r| (r, w[r * n + col].abs()))
                .fold((rank, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if pivot_abs <= tol {
            continue;
        }
        if pivot_row != rank {
            for j in 0..n {
                w.swap(rank * n + j, pivot_row * n + j);
            }
        }
        let pivot = w[rank * n + col];
        for r in rank + 1..m {
            let factor = w[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                w[r * n + j] -= factor * w[rank * n + j];
            }
        }
        rank += 1;
    }
    Ok(rank)
}

/// Central-difference gradient of a scalar function.
///
/// Step per coordinate is `cbrt(eps) · max(1, |x_i|)`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&Tensor) -> f64,
{
    let base_step = f64::EPSILON.cbrt();
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(&x.shape);
    for i in 0..x.len() {
        let xi = x.data[i];
        let h = base_step * xi.abs().max(1.0);
        probe.data[i] = xi + h;
        let up = f(&probe);
        probe.data[i] = xi - h;
        let down = f(&probe);
        probe.data[i] = xi;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::Evaluation(format!("objective is not finite near coordinate {i}")));
        }
        // use the realised step so rounding in xi±h does not bias the quotient
        grad.data[i] = (up - down) / ((xi + h) - (xi - h));
    }
    Ok(grad)
}

/// Largest elementwise relative error, with denominators floored at `floor`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}
