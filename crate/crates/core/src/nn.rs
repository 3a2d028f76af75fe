//! Minimal dense/convolution kernels with hand-written backward passes.
//!
//! Activations are stored channel-major: a `(channels, len)` activation is a
//! flat slice where row `c` occupies `c * len..(c + 1) * len`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst};
use rand::Rng;

use crate::error::{Error, Result};

/// Floating-point element type of network tensors.
///
/// Training runs in `f32`; gradient checks instantiate the same code in `f64`.
pub trait Real:
    Float
    + FloatConst
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + GemmKernel
    + 'static
{
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); shape.iter().product()],
        }
    }

    /// Uniform in `(-1/√fan_in, 1/√fan_in)`.
    pub fn uniform_fan_in<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n)
                .map(|_| F::of(rng.random_range(-bound..bound)))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// A fixed collection of named parameter tensors.
///
/// The same type doubles as its own gradient container.
pub trait ParamSet<F: Real>: Clone {
    fn named(&self) -> Vec<(String, &Tensor<F>)>;
    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<F>)>;

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    fn add_assign(&mut self, other: &Self) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += *y);
        }
    }

    fn scale(&mut self, k: F) {
        for (_, t) in self.named_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
    }

    /// Errors with the first tensor holding a non-finite element.
    fn check_finite(&self, what: &str) -> Result<()> {
        for (name, t) in self.named() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{what} tensor `{name}`")));
            }
        }
        Ok(())
    }

    /// FNV-1a over the bit patterns of every element, in tensor order.
    fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (name, t) in self.named() {
            for b in name.bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
            for v in &t.data {
                h = (h ^ v.as_f64().to_bits()).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

pub fn axpy<F: Real>(a: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed summation order of eight interleaved partial sums.
pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

pub fn sum<F: Real>(a: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &x in rest {
        s += x;
    }
    s
}

/// Valid output range `lo..hi` for a tap at offset `shift` on a row of `len`.
fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift.max(0)).max(lo as isize) as usize;
    (lo, hi)
}

/// Row-major `c = alpha * a @ b + beta * c` with `a: (m, k)`, `b: (k, n)`.
/// Transposes are expressed through the strides.
pub struct Gemm<'a, F> {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub a: (&'a [F], isize, isize),
    pub b: (&'a [F], isize, isize),
    pub beta: F,
}

fn gemm_bounds(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(
            rs >= 0 && cs >= 0 && (last as usize) < len,
            "gemm operand out of bounds"
        );
    }
}

impl<F: Real> Gemm<'_, F> {
    pub fn run(&self, c: &mut [F]) {
        let Gemm { m, k, n, a, b, .. } = *self;
        gemm_bounds(a.0.len(), m, k, a.1, a.2);
        gemm_bounds(b.0.len(), k, n, b.1, b.2);
        assert!(c.len() >= m * n);
        F::gemm(self, c);
    }
}

/// Dense matrix product, dispatched to `matrixmultiply` per element type.
pub trait GemmKernel: Sized {
    fn gemm(g: &Gemm<'_, Self>, c: &mut [Self]);
}

macro_rules! gemm_impl {
    ($t:ty, $f:path) => {
        impl GemmKernel for $t {
            fn gemm(g: &Gemm<'_, $t>, c: &mut [$t]) {
                // SAFETY: operand extents are checked in `Gemm::run`.
                unsafe {
                    $f(
                        g.m,
                        g.k,
                        g.n,
                        1.0,
                        g.a.0.as_ptr(),
                        g.a.1,
                        g.a.2,
                        g.b.0.as_ptr(),
                        g.b.1,
                        g.b.2,
                        g.beta,
                        c.as_mut_ptr(),
                        g.n as isize,
                        1,
                    )
                }
            }
        }
    };
}
gemm_impl!(f32, matrixmultiply::sgemm);
gemm_impl!(f64, matrixmultiply::dgemm);

/// Lays out the `k` shifted copies of each input row as a `(cin * k, len)`
/// matrix, zero outside the signal.
fn im2col<F: Real>(input: &[F], cin: usize, len: usize, k: usize, dilation: usize) -> Vec<F> {
    let half = (k / 2) as isize;
    let mut col = vec![F::zero(); cin * k * len];
    for c in 0..cin {
        let x = &input[c * len..(c + 1) * len];
        for j in 0..k {
            let shift = (j as isize - half) * dilation as isize;
            let (lo, hi) = tap_range(shift, len);
            if lo < hi {
                let row = &mut col[(c * k + j) * len..(c * k + j + 1) * len];
                row[lo..hi].copy_from_slice(
                    &x[(lo as isize + shift) as usize..(hi as isize + shift) as usize],
                );
            }
        }
    }
    col
}

/// Zero-padded "same" 1-D convolution; `weight` has shape `(cout, cin, k)`.
pub fn conv1d<F: Real>(
    input: &[F],
    len: usize,
    weight: &Tensor<F>,
    bias: &[F],
    dilation: usize,
    out: &mut [F],
) {
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    debug_assert_eq!(input.len(), cin * len);
    debug_assert_eq!(out.len(), cout * len);
    for o in 0..cout {
        out[o * len..(o + 1) * len]
            .iter_mut()
            .for_each(|v| *v = bias[o]);
    }
    let col;
    let rhs = if k == 1 {
        input
    } else {
        col = im2col(input, cin, len, k, dilation);
        &col
    };
    let ck = cin * k;
    Gemm {
        m: cout,
        k: ck,
        n: len,
        a: (&weight.data, ck as isize, 1),
        b: (rhs, len as isize, 1),
        beta: F::one(),
    }
    .run(out);
}

/// Accumulates gradients of [`conv1d`] into `grad_w`, `grad_b` and, when
/// given, `grad_in`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<F: Real>(
    input: &[F],
    len: usize,
    weight: &Tensor<F>,
    dilation: usize,
    grad_out: &[F],
    grad_w: &mut Tensor<F>,
    grad_b: &mut [F],
    grad_in: Option<&mut [F]>,
) {
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    let ck = cin * k;
    for o in 0..cout {
        grad_b[o] += sum(&grad_out[o * len..(o + 1) * len]);
    }
    let col;
    let rhs = if k == 1 {
        input
    } else {
        col = im2col(input, cin, len, k, dilation);
        &col
    };
    // grad_w += grad_out @ col^T
    Gemm {
        m: cout,
        k: len,
        n: ck,
        a: (grad_out, len as isize, 1),
        b: (rhs, 1, len as isize),
        beta: F::one(),
    }
    .run(&mut grad_w.data);
    let Some(gi) = grad_in else { return };
    let wt = Gemm {
        m: ck,
        k: cout,
        n: len,
        a: (&weight.data, 1, ck as isize),
        b: (grad_out, len as isize, 1),
        beta: F::one(),
    };
    if k == 1 {
        wt.run(gi);
        return;
    }
    let mut gcol = vec![F::zero(); ck * len];
    Gemm {
        beta: F::zero(),
        ..wt
    }
    .run(&mut gcol);
    let half = (k / 2) as isize;
    for c in 0..cin {
        for j in 0..k {
            let shift = (j as isize - half) * dilation as isize;
            let (lo, hi) = tap_range(shift, len);
            if lo < hi {
                let src = &gcol[(c * k + j) * len + lo..(c * k + j) * len + hi];
                let dst = &mut gi[c * len + (lo as isize + shift) as usize
                    ..c * len + (hi as isize + shift) as usize];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
    }
}

/// Output length of a strided convolution with symmetric zero padding.
pub fn strided_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Strided 1-D convolution; `weight` has shape `(cout, cin, k)`.
pub fn conv1d_strided<F: Real>(
    input: &[F],
    len: usize,
    weight: &Tensor<F>,
    bias: &[F],
    stride: usize,
    pad: usize,
) -> (Vec<F>, usize) {
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    let out_len = strided_len(len, k, stride, pad);
    let mut out = vec![F::zero(); cout * out_len];
    for o in 0..cout {
        for m in 0..out_len {
            let mut acc = bias[o];
            let start = (m * stride) as isize - pad as isize;
            for c in 0..cin {
                let x = &input[c * len..(c + 1) * len];
                let w = &weight.data[(o * cin + c) * k..(o * cin + c + 1) * k];
                for (j, &wj) in w.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < len {
                        acc += wj * x[idx as usize];
                    }
                }
            }
            out[o * out_len + m] = acc;
        }
    }
    (out, out_len)
}

#[allow(clippy::too_many_arguments)]
pub fn conv1d_strided_backward<F: Real>(
    input: &[F],
    len: usize,
    weight: &Tensor<F>,
    stride: usize,
    pad: usize,
    grad_out: &[F],
    mut grad_params: Option<(&mut Tensor<F>, &mut [F])>,
    mut grad_in: Option<&mut [F]>,
) {
    let (cout, cin, k) = (weight.shape[0], weight.shape[1], weight.shape[2]);
    let out_len = strided_len(len, k, stride, pad);
    for o in 0..cout {
        for m in 0..out_len {
            let g = grad_out[o * out_len + m];
            if g == F::zero() {
                continue;
            }
            let start = (m * stride) as isize - pad as isize;
            if let Some((_, gb)) = grad_params.as_mut() {
                gb[o] += g;
            }
            for c in 0..cin {
                let base = (o * cin + c) * k;
                for j in 0..k {
                    let idx = start + j as isize;
                    if idx < 0 || idx as usize >= len {
                        continue;
                    }
                    let idx = idx as usize;
                    if let Some((gw, _)) = grad_params.as_mut() {
                        gw.data[base + j] += g * input[c * len + idx];
                    }
                    if let Some(gi) = grad_in.as_deref_mut() {
                        gi[c * len + idx] += g * weight.data[base + j];
                    }
                }
            }
        }
    }
}

/// `y = W x + b` with `W` of shape `(out, in)`; `bias` may be absent.
pub fn dense<F: Real>(weight: &Tensor<F>, bias: Option<&Tensor<F>>, x: &[F]) -> Vec<F> {
    let (rows, cols) = (weight.shape[0], weight.shape[1]);
    (0..rows)
        .map(|r| {
            let b = bias.map_or(F::zero(), |b| b.data[r]);
            b + dot(&weight.data[r * cols..(r + 1) * cols], x)
        })
        .collect()
}

/// Accumulates `dW += g xᵀ`, `db += g` and returns `Wᵀ g`.
pub fn dense_backward<F: Real>(
    weight: &Tensor<F>,
    x: &[F],
    grad_out: &[F],
    grad_w: &mut Tensor<F>,
    grad_b: Option<&mut Tensor<F>>,
) -> Vec<F> {
    let (rows, cols) = (weight.shape[0], weight.shape[1]);
    let mut grad_in = vec![F::zero(); cols];
    for r in 0..rows {
        let g = grad_out[r];
        axpy(g, x, &mut grad_w.data[r * cols..(r + 1) * cols]);
        axpy(g, &weight.data[r * cols..(r + 1) * cols], &mut grad_in);
    }
    if let Some(gb) = grad_b {
        gb.data.iter_mut().zip(grad_out).for_each(|(b, g)| *b += *g);
    }
    grad_in
}

pub fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

pub fn relu_in_place<F: Real>(x: &mut [F]) {
    x.iter_mut().for_each(|v| *v = v.max(F::zero()));
}

/// Zeroes gradient entries whose forward activation was clipped by ReLU.
pub fn relu_backward_in_place<F: Real>(activated: &[F], grad: &mut [F]) {
    grad.iter_mut().zip(activated).for_each(|(g, &a)| {
        if a <= F::zero() {
            *g = F::zero();
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn naive_conv(input: &[f64], len: usize, w: &Tensor<f64>, b: &[f64], dil: usize) -> Vec<f64> {
        let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
        let mut out = vec![0.0; cout * len];
        for o in 0..cout {
            for n in 0..len {
                let mut acc = b[o];
                for c in 0..cin {
                    for j in 0..k {
                        let idx = n as isize + (j as isize - (k / 2) as isize) * dil as isize;
                        if idx >= 0 && (idx as usize) < len {
                            acc += w.data[(o * cin + c) * k + j] * input[c * len + idx as usize];
                        }
                    }
                }
                out[o * len + n] = acc;
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for dil in [1, 2, 8, 40] {
            let len = 33;
            let input = random(3 * len, &mut rng);
            let w = Tensor {
                shape: vec![4, 3, 3],
                data: random(36, &mut rng),
            };
            let b = random(4, &mut rng);
            let mut out = vec![0.0; 4 * len];
            conv1d(&input, len, &w, &b, dil, &mut out);
            let expected = naive_conv(&input, len, &w, &b, dil);
            for (a, e) in out.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let len = 17;
        let input = random(2 * len, &mut rng);
        let mut w = Tensor {
            shape: vec![3, 2, 3],
            data: random(18, &mut rng),
        };
        let b = random(3, &mut rng);
        let g = random(3 * len, &mut rng);
        let loss = |w: &Tensor<f64>, x: &[f64]| {
            let mut out = vec![0.0; 3 * len];
            conv1d(x, len, w, &b, 2, &mut out);
            dot(&out, &g)
        };
        let mut gw = Tensor::zeros(&[3, 2, 3]);
        let mut gb = vec![0.0; 3];
        let mut gi = vec![0.0; 2 * len];
        conv1d_backward(&input, len, &w, 2, &g, &mut gw, &mut gb, Some(&mut gi));
        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w.data[i];
            w.data[i] = orig + h;
            let up = loss(&w, &input);
            w.data[i] = orig - h;
            let down = loss(&w, &input);
            w.data[i] = orig;
            assert!(((up - down) / (2.0 * h) - gw.data[i]).abs() < 1e-7);
        }
        let mut x = input.clone();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = loss(&w, &x);
            x[i] = orig - h;
            let down = loss(&w, &x);
            x[i] = orig;
            assert!(((up - down) / (2.0 * h) - gi[i]).abs() < 1e-7);
        }
        assert!((gb[1] - g[len..2 * len].iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn strided_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let len = 29;
        let input = random(2 * len, &mut rng);
        let mut w = Tensor {
            shape: vec![3, 2, 7],
            data: random(42, &mut rng),
        };
        let b = random(3, &mut rng);
        let out_len = strided_len(len, 7, 4, 3);
        assert_eq!(out_len, 8);
        let g = random(3 * out_len, &mut rng);
        let loss = |w: &Tensor<f64>, x: &[f64]| dot(&conv1d_strided(x, len, w, &b, 4, 3).0, &g);
        let mut gw = Tensor::zeros(&[3, 2, 7]);
        let mut gb = vec![0.0; 3];
        let mut gi = vec![0.0; 2 * len];
        conv1d_strided_backward(
            &input,
            len,
            &w,
            4,
            3,
            &g,
            Some((&mut gw, &mut gb)),
            Some(&mut gi),
        );
        let h = 1e-6;
        for i in 0..w.len() {
            let orig = w.data[i];
            w.data[i] = orig + h;
            let up = loss(&w, &input);
            w.data[i] = orig - h;
            let down = loss(&w, &input);
            w.data[i] = orig;
            assert!(((up - down) / (2.0 * h) - gw.data[i]).abs() < 1e-7);
        }
        let mut x = input.clone();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = loss(&w, &x);
            x[i] = orig - h;
            let down = loss(&w, &x);
            x[i] = orig;
            assert!(((up - down) / (2.0 * h) - gi[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn dot_and_sum_match_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random(37, &mut rng);
        let b = random(37, &mut rng);
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
        assert!((sum(&a) - a.iter().sum::<f64>()).abs() < 1e-12);
    }
}
