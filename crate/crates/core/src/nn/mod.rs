//! Minimal dense-layer toolkit with explicit backward passes.
//!
//! Activations are plain row-major buffers; every layer keeps whatever its
//! backward pass needs in a cache returned by `forward`. Generic over
//! [`Float`] so the same code runs in 32-bit for training and in 64-bit for
//! finite-difference gradient checks.

mod block;
mod layers;
mod optim;

pub use block::{Block, BlockCache};
pub use layers::{gelu, gelu_backward, LayerNorm, LnCache, Linear};
pub use optim::{clip_grad_norm, AdamW};

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use rand::Rng;

pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    const BYTES: usize;
    const DTYPE: &'static str;

    /// # Safety
    /// All strided accesses described by the arguments must be in bounds of
    /// the given pointers, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    fn to_le_bytes(self) -> Vec<u8>;
    fn from_le_slice(b: &[u8]) -> Self;

    /// In-place `exp` over a slice.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|v| *v = v.exp());
    }
}

impl Float for f32 {
    const BYTES: usize = 4;
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self) -> Vec<u8> {
        f32::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }

    fn exp_in_place(xs: &mut [f32]) {
        xs.iter_mut().for_each(|v| *v = fast_exp(*v));
    }
}

/// Branch-free `exp` for f32 (relative error below 3e-7) that the compiler
/// can vectorise, unlike the libm call.
#[inline(always)]
fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // Round to nearest through the float mantissa; `f32::round` is a libm call.
    const SHIFT: f32 = 12_582_912.0; // 1.5 * 2^23
    let k = x * std::f32::consts::LOG2_E + SHIFT;
    let n = k - SHIFT;
    // Two-constant Cody-Waite reduction of x - n ln 2.
    let r = x - n * 0.693_145_75 - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5 + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * 0.001_388_889)))));
    // The low mantissa bits of `k` hold n; rebias them into an exponent.
    let scale = f32::from_bits(k.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127) << 23);
    p * scale
}

impl Float for f64 {
    const BYTES: usize = 8;
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_bytes(self) -> Vec<u8> {
        f64::to_le_bytes(self).to_vec()
    }

    fn from_le_slice(b: &[u8]) -> Self {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        f64::from_le_bytes(a)
    }
}

/// Strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct View<'a, F> {
    data: &'a [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> View<'a, F> {
    /// Contiguous row-major `rows x cols` matrix.
    pub fn new(data: &'a [F], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs }
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

pub struct ViewMut<'a, F> {
    data: &'a mut [F],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, F> ViewMut<'a, F> {
    pub fn new(data: &'a mut [F], rows: usize, cols: usize) -> Self {
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn strided(data: &'a mut [F], offset: usize, rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        Self { data, offset, rows, cols, rs, cs }
    }
}

/// `c = alpha * a @ b + beta * c`.
pub fn gemm<F: Float>(alpha: F, a: View<'_, F>, b: View<'_, F>, beta: F, c: ViewMut<'_, F>) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions differ");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: bounds were checked above; `c` is a unique borrow so it cannot
    // alias the shared borrows behind `a` and `b`.
    unsafe {
        F::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub grad: Vec<F>,
    pub shape: Vec<usize>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

impl<F: Float> Param<F> {
    pub fn new(value: Vec<F>, shape: Vec<usize>, decay: bool) -> Self {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        let grad = vec![F::zero(); value.len()];
        Self { value, grad, shape, decay }
    }

    pub fn zeros(shape: Vec<usize>, decay: bool) -> Self {
        let n = shape.iter().product();
        Self::new(vec![F::zero(); n], shape, decay)
    }

    pub fn filled(shape: Vec<usize>, v: F, decay: bool) -> Self {
        let n = shape.iter().product();
        Self::new(vec![v; n], shape, decay)
    }

    /// Xavier-uniform initialised `fan_in x fan_out` matrix.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = (0..fan_in * fan_out).map(|_| F::of(rng.gen_range(-a..a))).collect();
        Self::new(value, vec![fan_in, fan_out], true)
    }

    pub fn normal(shape: Vec<usize>, std: f64, rng: &mut impl Rng, decay: bool) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| F::of(gaussian(rng) * std)).collect();
        Self::new(value, shape, decay)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = F::zero());
    }
}

/// Box-Muller standard normal sample.
pub fn gaussian(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Anything owning named parameters.
pub trait Module<F: Float> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>);

    fn named_params(&self) -> Vec<(String, &Param<F>)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param<F>)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn zero_grad(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

impl<F: Float, M: Module<F>> Module<F> for Vec<M> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        for (i, m) in self.iter().enumerate() {
            m.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        for (i, m) in self.iter_mut().enumerate() {
            m.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Sum with independent partial accumulators, so it pipelines.
pub fn sum_lanes<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    acc.iter().copied().chain(tail.iter().copied()).fold(F::zero(), |a, b| a + b)
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_row<F: Float>(row: &mut [F]) {
    let mut lanes = [F::neg_infinity(); 8];
    for c in row.chunks(8) {
        for (l, v) in lanes.iter_mut().zip(c) {
            if *v > *l {
                *l = *v;
            }
        }
    }
    let max = lanes.iter().copied().fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    row.iter_mut().for_each(|v| *v -= max);
    F::exp_in_place(row);
    let inv = F::one() / sum_lanes(row);
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect();
        let mut c = vec![1.0; 8];
        gemm(1.0, View::new(&a, 2, 3), View::new(&b, 3, 4), 1.0, ViewMut::new(&mut c, 2, 4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>() + 1.0;
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // Transposed view.
        let mut d = vec![0.0; 9];
        gemm(1.0, View::new(&a, 2, 3).t(), View::new(&a, 2, 3), 0.0, ViewMut::new(&mut d, 3, 3));
        assert_eq!(d[0], a[0] * a[0] + a[3] * a[3]);
    }

    #[test]
    fn fast_exp_is_accurate() {
        let mut xs: Vec<f32> = (-2000..=2000).map(|i| i as f32 * 0.043).collect();
        let want: Vec<f64> = xs.iter().map(|v| (*v as f64).exp()).collect();
        f32::exp_in_place(&mut xs);
        for (a, b) in xs.iter().zip(&want) {
            assert!(((*a as f64 - b) / b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1.0f32, 2.0, 3.0, -50.0];
        softmax_row(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
    }
}
