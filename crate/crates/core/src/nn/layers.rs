use rand::Rng;

use super::{gemm, join, Float, Module, Param, View, ViewMut};

/// `y = x W + b` with `W` stored `in x out`.
#[derive(Clone, Debug)]
pub struct Linear<F> {
    pub weight: Param<F>,
    pub bias: Param<F>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl<F: Float> Linear<F> {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::xavier(in_dim, out_dim, rng),
            bias: Param::zeros(vec![out_dim], false),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> Vec<F> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for _ in 0..rows {
            y.extend_from_slice(&self.bias.value);
        }
        gemm(
            F::one(),
            View::new(x, rows, self.in_dim),
            View::new(&self.weight.value, self.in_dim, self.out_dim),
            F::one(),
            ViewMut::new(&mut y, rows, self.out_dim),
        );
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&mut self, x: &[F], dy: &[F], rows: usize) -> Vec<F> {
        self.accumulate(x, dy, rows);
        let mut dx = vec![F::zero(); rows * self.in_dim];
        gemm(
            F::one(),
            View::new(dy, rows, self.out_dim),
            View::new(&self.weight.value, self.in_dim, self.out_dim).t(),
            F::zero(),
            ViewMut::new(&mut dx, rows, self.in_dim),
        );
        dx
    }

    /// Parameter gradients only, for layers whose input needs no gradient.
    pub fn accumulate(&mut self, x: &[F], dy: &[F], rows: usize) {
        gemm(
            F::one(),
            View::new(x, rows, self.in_dim).t(),
            View::new(dy, rows, self.out_dim),
            F::one(),
            ViewMut::new(&mut self.weight.grad, self.in_dim, self.out_dim),
        );
        for row in dy.chunks_exact(self.out_dim) {
            for (g, d) in self.bias.grad.iter_mut().zip(row) {
                *g += *d;
            }
        }
    }
}

impl<F: Float> Module<F> for Linear<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        out.push((join(prefix, "bias"), &mut self.bias));
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub dim: usize,
    pub eps: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LnCache<F> {
    xhat: Vec<F>,
    inv_std: Vec<F>,
}

impl<F: Float> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::filled(vec![dim], F::one(), false),
            beta: Param::zeros(vec![dim], false),
            dim,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &[F], rows: usize) -> (Vec<F>, LnCache<F>) {
        let d = self.dim;
        let inv_d = F::one() / F::of(d as f64);
        let eps = F::of(self.eps);
        let mut y = vec![F::zero(); rows * d];
        let mut xhat = vec![F::zero(); rows * d];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = &x[r * d..(r + 1) * d];
            let mean = xr.iter().copied().sum::<F>() * inv_d;
            let var = xr.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            inv_std.push(is);
            let xh = &mut xhat[r * d..(r + 1) * d];
            let yr = &mut y[r * d..(r + 1) * d];
            for i in 0..d {
                xh[i] = (xr[i] - mean) * is;
                yr[i] = xh[i] * self.gamma.value[i] + self.beta.value[i];
            }
        }
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &LnCache<F>, dy: &[F], rows: usize) -> Vec<F> {
        let d = self.dim;
        let inv_d = F::one() / F::of(d as f64);
        let mut dx = vec![F::zero(); rows * d];
        let mut dxhat = vec![F::zero(); d];
        for r in 0..rows {
            let dyr = &dy[r * d..(r + 1) * d];
            let xh = &cache.xhat[r * d..(r + 1) * d];
            let mut mean_dxh = F::zero();
            let mut mean_dxh_xh = F::zero();
            for i in 0..d {
                self.gamma.grad[i] += dyr[i] * xh[i];
                self.beta.grad[i] += dyr[i];
                dxhat[i] = dyr[i] * self.gamma.value[i];
                mean_dxh += dxhat[i];
                mean_dxh_xh += dxhat[i] * xh[i];
            }
            mean_dxh *= inv_d;
            mean_dxh_xh *= inv_d;
            let is = cache.inv_std[r];
            let dxr = &mut dx[r * d..(r + 1) * d];
            for i in 0..d {
                dxr[i] = is * (dxhat[i] - mean_dxh - xh[i] * mean_dxh_xh);
            }
        }
        dx
    }
}

impl<F: Float> Module<F> for LayerNorm<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        out.push((join(prefix, "gamma"), &mut self.gamma));
        out.push((join(prefix, "beta"), &mut self.beta));
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// `tanh(c (v + a v^3))` for every element, via `tanh(u) = 1 - 2 / (e^{2u} + 1)`.
fn gelu_tanh<F: Float>(x: &[F]) -> Vec<F> {
    let c2 = F::of(2.0 * GELU_C);
    let a = F::of(GELU_A);
    let mut t: Vec<F> = x.iter().map(|&v| (c2 * (v + a * v * v * v)).min(F::of(80.0))).collect();
    F::exp_in_place(&mut t);
    let two = F::of(2.0);
    t.iter_mut().for_each(|e| *e = F::one() - two / (*e + F::one()));
    t
}

/// Tanh-approximated GELU.
pub fn gelu<F: Float>(x: &[F]) -> Vec<F> {
    let half = F::of(0.5);
    let mut t = gelu_tanh(x);
    for (t, &v) in t.iter_mut().zip(x) {
        *t = half * v * (F::one() + *t);
    }
    t
}

pub fn gelu_backward<F: Float>(x: &[F], dy: &[F]) -> Vec<F> {
    let c = F::of(GELU_C);
    let a3 = F::of(3.0 * GELU_A);
    let half = F::of(0.5);
    let mut t = gelu_tanh(x);
    for ((t, &v), &d) in t.iter_mut().zip(x).zip(dy) {
        let dt = (F::one() - *t * *t) * c * (F::one() + a3 * v * v);
        *t = d * half * (F::one() + *t + v * dt);
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - grad[i]).abs() < 1e-6 * (1.0 + num.abs()), "i={i} num={num} ana={}", grad[i]);
        }
    }

    #[test]
    fn linear_input_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut lin = Linear::<f64>::new(3, 4, &mut rng);
        let x: Vec<f64> = (0..6).map(|i| (i as f64 * 0.37).sin()).collect();
        let w: Vec<f64> = (0..8).map(|i| (i as f64 * 0.11).cos()).collect();
        let loss = |lin: &Linear<f64>, x: &[f64]| -> f64 { lin.forward(x, 2).iter().zip(&w).map(|(a, b)| a * b).sum() };
        let dx = lin.backward(&x, &w, 2);
        let l2 = lin.clone();
        fd_check(|x| loss(&l2, x), &x, &dx);
    }

    #[test]
    fn layernorm_input_gradient() {
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma.value = vec![1.0, 0.5, -0.3, 2.0, 0.9];
        let x: Vec<f64> = (0..10).map(|i| (i as f64 * 0.73).sin() * 2.0).collect();
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.29).cos()).collect();
        let (_, cache) = ln.forward(&x, 2);
        let dx = ln.backward(&cache, &w, 2);
        let l2 = ln.clone();
        fd_check(|x| l2.forward(x, 2).0.iter().zip(&w).map(|(a, b)| a * b).sum(), &x, &dx);
    }

    #[test]
    fn gelu_gradient() {
        let x: Vec<f64> = (0..9).map(|i| i as f64 * 0.6 - 2.4).collect();
        let ones = vec![1.0; 9];
        let dx = gelu_backward(&x, &ones);
        fd_check(|x| gelu(x).iter().sum(), &x, &dx);
    }
}
