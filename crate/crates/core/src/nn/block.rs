use rand::Rng;

use super::{gelu, gelu_backward, gemm, join, softmax_row, Float, LayerNorm, LnCache, Linear, Module, Param, View, ViewMut};

/// Pre-norm transformer block: `x + Attn(LN(x))` followed by `x + MLP(LN(x))`.
///
/// Inputs are a batch of sequences packed row-wise; `lens` gives each
/// sequence's length and attention never crosses sequences.
#[derive(Clone, Debug)]
pub struct Block<F> {
    pub ln1: LayerNorm<F>,
    pub qkv: Linear<F>,
    pub proj: Linear<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Clone, Debug, Default)]
pub struct BlockCache<F> {
    lens: Vec<usize>,
    ln1: LnCache<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    /// Attention probabilities, per sequence then per head, `len x len` each.
    pub probs: Vec<F>,
    attn: Vec<F>,
    ln2: LnCache<F>,
    h2: Vec<F>,
    pre_act: Vec<F>,
    act: Vec<F>,
}

impl<F: Float> BlockCache<F> {
    /// Offset into `probs` of sequence `seq`, head `head`.
    pub fn probs_offset(&self, seq: usize, head: usize, heads: usize) -> usize {
        let before: usize = self.lens[..seq].iter().map(|n| heads * n * n).sum();
        before + head * self.lens[seq] * self.lens[seq]
    }
}

impl<F: Float> Block<F> {
    pub fn new(dim: usize, heads: usize, mlp_ratio: usize, rng: &mut impl Rng) -> Self {
        assert!(heads > 0 && dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        let hidden = dim * mlp_ratio;
        Self {
            ln1: LayerNorm::new(dim),
            qkv: Linear::new(dim, 3 * dim, rng),
            proj: Linear::new(dim, dim, rng),
            ln2: LayerNorm::new(dim),
            fc1: Linear::new(dim, hidden, rng),
            fc2: Linear::new(hidden, dim, rng),
            dim,
            heads,
        }
    }

    pub fn forward(&self, x: &[F], lens: &[usize]) -> (Vec<F>, BlockCache<F>) {
        let rows: usize = lens.iter().sum();
        let d = self.dim;
        let hd = d / self.heads;
        let scale = F::one() / F::of(hd as f64).sqrt();

        let (h1, ln1) = self.ln1.forward(x, rows);
        let qkv = self.qkv.forward(&h1, rows);
        let total_probs: usize = lens.iter().map(|n| self.heads * n * n).sum();
        let mut probs = vec![F::zero(); total_probs];
        let mut attn = vec![F::zero(); rows * d];
        let mut row0 = 0;
        let mut p0 = 0;
        for &n in lens {
            for h in 0..self.heads {
                let base = row0 * 3 * d + h * hd;
                let p = &mut probs[p0..p0 + n * n];
                gemm(
                    scale,
                    View::strided(&qkv, base, n, hd, 3 * d, 1),
                    View::strided(&qkv, base + d, hd, n, 1, 3 * d),
                    F::zero(),
                    ViewMut::new(p, n, n),
                );
                for row in p.chunks_exact_mut(n) {
                    softmax_row(row);
                }
                gemm(
                    F::one(),
                    View::new(p, n, n),
                    View::strided(&qkv, base + 2 * d, n, hd, 3 * d, 1),
                    F::zero(),
                    ViewMut::strided(&mut attn, row0 * d + h * hd, n, hd, d, 1),
                );
                p0 += n * n;
            }
            row0 += n;
        }
        let proj = self.proj.forward(&attn, rows);
        let x1: Vec<F> = x.iter().zip(&proj).map(|(a, b)| *a + *b).collect();
        let (h2, ln2) = self.ln2.forward(&x1, rows);
        let pre_act = self.fc1.forward(&h2, rows);
        let act = gelu(&pre_act);
        let mlp = self.fc2.forward(&act, rows);
        let y = x1.iter().zip(&mlp).map(|(a, b)| *a + *b).collect();
        let cache = BlockCache { lens: lens.to_vec(), ln1, h1, qkv, probs, attn, ln2, h2, pre_act, act };
        (y, cache)
    }

    pub fn backward(&mut self, cache: &BlockCache<F>, dy: &[F]) -> Vec<F> {
        let lens = &cache.lens;
        let rows: usize = lens.iter().sum();
        let d = self.dim;
        let hd = d / self.heads;
        let scale = F::one() / F::of(hd as f64).sqrt();

        // MLP branch.
        let d_act = self.fc2.backward(&cache.act, dy, rows);
        let d_pre = gelu_backward(&cache.pre_act, &d_act);
        let d_h2 = self.fc1.backward(&cache.h2, &d_pre, rows);
        let d_ln2 = self.ln2.backward(&cache.ln2, &d_h2, rows);
        let dx1: Vec<F> = dy.iter().zip(&d_ln2).map(|(a, b)| *a + *b).collect();

        // Attention branch.
        let d_attn = self.proj.backward(&cache.attn, &dx1, rows);
        let mut dqkv = vec![F::zero(); rows * 3 * d];
        let max_n = lens.iter().copied().max().unwrap_or(0);
        let mut dp = vec![F::zero(); max_n * max_n];
        let mut row0 = 0;
        let mut p0 = 0;
        for &n in lens {
            for h in 0..self.heads {
                let base = row0 * 3 * d + h * hd;
                let p = &cache.probs[p0..p0 + n * n];
                let dpn = &mut dp[..n * n];
                let d_out = View::strided(&d_attn, row0 * d + h * hd, n, hd, d, 1);
                // dP = dO V^T
                gemm(
                    F::one(),
                    d_out,
                    View::strided(&cache.qkv, base + 2 * d, hd, n, 1, 3 * d),
                    F::zero(),
                    ViewMut::new(dpn, n, n),
                );
                // dV = P^T dO
                gemm(
                    F::one(),
                    View::new(p, n, n).t(),
                    d_out,
                    F::zero(),
                    ViewMut::strided(&mut dqkv, base + 2 * d, n, hd, 3 * d, 1),
                );
                // Softmax backward: dS = P * (dP - rowsum(dP * P)).
                for (prow, drow) in p.chunks_exact(n).zip(dpn.chunks_exact_mut(n)) {
                    let dot: F = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                    for (pv, dv) in prow.iter().zip(drow.iter_mut()) {
                        *dv = *pv * (*dv - dot);
                    }
                }
                // dQ = scale * dS K ; dK = scale * dS^T Q
                gemm(
                    scale,
                    View::new(dpn, n, n),
                    View::strided(&cache.qkv, base + d, n, hd, 3 * d, 1),
                    F::zero(),
                    ViewMut::strided(&mut dqkv, base, n, hd, 3 * d, 1),
                );
                gemm(
                    scale,
                    View::new(dpn, n, n).t(),
                    View::strided(&cache.qkv, base, n, hd, 3 * d, 1),
                    F::zero(),
                    ViewMut::strided(&mut dqkv, base + d, n, hd, 3 * d, 1),
                );
                p0 += n * n;
            }
            row0 += n;
        }
        let d_h1 = self.qkv.backward(&cache.h1, &dqkv, rows);
        let d_ln1 = self.ln1.backward(&cache.ln1, &d_h1, rows);
        dx1.iter().zip(&d_ln1).map(|(a, b)| *a + *b).collect()
    }
}

impl<F: Float> Module<F> for Block<F> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<F>)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<F>)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.qkv.visit_mut(&join(prefix, "qkv"), out);
        self.proj.visit_mut(&join(prefix, "proj"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.fc1.visit_mut(&join(prefix, "fc1"), out);
        self.fc2.visit_mut(&join(prefix, "fc2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut block = Block::<f64>::new(8, 2, 2, &mut rng);
        let lens = [3usize, 2];
        let x: Vec<f64> = (0..5 * 8).map(|i| ((i * 7 % 11) as f64 * 0.31).sin()).collect();
        let w: Vec<f64> = (0..5 * 8).map(|i| ((i * 5 % 13) as f64 * 0.17).cos()).collect();
        let (_, cache) = block.forward(&x, &lens);
        let dx = block.backward(&cache, &w);
        let frozen = block.clone();
        let f = |x: &[f64]| -> f64 { frozen.forward(x, &lens).0.iter().zip(&w).map(|(a, b)| a * b).sum() };
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            assert!((num - dx[i]).abs() < 1e-6 * (1.0 + num.abs()), "i={i} {num} vs {}", dx[i]);
        }
    }

    #[test]
    fn sequences_do_not_interact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let block = Block::<f64>::new(8, 2, 2, &mut rng);
        let a: Vec<f64> = (0..24).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = a.clone();
        for v in &mut b[16..] {
            *v += 1.0;
        }
        let ya = block.forward(&a, &[2, 1]).0;
        let yb = block.forward(&b, &[2, 1]).0;
        assert_eq!(ya[..16], yb[..16]);
    }
}
