use super::{Float, Param};

/// Adam with decoupled weight decay. Moment buffers are matched to
/// parameters by position, so callers must pass parameters in a stable order.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(weight_decay: f64) -> Self {
        Self { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut Param<F>], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
            self.v = params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let (ob1, ob2) = (F::one() - b1, F::one() - b2);
        let step_size = F::of(lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(self.eps);
        let decay = F::of(1.0 - lr * self.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if p.decay && self.weight_decay > 0.0 {
                p.value.iter_mut().for_each(|w| *w *= decay);
            }
            for j in 0..p.value.len() {
                let g = p.grad[j];
                m[j] = b1 * m[j] + ob1 * g;
                v[j] = b2 * v[j] + ob2 * g * g;
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                p.value[j] -= step_size * m[j] / denom;
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<F: Float>(params: &mut [&mut Param<F>], max_norm: f64) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| {
            let g = g.as_f64();
            g * g
        })
        .sum();
    let norm = sq.sqrt();
    if norm.is_finite() && norm > max_norm {
        let s = F::of(max_norm / (norm + 1e-6));
        for p in params.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimises_quadratic() {
        let mut p = Param::<f64>::new(vec![3.0, -2.0], vec![2], false);
        let mut opt = AdamW::new(0.0);
        for _ in 0..2000 {
            p.grad = p.value.iter().map(|v| 2.0 * v).collect();
            opt.step(&mut [&mut p], 0.01);
        }
        assert!(p.value.iter().all(|v| v.abs() < 1e-2), "{:?}", p.value);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut p = Param::<f32>::new(vec![0.0; 2], vec![2], false);
        p.grad = vec![3.0, 4.0];
        let n = clip_grad_norm(&mut [&mut p], 1.0);
        assert!((n - 5.0).abs() < 1e-9);
        let after = (p.grad[0] * p.grad[0] + p.grad[1] * p.grad[1]).sqrt();
        assert!((after - 1.0).abs() < 1e-4);
    }
}
