use crate::error::{Error, Result};
use crate::numcore::{Scalar, Tensor};

/// Decoupled-weight-decay Adam.
///
/// Decay is applied to tensors of rank two or more; norm weights are left
/// alone.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            weight_decay,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::dim("adamw", &[params.len()], &[grads.len()]));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::state("optimizer state was built for a different parameter set"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one, eps) = (T::one(), T::of(self.eps));
        let step_size = T::of(lr / bc1);
        let bc2_sqrt = T::of(bc2.sqrt());
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::dim("adamw", p.shape(), g.shape()));
            }
            let decay = if p.rank() >= 2 { T::of(1.0 - lr * self.weight_decay) } else { one };
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *w = *w * decay - step_size * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm<T: Scalar>(grads: &[Tensor<T>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|x| x.f64() * x.f64())
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let c = T::of(max_norm / norm);
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x = *x * c;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // bias-corrected first step is lr * sign(g) up to eps
        let mut w = Tensor::<f64>::new(&[2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(&[2], vec![0.5, -3.0]).unwrap();
        let mut opt = AdamW::new(0.9, 0.999, 1e-12, 0.1);
        opt.step(vec![&mut w], &[g], 0.01).unwrap();
        assert!((w.data()[0] - 0.99).abs() < 1e-9);
        assert!((w.data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn decay_applies_to_matrices_only() {
        let mut w = Tensor::<f64>::ones(&[2, 2]);
        let g = Tensor::zeros(&[2, 2]);
        let mut opt = AdamW::new(0.9, 0.999, 1e-8, 0.5);
        opt.step(vec![&mut w], &[g], 0.1).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.95).abs() < 1e-12));
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::<f64>::new(&[2], vec![3.0, 4.0]).unwrap()];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let before = g.clone();
        clip_global_norm(&mut g, 2.0);
        assert_eq!(g, before);
    }
}
