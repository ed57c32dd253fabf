use std::collections::HashMap;

use crate::param::Param;
use crate::tensor::Gradients;

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<u64, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: HashMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &[&Param], grads: &Gradients) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for p in params {
            let Some(g) = p.grad(grads) else { continue };
            let (m, v) = self.moments.entry(p.id()).or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
            p.update(|w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mh = m[i] / bc1;
                    let vh = v[i] / bc2;
                    w[i] -= lr * mh / (vh.sqrt() + eps);
                }
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    #[test]
    fn first_step_moves_by_lr() {
        let p = Param::new(vec![1.0, -2.0], &[2]);
        let mut opt = Adam::new(0.1);
        let loss = p.tensor().sqr().sum_all();
        opt.step(&[&p], &loss.backward());
        let w = p.to_vec();
        assert!((w[0] - 0.9).abs() < 1e-9);
        assert!((w[1] + 1.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let p = Param::new(vec![3.0, -1.0, 0.5], &[3]);
        let target = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[3]);
        let mut opt = Adam::new(0.05);
        for _ in 0..2000 {
            let loss = crate::ops::mse(&p.tensor(), &target);
            opt.step(&[&p], &loss.backward());
        }
        for (a, b) in p.to_vec().iter().zip([1.0, 2.0, 3.0]) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }
}
