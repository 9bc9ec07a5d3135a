use std::collections::HashMap;

use super::param::{Module, Parameter};
use super::tensor::Tensor;

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    steps: HashMap<String, (u64, Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(lr: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            steps: HashMap::new(),
        }
    }

    /// Updates every parameter selected by `filter` from its accumulated
    /// gradient, then zeroes all gradients of `module`.
    pub fn step<M: Module + ?Sized>(&mut self, module: &mut M, filter: &dyn Fn(&str) -> bool) {
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        let steps = &mut self.steps;
        module.visit_mut(&mut |p: &mut Parameter| {
            if filter(&p.name) {
                let (t, m, v) = steps
                    .entry(p.name.clone())
                    .or_insert_with(|| (0, Tensor::zeros(p.tensor.shape()), Tensor::zeros(p.tensor.shape())));
                *t += 1;
                let bc1 = 1.0 - b1.powi(*t as i32);
                let bc2 = 1.0 - b2.powi(*t as i32);
                let grads = p.grad.data();
                for (((w, g), mi), vi) in p
                    .tensor
                    .data_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                {
                    *mi = b1 * *mi + (1.0 - b1) * g;
                    *vi = b2 * *vi + (1.0 - b2) * g * g;
                    let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                }
            }
            p.zero_grad();
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient() {
        let mut p = Parameter::new("w", Tensor::row(vec![1.0, -1.0]));
        p.grad = Tensor::row(vec![0.5, -2.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        opt.step(&mut p, &|_| true);
        assert!((p.tensor.data()[0] - 0.9).abs() < 1e-7);
        assert!((p.tensor.data()[1] + 0.9).abs() < 1e-7);
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn filtered_parameters_are_untouched() {
        let mut p = Parameter::new("frozen", Tensor::row(vec![1.0]));
        p.grad = Tensor::row(vec![1.0]);
        let mut opt = AdamW::new(0.1, 0.9, 0.999, 0.0);
        opt.step(&mut p, &|n| n != "frozen");
        assert_eq!(p.tensor.data(), &[1.0]);
    }
}
