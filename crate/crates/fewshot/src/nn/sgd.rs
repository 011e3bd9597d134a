//! SGD with momentum, weight decay and cosine learning-rate decay.

use ndarray::ArrayD;

use super::params::ParamStore;

pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<ArrayD<f64>>,
}

impl Sgd {
    pub fn new(params: &ParamStore<f64>, momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params
                .tensors()
                .iter()
                .map(|t| ArrayD::zeros(t.raw_dim()))
                .collect(),
        }
    }

    /// `v = mu v + (g + wd p); p -= lr v`
    pub fn step(&mut self, params: &mut ParamStore<f64>, grads: &ParamStore<f64>, lr: f64) {
        for ((p, g), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads.tensors())
            .zip(self.velocity.iter_mut())
        {
            ndarray::Zip::from(p)
                .and(g)
                .and(v)
                .for_each(|p, &g, v| {
                    *v = self.momentum * *v + g + self.weight_decay * *p;
                    *p -= lr * *v;
                });
        }
    }
}

/// Cosine decay from `base_lr` at epoch 0 toward 0 at `total_epochs`.
pub fn cosine_lr(base_lr: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs <= 1 {
        return base_lr;
    }
    let t = epoch as f64 / total_epochs as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::{Init, ParamBuilder, ParamGroup};
    use crate::rng::stream;

    #[test]
    fn plain_step_is_gradient_descent() {
        let mut rng = stream(0, "sgd");
        let mut b = ParamBuilder::new();
        let id = b.add("w", ParamGroup::Theta, &[2], Init::Zeros, &mut rng);
        let mut ps = b.finish();
        ps.get_mut(id).as_slice_mut().unwrap().copy_from_slice(&[1.0, -2.0]);
        let mut grads = ps.zeros_like();
        grads.get_mut(id).as_slice_mut().unwrap().copy_from_slice(&[0.5, 0.5]);
        let mut opt = Sgd::new(&ps, 0.0, 0.0);
        opt.step(&mut ps, &grads, 0.1);
        let w = ps.get(id).as_slice().unwrap();
        assert!((w[0] - 0.95).abs() < 1e-12);
        assert!((w[1] + 2.05).abs() < 1e-12);
    }

    #[test]
    fn momentum_accumulates() {
        let mut rng = stream(0, "sgd");
        let mut b = ParamBuilder::new();
        let id = b.add("w", ParamGroup::Theta, &[1], Init::Zeros, &mut rng);
        let mut ps = b.finish();
        let mut grads = ps.zeros_like();
        grads.get_mut(id)[[0]] = 1.0;
        let mut opt = Sgd::new(&ps, 0.9, 0.0);
        opt.step(&mut ps, &grads, 1.0); // v=1, p=-1
        opt.step(&mut ps, &grads, 1.0); // v=1.9, p=-2.9
        assert!((ps.get(id)[[0]] + 2.9).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert!((cosine_lr(0.1, 0, 10) - 0.1).abs() < 1e-15);
        assert!(cosine_lr(0.1, 9, 10) < 0.01);
        assert!(cosine_lr(0.1, 5, 10) - 0.05 < 1e-12);
    }
}
