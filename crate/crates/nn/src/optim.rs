use crate::float::Float;
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub trait Optimizer<T: Float> {
    /// Applies one update from the gradients stored in `params`.
    fn step(&mut self, params: &mut ParamStore<T>);
}

/// `p ← p − lr·grad`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl<T: Float> Optimizer<T> for Sgd {
    fn step(&mut self, params: &mut ParamStore<T>) {
        let lr = T::from_f64(self.lr);
        for p in params.iter_mut().filter(|p| p.trainable) {
            for (v, &g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                *v -= lr * g;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params
            .iter()
            .map(|p| Tensor::zeros(p.value.shape().to_vec()))
            .collect();
        Self {
            config,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

impl<T: Float> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamStore<T>) {
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let (one_b1, one_b2) = (T::from_f64(1.0 - c.beta1), T::from_f64(1.0 - c.beta2));
        let step = T::from_f64(c.lr / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if !p.trainable {
                continue;
            }
            let values = p.value.data_mut();
            let grads = p.grad.data();
            for (((x, &g), m), v) in values
                .iter_mut()
                .zip(grads)
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *x -= step * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full([1], value), true);
        s.get_mut(id).grad = Tensor::full([1], grad);
        s
    }

    #[test]
    fn sgd_rule() {
        let mut s = store(1.0, 1.0);
        Sgd { lr: 0.1 }.step(&mut s);
        assert!((s.iter().next().unwrap().value.item() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(1.5, 0.0);
        Sgd { lr: 0.1 }.step(&mut s);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.item(), 1.5);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        for g in [1e-3, 0.5, 40.0, -7.0] {
            let mut s = store(0.0, g);
            let cfg = AdamConfig {
                lr: 0.01,
                ..AdamConfig::default()
            };
            let mut adam = Adam::new(cfg, &s);
            adam.step(&mut s);
            let moved = s.iter().next().unwrap().value.item();
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
            let want = -0.01 * g / (g.abs() + 1e-8);
            assert!((moved - want).abs() < 1e-12, "g={g}: {moved} vs {want}");
            assert!((moved.abs() - 0.01).abs() < 1e-6);
        }
    }
}
