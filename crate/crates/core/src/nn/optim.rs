use std::f64::consts::PI;

use crate::nn::params::ParamStore;
use crate::tensor::{Elem, Tensor};

/// Cosine annealing from `base` at step 0 down to zero at step `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub base: f64,
    pub total: usize,
}

impl CosineSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        let t = (step.min(self.total)) as f64 / self.total.max(1) as f64;
        0.5 * self.base * (1.0 + (PI * t).cos())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    step: usize,
}

impl<T: Elem> Adam<T> {
    pub fn new(params: &ParamStore<T>, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros: Vec<_> = params.ids().map(|id| Tensor::zeros(params.get(id).shape())).collect();
        Adam { beta1, beta2, eps: 1e-8, weight_decay, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let wd = T::lit(self.weight_decay);
        let step_size = T::lit(lr / bc1);
        let inv_bc2_sqrt = T::lit(1.0 / bc2.sqrt());
        let eps = T::lit(self.eps);
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(grads[i].data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let g = gv + wd * *pv;
                *mv = b1 * *mv + ob1 * g;
                *vv = b2 * *vv + ob2 * g * g;
                *pv -= step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }
}

/// Rescales gradients in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Elem>(grads: &mut [Tensor<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| {
            let f = v.f64();
            f * f
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn cosine_endpoints() {
        let s = CosineSchedule { base: 1e-4, total: 100_000 };
        assert_eq!(s.lr(0), 1e-4);
        assert!(s.lr(99_999) <= 1e-7);
        assert!((s.lr(50_000) - 5e-5).abs() < 1e-15);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::full(Shape::new(1, 1, 1, 2), 3.0));
        let mut opt = Adam::new(&store, 0.9, 0.999, 0.0);
        for _ in 0..2000 {
            let g = store.get(id).map(|v| 2.0 * (v - 1.0));
            opt.update(&mut store, &[g], 1e-2);
        }
        assert!(store.get(id).data().iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Tensor::full(Shape::new(1, 1, 1, 4), 1.0f32)];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - 2.0).abs() < 1e-12);
        assert!((g[0].data()[0] - 0.5).abs() < 1e-7);
    }
}
