use std::f64::consts::PI;

use crate::tensor::{Real, Tensor};

/// Cosine decay from `base` at step 0 to `floor` at `total`.
pub fn cosine_lr(base: f64, floor: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let p = (step as f64 / total as f64).min(1.0);
    floor + 0.5 * (base - floor) * (1.0 + (PI * p).cos())
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T: Real = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    /// State sized for the given parameter tensors.
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (vec![T::zero(); p.numel()], vec![T::zero(); p.numel()]))
            .unzip();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    /// Applies one update. `grads[i]` of `None` leaves parameter `i` untouched.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = (&'a mut Tensor<T>, Option<&'a Tensor<T>>)>) {
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::lit(lr);
        for (i, (p, g)) in params.into_iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *w = *w - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
