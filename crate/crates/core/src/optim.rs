//! AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule.

use std::f64::consts::PI;

use ndarray::Array2;

use crate::autodiff::{Gradients, ParamStore};

/// Linear warmup to `peak` over `warmup` steps, then cosine decay to zero at `total`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl CosineSchedule {
    pub fn new(peak: f64, total: usize, warmup_frac: f64) -> Self {
        let warmup = ((total as f64) * warmup_frac).round() as usize;
        Self { peak, warmup: warmup.min(total), total }
    }

    /// Learning rate used for update number `step` (0-based).
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = (self.total - self.warmup).max(1) as f64;
        let progress = ((step - self.warmup) as f64 / span).min(1.0);
        0.5 * self.peak * (1.0 + (PI * progress).cos())
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Array2<f64>> = params.iter().map(|(_, p)| Array2::zeros(p.dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Matrices decay; bias, gain and token rows do not.
    fn decays(p: &Array2<f64>) -> bool {
        p.nrows() > 1 && p.ncols() > 1
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in params.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = params.get_mut(id);
            let wd = if Self::decays(p) { self.weight_decay } else { 0.0 };
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps);
                *p -= lr * (update + wd * *p);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;

    #[test]
    fn schedule_shape() {
        let s = CosineSchedule::new(1.0, 100, 0.05);
        assert_eq!(s.warmup, 5);
        assert!((s.lr(0) - 0.2).abs() < 1e-15);
        assert!((s.lr(4) - 1.0).abs() < 1e-15);
        assert!((s.lr(5) - 1.0).abs() < 1e-15);
        assert!(s.lr(52) < 0.51 && s.lr(52) > 0.49);
        assert!(s.lr(99) < 1e-3);
        let no_warmup = CosineSchedule::new(2.0, 10, 0.0);
        assert_eq!(no_warmup.lr(0), 2.0);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::from_shape_fn((3, 2), |(r, c)| r as f64 - c as f64 * 0.5));
        let before = store.clone();
        let mut opt = AdamW::new(&store, 0.05);
        let mut grads = Gradients::zeros_like(&store);
        grads.grads[w.0] = Some(Array2::ones((3, 2)));
        opt.step(&mut store, &grads, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction the first Adam step is lr * sign(g).
        let mut store = ParamStore::new();
        let b = store.add("b", Array2::zeros((1, 3)));
        let mut opt = AdamW::new(&store, 0.05);
        let mut grads = Gradients::zeros_like(&store);
        grads.grads[b.0] = Some(Array2::from_shape_vec((1, 3), vec![2.0, -0.5, 1e-3]).unwrap());
        opt.step(&mut store, &grads, 0.1);
        let p = store.get(b);
        assert!((p[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((p[[0, 1]] - 0.1).abs() < 1e-6);
        assert!((p[[0, 2]] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn weight_decay_is_decoupled_and_matrix_only() {
        let mut store = ParamStore::new();
        let w = store.add("w", Array2::ones((2, 2)));
        let b = store.add("b", Array2::ones((1, 2)));
        let mut opt = AdamW::new(&store, 0.5);
        let mut grads = Gradients::zeros_like(&store);
        grads.grads[w.0] = Some(Array2::zeros((2, 2)));
        grads.grads[b.0] = Some(Array2::zeros((1, 2)));
        opt.step(&mut store, &grads, 0.1);
        assert!(store.get(w).iter().all(|&v| (v - 0.95).abs() < 1e-12));
        assert!(store.get(b).iter().all(|&v| v == 1.0));
    }
}
