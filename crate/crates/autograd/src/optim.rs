use ndarray::{ArrayD, Zip};

use crate::params::ParamStore;

/// Adaptive-moment optimizer with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's accumulated gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) {
        if self.m.len() != store.len() {
            self.m = store.ids().map(|id| ArrayD::zeros(store.value(id).raw_dim())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let grad = store.grad(id).clone();
            let m = &mut self.m[id.index()];
            let v = &mut self.v[id.index()];
            Zip::from(&mut *m).and(&grad).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
            Zip::from(&mut *v).and(&grad).for_each(|v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            Zip::from(store.value_mut(id))
                .and(&*m)
                .and(&*v)
                .for_each(|p, &m, &v| *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps));
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        // With bias correction, the first update is lr * sign(g) (up to eps).
        let mut store = ParamStore::new();
        let id = store.insert("p", array![1.0, -1.0, 0.5].into_dyn());
        *store.grad_mut(id) = array![2.0, -0.1, 0.0].into_dyn();
        let mut adam = Adam::new(1e-3);
        adam.step(&mut store);
        let p = store.value(id);
        assert!((p[0] - (1.0 - 1e-3)).abs() < 1e-9);
        assert!((p[1] - (-1.0 + 1e-3)).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
        assert!(store.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.insert("x", array![3.0, -2.0].into_dyn());
        let mut adam = Adam::new(0.1);
        for _ in 0..500 {
            let g = store.value(id) * 2.0;
            *store.grad_mut(id) = g;
            adam.step(&mut store);
        }
        assert!(store.value(id).iter().all(|x| x.abs() < 1e-2));
    }
}
