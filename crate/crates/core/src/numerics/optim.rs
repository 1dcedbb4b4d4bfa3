use super::param::ParamStore;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay. Moment buffers are created the first
/// time a parameter is stepped.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            moments: Vec::new(),
        }
    }

    /// One update at step `t` (1-based) using the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, t: u64) -> Result<()> {
        if !(lr > 0.0) {
            return Err(Error::config("lr", format!("must be > 0, got {lr}")));
        }
        if t == 0 {
            return Err(Error::Argument("adamw step index starts at 1".into()));
        }
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (p, slot) in store.iter_mut().zip(self.moments.iter_mut()) {
            let n = p.value.numel();
            let mom = slot.get_or_insert_with(|| Moments {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for i in 0..n {
                let g = grads[i];
                mom.m[i] = self.beta1 * mom.m[i] + (1.0 - self.beta1) * g;
                mom.v[i] = self.beta2 * mom.v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = mom.m[i] / bc1;
                let v_hat = mom.v[i] / bc2;
                values[i] = values[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_store(v: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new(0);
        let id = s.add("p", Tensor::scalar(v)).unwrap();
        s.get_mut(id).grad = Tensor::scalar(g);
        s
    }

    fn value(s: &ParamStore) -> f64 {
        s.iter().next().unwrap().1.value.data()[0]
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut s = scalar_store(1.5, 0.0);
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        opt.step(&mut s, 0.1, 1).unwrap();
        assert_eq!(value(&s), 1.5);
    }

    #[test]
    fn pure_decay() {
        let mut s = scalar_store(2.0, 0.0);
        let mut opt = AdamW::new(0.9, 0.999, 0.05);
        opt.step(&mut s, 0.1, 1).unwrap();
        assert_eq!(value(&s), 2.0 * (1.0 - 0.1 * 0.05));
    }

    #[test]
    fn two_steps_match_hand_unrolled_update() {
        let (b1, b2, lr, eps): (f64, f64, f64, f64) = (0.9, 0.999, 0.1, 1e-8);
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(b1, b2, 0.0);
        opt.step(&mut s, lr, 1).unwrap();
        opt.step(&mut s, lr, 2).unwrap();

        let mut theta = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1);
            v = b2 * v + (1.0 - b2);
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            theta -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(value(&s), theta);
        assert!((theta - (1.0 - 0.2 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn non_positive_lr_is_config_error() {
        let mut s = scalar_store(1.0, 1.0);
        let mut opt = AdamW::new(0.9, 0.999, 0.0);
        assert!(matches!(opt.step(&mut s, 0.0, 1), Err(Error::Config { .. })));
    }
}
