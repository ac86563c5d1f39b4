use super::{TrainConfig, TrainError};
use crate::numerics::{ParamGroup, ParamStore};

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore) -> Self {
        AdamW {
            step: 0,
            first: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
            second: store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently in `store`.
    ///
    /// Per coordinate: `p *= 1 - lr * wd`, then
    /// `p -= lr * m_hat / (sqrt(v_hat) + eps)`. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore, cfg: &TrainConfig) -> Result<(), TrainError> {
        if let Some(p) = store
            .iter()
            .find(|p| p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
        {
            return Err(TrainError::NonFiniteGradient(p.name.clone()));
        }
        self.step += 1;
        let [b1, b2] = cfg.betas;
        let t = self.step as i32;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, p) in store.iter_mut().enumerate() {
            let lr = match p.group {
                ParamGroup::Backbone => cfg.lr_backbone,
                ParamGroup::Head => cfg.lr_new,
            };
            let grad = p.tensor.grad().expect("parameters carry grads").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, w) in p.tensor.values_mut().iter_mut().enumerate() {
                let gj = grad[j];
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                *w *= 1.0 - lr * cfg.weight_decay;
                *w -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(value: f64, grad: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::scalar(value), ParamGroup::Head).unwrap();
        s.get_mut(id).tensor.grad_mut().unwrap()[0] = grad;
        s
    }

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            lr_new: lr,
            lr_backbone: lr,
            weight_decay: wd,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = one_param(1.25, 0.0);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.0)).unwrap();
        assert_eq!(s.iter().next().unwrap().tensor.values(), &[1.25]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = one_param(1.0, 1.0);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.0)).unwrap();
        // m_hat = v_hat = 1
        let expect = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((s.iter().next().unwrap().tensor.values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_times_wd() {
        let mut s = one_param(2.0, 0.0);
        AdamW::new(&s).step(&mut s, &cfg(0.1, 0.01)).unwrap();
        let expect = 2.0 - 0.1 * 0.01 * 2.0;
        assert!((s.iter().next().unwrap().tensor.values()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut s = one_param(1.0, f64::NAN);
        let mut opt = AdamW::new(&s);
        let err = opt.step(&mut s, &cfg(0.1, 0.0)).unwrap_err();
        assert!(err.to_string().contains('p'));
        assert_eq!(opt.steps(), 0);
        assert_eq!(s.iter().next().unwrap().tensor.values(), &[1.0]);
    }
}
