use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr: 0.0025,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("weight_decay", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// SGD with classical momentum; weight decay is folded into the gradient:
/// `g' = g + λw`, `v ← μv + g'`, `w ← w − lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub config: SgdConfig,
    velocity: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            velocity: Vec::new(),
        })
    }

    pub fn velocity(&self, index: usize) -> Option<&Tensor<T>> {
        self.velocity.get(index).and_then(|v| v.as_ref())
    }

    /// Updates every trainable parameter, then zeroes its gradient.
    pub fn step(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = params.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        if self.velocity.len() < params.len() {
            self.velocity.resize_with(params.len(), || None);
        }
        let lr = T::lit(self.config.lr);
        let mu = T::lit(self.config.momentum);
        let wd = T::lit(self.config.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.grad.as_mut().expect("checked above");
            let v = self.velocity[i].get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for ((w, g), v) in p.value.data_mut().iter_mut().zip(grad.data_mut()).zip(v.data_mut()) {
                let gd = *g + wd * *w;
                *v = mu * *v + gd;
                *w -= lr * *v;
                *g = T::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::from_vec(&[1], vec![w]).unwrap(), true).unwrap();
        s.get_mut(crate::diffcore::ParamId(0)).grad = Some(Tensor::from_vec(&[1], vec![g]).unwrap());
        s
    }

    #[test]
    fn worked_example() {
        let mut s = single(1.0, 0.1);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
        })
        .unwrap();
        opt.step(&mut s).unwrap();
        // v = 0.1 + 1e-4 * 1.0; w = 1 - 0.1 * v
        assert!((opt.velocity(0).unwrap().item() - 0.1001).abs() < 1e-15);
        assert!((s.value(crate::diffcore::ParamId(0)).item() - 0.98999).abs() < 1e-15);
        assert_eq!(s.get(crate::diffcore::ParamId(0)).grad.as_ref().unwrap().item(), 0.0);
    }

    #[test]
    fn zero_lr_keeps_weights_but_moves_velocity() {
        let mut s = single(1.0, 0.5);
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.0,
            momentum: 0.9,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(crate::diffcore::ParamId(0)).item(), 1.0);
        assert_eq!(opt.velocity(0).unwrap().item(), 0.5);
    }

    #[test]
    fn momentum_decays_geometrically() {
        let (lr, mu) = (0.1, 0.9);
        let mut s = single(2.0, 1.0);
        let mut opt = Sgd::new(SgdConfig {
            lr,
            momentum: mu,
            weight_decay: 0.0,
        })
        .unwrap();
        opt.step(&mut s).unwrap();
        let v1 = 1.0;
        for k in 2..=4 {
            // gradient stays zero after the first step
            opt.step(&mut s).unwrap();
            let closed: f64 = 2.0 - lr * v1 * (0..k).map(|i| mu.powi(i)).sum::<f64>();
            assert!((s.value(crate::diffcore::ParamId(0)).item() - closed).abs() < 1e-14);
        }
    }

    #[test]
    fn missing_gradient_names_parameter() {
        let mut s = ParamStore::<f64>::new();
        s.add("head.bias", Tensor::zeros(&[2]), true).unwrap();
        let err = Sgd::new(SgdConfig::default()).unwrap().step(&mut s).unwrap_err();
        assert!(err.to_string().contains("head.bias"));
    }

    #[test]
    fn frozen_parameters_untouched() {
        let mut s = single(1.0, 0.3);
        s.add("running", Tensor::full(&[1], 5.0), false).unwrap();
        let mut opt = Sgd::new(SgdConfig::default()).unwrap();
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(crate::diffcore::ParamId(1)).item(), 5.0);
    }

    #[test]
    fn rejects_bad_momentum() {
        assert!(Sgd::<f32>::new(SgdConfig {
            momentum: 1.0,
            ..SgdConfig::default()
        })
        .is_err());
    }
}
