//! AdamW with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Optimisation schedule and hyper-parameters. The learning rate is constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub augment_hflip_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            eps: 1e-8,
            seed: 0,
            augment_hflip_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn cityscapes() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 8,
            learning_rate: 2e-4,
            ..Default::default()
        }
    }

    pub fn brats() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 50,
            learning_rate: 1e-4,
            ..Default::default()
        }
    }

    pub fn isles() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 80,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "synthetic" => Ok(Self::default()),
            "cityscapes" => Ok(Self::cityscapes()),
            "brats" => Ok(Self::brats()),
            "isles" => Ok(Self::isles()),
            other => Err(Error::Config(format!("unknown training preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted as a degenerate schedule for testing
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning rate must be ≥ 0, got {}", self.learning_rate)));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be ≥ 1".into()));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight decay ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_hflip_prob) {
            return Err(Error::Config(format!(
                "flip probability must lie in [0, 1], got {}",
                self.augment_hflip_prob
            )));
        }
        Ok(())
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub m: BTreeMap<String, Tensor<T>>,
    pub v: BTreeMap<String, Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|(k, p)| (k.clone(), Tensor::zeros(p.shape())))
                .collect()
        };
        OptimizerState {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    /// Checks that the moment tensors mirror `params`.
    pub fn check_against(&self, params: &ParamStore<T>) -> Result<()> {
        for moments in [&self.m, &self.v] {
            if moments.len() != params.len() {
                return Err(Error::Config("optimizer state does not match the parameters".into()));
            }
            for (k, p) in params.iter() {
                match moments.get(k) {
                    Some(t) if t.shape() == p.shape() => {}
                    _ => return Err(Error::Config(format!("optimizer state for {k} is missing or misshapen"))),
                }
            }
        }
        Ok(())
    }
}

/// One AdamW update. Parameters without an entry in `grads` are treated as
/// having a zero gradient.
pub fn adamw_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    state.check_against(params)?;
    state.t += 1;
    let (b1, b2) = cfg.betas;
    let t = state.t as i32;
    let bc1 = T::from_f64_lossy(1.0 - b1.powi(t));
    let bc2 = T::from_f64_lossy(1.0 - b2.powi(t));
    let (b1, b2) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
    let lr = T::from_f64_lossy(cfg.learning_rate);
    let wd = T::from_f64_lossy(cfg.weight_decay);
    let eps = T::from_f64_lossy(cfg.eps);
    let one = T::one();
    for (name, p) in params.iter_mut() {
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
        let m = state.m.get_mut(name).expect("checked").data_mut();
        let v = state.v.get_mut(name).expect("checked").data_mut();
        for (i, pi) in p.data_mut().iter_mut().enumerate() {
            let gi = g.map_or(T::zero(), |g| g.data()[i]);
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *pi = *pi - lr * (m_hat / (v_hat.sqrt() + eps) + wd * *pi);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(p: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_vec(vec![1], vec![p]).unwrap());
        s
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::from_vec(vec![1], vec![g]).unwrap())])
    }

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = single(1.0);
        let mut st = OptimizerState::new(&p);
        adamw_step(&mut p, &grad(1.0), &mut st, &cfg).unwrap();
        // m̂ = 1, √v̂ = 1 at t = 1
        let expected = 1.0 - 1e-3 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("p").unwrap().data()[0] - expected).abs() < 1e-15);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut p = single(0.7);
        let mut st = OptimizerState::new(&p);
        for _ in 0..10 {
            adamw_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
        }
        assert_eq!(p.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut p = single(2.0);
        let mut st = OptimizerState::new(&p);
        let mut expected = 2.0;
        for _ in 0..5 {
            adamw_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
            expected *= 1.0 - 0.1 * 0.5;
            assert!((p.get("p").unwrap().data()[0] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn presets() {
        assert_eq!(TrainConfig::brats().batch_size, 50);
        assert_eq!(TrainConfig::isles().learning_rate, 1e-3);
        assert_eq!(TrainConfig::preset("cityscapes").unwrap().epochs, 100);
        assert!(TrainConfig::preset("kitti").is_err());
        let bad = TrainConfig {
            betas: (1.0, 0.9),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
