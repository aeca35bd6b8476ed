//! LARS with the trust ratio of the SimCLR/BYOL reference code. Biases and
//! normalization parameters get plain momentum SGD without weight decay.

use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::Param;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// LARS coefficient `η`.
    #[serde(default = "default_trust")]
    pub trust_coefficient: f64,
}

fn default_trust() -> f64 {
    0.001
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 4.0,
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: default_trust(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.trust_coefficient <= 0.0 {
            return Err(Error::Config("momentum must be in [0, 1), weight decay >= 0, trust coefficient > 0".into()));
        }
        Ok(())
    }
}

fn norm(t: &Tensor) -> Result<f64> {
    Ok(t.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt())
}

/// One update of a single tensor; returns `(new weights, new velocity)`.
pub fn lars_update(
    w: &Tensor,
    g: &Tensor,
    velocity: &Tensor,
    lr: f64,
    config: &OptimizerConfig,
    excluded: bool,
) -> Result<(Tensor, Tensor)> {
    if w.dims() != g.dims() || w.dims() != velocity.dims() {
        return Err(Error::shape(format!("{:?}", w.dims()), format!("grad {:?}, velocity {:?}", g.dims(), velocity.dims())));
    }
    let scaled = if excluded {
        (g * lr)?
    } else {
        let g = (g + (w * config.weight_decay)?)?;
        let (wn, gn) = (norm(w)?, norm(&g)?);
        let trust = if wn > 0.0 && gn > 0.0 { config.trust_coefficient * wn / gn } else { 1.0 };
        (g * (lr * trust))?
    };
    let v = ((velocity * config.momentum)? + scaled)?.detach();
    Ok(((w - &v)?.detach(), v))
}

#[derive(Debug, Clone)]
pub struct Lars {
    config: OptimizerConfig,
    velocity: BTreeMap<String, Tensor>,
}

impl Lars {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn velocity(&self) -> &BTreeMap<String, Tensor> {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: BTreeMap<String, Tensor>) {
        self.velocity = velocity;
    }

    /// Updates every parameter in place. Missing gradients count as zero.
    pub fn step(&mut self, params: &[Param], grads: &HashMap<String, Tensor>, lr: f64) -> Result<()> {
        for p in params {
            let w = p.var.as_tensor();
            let g = match grads.get(&p.name) {
                Some(g) => g.clone(),
                None => w.zeros_like()?,
            };
            let v = match self.velocity.get(&p.name) {
                Some(v) => v.clone(),
                None => w.zeros_like()?,
            };
            let (w_new, v_new) = lars_update(w, &g, &v, lr, &self.config, p.kind.is_excluded_from_adaptation())?;
            p.var.set(&w_new)?;
            self.velocity.insert(p.name.clone(), v_new);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn v(x: &[f64]) -> Tensor {
        Tensor::new(x, &Device::Cpu).unwrap()
    }

    fn cfg(wd: f64) -> OptimizerConfig {
        OptimizerConfig {
            base_lr: 1.0,
            momentum: 0.9,
            weight_decay: wd,
            trust_coefficient: 0.001,
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let w = v(&[1.0, -2.0]);
        let (w2, v2) = lars_update(&w, &v(&[0.0, 0.0]), &v(&[0.0, 0.0]), 0.5, &cfg(0.0), false).unwrap();
        assert_eq!(w2.to_vec1::<f64>().unwrap(), vec![1.0, -2.0]);
        assert_eq!(v2.to_vec1::<f64>().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn excluded_params_skip_decay_and_trust() {
        let w = v(&[3.0]);
        let (w2, _) = lars_update(&w, &v(&[0.0]), &v(&[0.0]), 0.5, &cfg(0.1), true).unwrap();
        assert_eq!(w2.to_vec1::<f64>().unwrap(), vec![3.0]);
        let (w3, v3) = lars_update(&w, &v(&[2.0]), &v(&[1.0]), 0.5, &cfg(0.1), true).unwrap();
        assert!((v3.to_vec1::<f64>().unwrap()[0] - 1.9).abs() < 1e-15);
        assert!((w3.to_vec1::<f64>().unwrap()[0] - 1.1).abs() < 1e-15);
    }
}
