//! AdamW with decoupled weight decay and checkpointable moment state.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

pub struct AdamW {
    config: AdamWConfig,
    params: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, config: AdamWConfig) -> Result<Self> {
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, v) in &params {
            first.insert(name.clone(), v.zeros_like()?);
            second.insert(name.clone(), v.zeros_like()?);
        }
        Ok(Self {
            config,
            params,
            first,
            second,
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.apply(&grads)
    }

    /// One update. Parameters without a gradient keep their moments but still decay.
    pub fn apply(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Leaf gradients may still reference this step's graph; moments must not.
            let g = &g.detach();
            let m = self.first.get_mut(name).expect("moment exists");
            let v = self.second.get_mut(name).expect("moment exists");
            *m = ((&*m * c.beta1)? + (g * (1.0 - c.beta1))?)?.detach();
            *v = ((&*v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?.detach();
            let m_hat = (&*m / bias1)?;
            let v_hat = (&*v / bias2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let decayed = (var.as_tensor().detach() * (1.0 - c.lr * c.weight_decay))?;
            var.set(&(decayed - (update * c.lr)?)?)?;
        }
        Ok(())
    }

    /// Moment tensors and step counter, for checkpoints.
    pub fn state(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (name, m) in &self.first {
            out.push((format!("adam.m.{name}"), m.clone()));
        }
        for (name, v) in &self.second {
            out.push((format!("adam.v.{name}"), v.clone()));
        }
        out.push((
            "adam.step".to_string(),
            Tensor::new(&[self.step as f64], &crate::nn::device())?,
        ));
        Ok(out)
    }

    pub fn load_state(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let missing = |k: &str| Error::shape(format!("optimizer tensor {k}"), "missing");
        for (name, _) in &self.params {
            let mk = format!("adam.m.{name}");
            let vk = format!("adam.v.{name}");
            let m = tensors.get(&mk).ok_or_else(|| missing(&mk))?;
            let v = tensors.get(&vk).ok_or_else(|| missing(&vk))?;
            self.first.insert(name.clone(), m.copy()?);
            self.second.insert(name.clone(), v.copy()?);
        }
        let step = tensors
            .get("adam.step")
            .ok_or_else(|| missing("adam.step"))?
            .to_vec1::<f64>()?;
        self.step = step[0] as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;

    #[test]
    fn minimizes_quadratic() {
        let x = Var::new(&[3.0f32, -2.0], &device()).unwrap();
        let mut opt = AdamW::new(
            vec![("x".into(), x.clone())],
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        for _ in 0..300 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.abs() < 0.05), "{v:?}");
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // With bias correction the first step moves each coordinate by lr * sign(g).
        let x = Var::new(&[1.0f32, -4.0], &device()).unwrap();
        let mut opt = AdamW::new(
            vec![("x".into(), x.clone())],
            AdamWConfig {
                lr: 0.01,
                weight_decay: 0.5,
                eps: 0.0,
                ..Default::default()
            },
        )
        .unwrap();
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let v = x.as_tensor().to_vec1::<f32>().unwrap();
        assert!((v[0] - (1.0 * (1.0 - 0.005) - 0.01)).abs() < 1e-6);
        assert!((v[1] - (-4.0 * (1.0 - 0.005) + 0.01)).abs() < 1e-6);
    }

    #[test]
    fn state_round_trip_resumes_identically() {
        let cfg = AdamWConfig {
            lr: 0.05,
            ..Default::default()
        };
        let quartic = |x: &Var| x.as_tensor().sqr().unwrap().sqr().unwrap().sum_all().unwrap();

        let x = Var::new(&[0.5f32, 1.5, -1.0], &device()).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..20 {
            opt.backward_step(&quartic(&x)).unwrap();
        }
        let straight = x.as_tensor().to_vec1::<f32>().unwrap();

        let x = Var::new(&[0.5f32, 1.5, -1.0], &device()).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), x.clone())], cfg).unwrap();
        for _ in 0..7 {
            opt.backward_step(&quartic(&x)).unwrap();
        }
        let state: BTreeMap<_, _> = opt.state().unwrap().into_iter().collect();
        let restored = Var::from_tensor(&x.as_tensor().copy().unwrap()).unwrap();
        let mut opt = AdamW::new(vec![("x".into(), restored.clone())], cfg).unwrap();
        opt.load_state(&state).unwrap();
        assert_eq!(opt.step_count(), 7);
        for _ in 7..20 {
            opt.backward_step(&quartic(&restored)).unwrap();
        }
        assert_eq!(restored.as_tensor().to_vec1::<f32>().unwrap(), straight);
    }
}
