use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay. Parameters that receive no
/// gradient in a step are left untouched, as are their moments.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    vars: Vec<(String, Var)>,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(vars: Vec<(String, Var)>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            vars,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn backward_step(&mut self, loss: &Tensor) -> Result<()> {
        let grads = loss.backward()?;
        self.step(&grads)
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, var) in &self.vars {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.first.get(name) {
                Some(m) => ((m * beta1)? + (&g * (1.0 - beta1))?)?,
                None => (&g * (1.0 - beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?,
                None => (g.sqr()? * (1.0 - beta2))?,
            };
            let update = (&m / c1)?.div(&((&v / c2)?.sqrt()? + eps)?)?;
            let next = (var.as_tensor().detach() - (update * lr)?)?;
            var.set(&next)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(())
    }

    /// Moment tensors keyed `m.<param>` / `v.<param>`.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.first {
            out.insert(format!("m.{k}"), t.clone());
        }
        for (k, t) in &self.second {
            out.insert(format!("v.{k}"), t.clone());
        }
        out
    }

    pub fn load_state(&mut self, step: u64, state: &BTreeMap<String, Tensor>) -> Result<()> {
        self.first.clear();
        self.second.clear();
        for (key, t) in state {
            let (kind, name) = key
                .split_once('.')
                .ok_or_else(|| Error::Checkpoint(format!("bad optimizer key `{key}`")))?;
            let Some((_, var)) = self.vars.iter().find(|(n, _)| n == name) else {
                return Err(Error::Checkpoint(format!(
                    "optimizer state for unknown parameter `{name}`"
                )));
            };
            let t = t.to_dtype(var.dtype())?;
            match kind {
                "m" => self.first.insert(name.to_string(), t),
                "v" => self.second.insert(name.to_string(), t),
                _ => return Err(Error::Checkpoint(format!("bad optimizer key `{key}`"))),
            };
        }
        self.step = step;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign_direction() {
        let x = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(
            vec![("x".into(), x.clone())],
            AdamConfig {
                lr: 0.1,
                ..Default::default()
            },
        );
        let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
        opt.backward_step(&loss).unwrap();
        let v = x.as_tensor().to_vec1::<f64>().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6);
        assert!((v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let x = Var::new(&[3.0f32, -4.0], &Device::Cpu).unwrap();
        let mut opt = Adam::new(
            vec![("x".into(), x.clone())],
            AdamConfig {
                lr: 0.05,
                ..Default::default()
            },
        );
        for _ in 0..500 {
            let loss = x.as_tensor().sqr().unwrap().sum_all().unwrap();
            opt.backward_step(&loss).unwrap();
        }
        let n = x.as_tensor().sqr().unwrap().sum_all().unwrap().to_dtype(DType::F64).unwrap();
        assert!(n.to_scalar::<f64>().unwrap() < 1e-2);
    }
}
