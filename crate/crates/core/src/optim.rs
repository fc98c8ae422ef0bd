//! Adaptive-moment optimizer restricted to a [`FreezeMask`].

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autograd::ParamGrads;
use crate::backbone::Backbone;
use crate::embedding::FreezeMask;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Default, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// Adam without weight decay. Only the parameters and embedding rows named
/// in the mask are read from `grads` or written.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    mask: FreezeMask,
    steps: u64,
    whole: BTreeMap<String, Moments>,
    rows: BTreeMap<usize, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig, mask: FreezeMask) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", config.lr)));
        }
        Ok(Self {
            config,
            mask,
            steps: 0,
            whole: BTreeMap::new(),
            rows: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn mask(&self) -> &FreezeMask {
        &self.mask
    }

    pub fn step<B: Backbone>(&mut self, backbone: &mut B, grads: &ParamGrads) -> Result<()> {
        self.steps += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.steps as i32);
        let bc2 = 1.0 - beta2.powi(self.steps as i32);
        let update = |p: &mut [f64], g: Option<&[f64]>, st: &mut Moments| {
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                st.m[i] = beta1 * st.m[i] + (1.0 - beta1) * gi;
                st.v[i] = beta2 * st.v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        };

        for name in &self.mask.trainable_params {
            let param = backbone.params_mut().get_mut(name)?;
            let n = param.value.len();
            let st = self.whole.entry(name.clone()).or_insert_with(|| Moments::zeros(n));
            update(param.value.data_mut(), grads.get(name).map(|g| g.data()), st);
        }

        if !self.mask.trainable_rows.is_empty() {
            let table_name = backbone.embedding_table().to_string();
            let d = backbone.embed_dim();
            let table_grad = grads.get(&table_name);
            let table = &mut backbone.params_mut().get_mut(&table_name)?.value;
            let rows = table.shape()[0];
            for &r in &self.mask.trainable_rows {
                if r >= rows {
                    return Err(Error::Range(format!("trainable row {r} outside table of {rows}")));
                }
                let st = self.rows.entry(r).or_insert_with(|| Moments::zeros(d));
                let g = table_grad.map(|g| &g.data()[r * d..(r + 1) * d]);
                update(&mut table.data_mut()[r * d..(r + 1) * d], g, st);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::toy::{ToyBackbone, ToyModelConfig, TOKEN_EMBEDDING};

    #[test]
    fn first_step_moves_by_lr() {
        let mut b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let name = "text.proj.bias".to_string();
        let before = b.params().tensor(&name).clone();
        let mut grads = ParamGrads::new();
        grads.insert(name.clone(), Tensor::full(before.shape(), 3.0));
        let mask = FreezeMask {
            trainable_params: [name.clone()].into(),
            ..Default::default()
        };
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), mask).unwrap();
        opt.step(&mut b, &grads).unwrap();
        for (a, bv) in b.params().tensor(&name).data().iter().zip(before.data()) {
            assert!((bv - a - 0.01).abs() < 1e-9);
        }
    }

    #[test]
    fn rows_outside_mask_untouched() {
        let mut b = ToyBackbone::new(ToyModelConfig::default()).unwrap();
        let before = b.params().clone();
        let mut grads = ParamGrads::new();
        for (name, p) in before.iter() {
            grads.insert(name.to_string(), Tensor::full(p.value.shape(), 1.0));
        }
        let mask = FreezeMask {
            trainable_rows: [4usize].into(),
            ..Default::default()
        };
        Adam::new(AdamConfig::with_lr(0.1), mask).unwrap().step(&mut b, &grads).unwrap();
        for (name, p) in before.iter() {
            let after = b.params().tensor(name);
            if name == TOKEN_EMBEDDING {
                for r in 0..after.shape()[0] {
                    let same = after.row(r) == p.value.row(r);
                    assert_eq!(same, r != 4, "row {r}");
                }
            } else {
                assert_eq!(after, &p.value, "{name}");
            }
        }
    }

    #[test]
    fn rejects_bad_lr() {
        assert!(Adam::new(AdamConfig::with_lr(0.0), FreezeMask::default()).is_err());
    }
}
