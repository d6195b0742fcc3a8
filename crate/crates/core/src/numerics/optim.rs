use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamStore, TrainableSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// AdamW with decoupled weight decay. Only the parameters registered at
/// construction are ever touched.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore, trainable: &TrainableSet) -> Result<Self> {
        let mut moments = BTreeMap::new();
        for name in trainable.iter() {
            let n = store.get(name)?.numel();
            moments.insert(
                name.clone(),
                Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
        }
        Ok(Self {
            config,
            step: 0,
            moments,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn registered(&self) -> impl Iterator<Item = &String> {
        self.moments.keys()
    }

    /// Applies one update. `grads` must name only registered parameters;
    /// registered parameters missing from `grads` are treated as having a
    /// zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>) -> Result<()> {
        for (name, g) in grads {
            let mom = self
                .moments
                .get(name)
                .ok_or_else(|| Error::invalid(format!("gradient for unregistered parameter `{name}`")))?;
            if mom.m.len() != g.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: vec![mom.m.len()],
                    rhs: vec![g.len()],
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, mom) in self.moments.iter_mut() {
            let p = store.get_mut(name)?;
            if p.numel() != mom.m.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![mom.m.len()],
                });
            }
            let g = grads.get(name);
            let data = p.data_mut();
            for i in 0..data.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * gi;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                data[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * data[i]);
            }
        }
        Ok(())
    }
}

/// Sums per-example gradient lists in order.
pub fn sum_grads(parts: Vec<Vec<(String, Vec<f64>)>>) -> BTreeMap<String, Vec<f64>> {
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for part in parts {
        for (name, g) in part {
            match out.get_mut(&name) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    out.insert(name, g);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
        let before = store.clone();
        let trainable = TrainableSet::all(&store);
        let mut opt = AdamW::new(AdamWConfig::default(), &store, &trainable).unwrap();
        let grads = BTreeMap::from([("w".to_string(), vec![0.0; 3])]);
        opt.step(&mut store, &grads).unwrap();
        assert_eq!(store, before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn descends_on_square() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(1.0));
        let trainable = TrainableSet::all(&store);
        let cfg = AdamWConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &store, &trainable).unwrap();
        let grads = {
            let mut g = Graph::with_params(&store, Some(&trainable));
            let x = g.param("x").unwrap();
            let y = g.mul(x, x).unwrap();
            g.backward(y).unwrap();
            sum_grads(vec![g.param_grads()])
        };
        opt.step(&mut store, &grads).unwrap();
        assert!(store.get("x").unwrap().item() < 1.0);
    }

    #[test]
    fn unregistered_gradient_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(1.0));
        let trainable: TrainableSet = ["a".to_string()].into_iter().collect();
        let mut opt = AdamW::new(AdamWConfig::default(), &store, &trainable).unwrap();
        let grads = BTreeMap::from([("b".to_string(), vec![1.0])]);
        assert!(opt.step(&mut store, &grads).is_err());
        let grads = BTreeMap::from([("a".to_string(), vec![1.0, 2.0])]);
        assert!(opt.step(&mut store, &grads).is_err());
    }
}
