//! Low-rank adapters: `y = W·x + (α/r)·B·(A·x)` with `A: r×d_in`,
//! `B: d_out×r`, and `B = 0` at initialization.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Rng, Tensor, Var};

/// Prefix of every adapter parameter name.
pub const LORA_PREFIX: &str = "lora.";

/// Rank and scale shared by every adapter in a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
}

impl LoraSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn a_name(target: &str) -> String {
        format!("{LORA_PREFIX}{target}.a")
    }

    pub fn b_name(target: &str) -> String {
        format!("{LORA_PREFIX}{target}.b")
    }

    pub fn init(&self, store: &mut ParamStore, target: &str, d_in: usize, d_out: usize, rng: &mut Rng) {
        let std = 1.0 / (d_in as f64).sqrt();
        store.insert(Self::a_name(target), rng.normal_tensor(&[self.rank, d_in], std));
        store.insert(Self::b_name(target), Tensor::zeros(&[d_out, self.rank]));
    }

    /// `(α/r)·(x·Aᵀ)·Bᵀ` for row-vector inputs `x`.
    pub fn delta(&self, g: &mut Graph, target: &str, x: Var) -> Result<Var> {
        let a = g.param(&Self::a_name(target))?;
        let b = g.param(&Self::b_name(target))?;
        let h = g.matmul_nt(x, a)?;
        let h = g.matmul_nt(h, b)?;
        g.scale(h, self.scaling())
    }
}

/// A standalone adapter attached to one named linear map.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: String,
    pub a: Tensor,
    pub b: Tensor,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(target: impl Into<String>, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        if a.shape().len() != 2 || b.shape().len() != 2 || b.shape()[1] != a.shape()[0] {
            return Err(Error::Shape {
                op: "lora",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        Ok(Self {
            target: target.into(),
            a,
            b,
            alpha,
        })
    }

    /// Fresh adapter with Gaussian `A` and zero `B`.
    pub fn zero_init(target: impl Into<String>, d_in: usize, d_out: usize, spec: LoraSpec, rng: &mut Rng) -> Self {
        let std = 1.0 / (d_in as f64).sqrt();
        Self {
            target: target.into(),
            a: rng.normal_tensor(&[spec.rank, d_in], std),
            b: Tensor::zeros(&[d_out, spec.rank]),
            alpha: spec.alpha,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn d_in(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.b.shape()[0]
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    fn check_base(&self, w: &[usize]) -> Result<()> {
        if w != [self.d_out(), self.d_in()] {
            return Err(Error::Shape {
                op: "lora",
                lhs: w.to_vec(),
                rhs: vec![self.d_out(), self.d_in()],
            });
        }
        Ok(())
    }

    /// Adapted forward for row inputs `x: n×d_in`: `x·Wᵀ + (α/r)·(x·Aᵀ)·Bᵀ`.
    pub fn apply(&self, g: &mut Graph, w: Var, x: Var) -> Result<Var> {
        self.check_base(g.shape(w))?;
        let a = g.input(self.a.clone());
        let b = g.input(self.b.clone());
        let base = g.matmul_nt(x, w)?;
        let h = g.matmul_nt(x, a)?;
        let h = g.matmul_nt(h, b)?;
        let h = g.scale(h, self.scaling())?;
        g.add(base, h)
    }

    /// Folds the adapter into the base weight: `W + (α/r)·B·A`.
    pub fn merge(&self, w: &Tensor) -> Result<Tensor> {
        self.check_base(w.shape())?;
        let (d_out, d_in, r) = (self.d_out(), self.d_in(), self.rank());
        let s = self.scaling();
        let mut out = w.clone();
        let data = out.data_mut();
        for i in 0..d_out {
            for j in 0..d_in {
                let mut acc = 0.0;
                for k in 0..r {
                    acc += self.b.at(i, k) * self.a.at(k, j);
                }
                data[i * d_in + j] += s * acc;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base_forward(w: &Tensor, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (wv, xv) = (g.input(w.clone()), g.input(x.clone()));
        let y = g.matmul_nt(xv, wv).unwrap();
        g.value(y).clone()
    }

    fn adapted_forward(ad: &LoraAdapter, w: &Tensor, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let (wv, xv) = (g.input(w.clone()), g.input(x.clone()));
        let y = ad.apply(&mut g, wv, xv).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn zero_b_is_exact_identity() {
        let mut rng = Rng::new(9);
        let w = rng.normal_tensor(&[5, 4], 1.0);
        let x = rng.normal_tensor(&[3, 4], 1.0);
        let ad = LoraAdapter::zero_init("t", 4, 5, LoraSpec { rank: 2, alpha: 4.0 }, &mut rng);
        assert!(adapted_forward(&ad, &w, &x).bit_eq(&base_forward(&w, &x)));
    }

    #[test]
    fn scaling_is_alpha_over_rank() {
        assert_eq!(LoraSpec { rank: 2, alpha: 4.0 }.scaling(), 2.0);
    }

    #[test]
    fn merge_matches_adapted_forward() {
        let mut rng = Rng::new(10);
        let w = rng.normal_tensor(&[6, 5], 1.0);
        let ad = LoraAdapter::new(
            "t",
            rng.normal_tensor(&[3, 5], 1.0),
            rng.normal_tensor(&[6, 3], 1.0),
            6.0,
        )
        .unwrap();
        let merged = ad.merge(&w).unwrap();
        for _ in 0..100 {
            let x = rng.normal_tensor(&[1, 5], 1.0);
            let diff = adapted_forward(&ad, &w, &x).max_abs_diff(&base_forward(&merged, &x));
            assert!(diff < 1e-9, "{diff}");
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut rng = Rng::new(1);
        assert!(LoraAdapter::new("t", Tensor::zeros(&[2, 4]), Tensor::zeros(&[3, 3]), 1.0).is_err());
        let ad = LoraAdapter::zero_init("t", 4, 3, LoraSpec { rank: 2, alpha: 2.0 }, &mut rng);
        assert!(ad.merge(&Tensor::zeros(&[4, 3])).is_err());
    }
}
