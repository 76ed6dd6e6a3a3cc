//! Small neural-network toolkit on top of candle: seeded parameters, layers,
//! an Adam wrapper with gradient clipping, and a finite-difference checker.

pub mod attention;
pub mod conv;
pub mod gradcheck;
pub mod layers;
pub mod params;

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};

use crate::error::Result;

pub use params::{Init, ParamBuilder};

/// Adam (no weight decay) with optional global-norm gradient clipping.
pub struct Adam {
    opt: AdamW,
    vars: Vec<Var>,
    clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(vars: &BTreeMap<String, Var>, lr: f64, clip_norm: Option<f64>) -> Result<Self> {
        let vars: Vec<Var> = vars.values().cloned().collect();
        let params = ParamsAdamW { lr, beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 };
        Ok(Self { opt: AdamW::new(vars.clone(), params)?, vars, clip_norm })
    }

    /// Back-propagates `loss` and applies one update. Returns the pre-clip gradient norm.
    pub fn backward_step(&mut self, loss: &Tensor) -> Result<f64> {
        let mut grads = loss.backward()?;
        let norm = grad_norm(&grads, &self.vars)?;
        if let Some(max) = self.clip_norm {
            if norm > max {
                let scale = max / norm;
                for v in &self.vars {
                    if let Some(g) = grads.get(v.as_tensor()) {
                        let g = (g * scale)?;
                        grads.insert(v.as_tensor(), g);
                    }
                }
            }
        }
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

pub fn grad_norm(grads: &GradStore, vars: &[Var]) -> Result<f64> {
    let mut total = 0.0f64;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            total += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

/// Extracts a scalar tensor as `f64`.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
