//! Central finite-difference oracle for reverse-mode gradients.
//!
//! The loss closure must be a deterministic function of the variables: any
//! sampled noise or stop-gradient operand has to be frozen by the caller, so
//! the closure evaluates exactly the surrogate whose gradient autograd returns.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::scalar;

#[derive(Clone, Debug)]
pub struct VarReport {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub vars: Vec<VarReport>,
}

impl GradCheckReport {
    /// Relative error over all probed coordinates pooled together.
    pub fn max_rel_error(&self) -> f64 {
        self.vars.iter().map(|v| v.rel_error).fold(0.0, f64::max)
    }
}

fn set_elem(var: &Var, idx: usize, value: f64) -> Result<()> {
    let shape = var.shape().clone();
    let mut vals: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    vals[idx] = value;
    let t = Tensor::from_vec(vals, shape, var.device())?.to_dtype(var.dtype())?;
    var.set(&t)?;
    Ok(())
}

/// Compares autograd gradients against central differences on up to
/// `max_coords` randomly chosen coordinates per variable.
///
/// The per-variable error is `|g_fd - g_ad| / max(|g_fd|, |g_ad|)` over the
/// probed coordinates; variables whose gradients are both below `1e-12` in
/// norm report zero.
pub fn check<F>(vars: &BTreeMap<String, Var>, loss_fn: F, eps: f64, max_coords: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = loss_fn()?;
    let grads = loss.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    for (name, var) in vars {
        let n = var.elem_count();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?,
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rng.random_range(0..n)).collect()
        };
        let base: Vec<f64> = var.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        let mut ad2 = 0.0;
        for &i in &coords {
            set_elem(var, i, base[i] + eps)?;
            let up = scalar(&loss_fn()?)?;
            set_elem(var, i, base[i] - eps)?;
            let down = scalar(&loss_fn()?)?;
            set_elem(var, i, base[i])?;
            let fd = (up - down) / (2.0 * eps);
            diff2 += (fd - analytic[i]).powi(2);
            fd2 += fd * fd;
            ad2 += analytic[i] * analytic[i];
        }
        let denom = fd2.sqrt().max(ad2.sqrt());
        let rel_error = if denom < 1e-12 { 0.0 } else { diff2.sqrt() / denom };
        reports.push(VarReport { name: name.clone(), coords: coords.len(), rel_error, analytic_norm: ad2.sqrt() });
    }
    Ok(GradCheckReport { vars: reports })
}
