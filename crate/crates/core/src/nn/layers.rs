use candle_core::{Tensor, D};

use super::params::{Init, ParamBuilder};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        let std = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: pb.get("weight", (out_dim, in_dim), Init::Normal { std })?,
            bias: pb.get("bias", out_dim, Init::Zeros)?,
        })
    }

    pub fn zeros(pb: &ParamBuilder, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", (out_dim, in_dim), Init::Zeros)?,
            bias: pb.get("bias", out_dim, Init::Zeros)?,
        })
    }

    /// Zero weights and a constant bias, so the initial output is `bias` everywhere.
    pub fn constant(pb: &ParamBuilder, in_dim: usize, out_dim: usize, bias: f64) -> Result<Self> {
        Ok(Self {
            weight: pb.get("weight", (out_dim, in_dim), Init::Zeros)?,
            bias: pb.get("bias", out_dim, Init::Constant(bias))?,
        })
    }

    /// Applies the layer over the last dimension of a 2-D or 3-D input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let wt = self.weight.t()?;
        let y = match x.dims() {
            [_, _] => x.matmul(&wt)?,
            [b, t, d] => x.reshape((b * t, *d))?.matmul(&wt)?.reshape((*b, *t, wt.dim(1)?))?,
            _ => x.broadcast_matmul(&wt)?,
        };
        Ok(y.broadcast_add(&self.bias)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &ParamBuilder,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let std = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        Ok(Self {
            weight: pb.get("weight", (out_ch, in_ch, kernel, kernel), Init::Normal { std })?,
            bias: pb.get("bias", out_ch, Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv::conv2d(x, &self.weight, self.stride, self.padding)?;
        let b = self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(pb: &ParamBuilder, dim: usize) -> Result<Self> {
        Ok(Self { gamma: pb.get("gamma", dim, Init::Ones)?, beta: pb.get("beta", dim, Init::Zeros)?, eps: 1e-5 })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(pb: &ParamBuilder, n: usize, dim: usize) -> Result<Self> {
        Ok(Self { table: pb.get("table", (n, dim), Init::Normal { std: 0.02 })? })
    }

    /// Looks up `(b, t)` integer ids, returning `(b, t, dim)`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let (b, t) = ids.dims2()?;
        let flat = ids.flatten_all()?;
        let e = self.table.index_select(&flat, 0)?;
        Ok(e.reshape((b, t, self.table.dim(1)?))?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

/// Row-wise L2 normalisation of a `(n, d)` tensor with a small floor on the norm.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f64>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_of_uniform_logits() {
        let x = Tensor::zeros((1, 8), DType::F64, &Device::Cpu).unwrap();
        let l: Vec<Vec<f64>> = log_softmax_last(&x).unwrap().to_vec2().unwrap();
        assert!(l[0].iter().all(|v| (v + 8f64.ln()).abs() < 1e-14));
    }

    #[test]
    fn layer_norm_zero_mean_unit_var() {
        let pb = ParamBuilder::random(0, DType::F64, false);
        let ln = LayerNorm::new(&pb, 4).unwrap();
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y: Vec<f64> = ln.forward(&x).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let mean = y.iter().sum::<f64>() / 4.0;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-4);
    }
}
