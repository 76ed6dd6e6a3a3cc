//! Fused scaled, masked softmax for attention scores.
//!
//! Query `i` may attend to key `j` when `j < visible_prefix` or `j <= i`, so a
//! fully visible prefix is followed by a causal tail. The backward pass is a
//! second fused op over the saved probabilities.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
struct MaskedSoftmax {
    visible_prefix: usize,
    scale: f64,
}

#[derive(Clone, Copy, Debug)]
struct MaskedSoftmaxGrad {
    scale: f64,
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{what} expects a contiguous input"),
    }
}

trait Float: Copy + Default + PartialOrd + std::ops::Mul<Output = Self> + std::ops::Sub<Output = Self> {
    const NEG_INF: Self;
    fn from_f64(v: f64) -> Self;
    fn exp(self) -> Self;
    fn to_f64(self) -> f64;
}

impl Float for f32 {
    const NEG_INF: Self = f32::NEG_INFINITY;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Float for f64 {
    const NEG_INF: Self = f64::NEG_INFINITY;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
}

impl MaskedSoftmax {
    fn run<T: Float>(&self, x: &[T], rows: usize, cols: usize) -> Vec<T> {
        let scale = T::from_f64(self.scale);
        let mut out = vec![T::default(); x.len()];
        for (r, (src, dst)) in x.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let i = r % rows;
            let visible = cols.min(self.visible_prefix.max(i + 1));
            let (src, dst) = (&src[..visible], &mut dst[..visible]);
            let mut max = T::NEG_INF;
            for &v in src {
                let v = v * scale;
                if v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(src) {
                let e = (v * scale - max).exp();
                sum += e.to_f64();
                *d = e;
            }
            let inv = T::from_f64(1.0 / sum);
            for d in dst {
                *d = *d * inv;
            }
        }
        out
    }
}

impl CustomOp1 for MaskedSoftmax {
    fn name(&self) -> &'static str {
        "masked-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.dims();
        let (rows, cols) = (dims[dims.len() - 2], dims[dims.len() - 1]);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, self.name())?, rows, cols)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, self.name())?, rows, cols)),
            _ => candle_core::bail!("masked-softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let g = grad.contiguous()?;
        Ok(Some(res.apply_op2_no_bwd(&g, &MaskedSoftmaxGrad { scale: self.scale })?))
    }
}

impl MaskedSoftmaxGrad {
    fn run<T: Float>(&self, p: &[T], g: &[T], cols: usize) -> Vec<T> {
        let mut out = vec![T::default(); p.len()];
        for ((pr, gr), dst) in p.chunks(cols).zip(g.chunks(cols)).zip(out.chunks_mut(cols)) {
            let dot: f64 = pr.iter().zip(gr).map(|(&a, &b)| (a * b).to_f64()).sum();
            let (dot, scale) = (T::from_f64(dot), T::from_f64(self.scale));
            for ((d, &a), &b) in dst.iter_mut().zip(pr).zip(gr) {
                *d = scale * a * (b - dot);
            }
        }
        out
    }
}

impl CustomOp2 for MaskedSoftmaxGrad {
    fn name(&self) -> &'static str {
        "masked-softmax-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let cols = *l1.dims().last().unwrap_or(&1);
        let out = match (s1, s2) {
            (CpuStorage::F32(p), CpuStorage::F32(g)) => {
                CpuStorage::F32(self.run(contiguous(p, l1, self.name())?, contiguous(g, l2, self.name())?, cols))
            }
            (CpuStorage::F64(p), CpuStorage::F64(g)) => {
                CpuStorage::F64(self.run(contiguous(p, l1, self.name())?, contiguous(g, l2, self.name())?, cols))
            }
            _ => candle_core::bail!("masked-softmax-grad expects matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// Softmax over the last axis of `scale * scores`, `(…, queries, keys)`, with
/// query `i` restricted to keys `j < visible_prefix` or `j <= i`.
pub fn masked_softmax(scores: &Tensor, visible_prefix: usize, scale: f64) -> Result<Tensor> {
    Ok(scores.contiguous()?.apply_op1(MaskedSoftmax { visible_prefix, scale })?)
}
