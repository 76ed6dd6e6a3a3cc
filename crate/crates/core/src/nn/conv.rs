//! 2-D convolution as im2col followed by a batched matrix product.
//!
//! The unfold and its adjoint are custom ops with plain loops, which on CPU is
//! considerably faster than the generic convolution kernels in both passes.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::Result;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        let out_h = (height + 2 * padding - kernel) / stride + 1;
        let out_w = (width + 2 * padding - kernel) / stride + 1;
        Self { channels, height, width, kernel, stride, padding, out_h, out_w }
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Calls `f(col_offset, image_offset)` for every in-bounds tap of one sample.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = self.height * self.width;
        let l = self.cols();
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    for oy in 0..self.out_h {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * s + kx) as isize - p as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            f(row * l + oy * self.out_w + ox, c * plane + iy as usize * self.width + ix as usize);
                        }
                    }
                }
            }
        }
    }
}

fn unfold<T: Copy + Default>(src: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let out_len = g.rows() * g.cols();
    let mut out = vec![T::default(); n * out_len];
    for b in 0..n {
        let x = &src[b * in_len..(b + 1) * in_len];
        let o = &mut out[b * out_len..(b + 1) * out_len];
        g.for_each_tap(|col, img| o[col] = x[img]);
    }
    out
}

fn fold<T: Copy + Default + std::ops::AddAssign>(src: &[T], n: usize, g: &Geometry) -> Vec<T> {
    let in_len = g.channels * g.height * g.width;
    let col_len = g.rows() * g.cols();
    let mut out = vec![T::default(); n * in_len];
    for b in 0..n {
        let c = &src[b * col_len..(b + 1) * col_len];
        let o = &mut out[b * in_len..(b + 1) * in_len];
        g.for_each_tap(|col, img| o[img] += c[col]);
    }
    out
}

fn slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col expects a contiguous input"),
    }
}

struct Unfold(Geometry);
struct Fold(Geometry);

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(unfold(slice(v, layout)?, n, g)),
            CpuStorage::F64(v) => CpuStorage::F64(unfold(slice(v, layout)?, n, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, Shape::from((n, g.rows(), g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold(self.0))?))
    }
}

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        let n = layout.dims()[0];
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(fold(slice(v, layout)?, n, g)),
            CpuStorage::F64(v) => CpuStorage::F64(fold(slice(v, layout)?, n, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from((n, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Unfold(self.0))?))
    }
}

/// Cross-correlation of `(n, c, h, w)` input with `(o, c, k, k)` weights.
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (o, _, k, _) = weight.dims4()?;
    let g = Geometry::new(c, h, w, k, stride, padding);
    let cols = x.contiguous()?.apply_op1(Unfold(g))?;
    let w2 = weight.reshape((o, g.rows()))?;
    Ok(w2.broadcast_matmul(&cols)?.reshape((n, o, g.out_h, g.out_w))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Tensor {
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        Tensor::from_vec((0..n).map(|_| rng.random_range(-1.0f64..1.0)).collect::<Vec<_>>(), shape, &Device::Cpu)
            .unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn matches_reference_convolution_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for &(c, o, hw, k, s, p) in &[(3, 4, 8, 3, 1, 1), (2, 5, 8, 3, 2, 1), (4, 3, 6, 1, 1, 0), (3, 2, 7, 3, 2, 1)] {
            let x = Var::from_tensor(&random(&mut rng, (2, c, hw, hw))).unwrap();
            let w = Var::from_tensor(&random(&mut rng, (o, c, k, k))).unwrap();
            let ours = conv2d(&x, &w, s, p).unwrap();
            let reference = x.conv2d(&w, p, s, 1, 1).unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let g1 = ours.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            let g2 = reference.sqr().unwrap().sum_all().unwrap().backward().unwrap();
            assert!(max_diff(g1.get(&x).unwrap(), g2.get(&x).unwrap()) < 1e-10);
            assert!(max_diff(g1.get(&w).unwrap(), g2.get(&w).unwrap()) < 1e-10);
        }
    }
}
