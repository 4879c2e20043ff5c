//! 2-D and 1-D cross-correlation via im2col + GEMM.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Real, Tensor};

/// Learnable weights of a convolution.
///
/// `weight` is `(out_c, in_c, k_h, k_w)`; `bias`, when present, is `(1, out_c, 1, 1)`.
#[derive(Clone, Debug)]
pub struct ConvParams<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a strided, padded window scan. Partial trailing windows are
/// dropped, as in every mainstream framework.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::config(format!(
            "kernel {kernel} larger than padded input {padded}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

impl<T: Real> ConvParams<T> {
    pub fn new(weight: Tensor<T>, bias: Option<Tensor<T>>, stride: usize, padding: usize) -> Self {
        ConvParams {
            weight,
            bias,
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.n()
    }

    pub fn in_channels(&self) -> usize {
        self.weight.c()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.h(), self.weight.w())
    }

    fn geometry(&self, op: &'static str, x: &Tensor<T>) -> Result<Geometry> {
        let [_, c, h, w] = x.dims();
        let [oc, ic, kh, kw] = self.weight.dims();
        if c != ic {
            return Err(Error::dim(
                op,
                format!("input has {c} channels but weight {:?} expects {ic}", self.weight.dims()),
            ));
        }
        if let Some(b) = &self.bias {
            if b.len() != oc {
                return Err(Error::dim(
                    op,
                    format!("bias has {} entries for {oc} output channels", b.len()),
                ));
            }
        }
        Ok(Geometry {
            in_c: c,
            h,
            w,
            kh,
            kw,
            stride: self.stride,
            pad: self.padding,
            out_h: conv_out_size(h, kh, self.stride, self.padding)?,
            out_w: conv_out_size(w, kw, self.stride, self.padding)?,
        })
    }
}

/// Output positions `[lo, hi)` whose tap `o * stride + offset` lands inside
/// `0..input`.
fn valid_range(out: usize, input: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset + s - 1) / s) as usize };
    let last = input as isize - 1 - offset;
    let hi = if last < 0 { 0 } else { (last / s + 1) as usize };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

fn im2col<T: Real>(x: &[T], g: &Geometry, col: &mut [T]) {
    let l = g.col_cols();
    for ci in 0..g.in_c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &mut col[((ci * g.kh + i) * g.kw + j) * l..][..l];
                let off_x = j as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.w, g.stride, off_x);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    let dst = &mut row[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    let start = (lo * g.stride) as isize + off_x;
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[start as usize..start as usize + (hi - lo)]);
                    } else {
                        for (d, ix) in dst[lo..hi].iter_mut().zip((start as usize..).step_by(g.stride)) {
                            *d = src[ix];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(col: &[T], g: &Geometry, dx: &mut [T]) {
    let l = g.col_cols();
    for ci in 0..g.in_c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = &col[((ci * g.kh + i) * g.kw + j) * l..][..l];
                let off_x = j as isize - g.pad as isize;
                let (lo, hi) = valid_range(g.out_w, g.w, g.stride, off_x);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &row[oy * g.out_w + lo..oy * g.out_w + hi];
                    let start = ((lo * g.stride) as isize + off_x) as usize;
                    for (v, ix) in src.iter().zip((start..).step_by(g.stride)) {
                        dst[ix] += *v;
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `x` with `p.weight`, no kernel flip.
pub fn conv2d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    let g = p.geometry("conv2d", x)?;
    let n = x.n();
    let oc = p.out_channels();
    let k = g.col_rows();
    let l = g.col_cols();
    let mut out = Tensor::zeros([n, oc, g.out_h, g.out_w]);
    if out.is_empty() {
        return Ok(out);
    }
    let w = p.weight.data();
    out.data_mut()
        .par_chunks_mut(oc * l)
        .enumerate()
        .for_each(|(s, y)| {
            let xs = x.sample(s);
            if g.pointwise() {
                gemm(false, false, oc, l, k, T::one(), w, xs, T::zero(), y);
            } else {
                let mut col = vec![T::zero(); k * l];
                im2col(xs, &g, &mut col);
                gemm(false, false, oc, l, k, T::one(), w, &col, T::zero(), y);
            }
        });
    if let Some(b) = &p.bias {
        let b = b.data();
        // chunks cycle through (sample, channel) pairs
        for (idx, y) in out.data_mut().chunks_mut(l).enumerate() {
            let bv = b[idx % oc];
            y.iter_mut().for_each(|v| *v += bv);
        }
    }
    Ok(out)
}

/// Backward pass of [`conv2d`]. Weight and bias gradients are accumulated into
/// `p`; the input gradient is returned.
pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    p: &mut ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let g = p.geometry("conv2d_backward", x)?;
    let n = x.n();
    let oc = p.out_channels();
    dy.expect_dims("conv2d_backward", [n, oc, g.out_h, g.out_w])?;
    let k = g.col_rows();
    let l = g.col_cols();
    let mut dx = Tensor::zeros(x.dims());
    let mut dw = vec![T::zero(); p.weight.len()];
    let mut col = vec![T::zero(); if g.pointwise() { 0 } else { k * l }];
    let mut dcol = vec![T::zero(); if g.pointwise() { 0 } else { k * l }];
    let in_stride = g.in_c * g.h * g.w;
    for s in 0..n {
        let xs = x.sample(s);
        let dys = dy.sample(s);
        let dxs = &mut dx.data_mut()[s * in_stride..(s + 1) * in_stride];
        let w = p.weight.data();
        if g.pointwise() {
            gemm(false, true, oc, k, l, T::one(), dys, xs, T::one(), &mut dw);
            gemm(true, false, k, l, oc, T::one(), w, dys, T::zero(), dxs);
        } else {
            im2col(xs, &g, &mut col);
            gemm(false, true, oc, k, l, T::one(), dys, &col, T::one(), &mut dw);
            gemm(true, false, k, l, oc, T::one(), w, dys, T::zero(), &mut dcol);
            col2im(&dcol, &g, dxs);
        }
    }
    p.weight.accumulate_grad(&dw);
    if let Some(b) = p.bias.as_mut() {
        let mut db = vec![T::zero(); oc];
        for (idx, y) in dy.data().chunks(l).enumerate() {
            db[idx % oc] += y.iter().copied().sum();
        }
        b.accumulate_grad(&db);
    }
    Ok(dx)
}

/// Valid 1-D convolution over sequences stored as `(n, c, 1, l)`; `weight` is
/// `(out_c, c, 1, k)`.
pub fn conv1d<T: Real>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    check_conv1d("conv1d", x, p)?;
    conv2d(x, p)
}

pub fn conv1d_backward<T: Real>(
    x: &Tensor<T>,
    p: &mut ConvParams<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_conv1d("conv1d_backward", x, p)?;
    conv2d_backward(x, p, dy)
}

fn check_conv1d<T: Real>(op: &'static str, x: &Tensor<T>, p: &ConvParams<T>) -> Result<()> {
    if x.h() != 1 || p.weight.h() != 1 {
        return Err(Error::dim(
            op,
            format!(
                "sequences must have unit height, got input {:?} weight {:?}",
                x.dims(),
                p.weight.dims()
            ),
        ));
    }
    if p.padding != 0 || p.stride != 1 {
        return Err(Error::config(format!(
            "{op} supports only valid, unit-stride convolution"
        )));
    }
    if x.w() < p.weight.w() {
        return Err(Error::config(format!(
            "{op}: sequence length {} shorter than kernel {}",
            x.w(),
            p.weight.w()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ones_kernel_center_is_nine() {
        let x = Tensor::<f32>::full([1, 1, 3, 3], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 3, 3], 1.0), None, 1, 1);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.dims(), [1, 1, 3, 3]);
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        assert_eq!(y.at(0, 0, 0, 0), 4.0);
    }

    #[test]
    fn unit_pointwise_kernel_is_identity() {
        let mut rng = rand::thread_rng();
        let x = Tensor::<f32>::randn([2, 1, 5, 4], 1.0, &mut rng);
        let p = ConvParams::new(Tensor::full([1, 1, 1, 1], 1.0), None, 1, 0);
        assert_eq!(conv2d(&x, &p).unwrap().data(), x.data());
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let p = ConvParams::new(Tensor::zeros([2, 4, 3, 3]), None, 1, 1);
        assert!(matches!(conv2d(&x, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kernel_larger_than_input_is_config_error() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let p = ConvParams::new(Tensor::zeros([1, 1, 5, 5]), None, 1, 0);
        assert!(matches!(conv2d(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn strided_output_size_floors() {
        assert_eq!(conv_out_size(32, 3, 2, 1).unwrap(), 16);
        assert_eq!(conv_out_size(224, 7, 2, 3).unwrap(), 112);
        assert_eq!(conv_out_size(32, 1, 2, 0).unwrap(), 16);
    }

    #[test]
    fn conv1d_lengths() {
        let x = Tensor::<f32>::full([1, 1, 1, 4], 1.0);
        let p = ConvParams::new(Tensor::full([1, 1, 1, 2], 1.0), None, 1, 0);
        let y = conv1d(&x, &p).unwrap();
        assert_eq!(y.data(), &[2.0, 2.0, 2.0]);

        let x = Tensor::<f32>::zeros([1, 2, 1, 5]);
        let p = ConvParams::new(Tensor::zeros([4, 2, 1, 3]), None, 1, 0);
        assert_eq!(conv1d(&x, &p).unwrap().dims(), [1, 4, 1, 3]);

        let x = Tensor::<f32>::zeros([1, 2, 1, 2]);
        assert!(matches!(conv1d(&x, &p), Err(Error::Config(_))));
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x = Tensor::<f64>::zeros([2, 1, 2, 2]);
        let bias = Tensor::from_vec([1, 2, 1, 1], vec![1.5, -2.0]).unwrap();
        let p = ConvParams::new(Tensor::zeros([2, 1, 1, 1]), Some(bias), 1, 0);
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.at(1, 0, 1, 1), 1.5);
        assert_eq!(y.at(1, 1, 0, 1), -2.0);
    }
}
