use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::conv::conv_out_size;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Average,
    Max,
}

/// Input rows `[start, end)` feeding output row `i` of `out` rows.
pub fn adaptive_window(i: usize, input: usize, out: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end)
}

fn check_adaptive<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("adaptive pool output size must be positive"));
    }
    if out_h > x.h() || out_w > x.w() {
        return Err(Error::config(format!(
            "adaptive pool cannot grow {}x{} to {out_h}x{out_w}",
            x.h(),
            x.w()
        )));
    }
    Ok(())
}

/// Visits every (plane, output cell) with its window, passing the plane index,
/// flat output index and window bounds.
fn for_each_window(
    dims: [usize; 4],
    out_h: usize,
    out_w: usize,
    mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize)),
) {
    let [n, c, h, w] = dims;
    for plane in 0..n * c {
        for oy in 0..out_h {
            let rows = adaptive_window(oy, h, out_h);
            for ox in 0..out_w {
                let cols = adaptive_window(ox, w, out_w);
                f(plane, (plane * out_h + oy) * out_w + ox, rows, cols);
            }
        }
    }
}

/// Row-major first argmax inside a window, as a flat offset within the plane.
fn window_argmax<T: Real>(plane: &[T], w: usize, rows: (usize, usize), cols: (usize, usize)) -> usize {
    let mut best = rows.0 * w + cols.0;
    for y in rows.0..rows.1 {
        for x in cols.0..cols.1 {
            if plane[y * w + x] > plane[best] {
                best = y * w + x;
            }
        }
    }
    best
}

pub fn adaptive_pool<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: PoolMode,
) -> Result<Tensor<T>> {
    check_adaptive(x, out_h, out_w)?;
    let [n, c, h, w] = x.dims();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = x.data();
    let dst = out.data_mut();
    for_each_window(x.dims(), out_h, out_w, |plane, o, rows, cols| {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        dst[o] = match mode {
            PoolMode::Average => {
                let mut acc = T::zero();
                for y in rows.0..rows.1 {
                    for v in &p[y * w + cols.0..y * w + cols.1] {
                        acc += *v;
                    }
                }
                let count = (rows.1 - rows.0) * (cols.1 - cols.0);
                acc / T::from_usize(count).unwrap()
            }
            PoolMode::Max => p[window_argmax(p, w, rows, cols)],
        };
    });
    Ok(out)
}

pub fn adaptive_pool_backward<T: Real>(
    x: &Tensor<T>,
    out_h: usize,
    out_w: usize,
    mode: PoolMode,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    check_adaptive(x, out_h, out_w)?;
    let [n, c, h, w] = x.dims();
    dy.expect_dims("adaptive_pool_backward", [n, c, out_h, out_w])?;
    let mut dx = Tensor::zeros(x.dims());
    let src = x.data();
    let g = dy.data();
    let dst = dx.data_mut();
    for_each_window(x.dims(), out_h, out_w, |plane, o, rows, cols| {
        let base = plane * h * w;
        match mode {
            PoolMode::Average => {
                let count = (rows.1 - rows.0) * (cols.1 - cols.0);
                let share = g[o] / T::from_usize(count).unwrap();
                for y in rows.0..rows.1 {
                    for v in &mut dst[base + y * w + cols.0..base + y * w + cols.1] {
                        *v += share;
                    }
                }
            }
            PoolMode::Max => {
                let arg = window_argmax(&src[base..base + h * w], w, rows, cols);
                dst[base + arg] += g[o];
            }
        }
    });
    Ok(dx)
}

/// Fixed-window max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, kernel: usize, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let oh = conv_out_size(h, kernel, stride, pad)?;
    let ow = conv_out_size(w, kernel, stride, pad)?;
    let mut out = Tensor::zeros([n, c, oh, ow]);
    let src = x.data();
    let dst = out.data_mut();
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = fixed_window_argmax(p, h, w, oy, ox, kernel, stride, pad);
                dst[(plane * oh + oy) * ow + ox] = p[idx];
            }
        }
    }
    Ok(out)
}

pub fn max_pool2d_backward<T: Real>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let oh = conv_out_size(h, kernel, stride, pad)?;
    let ow = conv_out_size(w, kernel, stride, pad)?;
    dy.expect_dims("max_pool2d_backward", [n, c, oh, ow])?;
    let mut dx = Tensor::zeros(x.dims());
    let src = x.data();
    let g = dy.data();
    let dst = dx.data_mut();
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = fixed_window_argmax(p, h, w, oy, ox, kernel, stride, pad);
                dst[plane * h * w + idx] += g[(plane * oh + oy) * ow + ox];
            }
        }
    }
    Ok(dx)
}

#[allow(clippy::too_many_arguments)]
fn fixed_window_argmax<T: Real>(
    p: &[T],
    h: usize,
    w: usize,
    oy: usize,
    ox: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> usize {
    let y0 = (oy * stride).saturating_sub(pad);
    let y1 = (oy * stride + kernel - pad).min(h);
    let x0 = (ox * stride).saturating_sub(pad);
    let x1 = (ox * stride + kernel - pad).min(w);
    let mut best = y0 * w + x0;
    for y in y0..y1 {
        for x in x0..x1 {
            if p[y * w + x] > p[best] {
                best = y * w + x;
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_bounds_cover_input() {
        assert_eq!(adaptive_window(0, 6, 3), (0, 2));
        assert_eq!(adaptive_window(2, 6, 3), (4, 6));
        // overlapping windows when sizes do not divide
        assert_eq!(adaptive_window(0, 32, 6), (0, 6));
        assert_eq!(adaptive_window(1, 32, 6), (5, 11));
        assert_eq!(adaptive_window(5, 32, 6), (26, 32));
    }

    #[test]
    fn average_of_ones() {
        let x = Tensor::<f32>::full([1, 2, 4, 4], 1.0);
        let y = adaptive_pool(&x, 2, 2, PoolMode::Average).unwrap();
        assert_eq!(y.dims(), [1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn max_of_block() {
        let x = Tensor::<f32>::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = adaptive_pool(&x, 1, 1, PoolMode::Max).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let x = Tensor::<f64>::from_vec([1, 1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap();
        let dy = Tensor::full([1, 1, 1, 1], 1.0);
        let dx = adaptive_pool_backward(&x, 1, 1, PoolMode::Max, &dy).unwrap();
        assert_eq!(dx.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_growth_and_zero() {
        let x = Tensor::<f32>::zeros([1, 1, 4, 4]);
        assert!(matches!(adaptive_pool(&x, 5, 4, PoolMode::Average), Err(Error::Config(_))));
        assert!(matches!(adaptive_pool(&x, 0, 4, PoolMode::Average), Err(Error::Config(_))));
    }

    #[test]
    fn stem_max_pool_shape() {
        let x = Tensor::<f32>::zeros([1, 2, 112, 112]);
        assert_eq!(max_pool2d(&x, 3, 2, 1).unwrap().dims(), [1, 2, 56, 56]);
    }
}
