use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Interpolation taps for one axis: `(lo, hi, weight_of_hi)` per output index.
///
/// Half-pixel convention: `src = (dst + 0.5) * in / out - 0.5`, clamped to
/// `[0, in - 1]`.
pub fn bilinear_taps(input: usize, out: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / out as f64;
    (0..out)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(input - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

fn check<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("upsample target must be at least 1x1"));
    }
    if x.h() == 0 || x.w() == 0 {
        return Err(Error::dim("bilinear_upsample", "empty spatial input"));
    }
    Ok(())
}

/// Blends in lerp form `a + t (b - a)`, which reproduces a constant input
/// exactly.
pub fn bilinear_upsample<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    check(x, out_h, out_w)?;
    let [n, c, h, w] = x.dims();
    let ty = bilinear_taps(h, out_h);
    let tx: Vec<(usize, usize, T)> = bilinear_taps(w, out_w)
        .into_iter()
        .map(|(lo, hi, l)| (lo, hi, T::from_f64_lossy(l)))
        .collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    let src = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(out_h * out_w).enumerate() {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::from_f64_lossy(ly);
            let r0 = &p[y0 * w..(y0 + 1) * w];
            let r1 = &p[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let a = r0[x0] + lx * (r0[x1] - r0[x0]);
                let b = r1[x0] + lx * (r1[x1] - r1[x0]);
                dst[oy * out_w + ox] = a + ly * (b - a);
            }
        }
    }
    Ok(out)
}

/// Transpose of the interpolation: scatters `dy` back onto the source grid.
pub fn bilinear_upsample_backward<T: Real>(
    in_dims: [usize; 4],
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_dims;
    let [dn, dc, out_h, out_w] = dy.dims();
    if dn != n || dc != c {
        return Err(Error::dim(
            "bilinear_upsample_backward",
            format!("gradient {:?} does not match input {in_dims:?}", dy.dims()),
        ));
    }
    let mut dx = Tensor::zeros(in_dims);
    check(&dx, out_h, out_w)?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = dy.data();
    for (plane, dst) in dx.data_mut().chunks_mut(h * w).enumerate() {
        let gp = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(1.0 - ly), T::from_f64_lossy(ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(1.0 - lx), T::from_f64_lossy(lx));
                let v = gp[oy * out_w + ox];
                dst[y0 * w + x0] += wy0 * wx0 * v;
                dst[y0 * w + x1] += wy0 * wx1 * v;
                dst[y1 * w + x0] += wy1 * wx0 * v;
                dst[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    }
    Ok(dx)
}
