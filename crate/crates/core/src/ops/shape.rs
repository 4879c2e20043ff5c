use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Concatenates along the channel axis in argument order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::dim("concat_channels", "no inputs"))?;
    let [n, _, h, w] = first.dims();
    for p in parts {
        let [pn, _, ph, pw] = p.dims();
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::dim(
                "concat_channels",
                format!("part {:?} does not match batch/spatial of {:?}", p.dims(), first.dims()),
            ));
        }
    }
    let c: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for p in parts {
            out.extend_from_slice(p.sample(s));
        }
    }
    Tensor::from_vec([n, c, h, w], out)
}

/// Splits along channels at the given widths; inverse of [`concat_channels`].
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = x.dims();
    if widths.iter().sum::<usize>() != c {
        return Err(Error::dim(
            "split_channels",
            format!("widths {widths:?} do not sum to {c} channels"),
        ));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&k| Vec::with_capacity(n * k * plane)).collect();
    for s in 0..n {
        let mut off = 0;
        let src = x.sample(s);
        for (part, &k) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&src[off * plane..(off + k) * plane]);
            off += k;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &k)| Tensor::from_vec([n, k, h, w], d))
        .collect()
}

/// Treats each sample as a `rows x cols` matrix and transposes it, producing
/// dims `out_dims` (whose per-sample volume must match).
pub fn transpose_samples<T: Real>(
    x: &Tensor<T>,
    rows: usize,
    cols: usize,
    out_dims: [usize; 4],
) -> Result<Tensor<T>> {
    let n = x.n();
    let per = rows * cols;
    if x.len() != n * per || out_dims[0] != n || out_dims.iter().product::<usize>() != n * per {
        return Err(Error::dim(
            "transpose_samples",
            format!("{:?} is not {n} x {rows} x {cols} or cannot become {out_dims:?}", x.dims()),
        ));
    }
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        let src = x.sample(s);
        let dst = &mut out[s * per..(s + 1) * per];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    Tensor::from_vec(out_dims, out)
}
