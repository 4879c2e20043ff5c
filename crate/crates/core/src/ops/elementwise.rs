use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`] given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_dims("relu_backward", y.dims())?;
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&o, &g)| if o > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(y.dims(), data)
}

pub fn relu_in_place<T: Real>(x: &mut Tensor<T>) {
    x.data_mut().iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v = T::zero()
        }
    });
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    b.expect_dims("add", a.dims())?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.dims(), data)
}

pub fn add_assign<T: Real>(a: &mut Tensor<T>, b: &Tensor<T>) -> Result<()> {
    b.expect_dims("add", a.dims())?;
    for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
        *x += y;
    }
    Ok(())
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// `(n, c, 1, 1)` mean over each spatial plane.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    let area = T::from_usize(h * w).unwrap();
    let data = x
        .data()
        .chunks(h * w)
        .map(|p| p.iter().copied().sum::<T>() / area)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data).expect("plane count matches")
}

pub fn global_avg_pool_backward<T: Real>(in_dims: [usize; 4], dy: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = in_dims;
    dy.expect_dims("global_avg_pool_backward", [n, c, 1, 1])?;
    let area = T::from_usize(h * w).unwrap();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &g in dy.data() {
        data.extend(std::iter::repeat(g / area).take(h * w));
    }
    Tensor::from_vec(in_dims, data)
}

/// Multiplies every plane `(s, c)` of `x` by `scale[s, c]`.
pub fn scale_channels<T: Real>(x: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    if scale.dims() != [n, c, 1, 1] {
        return Err(Error::dim(
            "scale_channels",
            format!("scale {:?} does not match input {:?}", scale.dims(), x.dims()),
        ));
    }
    let mut out = x.detached();
    for (plane, &s) in out.data_mut().chunks_mut(h * w).zip(scale.data()) {
        plane.iter_mut().for_each(|v| *v *= s);
    }
    Ok(out)
}

/// Returns `(dx, dscale)` for [`scale_channels`].
pub fn scale_channels_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    dy.expect_dims("scale_channels_backward", x.dims())?;
    let plane = x.h() * x.w();
    let dx = scale_channels(dy, scale)?;
    let ds = x
        .data()
        .chunks(plane)
        .zip(dy.data().chunks(plane))
        .map(|(xp, gp)| xp.iter().zip(gp).map(|(&a, &b)| a * b).sum())
        .collect();
    Ok((dx, Tensor::from_vec(scale.dims(), ds)?))
}
