//! Batched matrix ops. A matrix batch is a tensor `(batch, 1, rows, cols)`;
//! feature batches for [`linear`] are `(n, features, 1, 1)`.

use crate::error::{Error, Result};
use crate::linalg::gemm;
use crate::tensor::{Real, Tensor};

fn op_shape<T: Real>(t: &Tensor<T>, trans: bool) -> (usize, usize) {
    let (r, c) = (t.h(), t.w());
    if trans {
        (c, r)
    } else {
        (r, c)
    }
}

fn check_matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
) -> Result<(usize, usize, usize, usize)> {
    if a.c() != 1 || b.c() != 1 || a.n() != b.n() {
        return Err(Error::dim(
            "matmul",
            format!("expected (batch,1,r,c) operands, got {:?} and {:?}", a.dims(), b.dims()),
        ));
    }
    let (m, k) = op_shape(a, ta);
    let (k2, n) = op_shape(b, tb);
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("inner dimensions differ: {m}x{k} times {k2}x{n}"),
        ));
    }
    Ok((a.n(), m, k, n))
}

/// `op(a) * op(b)` for each matrix in the batch.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let (batch, m, k, n) = check_matmul(a, b, ta, tb)?;
    let mut out = Tensor::zeros([batch, 1, m, n]);
    if m * n == 0 {
        return Ok(out);
    }
    for (s, c) in out.data_mut().chunks_mut(m * n).enumerate() {
        gemm(ta, tb, m, n, k, T::one(), a.sample(s), b.sample(s), T::zero(), c);
    }
    Ok(out)
}

/// Returns `(da, db)` for [`matmul`], each in the stored layout of its operand.
pub fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    ta: bool,
    tb: bool,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (batch, m, k, n) = check_matmul(a, b, ta, tb)?;
    dc.expect_dims("matmul_backward", [batch, 1, m, n])?;
    let mut da = Tensor::zeros(a.dims());
    let mut db = Tensor::zeros(b.dims());
    for s in 0..batch {
        let (av, bv, g) = (a.sample(s), b.sample(s), dc.sample(s));
        let da_s = &mut da.data_mut()[s * m * k..(s + 1) * m * k];
        if ta {
            gemm(tb, true, k, m, n, T::one(), bv, g, T::zero(), da_s);
        } else {
            gemm(false, !tb, m, k, n, T::one(), g, bv, T::zero(), da_s);
        }
        let db_s = &mut db.data_mut()[s * k * n..(s + 1) * k * n];
        if tb {
            gemm(true, ta, n, k, m, T::one(), g, av, T::zero(), db_s);
        } else {
            gemm(!ta, false, k, n, m, T::one(), av, g, T::zero(), db_s);
        }
    }
    Ok((da, db))
}

/// Row-wise softmax over the last axis. Outputs below the smallest normal
/// value are flushed to zero.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.detached();
    let cols = x.w().max(1);
    let tiny = T::min_positive_value();
    let floor = tiny.ln();
    for row in out.data_mut().chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in row.iter_mut() {
            let d = *v - max;
            *v = if d < floor { T::zero() } else { d.exp() };
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
            if *v < tiny {
                *v = T::zero();
            }
        }
    }
    out
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub fn softmax_rows_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    dy.expect_dims("softmax_rows_backward", y.dims())?;
    let cols = y.w().max(1);
    let mut dx = Vec::with_capacity(y.len());
    for (yr, gr) in y.data().chunks(cols).zip(dy.data().chunks(cols)) {
        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        dx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    Tensor::from_vec(y.dims(), dx)
}

/// Fully connected layer: `x (n, in, 1, 1)`, `weight (out, in, 1, 1)`,
/// optional `bias (1, out, 1, 1)`.
pub fn linear<T: Real>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (n, fin) = (x.n(), x.c() * x.h() * x.w());
    let (fout, win) = (weight.n(), weight.c() * weight.h() * weight.w());
    if fin != win {
        return Err(Error::dim(
            "linear",
            format!("input has {fin} features, weight expects {win}"),
        ));
    }
    let mut out = Tensor::zeros([n, fout, 1, 1]);
    gemm(false, true, n, fout, fin, T::one(), x.data(), weight.data(), T::zero(), out.data_mut());
    if let Some(b) = bias {
        if b.len() != fout {
            return Err(Error::dim("linear", format!("bias has {} entries for {fout} outputs", b.len())));
        }
        for row in out.data_mut().chunks_mut(fout) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    Ok(out)
}

/// Accumulates weight/bias gradients and returns the input gradient.
pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    weight: &mut Tensor<T>,
    bias: Option<&mut Tensor<T>>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, fin) = (x.n(), x.c() * x.h() * x.w());
    let fout = weight.n();
    dy.expect_dims("linear_backward", [n, fout, 1, 1])?;
    let mut dx = Tensor::zeros(x.dims());
    gemm(false, false, n, fin, fout, T::one(), dy.data(), weight.data(), T::zero(), dx.data_mut());
    let mut dw = vec![T::zero(); weight.len()];
    gemm(true, false, fout, fin, n, T::one(), dy.data(), x.data(), T::zero(), &mut dw);
    weight.accumulate_grad(&dw);
    if let Some(b) = bias {
        let mut db = vec![T::zero(); fout];
        for row in dy.data().chunks(fout) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        b.accumulate_grad(&db);
    }
    Ok(dx)
}
