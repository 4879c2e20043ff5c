use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization parameters and running statistics. Vectors
/// are stored as `(1, c, 1, 1)` tensors.
#[derive(Clone, Debug)]
pub struct BnState<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    pub training: bool,
}

/// Saved forward values needed by [`batch_norm_backward`].
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Real> BnState<T> {
    pub fn new(channels: usize) -> Self {
        BnState {
            gamma: Tensor::full([1, channels, 1, 1], T::one()).with_grad(),
            beta: Tensor::zeros([1, channels, 1, 1]).with_grad(),
            running_mean: Tensor::zeros([1, channels, 1, 1]),
            running_var: Tensor::full([1, channels, 1, 1], T::one()),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            training: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

const LANES: usize = 8;

/// Sum of `f(v)` over `xs` with a fixed lane-wise order, so the result is
/// reproducible and the loop vectorizes.
fn lane_sum<T: Real>(xs: &[T], f: impl Fn(T) -> T) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = xs.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, &v) in acc.iter_mut().zip(c) {
            *a += f(v);
        }
    }
    tail.iter().fold(acc.iter().copied().sum::<T>(), |s, &v| s + f(v))
}

fn lane_dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail = ca.remainder().iter().zip(cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..LANES {
            acc[i] += x[i] * y[i];
        }
    }
    tail.fold(acc.iter().copied().sum::<T>(), |s, (&x, &y)| s + x * y)
}

/// Normalizes `x` per channel. In training mode batch statistics over
/// `(n, h, w)` are used and the running statistics are updated.
pub fn batch_norm<T: Real>(x: &Tensor<T>, s: &mut BnState<T>) -> Result<(Tensor<T>, BnCache<T>)> {
    let [n, c, h, w] = x.dims();
    if s.channels() != c {
        return Err(Error::dim(
            "batch_norm",
            format!("input has {c} channels, state has {}", s.channels()),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    if s.training && count == 0 {
        return Err(Error::dim("batch_norm", "empty batch in training mode"));
    }
    let eps = T::from_f64_lossy(s.eps);
    let (mean, var): (Vec<T>, Vec<T>) = if s.training {
        let cnt = T::from_usize(count).unwrap();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for (idx, p) in x.data().chunks(plane).enumerate() {
            mean[idx % c] += lane_sum(p, |v| v);
        }
        mean.iter_mut().for_each(|m| *m /= cnt);
        for (idx, p) in x.data().chunks(plane).enumerate() {
            let m = mean[idx % c];
            var[idx % c] += lane_sum(p, |v| (v - m) * (v - m));
        }
        var.iter_mut().for_each(|v| *v /= cnt);
        let mom = T::from_f64_lossy(s.momentum);
        let unbias = if count > 1 {
            cnt / T::from_usize(count - 1).unwrap()
        } else {
            T::one()
        };
        for ch in 0..c {
            let rm = &mut s.running_mean.data_mut()[ch];
            *rm = (T::one() - mom) * *rm + mom * mean[ch];
            let rv = &mut s.running_var.data_mut()[ch];
            *rv = (T::one() - mom) * *rv + mom * var[ch] * unbias;
        }
        (mean, var)
    } else {
        (s.running_mean.data().to_vec(), s.running_var.data().to_vec())
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut x_hat = x.detached();
    let mut y = x.detached();
    let (g, b) = (s.gamma.data(), s.beta.data());
    for (idx, (xh, yp)) in x_hat
        .data_mut()
        .chunks_mut(plane)
        .zip(y.data_mut().chunks_mut(plane))
        .enumerate()
    {
        let ch = idx % c;
        let (m, is, gc, bc) = (mean[ch], inv_std[ch], g[ch], b[ch]);
        for (a, o) in xh.iter_mut().zip(yp.iter_mut()) {
            let v = (*a - m) * is;
            *a = v;
            *o = gc * v + bc;
        }
    }
    Ok((
        y,
        BnCache {
            x_hat,
            inv_std,
            training: s.training,
        },
    ))
}

/// Accumulates `gamma`/`beta` gradients into `s` and returns the input gradient.
pub fn batch_norm_backward<T: Real>(
    cache: &BnCache<T>,
    s: &mut BnState<T>,
    dy: &Tensor<T>,
) -> Result<Tensor<T>> {
    dy.expect_dims("batch_norm_backward", cache.x_hat.dims())?;
    let [n, c, h, w] = dy.dims();
    let plane = h * w;
    let cnt = T::from_usize(n * plane).unwrap();
    let mut sum_dy = vec![T::zero(); c];
    let mut sum_dy_xh = vec![T::zero(); c];
    for (idx, (gp, xp)) in dy.data().chunks(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        sum_dy[ch] += lane_sum(gp, |g| g);
        sum_dy_xh[ch] += lane_dot(gp, xp);
    }
    s.gamma.accumulate_grad(&sum_dy_xh);
    s.beta.accumulate_grad(&sum_dy);
    let gamma = s.gamma.data();
    let mut dx = dy.detached();
    for (idx, (dp, xp)) in dx.data_mut().chunks_mut(plane).zip(cache.x_hat.data().chunks(plane)).enumerate() {
        let ch = idx % c;
        let scale = gamma[ch] * cache.inv_std[ch];
        if cache.training {
            let mean_dy = sum_dy[ch] / cnt;
            let mean_dy_xh = sum_dy_xh[ch] / cnt;
            for (d, &xh) in dp.iter_mut().zip(xp) {
                *d = scale * (*d - mean_dy - xh * mean_dy_xh);
            }
        } else {
            dp.iter_mut().for_each(|d| *d *= scale);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_output_is_standardized() {
        let mut rng = rand::thread_rng();
        let x = Tensor::<f64>::randn([4, 3, 5, 5], 3.0, &mut rng).map(|v| v + 7.0);
        let mut s = BnState::new(3);
        let (y, _) = batch_norm(&x, &mut s).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(n, ch, i / 5, i % 5))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        // running stats moved towards the batch statistics
        assert!(s.running_mean.data().iter().all(|&m| m > 0.5));
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let mut rng = rand::thread_rng();
        let x = Tensor::<f32>::randn([2, 2, 3, 3], 1.0, &mut rng);
        let mut s = BnState::new(2);
        s.gamma = Tensor::zeros([1, 2, 1, 1]);
        s.beta = Tensor::from_vec([1, 2, 1, 1], vec![0.5, -1.5]).unwrap();
        let (y, _) = batch_norm(&x, &mut s).unwrap();
        assert!(y.data()[..9].iter().all(|&v| v == 0.5));
        assert!(y.data()[9..18].iter().all(|&v| v == -1.5));
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let x = Tensor::<f64>::full([1, 1, 2, 2], 3.0);
        let mut s = BnState::new(1);
        s.training = false;
        let (y, _) = batch_norm(&x, &mut s).unwrap();
        let want = 3.0 / (1.0 + BN_EPS).sqrt();
        assert!(y.data().iter().all(|&v| (v - want).abs() < 1e-12));
        assert_eq!(s.running_mean.data(), &[0.0]);
    }

    #[test]
    fn channel_mismatch() {
        let x = Tensor::<f32>::zeros([1, 4, 2, 2]);
        let mut s = BnState::new(3);
        assert!(matches!(batch_norm(&x, &mut s), Err(Error::Dimension { .. })));
    }
}
