//! Central-difference gradient checking in double precision.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-4;
/// Leaves longer than this are checked on a random subset of `SUBSET` coordinates.
pub const FULL_CHECK_LIMIT: usize = 400;
pub const SUBSET: usize = 256;
/// Denominator floor: near-zero gradients compare absolutely, since central
/// differences carry roughly 1e-10 of rounding noise at unit-scale losses.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub coords_checked: usize,
    /// (leaf index, flat coordinate, analytic, numeric) of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Checks the analytic gradients produced by `f` against central differences.
///
/// `f` evaluates a scalar loss of `leaves` and accumulates its analytic
/// gradient into each leaf's gradient buffer. It is called once for the
/// analytic pass and twice per checked coordinate.
pub fn grad_check<F>(leaves: &mut [Tensor<f64>], mut f: F, tol: f64, seed: u64) -> Result<GradReport>
where
    F: FnMut(&mut [Tensor<f64>]) -> Result<f64>,
{
    for leaf in leaves.iter_mut() {
        leaf.zero_grad();
        leaf.grad_or_init();
    }
    let loss = f(leaves)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("gradient check loss is {loss}")));
    }
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; l.len()]))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport {
        max_rel_err: 0.0,
        coords_checked: 0,
        worst: None,
        tol,
        passed: true,
    };
    for li in 0..leaves.len() {
        let len = leaves[li].len();
        let coords: Vec<usize> = if len <= FULL_CHECK_LIMIT {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, SUBSET).into_vec();
            v.sort_unstable();
            v
        };
        for i in coords {
            let orig = leaves[li].data()[i];
            leaves[li].data_mut()[i] = orig + STEP;
            let plus = f(leaves)?;
            leaves[li].data_mut()[i] = orig - STEP;
            let minus = f(leaves)?;
            leaves[li].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss while perturbing leaf {li} coordinate {i}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let err = relative_error(analytic[li][i], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((li, i, analytic[li][i], numeric));
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

/// `sum(y * r)` and its gradient `r`: a loss that exercises every output
/// entry with a distinct weight.
pub fn weighted_sum(y: &Tensor<f64>, r: &Tensor<f64>) -> Result<(f64, Tensor<f64>)> {
    r.expect_dims("weighted_sum", y.dims())?;
    let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
    Ok((loss, r.detached()))
}
