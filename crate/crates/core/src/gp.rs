//! Exact Gaussian-process regression for known stationary kernels.

use std::f64::consts::PI;

use crate::data::KernelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest diagonal jitter tried before a factorization is declared failed.
pub const MAX_JITTER: f64 = 1e-4;

/// Lower Cholesky factor of a row-major symmetric `n x n` matrix, or `None`
/// when a pivot is not strictly positive.
pub fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Factorizes `a + jitter * I`, escalating the jitter tenfold from `start`
/// (or from `1e-10` after an unjittered attempt when `start` is zero) up to
/// [`MAX_JITTER`]. Returns the factor and the jitter used.
pub fn cholesky_jittered(a: &[f64], n: usize, start: f64) -> Result<(Vec<f64>, f64)> {
    let mut ladder = Vec::new();
    if start == 0.0 {
        ladder.push(0.0);
    }
    let mut j = if start == 0.0 { 1e-10 } else { start };
    while j <= MAX_JITTER * (1.0 + 1e-9) {
        ladder.push(j);
        j *= 10.0;
    }
    let mut work = a.to_vec();
    for &jitter in &ladder {
        for i in 0..n {
            work[i * n + i] = a[i * n + i] + jitter;
        }
        if let Some(l) = cholesky(&work, n) {
            return Ok((l, jitter));
        }
    }
    Err(Error::Factorization {
        jitter: ladder.last().copied().unwrap_or(start),
    })
}

/// Solves `L x = b` in place.
pub fn solve_lower(l: &[f64], n: usize, b: &mut [f64]) {
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[i * n + k] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// Solves `L^T x = b` in place.
pub fn solve_lower_transpose(l: &[f64], n: usize, b: &mut [f64]) {
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in i + 1..n {
            s -= l[k * n + i] * b[k];
        }
        b[i] = s / l[i * n + i];
    }
}

/// `k(X, X')` for inputs stored as rows.
pub fn covariance(spec: &KernelSpec, a: &Tensor, b: &Tensor) -> Vec<f64> {
    let mut k = Vec::with_capacity(a.rows() * b.rows());
    for i in 0..a.rows() {
        for j in 0..b.rows() {
            k.push(spec.eval(a.row(i), b.row(j)));
        }
    }
    k
}

/// Per-target predictive marginals, observation noise included.
#[derive(Clone, Debug, PartialEq)]
pub struct GpPosterior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Posterior predictive of a zero-mean GP with kernel `spec` and observation
/// noise `spec.noise_std`. An empty context gives the prior.
pub fn gp_posterior(
    spec: &KernelSpec,
    xc: &Tensor,
    yc: &Tensor,
    xt: &Tensor,
) -> Result<GpPosterior> {
    let (nc, nt) = (xc.rows(), xt.rows());
    if yc.rows() != nc || (nc > 0 && yc.cols() != 1) {
        return Err(Error::shape("gp_posterior outputs", yc.shape(), &[nc, 1]));
    }
    if nc > 0 && xc.cols() != xt.cols() {
        return Err(Error::shape("gp_posterior inputs", xc.shape(), xt.shape()));
    }
    let noise = spec.noise_std * spec.noise_std;
    let prior: Vec<f64> = (0..nt).map(|i| spec.eval(xt.row(i), xt.row(i))).collect();
    if nc == 0 {
        return Ok(GpPosterior {
            mean: vec![0.0; nt],
            var: prior.iter().map(|k| k + noise).collect(),
        });
    }
    let mut k = covariance(spec, xc, xc);
    for i in 0..nc {
        k[i * nc + i] += noise;
    }
    let (l, _) = cholesky_jittered(&k, nc, 0.0)?;
    let mut alpha = yc.to_vec();
    solve_lower(&l, nc, &mut alpha);
    solve_lower_transpose(&l, nc, &mut alpha);
    let cross = covariance(spec, xt, xc);
    let mut mean = Vec::with_capacity(nt);
    let mut var = Vec::with_capacity(nt);
    for t in 0..nt {
        let ks = &cross[t * nc..(t + 1) * nc];
        mean.push(ks.iter().zip(&alpha).map(|(a, b)| a * b).sum());
        let mut v = ks.to_vec();
        solve_lower(&l, nc, &mut v);
        let reduction: f64 = v.iter().map(|x| x * x).sum();
        var.push((prior[t] - reduction).max(0.0) + noise);
    }
    Ok(GpPosterior { mean, var })
}

/// Mean over targets of the Gaussian log density under the posterior marginals.
pub fn gp_predictive_ll(
    spec: &KernelSpec,
    xc: &Tensor,
    yc: &Tensor,
    xt: &Tensor,
    yt: &Tensor,
) -> Result<f64> {
    if yt.rows() != xt.rows() || yt.cols() != 1 {
        return Err(Error::shape(
            "gp_predictive_ll targets",
            yt.shape(),
            &[xt.rows(), 1],
        ));
    }
    if xt.rows() == 0 {
        return Err(Error::Empty("gp_predictive_ll targets"));
    }
    let post = gp_posterior(spec, xc, yc, xt)?;
    let total: f64 = (0..xt.rows())
        .map(|i| {
            let (m, v) = (post.mean[i], post.var[i]);
            let r = yt.data()[i] - m;
            -0.5 * (2.0 * PI * v).ln() - r * r / (2.0 * v)
        })
        .sum();
    Ok(total / xt.rows() as f64)
}
