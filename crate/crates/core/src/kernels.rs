//! Squared-exponential kernel and its closed-form Gaussian expectations.
//!
//! For an activation `A ~ N(mu, var)` and inducing points `v`:
//!
//! * [`psi`]: `E[k(A, v_r)]`
//! * [`omega`]: `E[k(A, v_r) k(A, v_t)]`
//! * [`lambda_cross`]: `E[k_n(A_n, v_{n,r}) k_m(A_m, v_{m,t})]` for a pair of
//!   jointly Gaussian activations.
//!
//! All three follow from the product formula for Gaussian densities.

use crate::autodiff::DET_FLOOR;
use crate::error::{GpnError, Result};
use crate::linalg::DenseMatrix;

/// Squared-exponential kernel `exp(-(a - a')^2 / (2 lambda^2))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SeKernel {
    lengthscale: f64,
}

impl SeKernel {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0) {
            return Err(GpnError::InvalidArgument(format!(
                "lengthscale must be positive, got {lengthscale}"
            )));
        }
        Ok(SeKernel { lengthscale })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        se_kernel(a, b, self.lengthscale)
    }

    pub fn matrix(&self, a: &[f64], b: &[f64]) -> DenseMatrix {
        kernel_matrix(a, b, self.lengthscale)
    }
}

pub fn se_kernel(a: f64, a_prime: f64, lambda: f64) -> f64 {
    let d = a - a_prime;
    (-d * d / (2.0 * lambda * lambda)).exp()
}

/// GPN covariance: the SE kernel applied to the projections `w . x`.
pub fn gpn_cov(x: &[f64], x_prime: &[f64], w: &[f64], lambda: f64) -> Result<f64> {
    if x.len() != w.len() || x_prime.len() != w.len() {
        return Err(GpnError::DimensionMismatch(format!(
            "inputs of length {} and {} against {} weights",
            x.len(),
            x_prime.len(),
            w.len()
        )));
    }
    let proj: f64 = w
        .iter()
        .zip(x.iter().zip(x_prime))
        .map(|(wm, (a, b))| wm * (a - b))
        .sum();
    Ok((-proj * proj / (2.0 * lambda * lambda)).exp())
}

pub fn kernel_matrix(a: &[f64], b: &[f64], lambda: f64) -> DenseMatrix {
    let mut k = DenseMatrix::zeros(a.len(), b.len());
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            k[(i, j)] = se_kernel(*ai, *bj, lambda);
        }
    }
    k
}

/// `psi_r = sqrt(l^2 / (l^2 + var)) exp(-(mu - v_r)^2 / (2 (l^2 + var)))`.
pub fn psi(mu: f64, var: f64, v: &[f64], lambda: f64) -> Vec<f64> {
    let l2 = lambda * lambda;
    let d = l2 + var;
    let scale = (l2 / d).sqrt();
    v.iter()
        .map(|vr| scale * (-(mu - vr).powi(2) / (2.0 * d)).exp())
        .collect()
}

/// `Omega_rt = E[k(A, v_r) k(A, v_t)]`, symmetric `R x R`.
pub fn omega(mu: f64, var: f64, v: &[f64], lambda: f64) -> DenseMatrix {
    omega_signed(mu, var, v, lambda, -1.0)
}

/// [`omega`] with a selectable sign on the first exponent term. Only the
/// negative sign is correct; the positive one exists to demonstrate that
/// the Monte-Carlo oracles detect a corrupted formula.
pub(crate) fn omega_signed(mu: f64, var: f64, v: &[f64], lambda: f64, sign: f64) -> DenseMatrix {
    let r = v.len();
    let l2 = lambda * lambda;
    let e = l2 + 2.0 * var;
    let scale = (l2 / e).sqrt();
    let mut out = DenseMatrix::zeros(r, r);
    for i in 0..r {
        for j in 0..r {
            let c = 0.5 * (v[i] + v[j]);
            let dv = v[i] - v[j];
            out[(i, j)] = scale * (sign * (mu - c).powi(2) / e - dv * dv / (4.0 * l2)).exp();
        }
    }
    out
}

/// Moments of a pair of jointly Gaussian activations `(A_n, A_m)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairMoments {
    pub mu_n: f64,
    pub mu_m: f64,
    pub var_n: f64,
    pub var_m: f64,
    pub cov: f64,
}

/// `Lambda_rt = E[k(A_n, v_n[r]; lambda_n) k(A_m, v_m[t]; lambda_m)]`.
///
/// Rows index the inducing points of unit `n`, columns those of unit `m`.
pub fn lambda_cross(
    moments: PairMoments,
    v_n: &[f64],
    v_m: &[f64],
    lambda_n: f64,
    lambda_m: f64,
) -> Result<DenseMatrix> {
    lambda_cross_signed(moments, v_n, v_m, lambda_n, lambda_m, -1.0)
}

pub(crate) fn lambda_cross_signed(
    moments: PairMoments,
    v_n: &[f64],
    v_m: &[f64],
    lambda_n: f64,
    lambda_m: f64,
    sign: f64,
) -> Result<DenseMatrix> {
    let PairMoments {
        mu_n,
        mu_m,
        var_n,
        var_m,
        cov,
    } = moments;
    let moment_det = var_n * var_m - cov * cov;
    if moment_det < -1e-12 || var_n < 0.0 || var_m < 0.0 {
        return Err(GpnError::NotPsd { det: moment_det });
    }
    let p = lambda_n * lambda_n + var_n;
    let q = lambda_m * lambda_m + var_m;
    let det = (p * q - cov * cov).max(DET_FLOOR);
    let pref = lambda_n * lambda_m / det.sqrt();
    let mut out = DenseMatrix::zeros(v_n.len(), v_m.len());
    for (r, vr) in v_n.iter().enumerate() {
        let a = mu_n - vr;
        for (t, vt) in v_m.iter().enumerate() {
            let b = mu_m - vt;
            let quad = a * a * q + b * b * p - 2.0 * cov * a * b;
            out[(r, t)] = pref * (sign * quad / (2.0 * det)).exp();
        }
    }
    Ok(out)
}
