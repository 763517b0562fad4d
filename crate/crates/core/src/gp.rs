//! Exact GP regression, sparse prediction from virtual observations, and the
//! non-parametric GPN marginal covariance.
//!
//! These routines work on plain matrices and serve as reference
//! implementations for the moment-propagating network code.

use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::kernels::{gpn_cov, kernel_matrix};
use crate::linalg::{chol_solve, jittered_cholesky, DenseMatrix, DEFAULT_JITTER};

/// Inducing points `v`, targets `u` and per-observation variances `s` that
/// parameterize one activation function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VirtualObservations {
    pub v: Vec<f64>,
    pub u: Vec<f64>,
    pub s: Vec<f64>,
}

impl VirtualObservations {
    pub fn new(v: Vec<f64>, u: Vec<f64>, s: Vec<f64>) -> Result<Self> {
        if v.is_empty() || v.len() != u.len() || v.len() != s.len() {
            return Err(GpnError::DimensionMismatch(format!(
                "virtual observations need equal non-zero lengths, got v={} u={} s={}",
                v.len(),
                u.len(),
                s.len()
            )));
        }
        if s.iter().any(|x| !(*x >= 0.0)) {
            return Err(GpnError::InvalidArgument(
                "observation variances must be non-negative".into(),
            ));
        }
        if v.iter().chain(&u).any(|x| !x.is_finite()) {
            return Err(GpnError::InvalidArgument(
                "inducing points and targets must be finite".into(),
            ));
        }
        Ok(VirtualObservations { v, u, s })
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// `n` equidistant points spanning `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Zero-mean GP posterior at `test_x` given noisy observations.
///
/// The returned covariance is that of the latent function (no observation
/// noise on the test points).
pub fn gp_regress(
    train_x: &[f64],
    train_y: &[f64],
    test_x: &[f64],
    lambda: f64,
    noise_var: f64,
) -> Result<(Vec<f64>, DenseMatrix)> {
    if train_x.len() != train_y.len() {
        return Err(GpnError::DimensionMismatch(format!(
            "{} training inputs but {} targets",
            train_x.len(),
            train_y.len()
        )));
    }
    let prior = kernel_matrix(test_x, test_x, lambda);
    if train_x.is_empty() {
        return Ok((vec![0.0; test_x.len()], prior));
    }
    let mut k = kernel_matrix(train_x, train_x, lambda);
    for i in 0..train_x.len() {
        k[(i, i)] += noise_var;
    }
    conditional(&k, &kernel_matrix(train_x, test_x, lambda), train_y, prior)
}

/// Mean `K_*^T K^-1 y` and covariance `prior - K_*^T K^-1 K_*`.
fn conditional(
    k: &DenseMatrix,
    k_cross: &DenseMatrix,
    y: &[f64],
    prior: DenseMatrix,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let (factor, _) = jittered_cholesky(k, DEFAULT_JITTER)?;
    let alpha = chol_solve(&factor, &DenseMatrix::column(y))?;
    let mean = k_cross.transpose().matmul(&alpha)?.into_vec();
    let solved = chol_solve(&factor, k_cross)?;
    let reduction = k_cross.transpose().matmul(&solved)?;
    let cov = prior.sub(&reduction)?.symmetrized(0.0)?;
    Ok((mean, cov))
}

/// Predictive distribution of the unit outputs at the given activations,
/// including the output noise `noise_var` on the diagonal.
pub fn sparse_predict(
    activations: &[f64],
    obs: &VirtualObservations,
    lambda: f64,
    noise_var: f64,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let mut k = kernel_matrix(&obs.v, &obs.v, lambda);
    for (i, s) in obs.s.iter().enumerate() {
        k[(i, i)] += s;
    }
    let prior = kernel_matrix(activations, activations, lambda);
    let (mean, mut cov) = conditional(&k, &kernel_matrix(&obs.v, activations, lambda), &obs.u, prior)?;
    for i in 0..activations.len() {
        cov[(i, i)] += noise_var;
    }
    Ok((mean, cov))
}

/// Marginal covariance of one non-parametric GPN unit over the samples in
/// the rows of `x_prev`.
pub fn nonparam_marginal_cov(
    x_prev: &DenseMatrix,
    w: &[f64],
    lambda: f64,
    noise_var: f64,
) -> Result<DenseMatrix> {
    if x_prev.cols() != w.len() {
        return Err(GpnError::DimensionMismatch(format!(
            "inputs have {} columns but {} weights",
            x_prev.cols(),
            w.len()
        )));
    }
    let n = x_prev.rows();
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = gpn_cov(x_prev.row(i), x_prev.row(j), w, lambda)?;
        }
        out[(i, i)] += noise_var;
    }
    Ok(out)
}

/// Fixed activation functions that virtual observations can be fitted to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationTarget {
    Tanh,
    Relu,
    Identity,
}

impl ActivationTarget {
    pub fn eval(self, a: f64) -> f64 {
        match self {
            ActivationTarget::Tanh => a.tanh(),
            ActivationTarget::Relu => a.max(0.0),
            ActivationTarget::Identity => a,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationTarget::Tanh => "tanh",
            ActivationTarget::Relu => "relu",
            ActivationTarget::Identity => "identity",
        }
    }
}

impl std::str::FromStr for ActivationTarget {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(ActivationTarget::Tanh),
            "relu" => Ok(ActivationTarget::Relu),
            "identity" => Ok(ActivationTarget::Identity),
            other => Err(GpnError::InvalidArgument(format!(
                "unknown activation function '{other}'"
            ))),
        }
    }
}

/// Virtual observations placed on `r_count` equidistant points of `range`
/// with targets read off the named function.
pub fn fit_activation(
    target: ActivationTarget,
    r_count: usize,
    range: [f64; 2],
    noise: f64,
) -> Result<VirtualObservations> {
    if r_count < 2 || !(range[0] < range[1]) {
        return Err(GpnError::InvalidArgument(format!(
            "activation fit needs at least 2 points on a non-empty range, got {r_count} on {range:?}"
        )));
    }
    let v = linspace(range[0], range[1], r_count);
    let u = v.iter().map(|a| target.eval(*a)).collect();
    VirtualObservations::new(v, u, vec![noise; r_count])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::cholesky;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Brute-force conditioning of the joint normal over (train, test) by
    /// explicit matrix inversion via Gauss-Jordan elimination.
    fn brute_force(
        tx: &[f64],
        ty: &[f64],
        qx: &[f64],
        lam: f64,
        noise: f64,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let all: Vec<f64> = tx.iter().chain(qx).copied().collect();
        let n = tx.len();
        let m = qx.len();
        let joint = |i: usize, j: usize| {
            let d = all[i] - all[j];
            (-d * d / (2.0 * lam * lam)).exp() + if i == j && i < n { noise } else { 0.0 }
        };
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = (0..n).map(|j| joint(i, j)).collect();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for c in 0..n {
            let p = (c..n)
                .max_by(|a, b| aug[*a][c].abs().total_cmp(&aug[*b][c].abs()))
                .unwrap();
            aug.swap(c, p);
            let piv = aug[c][c];
            aug[c].iter_mut().for_each(|x| *x /= piv);
            for r in 0..n {
                if r != c {
                    let f = aug[r][c];
                    let pivot_row = aug[c].clone();
                    aug[r].iter_mut().zip(&pivot_row).for_each(|(x, y)| *x -= f * y);
                }
            }
        }
        let inv = |i: usize, j: usize| aug[i][n + j];
        let mean = (0..m)
            .map(|q| {
                (0..n)
                    .map(|i| (0..n).map(|j| joint(n + q, i) * inv(i, j) * ty[j]).sum::<f64>())
                    .sum()
            })
            .collect();
        let cov = (0..m)
            .map(|a| {
                (0..m)
                    .map(|b| {
                        let mut red = 0.0;
                        for i in 0..n {
                            for j in 0..n {
                                red += joint(n + a, i) * inv(i, j) * joint(j, n + b);
                            }
                        }
                        joint(n + a, n + b) - red
                    })
                    .collect()
            })
            .collect();
        (mean, cov)
    }

    #[test]
    fn empty_training_set_recovers_prior() {
        let q = [-0.5, 0.3, 1.0];
        let (mean, cov) = gp_regress(&[], &[], &q, 0.8, 0.1).unwrap();
        assert_eq!(mean, vec![0.0; 3]);
        assert_eq!(cov, kernel_matrix(&q, &q, 0.8));
    }

    #[test]
    fn noiseless_regression_interpolates() {
        let x = [-1.0, 0.0, 0.7];
        let y = [0.3, -0.2, 1.1];
        let (mean, _) = gp_regress(&x, &y, &[0.0], 1.0, 0.0).unwrap();
        assert!((mean[0] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn regression_matches_brute_force_conditioning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tx: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let ty: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let qx: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (mean, cov) = gp_regress(&tx, &ty, &qx, 0.9, 0.05).unwrap();
        let (bm, bc) = brute_force(&tx, &ty, &qx, 0.9, 0.05);
        for i in 0..3 {
            assert!((mean[i] - bm[i]).abs() < 1e-9);
            for j in 0..3 {
                assert!((cov[(i, j)] - bc[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_observation_is_interpolated() {
        let obs = VirtualObservations::new(vec![0.4], vec![-0.7], vec![0.0]).unwrap();
        let (mean, _) = sparse_predict(&[0.4], &obs, 1.0, 0.0).unwrap();
        assert!((mean[0] + 0.7).abs() < 1e-8);
    }

    #[test]
    fn zero_targets_give_zero_mean() {
        let obs = VirtualObservations::new(linspace(-2.0, 2.0, 6), vec![0.0; 6], vec![0.1; 6]).unwrap();
        let (mean, _) = sparse_predict(&[-3.0, 0.1, 1.7], &obs, 0.8, 0.01).unwrap();
        assert!(mean.iter().all(|m| *m == 0.0));
    }

    #[test]
    fn marginal_cov_cases() {
        let one = DenseMatrix::from_rows(&[vec![0.3, -0.2]]).unwrap();
        let c = nonparam_marginal_cov(&one, &[1.0, 2.0], 0.7, 0.25).unwrap();
        assert!((c[(0, 0)] - 1.25).abs() < 1e-15);
        let two = DenseMatrix::from_rows(&[vec![0.3, -0.2], vec![0.3, -0.2]]).unwrap();
        let c = nonparam_marginal_cov(&two, &[1.0, 2.0], 0.7, 0.0).unwrap();
        assert_eq!(c[(0, 1)], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let x = DenseMatrix::from_rows(&rows).unwrap();
        let c = nonparam_marginal_cov(&x, &[0.5, -1.0, 0.3], 0.6, 0.0).unwrap();
        assert!(jittered_cholesky(&c, DEFAULT_JITTER).is_ok());
        assert!(cholesky(&nonparam_marginal_cov(&x, &[0.5, -1.0, 0.3], 0.6, 0.1).unwrap()).is_ok());
    }

    #[test]
    fn fit_activation_cases() {
        let obs = fit_activation(ActivationTarget::Identity, 3, [-1.0, 1.0], 1e-4).unwrap();
        assert_eq!(obs.v, vec![-1.0, 0.0, 1.0]);
        assert_eq!(obs.u, obs.v);
        let grid = linspace(-2.0, 2.0, 101);
        let err = |t: ActivationTarget, r: usize| {
            let obs = fit_activation(t, r, [-2.0, 2.0], 1e-4).unwrap();
            let (m, _) = sparse_predict(&grid, &obs, 1.0, 0.0).unwrap();
            grid.iter()
                .zip(&m)
                .map(|(a, p)| (t.eval(*a) - p).abs())
                .fold(0.0, f64::max)
        };
        assert!(err(ActivationTarget::Tanh, 8) <= 0.05);
        assert!(err(ActivationTarget::Relu, 5) > err(ActivationTarget::Relu, 8));
        assert!(fit_activation(ActivationTarget::Tanh, 1, [-2.0, 2.0], 0.0).is_err());
    }

    proptest! {
        #[test]
        fn sparse_prediction_equals_exact_regression(
            pts in prop::collection::vec((-2.0f64..2.0, -1.0f64..1.0), 1..10),
            q in prop::collection::vec(-3.0f64..3.0, 1..5),
            lam in 0.5f64..1.5,
            noise in 0.01f64..0.5,
        ) {
            let (tx, ty): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let obs = VirtualObservations::new(tx.clone(), ty.clone(), vec![noise; tx.len()]).unwrap();
            let (m1, c1) = sparse_predict(&q, &obs, lam, 0.0).unwrap();
            let (m2, c2) = gp_regress(&tx, &ty, &q, lam, noise).unwrap();
            for (a, b) in m1.iter().zip(&m2) {
                prop_assert!((a - b).abs() < 1e-8);
            }
            prop_assert!(c1.max_abs_diff(&c2) < 1e-8);
        }

        #[test]
        fn predictive_variance_respects_noise_floor(
            u in prop::collection::vec(-1.0f64..1.0, 4),
            s in prop::collection::vec(0.0f64..0.3, 4),
            q in prop::collection::vec(-3.0f64..3.0, 1..6),
            noise in 0.0f64..0.2,
        ) {
            let obs = VirtualObservations::new(linspace(-2.0, 2.0, 4), u, s).unwrap();
            let (_, c) = sparse_predict(&q, &obs, 1.0, noise).unwrap();
            for d in c.diagonal() {
                prop_assert!(d >= noise - 1e-10);
            }
        }

        #[test]
        fn marginal_cov_ignores_directions_orthogonal_to_weights(
            rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2..5),
            w in prop::collection::vec(0.2f64..1.0, 3),
            t in -2.0f64..2.0,
        ) {
            let x = DenseMatrix::from_rows(&rows).unwrap();
            // z = t * (w1, -w0, 0) satisfies w . z = 0.
            let z = [t * w[1], -t * w[0], 0.0];
            let shifted: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().zip(&z).map(|(a, b)| a + b).collect())
                .collect();
            let xs = DenseMatrix::from_rows(&shifted).unwrap();
            let a = nonparam_marginal_cov(&x, &w, 0.8, 0.1).unwrap();
            let b = nonparam_marginal_cov(&xs, &w, 0.8, 0.1).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }
}
