//! Training losses: regression negative log-likelihood, the unscented
//! softmax cross-entropy, the observation-variance penalty and the two
//! terms of the variational evidence lower bound.
//!
//! Every loss here is minimized. The per-sample terms are generic over the
//! scalar type so that the training module can differentiate them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Real;
use crate::error::{GpnError, Result};
use crate::linalg::{forward_subst_generic, jittered_cholesky_generic, DenseMatrix, DEFAULT_JITTER};
use crate::network::{Mode, MomentState, NetworkParams, VariationalPosterior};
use crate::propagation::{
    head_consts, kernel_matrix_generic, lift_params, HeadConsts, HeadTensors, Moments,
    ParamTensors, Slot,
};

/// Default penalty scale on small observation variances.
pub const DEFAULT_ALPHA_S: f64 = 0.1;
/// Default penalty sharpness.
pub const DEFAULT_BETA_S: f64 = 1e-3;

/// The four training objectives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    MlRegression,
    MlClassification,
    VbRegression,
    VbClassification,
}

impl Objective {
    pub const ALL: [Objective; 4] = [
        Objective::MlRegression,
        Objective::MlClassification,
        Objective::VbRegression,
        Objective::VbClassification,
    ];

    pub fn is_variational(self) -> bool {
        matches!(self, Objective::VbRegression | Objective::VbClassification)
    }

    pub fn is_classification(self) -> bool {
        matches!(self, Objective::MlClassification | Objective::VbClassification)
    }

    pub fn name(self) -> &'static str {
        match self {
            Objective::MlRegression => "ml_regression",
            Objective::MlClassification => "ml_classification",
            Objective::VbRegression => "vb_regression",
            Objective::VbClassification => "vb_classification",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        Objective::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| GpnError::InvalidArgument(format!("unknown objective '{s}'")))
    }
}

/// Sigma points of the unscented transform with their weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaPointSet {
    /// `(2C + 1) x C`; row 0 is the mean.
    pub points: DenseMatrix,
    pub weights: Vec<f64>,
    pub kappa_u: f64,
}

/// The usual spread parameter `3 - C`.
pub fn default_kappa(n_classes: usize) -> f64 {
    3.0 - n_classes as f64
}

fn check_kappa(c: usize, kappa_u: f64) -> Result<()> {
    if !(c as f64 + kappa_u > 0.0) {
        return Err(GpnError::InvalidArgument(format!(
            "unscented spread {kappa_u} is not above -{c}"
        )));
    }
    Ok(())
}

fn sigma_weights(c: usize, kappa_u: f64) -> Vec<f64> {
    let denom = c as f64 + kappa_u;
    let mut w = vec![0.5 / denom; 2 * c + 1];
    w[0] = kappa_u / denom;
    w
}

/// Cholesky factor of a positive semi-definite matrix. Pivots that vanish
/// relative to the largest diagonal entry yield zero columns instead of
/// failing, so rank-deficient covariances are factorized exactly.
pub(crate) fn psd_cholesky<T: Real>(a: &[T], n: usize) -> Result<Vec<T>> {
    let scale = (0..n).map(|i| a[i * n + i].val().abs()).fold(0.0, f64::max);
    let floor = 1e-12 * scale;
    let mut l = vec![T::cst(0.0); n * n];
    for j in 0..n {
        let d = a[j * n + j] - T::dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if d.val() <= floor {
            if d.val() < -1e-8 * scale.max(1.0) || !d.val().is_finite() {
                return Err(GpnError::NotPositiveDefinite {
                    pivot: j,
                    value: d.val(),
                });
            }
            continue;
        }
        let ljj = d.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let s = a[i * n + j] - T::dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / ljj;
        }
    }
    Ok(l)
}

/// Offsets of the sigma points from the mean, one per column of the scaled
/// square root. `cov` is either a full row-major matrix or a diagonal.
enum Spread<'a, T> {
    Full(&'a [T]),
    Diagonal(&'a [T]),
}

fn sigma_points_generic<T: Real>(mean: &[T], spread: Spread<'_, T>, kappa_u: f64) -> Result<Vec<Vec<T>>> {
    let c = mean.len();
    check_kappa(c, kappa_u)?;
    let scale = c as f64 + kappa_u;
    let mut pts = Vec::with_capacity(2 * c + 1);
    pts.push(mean.to_vec());
    match spread {
        Spread::Diagonal(var) => {
            for i in 0..c {
                let d = (var[i] * scale).sqrt();
                for sign in [1.0, -1.0] {
                    let mut p = mean.to_vec();
                    p[i] += d * sign;
                    pts.push(p);
                }
            }
        }
        Spread::Full(cov) => {
            let scaled: Vec<T> = cov.iter().map(|x| *x * scale).collect();
            let l = psd_cholesky(&scaled, c)?;
            for i in 0..c {
                for sign in [1.0, -1.0] {
                    let p = (0..c).map(|k| mean[k] + l[k * c + i] * sign).collect();
                    pts.push(p);
                }
            }
        }
    }
    Ok(pts)
}

/// Sigma points of `N(mean, cov)` with spread `kappa_u`.
pub fn sigma_points(mean: &[f64], cov: &DenseMatrix, kappa_u: f64) -> Result<SigmaPointSet> {
    let c = mean.len();
    if cov.rows() != c || cov.cols() != c {
        return Err(GpnError::DimensionMismatch(format!(
            "{c}-dimensional mean with a {}x{} covariance",
            cov.rows(),
            cov.cols()
        )));
    }
    let pts = sigma_points_generic(mean, Spread::Full(cov.as_slice()), kappa_u)?;
    let rows: Vec<Vec<f64>> = pts;
    Ok(SigmaPointSet {
        points: DenseMatrix::from_rows(&rows)?,
        weights: sigma_weights(c, kappa_u),
        kappa_u,
    })
}

/// `exp(o_i) / sum_j exp(o_j)`, evaluated after subtracting the maximum.
pub fn softmax(o: &[f64]) -> Vec<f64> {
    let m = o.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = o.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Expected negative log-likelihood of one sample's targets, without the
/// constant `log(2 pi) / 2` per output.
pub(crate) fn regression_sample<T: Real>(
    m: &Moments<T>,
    target: &[f64],
    noise_var: &[T],
    mode: Mode,
) -> T {
    let mut acc = T::cst(0.0);
    for n in 0..target.len() {
        let t = target[n];
        let s2 = noise_var[n];
        let mu = m.mean[n];
        let second = if mode == Mode::MeanOnly {
            mu * mu
        } else {
            m.var[n] - s2 + mu * mu
        };
        acc += s2.ln() * 0.5 + (second - mu * (2.0 * t) + t * t) / s2 * 0.5;
    }
    acc
}

/// Unscented expectation of the softmax cross-entropy for one sample.
pub(crate) fn classification_sample<T: Real>(
    m: &Moments<T>,
    head: &HeadConsts<T>,
    target: &[f64],
    kappa_u: f64,
    mode: Mode,
) -> Result<T> {
    let (n_in, c) = (head.n_in, head.n_classes);
    let z: Vec<T> = (0..c)
        .map(|k| T::dot(&head.wt[k * n_in..(k + 1) * n_in], &m.mean))
        .collect();
    let (points, weights) = match mode {
        Mode::MeanOnly => (vec![z], vec![1.0]),
        Mode::MeanVariance => {
            let v: Vec<T> = (0..c)
                .map(|k| T::dot(&head.wsq_t[k * n_in..(k + 1) * n_in], &m.var))
                .collect();
            (
                sigma_points_generic(&z, Spread::Diagonal(&v), kappa_u)?,
                sigma_weights(c, kappa_u),
            )
        }
        Mode::FullCovariance => {
            let cov = m
                .cov
                .as_ref()
                .ok_or_else(|| GpnError::InvalidArgument("full covariance missing".into()))?;
            let mut pt = Vec::with_capacity(c * n_in);
            for k in 0..c {
                let wk = &head.wt[k * n_in..(k + 1) * n_in];
                for i in 0..n_in {
                    pt.push(T::dot(&cov[i * n_in..(i + 1) * n_in], wk));
                }
            }
            let mut sig = vec![T::cst(0.0); c * c];
            for a in 0..c {
                for b in 0..=a {
                    let e = T::dot(&head.wt[a * n_in..(a + 1) * n_in], &pt[b * n_in..(b + 1) * n_in]);
                    sig[a * c + b] = e;
                    sig[b * c + a] = e;
                }
            }
            (
                sigma_points_generic(&z, Spread::Full(&sig), kappa_u)?,
                sigma_weights(c, kappa_u),
            )
        }
    };
    let mut loss = T::cst(0.0);
    for (p, w) in points.iter().zip(&weights) {
        let lse = T::logsumexp(p);
        let mut ll = T::cst(0.0);
        for k in 0..c {
            if target[k] != 0.0 {
                ll += (p[k] - lse) * target[k];
            }
        }
        loss += ll * -*w;
    }
    Ok(loss)
}

/// `sum_l 1/N_l sum_n 1/R sum_r alpha * logistic(beta / |S_rn|)`.
pub(crate) fn s_penalty_generic<T: Real>(p: &ParamTensors<T>, alpha: f64, beta: f64) -> T {
    let mut total = T::cst(0.0);
    for lt in &p.layers {
        let mut layer_sum = T::cst(0.0);
        for n in 0..lt.n_out {
            let s = &lt.obs_for(n).s;
            let terms: Vec<T> = s.iter().map(|x| (T::cst(beta) / x.abs()).logistic()).collect();
            layer_sum += T::sum(&terms) * (alpha / s.len() as f64);
        }
        total += layer_sum / lt.n_out as f64;
    }
    total
}

/// `1/2 sum [tr(K^-1 Sigma) + mu^T K^-1 mu + log|K| - log|Sigma|]` over all
/// units; the KL divergence from prior to posterior plus `R/2` per unit.
pub(crate) fn kl_generic<T: Real>(p: &ParamTensors<T>) -> Result<T> {
    let post = p
        .post
        .as_ref()
        .ok_or_else(|| GpnError::InvalidArgument("no variational posterior".into()))?;
    let mut total = T::cst(0.0);
    for (lt, units) in p.layers.iter().zip(post) {
        for (n, up) in units.iter().enumerate() {
            let o = lt.obs_for(n);
            let r = o.v.len();
            let k = kernel_matrix_generic(&o.v, lt.lam[n]);
            let (lk, _) = jittered_cholesky_generic(&k, r, DEFAULT_JITTER)?;
            // tr(K^-1 C C^T) = |L^-1 C|_F^2 and mu^T K^-1 mu = |L^-1 mu|^2.
            let mut tr = T::cst(0.0);
            for j in 0..r {
                let col: Vec<T> = (0..r).map(|i| up.chol[i * r + j]).collect();
                let y = forward_subst_generic(&lk, r, &col);
                tr += T::dot(&y, &y);
            }
            let y = forward_subst_generic(&lk, r, &up.mu);
            let quad = T::dot(&y, &y);
            let mut logdet = T::cst(0.0);
            for i in 0..r {
                logdet += lk[i * r + i].ln() * 2.0 - up.chol[i * r + i].abs().ln() * 2.0;
            }
            total += (tr + quad + logdet) * 0.5;
        }
    }
    Ok(total)
}

fn check_targets(final_state: &MomentState, targets: &DenseMatrix, sigma_l: &[f64]) -> Result<()> {
    if targets.rows() != final_state.samples()
        || targets.cols() != final_state.width()
        || sigma_l.len() != final_state.width()
    {
        return Err(GpnError::DimensionMismatch(format!(
            "moments {}x{}, targets {}x{}, {} noise levels",
            final_state.samples(),
            final_state.width(),
            targets.rows(),
            targets.cols(),
            sigma_l.len()
        )));
    }
    Ok(())
}

/// Expected regression loss `S sum_n log sigma_n + 1/2 sum_{s,n}
/// (T^2 - 2 T E[F] + E[F^2]) / sigma_n^2`, summed over samples.
pub fn regression_nll(final_state: &MomentState, targets: &DenseMatrix, sigma_l: &[f64]) -> Result<f64> {
    check_targets(final_state, targets, sigma_l)?;
    let noise: Vec<f64> = sigma_l.iter().map(|s| s * s).collect();
    Ok((0..final_state.samples())
        .map(|s| {
            regression_sample(
                &final_state.sample_moments(s),
                targets.row(s),
                &noise,
                final_state.mode,
            )
        })
        .sum())
}

/// Expected log-likelihood term of the evidence lower bound, summed over
/// samples. `final_state` comes from variational propagation.
pub fn elbo_pred_term(final_state: &MomentState, targets: &DenseMatrix, sigma_l: &[f64]) -> Result<f64> {
    Ok(-regression_nll(final_state, targets, sigma_l)?)
}

/// Mean over samples of the unscented softmax cross-entropy. `kappa_u`
/// defaults to `3 - C`.
pub fn classification_loss(
    final_state: &MomentState,
    out_w: &DenseMatrix,
    targets_onehot: &DenseMatrix,
    kappa_u: Option<f64>,
) -> Result<f64> {
    let c = out_w.cols();
    if out_w.rows() != final_state.width()
        || targets_onehot.cols() != c
        || targets_onehot.rows() != final_state.samples()
    {
        return Err(GpnError::DimensionMismatch(format!(
            "moments of width {}, head {}x{}, targets {}x{}",
            final_state.width(),
            out_w.rows(),
            c,
            targets_onehot.rows(),
            targets_onehot.cols()
        )));
    }
    let kappa = kappa_u.unwrap_or_else(|| default_kappa(c));
    let head = head_consts(
        &HeadTensors {
            n_in: out_w.rows(),
            n_classes: c,
            w: out_w.as_slice().to_vec(),
        },
        final_state.mode,
    );
    let s = final_state.samples();
    let mut total = 0.0;
    for i in 0..s {
        total += classification_sample(
            &final_state.sample_moments(i),
            &head,
            targets_onehot.row(i),
            kappa,
            final_state.mode,
        )?;
    }
    Ok(total / s.max(1) as f64)
}

/// Penalty discouraging vanishing observation variances.
pub fn s_penalty(net: &NetworkParams, alpha_s: f64, beta_s: f64) -> f64 {
    let p = lift_params::<f64, _>(net, None, &mut |s: Slot| s.value);
    s_penalty_generic(&p, alpha_s, beta_s)
}

/// Regularization term of the evidence lower bound (KL up to `R/2` per
/// unit).
pub fn elbo_reg_term(net: &NetworkParams, post: &VariationalPosterior) -> Result<f64> {
    post.validate(net)?;
    let p = lift_params::<f64, _>(net, Some(post), &mut |s: Slot| s.value);
    kl_generic(&p)
}

/// Fraction of samples whose largest mean logit is not the target class.
pub fn classification_error(final_state: &MomentState, out_w: &DenseMatrix, targets_onehot: &DenseMatrix) -> Result<f64> {
    let logits = final_state.mean.matmul(out_w)?;
    if logits.rows() != targets_onehot.rows() || logits.cols() != targets_onehot.cols() {
        return Err(GpnError::DimensionMismatch("targets do not match logits".into()));
    }
    let argmax = |xs: &[f64]| {
        xs.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
            .0
    };
    let wrong = (0..logits.rows())
        .filter(|s| argmax(logits.row(*s)) != argmax(targets_onehot.row(*s)))
        .count();
    Ok(wrong as f64 / logits.rows().max(1) as f64)
}

/// Root-mean-square error of the predicted means.
pub fn rmse(final_state: &MomentState, targets: &DenseMatrix) -> Result<f64> {
    if final_state.mean.rows() != targets.rows() || final_state.mean.cols() != targets.cols() {
        return Err(GpnError::DimensionMismatch("targets do not match predictions".into()));
    }
    let n = targets.as_slice().len().max(1) as f64;
    let sse: f64 = final_state
        .mean
        .as_slice()
        .iter()
        .zip(targets.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((sse / n).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::kernel_matrix;
    use crate::linalg::cholesky;
    use crate::network::{init_network, InitConfig, UnitPosterior};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn state(mode: Mode, mean: Vec<Vec<f64>>, var: Vec<Vec<f64>>) -> MomentState {
        let m = DenseMatrix::from_rows(&mean).unwrap();
        let v = DenseMatrix::from_rows(&var).unwrap();
        let cov = if mode == Mode::FullCovariance {
            (0..m.rows()).map(|s| DenseMatrix::diag(v.row(s))).collect()
        } else {
            Vec::new()
        };
        MomentState { mode, mean: m, var: v, cov }
    }

    #[test]
    fn regression_loss_cases() {
        let t = DenseMatrix::from_rows(&[vec![0.5, -1.0]]).unwrap();
        let st = state(Mode::MeanOnly, vec![vec![0.5, -1.0]], vec![vec![0.0, 0.0]]);
        assert!(regression_nll(&st, &t, &[1.0, 1.0]).unwrap().abs() < 1e-15);
        let doubled = regression_nll(&st, &t, &[2.0, 2.0]).unwrap();
        assert!((doubled - 2.0 * 2f64.ln()).abs() < 1e-12);
        let e1 = elbo_pred_term(&st, &t, &[1.0, 1.0]).unwrap();
        let e2 = elbo_pred_term(&st, &t, &[2.0, 2.0]).unwrap();
        assert!((e1 - e2 - 2.0 * 2f64.ln()).abs() < 1e-12);
        assert!(regression_nll(&st, &t, &[1.0]).is_err());
    }

    #[test]
    fn regression_loss_matches_monte_carlo() {
        let sigma = [0.3, 0.5];
        let var = vec![vec![0.2 + 0.09, 0.4 + 0.25]];
        let st = state(Mode::MeanVariance, vec![vec![0.1, -0.6]], var);
        let t = DenseMatrix::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let analytic = regression_nll(&st, &t, &sigma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 1_000_000;
        let (mut s1, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut y = 0.0;
            for (k, latent_var) in [0.2f64, 0.4].iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let f = st.mean[(0, k)] + latent_var.sqrt() * z;
                let r = t[(0, k)] - f;
                y += sigma[k].ln() + 0.5 * r * r / (sigma[k] * sigma[k]);
            }
            s1 += y;
            s2 += y * y;
        }
        let m = s1 / n as f64;
        let se = ((s2 / n as f64 - m * m) / n as f64).sqrt();
        assert!((analytic - m).abs() <= 3.0 * se);
    }

    #[test]
    fn offset_invariance() {
        let st = state(Mode::MeanVariance, vec![vec![0.1, -0.6]], vec![vec![0.3, 0.5]]);
        let t = DenseMatrix::from_rows(&[vec![0.4, -0.2]]).unwrap();
        let mut shifted = st.clone();
        shifted.mean = DenseMatrix::from_rows(&[vec![2.1, 1.4]]).unwrap();
        let ts = DenseMatrix::from_rows(&[vec![2.4, 1.8]]).unwrap();
        let a = regression_nll(&st, &t, &[0.4, 0.6]).unwrap();
        let b = regression_nll(&shifted, &ts, &[0.4, 0.6]).unwrap();
        assert!((a - b).abs() < 1e-10);
    }

    #[test]
    fn softmax_cases() {
        let p = softmax(&[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax(&[1000.0, 0.0]);
        assert!((p[0] - 1.0).abs() < 1e-15 && p[1] >= 0.0 && p[1] < 1e-300);
        let p = softmax(&[1.0, 2.0, 3.0]);
        let z: f64 = [1f64, 2.0, 3.0].iter().map(|x| x.exp()).sum();
        for (i, x) in p.iter().enumerate() {
            assert!((x - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn sigma_point_cases() {
        let sp = sigma_points(&[0.2, -0.1], &DenseMatrix::zeros(2, 2), 1.0).unwrap();
        for i in 0..5 {
            assert_eq!(sp.points.row(i), &[0.2, -0.1]);
        }
        let sp = sigma_points(&[0.0, 0.0], &DenseMatrix::identity(2), 1.0).unwrap();
        let r3 = 3f64.sqrt();
        let expected = [[0.0, 0.0], [r3, 0.0], [-r3, 0.0], [0.0, r3], [0.0, -r3]];
        for (i, e) in expected.iter().enumerate() {
            assert!((sp.points[(i, 0)] - e[0]).abs() < 1e-15 && (sp.points[(i, 1)] - e[1]).abs() < 1e-15);
        }
        assert!((sp.weights[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!(sp.weights[1..].iter().all(|w| (w - 1.0 / 6.0).abs() < 1e-15));
        assert!(sigma_points(&[0.0, 0.0], &DenseMatrix::identity(2), -2.0).is_err());
    }

    fn random_psd(rng: &mut ChaCha8Rng, c: usize) -> DenseMatrix {
        let b = DenseMatrix::from_vec(c, c, (0..c * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        b.matmul(&b.transpose()).unwrap()
    }

    proptest! {
        #[test]
        fn unscented_moments_are_exact(seed in 0u64..1000, c in 1usize..6, kappa in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cov = random_psd(&mut rng, c);
            let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
            let sp = sigma_points(&mean, &cov, kappa).unwrap();
            let total: f64 = sp.weights.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            for i in 0..c {
                let m: f64 = (0..2 * c + 1).map(|p| sp.weights[p] * sp.points[(p, i)]).sum();
                prop_assert!((m - mean[i]).abs() < 1e-12);
                for j in 0..c {
                    let cv: f64 = (0..2 * c + 1)
                        .map(|p| sp.weights[p] * (sp.points[(p, i)] - mean[i]) * (sp.points[(p, j)] - mean[j]))
                        .sum();
                    prop_assert!((cv - cov[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn classification_limits() {
        let st = state(Mode::MeanVariance, vec![vec![0.3, -0.2]], vec![vec![0.0, 0.0]]);
        let w = DenseMatrix::from_rows(&[vec![1.0, 0.5, -0.3], vec![0.2, -1.0, 0.4]]).unwrap();
        let t = DenseMatrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap();
        let loss = classification_loss(&st, &w, &t, None).unwrap();
        let z = st.mean.matmul(&w).unwrap();
        let ce = -softmax(z.row(0))[1].ln();
        assert!((loss - ce).abs() < 1e-12);
        let zero_w = DenseMatrix::zeros(2, 3);
        let loss = classification_loss(&st, &zero_w, &t, None).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classification_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for mode in [Mode::MeanVariance, Mode::FullCovariance] {
            let st = state(mode, vec![vec![0.3, -0.2, 0.6]], vec![vec![0.2, 0.5, 0.1]]);
            let w = DenseMatrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let t = DenseMatrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
            let a = classification_loss(&st, &w, &t, None).unwrap();
            // Adding a unit-response column shifts every logit equally.
            let mut st2 = st.clone();
            st2.mean = DenseMatrix::from_rows(&[vec![0.3, -0.2, 0.6, 2.5]]).unwrap();
            st2.var = DenseMatrix::from_rows(&[vec![0.2, 0.5, 0.1, 0.0]]).unwrap();
            if mode == Mode::FullCovariance {
                st2.cov = vec![DenseMatrix::diag(st2.var.row(0))];
            }
            let mut rows: Vec<Vec<f64>> = (0..3).map(|i| w.row(i).to_vec()).collect();
            rows.push(vec![1.0; 4]);
            let w2 = DenseMatrix::from_rows(&rows).unwrap();
            let b = classification_loss(&st2, &w2, &t, None).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn penalty_cases() {
        let mut cfg = InitConfig::new(vec![2, 3, 2]);
        cfg.r_count = 4;
        let mut net = init_network(&cfg).unwrap();
        let set_all = |net: &mut NetworkParams, v: f64| {
            for l in &mut net.layers {
                for o in &mut l.obs {
                    o.s = vec![v; o.len()];
                }
            }
        };
        set_all(&mut net, 1e12);
        // Two layers, each averaging to alpha / 2.
        assert!((s_penalty(&net, 0.1, 1e-3) - 2.0 * 0.05).abs() < 1e-10);
        set_all(&mut net, 1e-3);
        let expected = 2.0 * 0.1 / (1.0 + (-1f64).exp());
        assert!((s_penalty(&net, 0.1, 1e-3) - expected).abs() < 1e-12);
        let before = s_penalty(&net, 0.1, 1e-3);
        net.layers[1].obs[0].s[2] = 0.5;
        assert!(s_penalty(&net, 0.1, 1e-3) < before);
    }

    fn vb_net() -> NetworkParams {
        let mut cfg = InitConfig::new(vec![2, 3]);
        cfg.r_count = 4;
        cfg.v_range = [-1.5, 1.5];
        init_network(&cfg).unwrap()
    }

    #[test]
    fn kl_at_prior_and_mean_shift() {
        let net = vb_net();
        let prior = VariationalPosterior::prior(&net).unwrap();
        let reg = elbo_reg_term(&net, &prior).unwrap();
        assert!((reg - 3.0 * 4.0 / 2.0).abs() < 1e-8);
        let mut shifted = prior.clone();
        shifted.layers[0][1].mu_u = vec![0.5, -0.2, 0.3, 0.1];
        let o = &net.layers[0].obs[1];
        let k = kernel_matrix(&o.v, &o.v, net.layers[0].lambda[1]);
        let kinv = cholesky(&k).unwrap().inverse();
        let mu = DenseMatrix::column(&shifted.layers[0][1].mu_u);
        let quad = mu.transpose().matmul(&kinv).unwrap().matmul(&mu).unwrap()[(0, 0)];
        let reg2 = elbo_reg_term(&net, &shifted).unwrap();
        assert!((reg2 - reg - 0.5 * quad).abs() < 1e-8);
    }

    #[test]
    fn kl_matches_dense_formula() {
        let net = vb_net();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut post = VariationalPosterior::prior(&net).unwrap();
        for u in &mut post.layers[0] {
            u.mu_u = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut l = DenseMatrix::zeros(4, 4);
            for i in 0..4 {
                for j in 0..i {
                    l[(i, j)] = rng.random_range(-0.3..0.3);
                }
                l[(i, i)] = rng.random_range(0.2..0.8);
            }
            u.chol_sigma_u = l;
        }
        let mut expected = 0.0;
        for (n, UnitPosterior { mu_u, chol_sigma_u }) in post.layers[0].iter().enumerate() {
            let o = &net.layers[0].obs[n];
            let k = kernel_matrix(&o.v, &o.v, net.layers[0].lambda[n]);
            let fk = cholesky(&k).unwrap();
            let kinv = fk.inverse();
            let sig = chol_sigma_u.matmul(&chol_sigma_u.transpose()).unwrap();
            let tr: f64 = kinv.matmul(&sig).unwrap().diagonal().iter().sum();
            let mu = DenseMatrix::column(mu_u);
            let quad = mu.transpose().matmul(&kinv).unwrap().matmul(&mu).unwrap()[(0, 0)];
            let ld = fk.log_det() - cholesky(&sig).unwrap().log_det();
            let kl = 0.5 * (tr + quad + ld) - 2.0;
            assert!(kl >= -1e-10);
            expected += 0.5 * (tr + quad + ld);
        }
        assert!((elbo_reg_term(&net, &post).unwrap() - expected).abs() < 1e-8);
    }
}
