//! Verification harness: Monte-Carlo oracles for the closed-form moments,
//! the central-limit experiment, activation fitting, gradient checks,
//! benchmark runs and the runtime ordering of the propagation modes.
//!
//! Every Monte-Carlo estimate is driven by a seed derived from the caller's
//! seed, so reruns reproduce estimates bit-exactly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    load_delimited, load_delimited_pair, load_idx_images, split, with_test_rows, ColumnKind, Dataset,
    Schema, Split, TargetKind,
};
use crate::error::{GpnError, Result};
use crate::gp::{fit_activation, linspace, sparse_predict, ActivationTarget, VirtualObservations};
use crate::kernels::{kernel_matrix, lambda_cross_signed, omega_signed, psi, se_kernel, PairMoments};
use crate::linalg::{jittered_cholesky, DenseMatrix, DEFAULT_JITTER};
use crate::network::{
    forward, init_network, propagate_response_ml, propagate_response_vb, InitConfig, LayerParams, Mode,
    MomentState, NetworkParams, Sharing, TargetInit, UnitPosterior, VariationalPosterior,
};
use crate::objectives::{classification_loss, psd_cholesky, sigma_points, softmax, Objective};
use crate::seed::{derive_seed, rng_for};
use crate::training::{
    evaluate, finite_diff_check, loss_and_grad, train, FdReport, ObjectiveSpec, TrainConfig, TrainData,
};

/// Minimum draw count accepted by the layer oracle.
pub const MIN_LAYER_DRAWS: usize = 10_000;

/// One Monte-Carlo comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub quantity: String,
    pub analytic: f64,
    pub mc_estimate: f64,
    pub mc_stderr: f64,
    pub n_draws: usize,
    pub seed: u64,
    /// `|analytic - estimate| <= 3 stderr`.
    pub pass: bool,
}

impl McReport {
    /// The standard error is floored at a rounding-level value so that
    /// degenerate estimators without sampling noise compare up to rounding.
    pub fn new(quantity: String, analytic: f64, estimate: f64, stderr: f64, n_draws: usize, seed: u64) -> Self {
        let floor = 1e-10 * (1.0 + estimate.abs());
        let mc_stderr = if stderr.is_finite() { stderr.max(floor) } else { stderr };
        let pass = (analytic - estimate).abs() <= 3.0 * mc_stderr;
        McReport {
            quantity,
            analytic,
            mc_estimate: estimate,
            mc_stderr,
            n_draws,
            seed,
            pass,
        }
    }

    /// Distance between analytic value and estimate in standard errors.
    pub fn z_score(&self) -> f64 {
        (self.analytic - self.mc_estimate).abs() / self.mc_stderr
    }
}

/// Deliberate corruptions of the closed forms, used as negative controls.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    #[default]
    None,
    FlipOmegaSign,
    FlipLambdaSign,
}

impl Fault {
    fn omega_sign(self) -> f64 {
        if self == Fault::FlipOmegaSign { 1.0 } else { -1.0 }
    }

    fn lambda_sign(self) -> f64 {
        if self == Fault::FlipLambdaSign { 1.0 } else { -1.0 }
    }
}

impl FromStr for Fault {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fault::None),
            "omega-sign" => Ok(Fault::FlipOmegaSign),
            "lambda-sign" => Ok(Fault::FlipLambdaSign),
            _ => Err(GpnError::InvalidArgument(format!(
                "unknown fault '{s}' (expected none, omega-sign or lambda-sign)"
            ))),
        }
    }
}

/// Running mean and covariance of a feature vector. Features are shifted by
/// the first observation to limit cancellation.
struct FeatureAcc {
    dim: usize,
    n: usize,
    shift: Vec<f64>,
    sum: Vec<f64>,
    outer: Vec<f64>,
    centered: Vec<f64>,
}

impl FeatureAcc {
    fn new(dim: usize) -> Self {
        FeatureAcc {
            dim,
            n: 0,
            shift: vec![0.0; dim],
            sum: vec![0.0; dim],
            outer: vec![0.0; dim * dim],
            centered: vec![0.0; dim],
        }
    }

    fn push(&mut self, x: &[f64]) {
        if self.n == 0 {
            self.shift.copy_from_slice(x);
        }
        self.n += 1;
        let d = self.dim;
        for ((c, s), (xi, sh)) in self.centered.iter_mut().zip(&mut self.sum).zip(x.iter().zip(&self.shift)) {
            *c = xi - sh;
            *s += *c;
        }
        for i in 0..d {
            let ci = self.centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut self.outer[i * d..i * d + i + 1];
            for (o, cj) in row.iter_mut().zip(&self.centered[..=i]) {
                *o += ci * cj;
            }
        }
    }

    fn mean(&self) -> Vec<f64> {
        let n = self.n.max(1) as f64;
        (0..self.dim).map(|i| self.shift[i] + self.sum[i] / n).collect()
    }

    /// Sample covariance of the features.
    fn cov(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        let n = self.n as f64;
        if self.n < 2 {
            return 0.0;
        }
        (self.outer[i * self.dim + j] - self.sum[i] * self.sum[j] / n) / (n - 1.0)
    }

    /// Standard error of `g^T mean` for a linearization `g` of a smooth
    /// function of the feature means.
    fn stderr(&self, g: &[f64]) -> f64 {
        let mut v = 0.0;
        for i in 0..self.dim {
            if g[i] == 0.0 {
                continue;
            }
            for j in 0..self.dim {
                if g[j] != 0.0 {
                    v += g[i] * g[j] * self.cov(i, j);
                }
            }
        }
        (v.max(0.0) / self.n.max(1) as f64).sqrt()
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// The kernel expectation being checked.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelQuantity {
    Psi,
    Omega,
    Lambda,
}

impl KernelQuantity {
    pub const ALL: [KernelQuantity; 3] = [KernelQuantity::Psi, KernelQuantity::Omega, KernelQuantity::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            KernelQuantity::Psi => "psi",
            KernelQuantity::Omega => "omega",
            KernelQuantity::Lambda => "lambda",
        }
    }
}

impl fmt::Display for KernelQuantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn random_points(rng: &mut ChaCha8Rng) -> Vec<f64> {
    let r = rng.random_range(1..=8);
    (0..r).map(|_| rng.random_range(-2.0..2.0)).collect()
}

/// Compares one random kernel expectation, contracted with random
/// coefficients, against a Monte-Carlo estimate over Gaussian activations.
pub fn kernel_oracle(quantity: KernelQuantity, case_seed: u64, n_draws: usize, fault: Fault) -> Result<McReport> {
    if n_draws < 2 {
        return Err(GpnError::InvalidArgument("at least two draws are needed".into()));
    }
    let mut rng = rng_for(case_seed, "kernel-case");
    let mut mc = rng_for(case_seed, "kernel-draws");
    let v = random_points(&mut rng);
    let lam = rng.random_range(0.5..2.0);
    let mu = rng.random_range(-2.0..2.0);
    let var: f64 = rng.random_range(0.05..2.0);
    let sd = var.sqrt();
    let mut acc = FeatureAcc::new(1);
    let analytic = match quantity {
        KernelQuantity::Psi => {
            let c: Vec<f64> = v.iter().map(|_| normal(&mut rng)).collect();
            let p = psi(mu, var, &v, lam);
            for _ in 0..n_draws {
                let a = mu + sd * normal(&mut mc);
                let s: f64 = v.iter().zip(&c).map(|(vr, cr)| cr * se_kernel(a, *vr, lam)).sum();
                acc.push(&[s]);
            }
            p.iter().zip(&c).map(|(p, c)| p * c).sum()
        }
        KernelQuantity::Omega => {
            let r = v.len();
            let c: Vec<f64> = (0..r * r).map(|_| normal(&mut rng)).collect();
            let om = omega_signed(mu, var, &v, lam, fault.omega_sign());
            let mut k = vec![0.0; r];
            for _ in 0..n_draws {
                let a = mu + sd * normal(&mut mc);
                for (kr, vr) in k.iter_mut().zip(&v) {
                    *kr = se_kernel(a, *vr, lam);
                }
                acc.push(&[quad_form(&c, &k, &k)]);
            }
            om.as_slice().iter().zip(&c).map(|(o, c)| o * c).sum()
        }
        KernelQuantity::Lambda => {
            let v_m = random_points(&mut rng);
            let lam_m = rng.random_range(0.5..2.0);
            let mu_m = rng.random_range(-2.0..2.0);
            let var_m: f64 = rng.random_range(0.05..2.0);
            let rho = rng.random_range(-0.9..0.9);
            let cov = rho * (var * var_m).sqrt();
            let (rn, rm) = (v.len(), v_m.len());
            let c: Vec<f64> = (0..rn * rm).map(|_| normal(&mut rng)).collect();
            let moments = PairMoments {
                mu_n: mu,
                mu_m,
                var_n: var,
                var_m,
                cov,
            };
            let lm = lambda_cross_signed(moments, &v, &v_m, lam, lam_m, fault.lambda_sign())?;
            let (b, rest) = (cov / sd, (var_m - cov * cov / var).max(0.0).sqrt());
            let (mut kn, mut km) = (vec![0.0; rn], vec![0.0; rm]);
            for _ in 0..n_draws {
                let (z1, z2) = (normal(&mut mc), normal(&mut mc));
                let an = mu + sd * z1;
                let am = mu_m + b * z1 + rest * z2;
                for (kr, vr) in kn.iter_mut().zip(&v) {
                    *kr = se_kernel(an, *vr, lam);
                }
                for (kt, vt) in km.iter_mut().zip(&v_m) {
                    *kt = se_kernel(am, *vt, lam_m);
                }
                acc.push(&[quad_form(&c, &kn, &km)]);
            }
            lm.as_slice().iter().zip(&c).map(|(l, c)| l * c).sum()
        }
    };
    Ok(McReport::new(
        format!("{quantity} case {case_seed:016x}"),
        analytic,
        acc.mean()[0],
        acc.stderr(&[1.0]),
        n_draws,
        case_seed,
    ))
}

/// `x^T C y` for a row-major `C`.
fn quad_form(c: &[f64], x: &[f64], y: &[f64]) -> f64 {
    let m = y.len();
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi * c[i * m..(i + 1) * m].iter().zip(y).map(|(a, b)| a * b).sum::<f64>())
        .sum()
}

/// `n_cases` independent kernel oracles for one quantity.
pub fn kernel_oracle_suite(
    quantity: KernelQuantity,
    n_cases: usize,
    n_draws: usize,
    seed: u64,
    fault: Fault,
) -> Result<Vec<McReport>> {
    (0..n_cases)
        .map(|i| kernel_oracle(quantity, derive_seed(seed, &format!("kernel-{quantity}-{i}")), n_draws, fault))
        .collect()
}

/// Per-unit constants `(beta, M)` of the response moments in dense form:
/// `mean = psi^T beta` and `E[F^2] = 1 - <M, Omega>`.
struct DenseUnit {
    v: Vec<f64>,
    lam: f64,
    noise_var: f64,
    beta: Vec<f64>,
    m: DenseMatrix,
}

fn dense_units(layer: &LayerParams, post: Option<&[UnitPosterior]>) -> Result<Vec<DenseUnit>> {
    (0..layer.n_out())
        .map(|j| {
            let o = layer.obs_for(j);
            let lam = layer.lambda[j];
            let r = o.len();
            let (beta, m) = match post {
                None => {
                    let mut a = kernel_matrix(&o.v, &o.v, lam);
                    for i in 0..r {
                        a[(i, i)] += o.s[i];
                    }
                    let kappa = jittered_cholesky(&a, DEFAULT_JITTER)?.0.inverse();
                    let beta = kappa.matmul(&DenseMatrix::column(&o.u))?.into_vec();
                    (beta, kappa)
                }
                Some(p) => {
                    let k = kernel_matrix(&o.v, &o.v, lam);
                    let kinv = jittered_cholesky(&k, DEFAULT_JITTER)?.0.inverse();
                    let beta = kinv.matmul(&DenseMatrix::column(&p[j].mu_u))?.into_vec();
                    let shrink = kinv.matmul(&p[j].sigma_u())?.matmul(&kinv)?;
                    (beta, kinv.sub(&shrink)?)
                }
            };
            let mut m = m;
            for a in 0..r {
                for b in 0..r {
                    m[(a, b)] -= beta[a] * beta[b];
                }
            }
            Ok(DenseUnit {
                v: o.v.clone(),
                lam,
                noise_var: layer.sigma[j] * layer.sigma[j],
                beta,
                m,
            })
        })
        .collect()
}

/// Response mean and covariance of a layer computed from the dense kernel
/// expectations, with an optional corrupted sign.
pub fn reference_layer_moments(
    layer: &LayerParams,
    a_mean: &[f64],
    a_cov: &DenseMatrix,
    post: Option<&[UnitPosterior]>,
    fault: Fault,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let units = dense_units(layer, post)?;
    let n = units.len();
    let mut mean = vec![0.0; n];
    let mut cov = DenseMatrix::zeros(n, n);
    for (j, u) in units.iter().enumerate() {
        let var = a_cov[(j, j)];
        let p = psi(a_mean[j], var, &u.v, u.lam);
        mean[j] = p.iter().zip(&u.beta).map(|(a, b)| a * b).sum();
        let om = omega_signed(a_mean[j], var, &u.v, u.lam, fault.omega_sign());
        let contraction: f64 = om.as_slice().iter().zip(u.m.as_slice()).map(|(a, b)| a * b).sum();
        cov[(j, j)] = 1.0 - contraction - mean[j] * mean[j] + u.noise_var;
    }
    for j in 0..n {
        for k in 0..j {
            let moments = PairMoments {
                mu_n: a_mean[j],
                mu_m: a_mean[k],
                var_n: a_cov[(j, j)],
                var_m: a_cov[(k, k)],
                cov: a_cov[(j, k)],
            };
            let (uj, uk) = (&units[j], &units[k]);
            let lm = lambda_cross_signed(moments, &uj.v, &uk.v, uj.lam, uk.lam, fault.lambda_sign())?;
            let cross = lm.matmul(&DenseMatrix::column(&uk.beta))?.into_vec();
            let e: f64 = uj.beta.iter().zip(&cross).map(|(a, b)| a * b).sum();
            cov[(j, k)] = e - mean[j] * mean[k];
            cov[(k, j)] = cov[(j, k)];
        }
    }
    Ok((mean, cov))
}

/// Response moments from the propagation engine in full-covariance mode.
fn engine_layer_moments(
    layer: &LayerParams,
    a_mean: &[f64],
    a_cov: &DenseMatrix,
    post: Option<&[UnitPosterior]>,
) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = a_mean.len();
    let state = MomentState {
        mode: Mode::FullCovariance,
        mean: DenseMatrix::from_vec(1, n, a_mean.to_vec())?,
        var: DenseMatrix::from_vec(1, n, a_cov.diagonal())?,
        cov: vec![a_cov.clone()],
    };
    let out = match post {
        None => propagate_response_ml(&state, layer)?,
        Some(p) => propagate_response_vb(&state, layer, p)?,
    };
    Ok((out.mean.row(0).to_vec(), out.sample_cov(0)))
}

/// Outcome of one layer oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMcReport {
    pub variational: bool,
    /// One report per mean, variance and covariance entry.
    pub entries: Vec<McReport>,
    /// Random contractions of the means, the variances and the
    /// off-diagonal covariances, which decide the pass flag.
    pub contractions: Vec<McReport>,
}

impl LayerMcReport {
    pub fn passed(&self) -> bool {
        self.contractions.iter().all(|r| r.pass)
    }
}

/// Samples activations `A ~ N(a_mean, a_cov)`, then unit outputs from the
/// exact conditional of each unit given its activation (after drawing the
/// inducing values from the posterior when one is supplied), and compares
/// the empirical output moments to the closed forms.
pub fn mc_layer_moments(
    layer: &LayerParams,
    a_mean: &[f64],
    a_cov: &DenseMatrix,
    post: Option<&[UnitPosterior]>,
    n_draws: usize,
    seed: u64,
    fault: Fault,
) -> Result<LayerMcReport> {
    if n_draws < MIN_LAYER_DRAWS {
        return Err(GpnError::InvalidArgument(format!(
            "the layer oracle needs at least {MIN_LAYER_DRAWS} draws, got {n_draws}"
        )));
    }
    let n = layer.n_out();
    if a_mean.len() != n || a_cov.rows() != n || a_cov.cols() != n {
        return Err(GpnError::DimensionMismatch(format!(
            "{n} units against activation moments of size {} and {}x{}",
            a_mean.len(),
            a_cov.rows(),
            a_cov.cols()
        )));
    }
    let (mean_a, cov_a) = match fault {
        Fault::None => engine_layer_moments(layer, a_mean, a_cov, post)?,
        _ => reference_layer_moments(layer, a_mean, a_cov, post, fault)?,
    };

    // Sampling constants of every unit.
    struct Sampler {
        v: Vec<f64>,
        lam: f64,
        noise_var: f64,
        /// Inverse of `K + S` (ML) or `K` (VB).
        kinv: DenseMatrix,
        /// `(K + S)^-1 u` for ML.
        alpha: Vec<f64>,
        mu_u: Vec<f64>,
        chol_u: Option<DenseMatrix>,
    }
    let mut samplers = Vec::with_capacity(n);
    for j in 0..n {
        let o = layer.obs_for(j);
        let lam = layer.lambda[j];
        let mut k = kernel_matrix(&o.v, &o.v, lam);
        if post.is_none() {
            for i in 0..o.len() {
                k[(i, i)] += o.s[i];
            }
        }
        let kinv = jittered_cholesky(&k, DEFAULT_JITTER)?.0.inverse();
        let alpha = kinv.matmul(&DenseMatrix::column(&o.u))?.into_vec();
        samplers.push(Sampler {
            v: o.v.clone(),
            lam,
            noise_var: layer.sigma[j] * layer.sigma[j],
            kinv,
            alpha,
            mu_u: post.map_or_else(Vec::new, |p| p[j].mu_u.clone()),
            chol_u: post.map(|p| p[j].chol_sigma_u.clone()),
        });
    }
    let l_a = psd_cholesky::<f64>(a_cov.as_slice(), n)?;
    let n_pairs = n * (n - 1) / 2;
    let dim = 2 * n + n_pairs;
    let mut acc = FeatureAcc::new(dim);
    let mut rng = rng_for(seed, "layer-draws");
    let (mut z, mut a, mut f, mut phi) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; dim]);
    for _ in 0..n_draws {
        for zi in z.iter_mut() {
            *zi = normal(&mut rng);
        }
        for i in 0..n {
            a[i] = a_mean[i] + (0..=i).map(|c| l_a[i * n + c] * z[c]).sum::<f64>();
        }
        for (j, s) in samplers.iter().enumerate() {
            let r = s.v.len();
            let k: Vec<f64> = s.v.iter().map(|vr| se_kernel(a[j], *vr, s.lam)).collect();
            let weights = match &s.chol_u {
                None => s.alpha.clone(),
                Some(l) => {
                    let e: Vec<f64> = (0..r).map(|_| normal(&mut rng)).collect();
                    let fu: Vec<f64> = (0..r)
                        .map(|i| s.mu_u[i] + (0..=i).map(|c| l[(i, c)] * e[c]).sum::<f64>())
                        .collect();
                    s.kinv.matmul(&DenseMatrix::column(&fu))?.into_vec()
                }
            };
            let m: f64 = k.iter().zip(&weights).map(|(a, b)| a * b).sum();
            let kk = quad_form(s.kinv.as_slice(), &k, &k);
            let var = (1.0 - kk).max(0.0) + s.noise_var;
            f[j] = m + var.sqrt() * normal(&mut rng);
        }
        phi[..n].copy_from_slice(&f);
        for j in 0..n {
            phi[n + j] = f[j] * f[j];
        }
        let mut p = 2 * n;
        for j in 0..n {
            for k in 0..j {
                phi[p] = f[j] * f[k];
                p += 1;
            }
        }
        acc.push(&phi);
    }
    let fm = acc.mean();
    let emp_mean = &fm[..n];
    let pair_index = |j: usize, k: usize| 2 * n + j * (j - 1) / 2 + k;
    let tag = if post.is_some() { "vb" } else { "ml" };
    let report = |name: String, analytic: f64, estimate: f64, g: &[f64]| {
        McReport::new(name, analytic, estimate, acc.stderr(g), n_draws, seed)
    };

    let mut entries = Vec::new();
    for j in 0..n {
        let mut g = vec![0.0; dim];
        g[j] = 1.0;
        entries.push(report(format!("{tag} mean[{j}]"), mean_a[j], emp_mean[j], &g));
    }
    for j in 0..n {
        let mut g = vec![0.0; dim];
        g[n + j] = 1.0;
        g[j] = -2.0 * emp_mean[j];
        let est = fm[n + j] - emp_mean[j] * emp_mean[j];
        entries.push(report(format!("{tag} var[{j}]"), cov_a[(j, j)], est, &g));
    }
    for j in 0..n {
        for k in 0..j {
            let mut g = vec![0.0; dim];
            g[pair_index(j, k)] = 1.0;
            g[j] -= emp_mean[k];
            g[k] -= emp_mean[j];
            let est = fm[pair_index(j, k)] - emp_mean[j] * emp_mean[k];
            entries.push(report(format!("{tag} cov[{j},{k}]"), cov_a[(j, k)], est, &g));
        }
    }

    let mut crng = rng_for(seed, "layer-contractions");
    let mut contractions = Vec::new();
    let c: Vec<f64> = (0..n).map(|_| normal(&mut crng)).collect();
    let mut g = vec![0.0; dim];
    g[..n].copy_from_slice(&c);
    let (an, est) = (0..n).fold((0.0, 0.0), |(a, e), j| (a + c[j] * mean_a[j], e + c[j] * emp_mean[j]));
    contractions.push(report(format!("{tag} c^T mean"), an, est, &g));

    let c: Vec<f64> = (0..n).map(|_| normal(&mut crng)).collect();
    let mut g = vec![0.0; dim];
    let (mut an, mut est) = (0.0, 0.0);
    for j in 0..n {
        g[n + j] = c[j];
        g[j] = -2.0 * c[j] * emp_mean[j];
        an += c[j] * cov_a[(j, j)];
        est += c[j] * (fm[n + j] - emp_mean[j] * emp_mean[j]);
    }
    contractions.push(report(format!("{tag} c^T var"), an, est, &g));

    if n > 1 {
        let mut g = vec![0.0; dim];
        let (mut an, mut est) = (0.0, 0.0);
        for j in 0..n {
            for k in 0..j {
                let d = normal(&mut crng);
                let p = pair_index(j, k);
                g[p] = d;
                g[j] -= d * emp_mean[k];
                g[k] -= d * emp_mean[j];
                an += d * cov_a[(j, k)];
                est += d * (fm[p] - emp_mean[j] * emp_mean[k]);
            }
        }
        contractions.push(report(format!("{tag} <D, offdiag cov>"), an, est, &g));
    }
    Ok(LayerMcReport {
        variational: post.is_some(),
        entries,
        contractions,
    })
}

/// A random single layer with Gaussian activation moments and a
/// perturbed conditional posterior.
#[derive(Clone, Debug)]
pub struct LayerCase {
    pub layer: LayerParams,
    pub a_mean: Vec<f64>,
    pub a_cov: DenseMatrix,
    pub posterior: Vec<UnitPosterior>,
}

/// Widths up to 6 units and up to 8 virtual observations per unit.
pub fn random_layer_case(seed: u64) -> Result<LayerCase> {
    let mut rng = rng_for(seed, "layer-case");
    let n = rng.random_range(1..=6);
    let r = rng.random_range(2..=8);
    let base = linspace(-2.0, 2.0, r);
    let mut obs = Vec::with_capacity(n);
    for _ in 0..n {
        let v: Vec<f64> = base.iter().map(|x| x + rng.random_range(-0.1..0.1)).collect();
        let u: Vec<f64> = (0..r).map(|_| normal(&mut rng)).collect();
        let s: Vec<f64> = (0..r).map(|_| rng.random_range(0.05..0.3)).collect();
        obs.push(VirtualObservations::new(v, u, s)?);
    }
    let layer = LayerParams {
        w: DenseMatrix::identity(n),
        lambda: (0..n).map(|_| rng.random_range(0.7..1.5)).collect(),
        sigma: (0..n).map(|_| rng.random_range(0.05..0.3)).collect(),
        obs,
        sharing: Sharing::None,
        freeze_v: true,
    };
    let a_mean: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
    let b = DenseMatrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-0.6..0.6)).collect())?;
    let a_cov = b.matmul(&b.transpose())?;
    let net = NetworkParams {
        layers: vec![layer.clone()],
        out_weights: None,
    };
    let mut posterior = VariationalPosterior::from_observations(&net)?.layers.remove(0);
    for p in &mut posterior {
        for m in &mut p.mu_u {
            *m += 0.3 * normal(&mut rng);
        }
        p.chol_sigma_u = p.chol_sigma_u.scale(1.3);
    }
    Ok(LayerCase {
        layer,
        a_mean,
        a_cov,
        posterior,
    })
}

/// Runs the layer oracle on `n_cases` random layers with both the
/// maximum-likelihood and the variational response. Returns the ML and VB
/// reports in that order for each case.
pub fn layer_oracle_suite(
    n_cases: usize,
    n_draws: usize,
    seed: u64,
    fault: Fault,
) -> Result<Vec<(LayerMcReport, LayerMcReport)>> {
    (0..n_cases)
        .map(|i| {
            let case_seed = derive_seed(seed, &format!("layer-{i}"));
            let c = random_layer_case(case_seed)?;
            let ml = mc_layer_moments(&c.layer, &c.a_mean, &c.a_cov, None, n_draws, case_seed, fault)?;
            let vb = mc_layer_moments(
                &c.layer,
                &c.a_mean,
                &c.a_cov,
                Some(&c.posterior),
                n_draws,
                case_seed,
                fault,
            )?;
            Ok((ml, vb))
        })
        .collect()
}

/// Largest deviation between the weighted sigma-point moments and the
/// input mean and covariance.
pub fn sigma_point_moment_error(mean: &[f64], cov: &DenseMatrix, kappa_u: f64) -> Result<f64> {
    let set = sigma_points(mean, cov, kappa_u)?;
    let c = mean.len();
    let mut m = vec![0.0; c];
    for (i, w) in set.weights.iter().enumerate() {
        for (k, mk) in m.iter_mut().enumerate() {
            *mk += w * set.points[(i, k)];
        }
    }
    let mut err = m.iter().zip(mean).fold(0.0f64, |e, (a, b)| e.max((a - b).abs()));
    for a in 0..c {
        for b in 0..c {
            let s: f64 = set
                .weights
                .iter()
                .enumerate()
                .map(|(i, w)| w * (set.points[(i, a)] - m[a]) * (set.points[(i, b)] - m[b]))
                .sum();
            err = err.max((s - cov[(a, b)]).abs());
        }
    }
    Ok(err)
}

/// Compares the unscented cross-entropy of `N(mean, cov)` logits against a
/// Monte-Carlo estimate of `E[-log softmax(O)_target]`.
pub fn mc_unscented_loss(
    mean: &[f64],
    cov: &DenseMatrix,
    target: usize,
    kappa_u: Option<f64>,
    n_draws: usize,
    seed: u64,
) -> Result<McReport> {
    let c = mean.len();
    if target >= c || n_draws < 2 {
        return Err(GpnError::InvalidArgument(format!(
            "target {target} of {c} classes with {n_draws} draws"
        )));
    }
    let state = MomentState {
        mode: Mode::FullCovariance,
        mean: DenseMatrix::from_vec(1, c, mean.to_vec())?,
        var: DenseMatrix::from_vec(1, c, cov.diagonal())?,
        cov: vec![cov.clone()],
    };
    let mut onehot = DenseMatrix::zeros(1, c);
    onehot[(0, target)] = 1.0;
    let analytic = classification_loss(&state, &DenseMatrix::identity(c), &onehot, kappa_u)?;
    let l = psd_cholesky::<f64>(cov.as_slice(), c)?;
    let mut rng = rng_for(seed, "unscented-draws");
    let mut acc = FeatureAcc::new(1);
    let (mut z, mut o) = (vec![0.0; c], vec![0.0; c]);
    for _ in 0..n_draws {
        for zi in z.iter_mut() {
            *zi = normal(&mut rng);
        }
        for i in 0..c {
            o[i] = mean[i] + (0..=i).map(|k| l[i * c + k] * z[k]).sum::<f64>();
        }
        acc.push(&[-softmax(&o)[target].ln()]);
    }
    Ok(McReport::new(
        format!("unscented cross-entropy {seed:016x}"),
        analytic,
        acc.mean()[0],
        acc.stderr(&[1.0]),
        n_draws,
        seed,
    ))
}

/// A random 3-class logit distribution and target for the unscented oracle.
pub fn random_logit_case(seed: u64) -> Result<(Vec<f64>, DenseMatrix, usize)> {
    let mut rng = rng_for(seed, "logit-case");
    let c = 3;
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-2.0..2.0)).collect();
    let b = DenseMatrix::from_vec(c, c, (0..c * c).map(|_| rng.random_range(-0.5..0.5)).collect())?;
    let cov = b.matmul(&b.transpose())?;
    Ok((mean, cov, rng.random_range(0..c)))
}

/// Grid and factor shared by all sampled activation functions of the
/// central-limit experiment.
struct GpSampler {
    grid: Vec<f64>,
    chol: DenseMatrix,
}

impl GpSampler {
    fn new() -> Result<Self> {
        let grid = linspace(-5.0, 5.0, 201);
        let k = kernel_matrix(&grid, &grid, 1.0);
        let (f, _) = jittered_cholesky(&k, DEFAULT_JITTER)?;
        Ok(GpSampler {
            grid,
            chol: f.lower().clone(),
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let n = self.grid.len();
        let z: Vec<f64> = (0..n).map(|_| normal(rng)).collect();
        (0..n).map(|i| (0..=i).map(|k| self.chol[(i, k)] * z[k]).sum()).collect()
    }

    /// Linear interpolation of grid values, constant beyond the grid.
    fn eval(&self, values: &[f64], a: f64) -> f64 {
        let (lo, hi) = (self.grid[0], self.grid[self.grid.len() - 1]);
        if a <= lo {
            return values[0];
        }
        if a >= hi {
            return values[values.len() - 1];
        }
        let step = (hi - lo) / (self.grid.len() - 1) as f64;
        let pos = (a - lo) / step;
        let i = (pos.floor() as usize).min(self.grid.len() - 2);
        let t = pos - i as f64;
        values[i] * (1.0 - t) + values[i + 1] * t
    }
}

/// Kolmogorov-Smirnov distance between the empirical distribution of the
/// samples and the normal distribution with their mean and variance.
pub fn ks_to_fitted_normal(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 0.0;
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    if sd == 0.0 {
        return 1.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let cdf = 0.5 * (1.0 + statrs::function::erf::erf((x - mean) / (sd * std::f64::consts::SQRT_2)));
            (cdf - i as f64 / n as f64).max((i + 1) as f64 / n as f64 - cdf)
        })
        .fold(0.0, f64::max)
}

/// Central-limit result for one width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CltResult {
    pub width: usize,
    pub ks: f64,
    pub n_draws: usize,
    pub seed: u64,
}

/// Input dimension of the central-limit construction.
pub const CLT_INPUT_DIM: usize = 3;

/// For each width, builds a three-layer construction with that many units
/// in layers 1 and 2 and one unit in layer 3, with standard-normal weights
/// and activation functions sampled from a zero-mean unit-lengthscale GP.
/// Draws of the layer-1 outputs are propagated through layer 2 to the
/// layer-3 activation, whose distance to its best-fit normal is reported.
pub fn clt_experiment(widths: &[usize], seed: u64, n_draws: usize) -> Result<Vec<CltResult>> {
    if widths.len() < 2 || widths.contains(&0) {
        return Err(GpnError::InvalidArgument(format!(
            "the central-limit experiment needs at least two positive widths, got {widths:?}"
        )));
    }
    if n_draws < 2 {
        return Err(GpnError::InvalidArgument("at least two draws are needed".into()));
    }
    let gp = GpSampler::new()?;
    widths
        .iter()
        .map(|&w| {
            let mut rng = rng_for(seed, &format!("clt-{w}"));
            let x0: Vec<f64> = (0..CLT_INPUT_DIM).map(|_| normal(&mut rng)).collect();
            let w1: Vec<f64> = (0..CLT_INPUT_DIM * w).map(|_| normal(&mut rng)).collect();
            let f1: Vec<Vec<f64>> = (0..w).map(|_| gp.sample(&mut rng)).collect();
            let w2: Vec<f64> = (0..w * w).map(|_| normal(&mut rng)).collect();
            let f2: Vec<Vec<f64>> = (0..w).map(|_| gp.sample(&mut rng)).collect();
            let w3: Vec<f64> = (0..w).map(|_| normal(&mut rng)).collect();
            // Layer-1 outputs are independent normals around the sampled
            // activation functions with the unit prior variance.
            let x1_mean: Vec<f64> = (0..w)
                .map(|j| {
                    let a: f64 = (0..CLT_INPUT_DIM).map(|i| x0[i] * w1[i * w + j]).sum();
                    gp.eval(&f1[j], a)
                })
                .collect();
            let mut draws = Vec::with_capacity(n_draws);
            let mut x1 = vec![0.0; w];
            for _ in 0..n_draws {
                for (x, m) in x1.iter_mut().zip(&x1_mean) {
                    *x = m + normal(&mut rng);
                }
                let a3: f64 = (0..w)
                    .map(|j| {
                        let a2: f64 = (0..w).map(|i| x1[i] * w2[i * w + j]).sum();
                        gp.eval(&f2[j], a2) * w3[j]
                    })
                    .sum();
                draws.push(a3);
            }
            Ok(CltResult {
                width: w,
                ks: ks_to_fitted_normal(&draws),
                n_draws: draws.len(),
                seed,
            })
        })
        .collect()
}

/// Fit quality of one activation function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub r_count: usize,
    pub function: ActivationTarget,
    pub max_abs: f64,
    pub rms: f64,
}

/// Observation variance used for activation fits.
pub const FIT_NOISE: f64 = 1e-4;

/// Fits every function with every observation count on `[-2, 2]` and
/// measures the predictive mean against the function on a 101-point grid.
pub fn activation_fit_experiment(r_counts: &[usize], functions: &[ActivationTarget]) -> Result<Vec<FitRow>> {
    let grid = linspace(-2.0, 2.0, 101);
    let mut rows = Vec::new();
    for &r in r_counts {
        for &f in functions {
            let obs = fit_activation(f, r, [-2.0, 2.0], FIT_NOISE)?;
            let (mean, _) = sparse_predict(&grid, &obs, 1.0, 0.0)?;
            let errs: Vec<f64> = grid.iter().zip(&mean).map(|(a, m)| (m - f.eval(*a)).abs()).collect();
            rows.push(FitRow {
                r_count: r,
                function: f,
                max_abs: errs.iter().copied().fold(0.0, f64::max),
                rms: (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt(),
            });
        }
    }
    Ok(rows)
}

/// One finite-difference case of the gradient suite.
#[derive(Clone, Debug)]
pub struct GradientCase {
    pub seed: u64,
    pub objective: Objective,
    pub mode: Mode,
    pub shape: Vec<usize>,
    pub r_count: usize,
    pub report: FdReport,
}

/// Step of the gradient suite.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance of the gradient suite.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Finite-difference check of a random small network for every objective
/// and propagation mode. Lengthscales are drawn from `[0.5, 1]` and
/// regression targets lie close to the network output so that the loss is
/// evaluated in a well-conditioned regime.
pub fn gradient_cases(seed: u64, h: f64, tolerance: f64) -> Result<Vec<GradientCase>> {
    let mut rng = rng_for(seed, "gradient-case");
    let shape = vec![rng.random_range(1..4), rng.random_range(1..7), rng.random_range(1..4)];
    let r = rng.random_range(3..9);
    let n_classes = 3;
    let s = 5;
    let d = shape[0];
    let x = DenseMatrix::from_vec(s, d, (0..s * d).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let noise: Vec<f64> = (0..s * shape[2]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut out = Vec::new();
    for objective in Objective::ALL {
        for mode in Mode::ALL {
            let mut cfg = InitConfig::new(shape.clone());
            cfg.r_count = r;
            cfg.target_init = TargetInit::RandomNormal;
            cfg.seed = seed;
            cfg.freeze_v = false;
            if objective.is_classification() {
                cfg.n_classes = Some(n_classes);
            }
            let mut net = init_network(&cfg)?;
            let mut lrng = rng_for(seed, "gradient-lengthscales");
            for l in &mut net.layers {
                for lam in &mut l.lambda {
                    *lam = lrng.random_range(0.5..1.0);
                }
            }
            let post = if objective.is_variational() {
                Some(VariationalPosterior::from_observations(&net)?)
            } else {
                None
            };
            let t = if objective.is_classification() {
                let mut t = DenseMatrix::zeros(s, n_classes);
                for i in 0..s {
                    t[(i, i % n_classes)] = 1.0;
                }
                t
            } else {
                let st = forward(&net, &x, Mode::MeanOnly, None)?;
                let vals = st.mean.as_slice().iter().zip(&noise).map(|(m, e)| m + 0.1 * e).collect();
                DenseMatrix::from_vec(s, shape[2], vals)?
            };
            let mut spec = ObjectiveSpec::new(objective, mode);
            spec.n_train = 50;
            let report = finite_diff_check(&net, post.as_ref(), &x, &t, &spec, h, tolerance, seed)?;
            out.push(GradientCase {
                seed,
                objective,
                mode,
                shape: shape.clone(),
                r_count: r,
                report,
            });
        }
    }
    Ok(out)
}

/// Mean wall time of one gradient evaluation per propagation mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeRow {
    pub mode: Mode,
    pub ms_per_iter: f64,
}

/// Times `loss_and_grad` on identical networks of `width`-unit layers in
/// every propagation mode, keeping the fastest of `reps` repetitions.
pub fn runtime_ordering(width: usize, batch: usize, reps: usize, seed: u64) -> Result<Vec<RuntimeRow>> {
    let mut cfg = InitConfig::new(vec![width, width, width]);
    cfg.seed = seed;
    let net = init_network(&cfg)?;
    let mut rng = rng_for(seed, "runtime-data");
    let x = DenseMatrix::from_vec(batch, width, (0..batch * width).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let t = DenseMatrix::from_vec(batch, width, (0..batch * width).map(|_| normal(&mut rng)).collect())?;
    Mode::ALL
        .iter()
        .map(|&mode| {
            let spec = ObjectiveSpec::new(Objective::MlRegression, mode);
            let mut best = f64::INFINITY;
            for _ in 0..reps.max(1) {
                let start = Instant::now();
                loss_and_grad(&net, None, &x, &t, &spec)?;
                best = best.min(start.elapsed().as_secs_f64() * 1e3);
            }
            Ok(RuntimeRow { mode, ms_per_iter: best })
        })
        .collect()
}

/// Benchmark data sets with their canonical file layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchDataset {
    Letter,
    Adult,
    Connect4,
    Mnist,
}

impl BenchDataset {
    pub const ALL: [BenchDataset; 4] = [
        BenchDataset::Letter,
        BenchDataset::Adult,
        BenchDataset::Connect4,
        BenchDataset::Mnist,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BenchDataset::Letter => "letter",
            BenchDataset::Adult => "adult",
            BenchDataset::Connect4 => "connect-4",
            BenchDataset::Mnist => "mnist",
        }
    }

    /// Files expected in the data directory.
    pub fn files(self) -> &'static [&'static str] {
        match self {
            BenchDataset::Letter => &["letter-recognition.data"],
            BenchDataset::Adult => &["adult.data", "adult.test"],
            BenchDataset::Connect4 => &["connect-4.data"],
            BenchDataset::Mnist => &[
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ],
        }
    }

    /// Default architecture, with the class count last.
    pub fn default_arch(self) -> &'static str {
        match self {
            BenchDataset::Letter => "16x30x15x26",
            BenchDataset::Adult => "104x30x15x2",
            BenchDataset::Connect4 => "126x30x15x3",
            BenchDataset::Mnist => "784x30x15x10",
        }
    }

    /// Loads the data set from `dir`.
    pub fn load(self, dir: &Path) -> Result<Dataset> {
        let path = |i: usize| -> Result<PathBuf> {
            let p = dir.join(self.files()[i]);
            if p.is_file() {
                Ok(p)
            } else {
                Err(GpnError::DatasetMissing(p.display().to_string()))
            }
        };
        match self {
            BenchDataset::Letter => {
                let mut columns = vec![ColumnKind::Continuous; 17];
                columns[0] = ColumnKind::Categorical;
                let mut schema = Schema::new(columns, 0, TargetKind::Classification);
                schema.test_tail = 4000;
                load_delimited(&path(0)?, &schema)
            }
            BenchDataset::Adult => {
                use ColumnKind::{Categorical as K, Continuous as C};
                let columns = vec![C, K, C, K, C, K, K, K, K, K, C, C, C, K, K];
                let mut schema = Schema::new(columns, 14, TargetKind::Classification);
                schema.target_strip_suffix = ".".into();
                load_delimited_pair(&path(0)?, &path(1)?, &schema)
            }
            BenchDataset::Connect4 => {
                let columns = vec![ColumnKind::Categorical; 43];
                let schema = Schema::new(columns, 42, TargetKind::Classification);
                let mut ds = load_delimited(&path(0)?, &schema)?;
                // No canonical test split exists; a fixed random fifth is held out.
                let mut idx: Vec<usize> = (0..ds.len()).collect();
                idx.shuffle(&mut rng_for(0, "connect-4-test"));
                for &i in &idx[..ds.len() / 5] {
                    ds.split[i] = Split::Test;
                }
                Ok(ds)
            }
            BenchDataset::Mnist => {
                let train = load_idx_images(&path(0)?, &path(1)?)?;
                let test = load_idx_images(&path(2)?, &path(3)?)?;
                with_test_rows(train, test)
            }
        }
    }
}

impl FromStr for BenchDataset {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "letter" | "letter-recognition" => Ok(BenchDataset::Letter),
            "adult" => Ok(BenchDataset::Adult),
            "connect-4" | "connect4" => Ok(BenchDataset::Connect4),
            "mnist" => Ok(BenchDataset::Mnist),
            _ => Err(GpnError::InvalidArgument(format!(
                "unknown dataset '{s}' (expected letter, adult, connect-4 or mnist)"
            ))),
        }
    }
}

/// One benchmark run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset: String,
    pub variant: String,
    pub seed: u64,
    pub train_error: f64,
    pub val_error: f64,
    pub test_error: f64,
    pub iterations: usize,
    pub ms_per_iter: f64,
    /// Rough working-set estimate: parameters with their gradient and
    /// optimizer moments plus the per-batch moment storage.
    pub peak_mem_bytes: u64,
}

/// Mean and standard error of the test error over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub rows: Vec<BenchRow>,
    pub mean_test_error: f64,
    pub stderr_test_error: f64,
    /// Trained network of every seed, in the order of `rows`.
    #[serde(skip)]
    pub networks: Vec<NetworkParams>,
}

fn memory_estimate(net: &NetworkParams, n_params: usize, batch: usize, mode: Mode) -> u64 {
    let per_sample: usize = net
        .layers
        .iter()
        .map(|l| {
            let n = l.n_out();
            match mode {
                Mode::MeanOnly => n,
                Mode::MeanVariance => 2 * n,
                Mode::FullCovariance => 2 * n + n * n,
            }
        })
        .sum();
    (8 * (4 * n_params + batch * per_sample)) as u64
}

/// Trains one network per seed and reports train, validation and test
/// misclassification. `init` supplies everything but the seed; 10 % of the
/// training rows are held out for validation.
pub fn benchmark_run(
    dataset: &Dataset,
    name: &str,
    variant: &str,
    init: &InitConfig,
    train_cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<BenchSummary> {
    let mut rows = Vec::with_capacity(seeds.len());
    let mut networks = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let ds = split(dataset, 0.1, seed)?;
        let mut icfg = init.clone();
        icfg.seed = seed;
        let mut net = init_network(&icfg)?;
        let mut post = if train_cfg.objective.is_variational() {
            Some(VariationalPosterior::from_observations(&net)?)
        } else {
            None
        };
        let (x_train, t_train) = ds.subset(Split::Train);
        let (x_val, t_val) = ds.subset(Split::Val);
        let (x_test, t_test) = ds.subset(Split::Test);
        let data = TrainData {
            x_train,
            t_train,
            x_val,
            t_val,
        };
        let mut cfg = train_cfg.clone();
        cfg.seed = seed;
        let start = Instant::now();
        let outcome = train(&mut net, post.as_mut(), &data, &cfg)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        let spec = cfg.spec(data.x_train.rows());
        let err = |x: &DenseMatrix, t: &DenseMatrix| -> Result<f64> {
            if x.rows() == 0 {
                return Ok(f64::NAN);
            }
            Ok(evaluate(&net, post.as_ref(), x, t, &spec)?.1)
        };
        let n_params = net.trainable_vector(post.as_ref()).len();
        rows.push(BenchRow {
            dataset: name.to_string(),
            variant: variant.to_string(),
            seed,
            train_error: err(&data.x_train, &data.t_train)?,
            val_error: err(&data.x_val, &data.t_val)?,
            test_error: err(&x_test, &t_test)?,
            iterations: outcome.iterations,
            ms_per_iter: elapsed / outcome.iterations.max(1) as f64,
            peak_mem_bytes: memory_estimate(&net, n_params, cfg.batch_size, cfg.mode),
        });
        networks.push(net);
    }
    let errs: Vec<f64> = rows.iter().map(|r| r.test_error).collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let stderr = if errs.len() > 1 {
        (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
    } else {
        0.0
    };
    Ok(BenchSummary {
        rows,
        mean_test_error: mean,
        stderr_test_error: stderr,
        networks,
    })
}

/// Writes benchmark rows followed by a summary row.
pub fn write_bench_csv(path: &Path, summary: &BenchSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "dataset",
        "variant",
        "seed",
        "train_error",
        "val_error",
        "test_error",
        "iterations",
        "ms_per_iter",
        "peak_mem_bytes",
    ])?;
    for r in &summary.rows {
        w.write_record([
            r.dataset.clone(),
            r.variant.clone(),
            r.seed.to_string(),
            r.train_error.to_string(),
            r.val_error.to_string(),
            r.test_error.to_string(),
            r.iterations.to_string(),
            r.ms_per_iter.to_string(),
            r.peak_mem_bytes.to_string(),
        ])?;
    }
    let (dataset, variant) = summary
        .rows
        .first()
        .map_or((String::new(), String::new()), |r| (r.dataset.clone(), r.variant.clone()));
    w.write_record([
        dataset,
        variant,
        "summary".to_string(),
        String::new(),
        String::new(),
        format!("{}±{}", summary.mean_test_error, summary.stderr_test_error),
        String::new(),
        String::new(),
        String::new(),
    ])?;
    w.flush()?;
    Ok(())
}

/// Writes one CSV per unit with the predictive mean and standard deviation
/// of its activation function on `grid_points` points of `range`, followed
/// by the unit's inducing points and targets.
pub fn export_activations(
    net: &NetworkParams,
    dir: &Path,
    range: [f64; 2],
    grid_points: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let grid = linspace(range[0], range[1], grid_points.max(2));
    let mut paths = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        for j in 0..layer.n_out() {
            let obs = layer.obs_for(j);
            let noise = layer.sigma[j] * layer.sigma[j];
            let (mean, cov) = sparse_predict(&grid, obs, layer.lambda[j], noise)?;
            let path = dir.join(format!("layer{}_unit{}.csv", l + 1, j));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["kind", "a", "mean", "std"])?;
            for (i, a) in grid.iter().enumerate() {
                w.write_record([
                    "grid".to_string(),
                    a.to_string(),
                    mean[i].to_string(),
                    cov[(i, i)].max(0.0).sqrt().to_string(),
                ])?;
            }
            for (v, u) in obs.v.iter().zip(&obs.u) {
                w.write_record(["inducing".to_string(), v.to_string(), u.to_string(), String::new()])?;
            }
            w.flush()?;
            paths.push(path);
        }
    }
    Ok(paths)
}
