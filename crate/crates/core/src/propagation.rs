//! Scalar-generic moment propagation engine.
//!
//! The public network API in [`crate::network`] and the gradient code in
//! [`crate::training`] share this implementation. Parameters are first lifted
//! into [`ParamTensors`] (positivity transforms applied), then condensed into
//! per-unit constants ([`NetConsts`]: `beta`, `M`, transposed weights) that
//! do not depend on the sample. Each sample is then pushed through
//! [`sample_forward`] independently.

use std::fmt;

use crate::autodiff::{inverse_softplus, softplus_f64, Real};
use crate::error::{GpnError, Result};
use crate::linalg::{
    chol_inverse_generic, chol_solve_vec_generic, jittered_cholesky_generic, DEFAULT_JITTER,
};
use crate::network::{Mode, NetworkParams, Sharing, VariationalPosterior};

/// Variances below this magnitude are clamped to zero silently.
pub(crate) const VAR_WARN: f64 = 1e-8;
/// Variances more negative than this abort propagation.
pub(crate) const VAR_FAIL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Transform {
    Identity,
    Softplus,
}

impl Transform {
    pub(crate) fn forward(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Softplus => softplus_f64(x),
        }
    }

    pub(crate) fn inverse(self, y: f64) -> f64 {
        match self {
            Transform::Identity => y,
            Transform::Softplus => inverse_softplus(y),
        }
    }

    pub(crate) fn apply<T: Real>(self, x: T) -> T {
        match self {
            Transform::Identity => x,
            Transform::Softplus => x.softplus(),
        }
    }
}

/// Location of one scalar parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight { layer: usize, row: usize, col: usize },
    Lengthscale { layer: usize, unit: usize },
    NoiseStd { layer: usize, unit: usize },
    InducingPoint { layer: usize, obs: usize, r: usize },
    Target { layer: usize, obs: usize, r: usize },
    ObsVariance { layer: usize, obs: usize, r: usize },
    HeadWeight { row: usize, col: usize },
    PosteriorMean { layer: usize, unit: usize, r: usize },
    PosteriorChol { layer: usize, unit: usize, row: usize, col: usize },
}

impl fmt::Display for ParamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ParamKind::Weight { layer, row, col } => write!(f, "layer{layer}.w[{row},{col}]"),
            ParamKind::Lengthscale { layer, unit } => write!(f, "layer{layer}.lambda[{unit}]"),
            ParamKind::NoiseStd { layer, unit } => write!(f, "layer{layer}.sigma[{unit}]"),
            ParamKind::InducingPoint { layer, obs, r } => write!(f, "layer{layer}.obs{obs}.v[{r}]"),
            ParamKind::Target { layer, obs, r } => write!(f, "layer{layer}.obs{obs}.u[{r}]"),
            ParamKind::ObsVariance { layer, obs, r } => write!(f, "layer{layer}.obs{obs}.s[{r}]"),
            ParamKind::HeadWeight { row, col } => write!(f, "head.w[{row},{col}]"),
            ParamKind::PosteriorMean { layer, unit, r } => {
                write!(f, "layer{layer}.post{unit}.mu[{r}]")
            }
            ParamKind::PosteriorChol {
                layer,
                unit,
                row,
                col,
            } => write!(f, "layer{layer}.post{unit}.chol[{row},{col}]"),
        }
    }
}

/// One scalar parameter as seen by a traversal.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Slot {
    /// Constrained (stored) value.
    pub value: f64,
    pub transform: Transform,
    pub trainable: bool,
    pub kind: ParamKind,
}

pub(crate) struct ObsTensors<T> {
    pub v: Vec<T>,
    pub u: Vec<T>,
    pub s: Vec<T>,
}

pub(crate) struct LayerTensors<T> {
    pub n_in: usize,
    pub n_out: usize,
    pub w: Vec<T>,
    pub lam: Vec<T>,
    pub sigma: Vec<T>,
    pub obs: Vec<ObsTensors<T>>,
    pub shared: bool,
}

impl<T> LayerTensors<T> {
    pub fn obs_for(&self, unit: usize) -> &ObsTensors<T> {
        if self.shared {
            &self.obs[0]
        } else {
            &self.obs[unit]
        }
    }
}

pub(crate) struct PostTensors<T> {
    pub mu: Vec<T>,
    /// Row-major lower-triangular factor.
    pub chol: Vec<T>,
}

pub(crate) struct HeadTensors<T> {
    pub n_in: usize,
    pub n_classes: usize,
    pub w: Vec<T>,
}

/// All parameters in constrained form, generic over the scalar type.
pub(crate) struct ParamTensors<T> {
    pub layers: Vec<LayerTensors<T>>,
    pub head: Option<HeadTensors<T>>,
    pub post: Option<Vec<Vec<PostTensors<T>>>>,
}

/// Visits every parameter in the canonical order and collects the values
/// returned by `f`. The order of trainable slots defines the layout of the
/// flat parameter vector.
///
/// With a posterior present the virtual-observation targets and variances
/// are held fixed (the posterior replaces them).
pub(crate) fn lift_params<T: Real, F: FnMut(Slot) -> T>(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    f: &mut F,
) -> ParamTensors<T> {
    let vb = post.is_some();
    let mut layers = Vec::with_capacity(net.layers.len());
    for (li, layer) in net.layers.iter().enumerate() {
        let (n_in, n_out) = (layer.w.rows(), layer.w.cols());
        let mut w = Vec::with_capacity(n_in * n_out);
        for row in 0..n_in {
            for col in 0..n_out {
                w.push(f(Slot {
                    value: layer.w[(row, col)],
                    transform: Transform::Identity,
                    trainable: true,
                    kind: ParamKind::Weight { layer: li, row, col },
                }));
            }
        }
        let lam = (0..n_out)
            .map(|unit| {
                f(Slot {
                    value: layer.lambda[unit],
                    transform: Transform::Softplus,
                    trainable: true,
                    kind: ParamKind::Lengthscale { layer: li, unit },
                })
            })
            .collect();
        let sigma = (0..n_out)
            .map(|unit| {
                f(Slot {
                    value: layer.sigma[unit],
                    transform: Transform::Softplus,
                    trainable: true,
                    kind: ParamKind::NoiseStd { layer: li, unit },
                })
            })
            .collect();
        let mut obs = Vec::with_capacity(layer.obs.len());
        for (oi, o) in layer.obs.iter().enumerate() {
            let v = (0..o.len())
                .map(|r| {
                    f(Slot {
                        value: o.v[r],
                        transform: Transform::Identity,
                        trainable: !layer.freeze_v,
                        kind: ParamKind::InducingPoint { layer: li, obs: oi, r },
                    })
                })
                .collect();
            let u = (0..o.len())
                .map(|r| {
                    f(Slot {
                        value: o.u[r],
                        transform: Transform::Identity,
                        trainable: !vb,
                        kind: ParamKind::Target { layer: li, obs: oi, r },
                    })
                })
                .collect();
            let s = (0..o.len())
                .map(|r| {
                    f(Slot {
                        value: o.s[r],
                        transform: Transform::Softplus,
                        trainable: !vb,
                        kind: ParamKind::ObsVariance { layer: li, obs: oi, r },
                    })
                })
                .collect();
            obs.push(ObsTensors { v, u, s });
        }
        layers.push(LayerTensors {
            n_in,
            n_out,
            w,
            lam,
            sigma,
            obs,
            shared: layer.sharing == Sharing::Layer,
        });
    }
    let head = net.out_weights.as_ref().map(|hw| {
        let mut w = Vec::with_capacity(hw.rows() * hw.cols());
        for row in 0..hw.rows() {
            for col in 0..hw.cols() {
                w.push(f(Slot {
                    value: hw[(row, col)],
                    transform: Transform::Identity,
                    trainable: true,
                    kind: ParamKind::HeadWeight { row, col },
                }));
            }
        }
        HeadTensors {
            n_in: hw.rows(),
            n_classes: hw.cols(),
            w,
        }
    });
    let post = post.map(|p| {
        p.layers
            .iter()
            .enumerate()
            .map(|(li, units)| {
                units
                    .iter()
                    .enumerate()
                    .map(|(unit, up)| {
                        let r = up.mu_u.len();
                        let mu = (0..r)
                            .map(|k| {
                                f(Slot {
                                    value: up.mu_u[k],
                                    transform: Transform::Identity,
                                    trainable: true,
                                    kind: ParamKind::PosteriorMean { layer: li, unit, r: k },
                                })
                            })
                            .collect();
                        let mut chol = vec![T::cst(0.0); r * r];
                        for row in 0..r {
                            for col in 0..=row {
                                chol[row * r + col] = f(Slot {
                                    value: up.chol_sigma_u[(row, col)],
                                    transform: if row == col {
                                        Transform::Softplus
                                    } else {
                                        Transform::Identity
                                    },
                                    trainable: true,
                                    kind: ParamKind::PosteriorChol {
                                        layer: li,
                                        unit,
                                        row,
                                        col,
                                    },
                                });
                            }
                        }
                        PostTensors { mu, chol }
                    })
                    .collect()
            })
            .collect()
    });
    ParamTensors { layers, head, post }
}

/// Copies constrained values back into the parameter structs.
pub(crate) fn write_back(
    p: &ParamTensors<f64>,
    net: &mut NetworkParams,
    post: Option<&mut VariationalPosterior>,
) {
    for (lt, layer) in p.layers.iter().zip(net.layers.iter_mut()) {
        layer.w.as_mut_slice().copy_from_slice(&lt.w);
        layer.lambda.copy_from_slice(&lt.lam);
        layer.sigma.copy_from_slice(&lt.sigma);
        for (ot, o) in lt.obs.iter().zip(layer.obs.iter_mut()) {
            o.v.copy_from_slice(&ot.v);
            o.u.copy_from_slice(&ot.u);
            o.s.copy_from_slice(&ot.s);
        }
    }
    if let (Some(ht), Some(hw)) = (&p.head, net.out_weights.as_mut()) {
        hw.as_mut_slice().copy_from_slice(&ht.w);
    }
    if let (Some(pt), Some(vp)) = (&p.post, post) {
        for (lt, lp) in pt.iter().zip(vp.layers.iter_mut()) {
            for (ut, up) in lt.iter().zip(lp.iter_mut()) {
                up.mu_u.copy_from_slice(&ut.mu);
                up.chol_sigma_u.as_mut_slice().copy_from_slice(&ut.chol);
            }
        }
    }
}

/// Sample-independent quantities of one unit.
///
/// The response mean is `psi^T beta` and the second moment is
/// `1 - tr(M Omega)`, where `M = kappa - beta beta^T` for maximum likelihood
/// and `M = K^-1 - K^-1 Sigma K^-1 - beta beta^T` for the variational
/// posterior.
#[derive(Clone, Debug)]
pub(crate) struct UnitConsts<T> {
    pub lam: T,
    pub noise_var: T,
    pub v: Vec<T>,
    pub beta: Vec<T>,
    /// Row-major `R x R`; empty in mean-only mode.
    pub m: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct LayerConsts<T> {
    pub n_in: usize,
    pub n_out: usize,
    /// Transposed weights, `n_out x n_in`.
    pub wt: Vec<T>,
    /// Elementwise squares of `wt`; only filled in mean-variance mode.
    pub wsq_t: Vec<T>,
    pub units: Vec<UnitConsts<T>>,
}

#[derive(Clone, Debug)]
pub(crate) struct HeadConsts<T> {
    pub n_in: usize,
    pub n_classes: usize,
    /// Transposed head weights, `n_classes x n_in`.
    pub wt: Vec<T>,
    pub wsq_t: Vec<T>,
}

#[derive(Clone, Debug)]
pub(crate) struct NetConsts<T> {
    pub mode: Mode,
    pub layers: Vec<LayerConsts<T>>,
    pub head: Option<HeadConsts<T>>,
}

impl<T: Real> NetConsts<T> {
    /// Rebuilds the constants with every scalar passed through `f`, visiting
    /// them in a fixed order.
    pub fn map<U: Real>(&self, f: &mut impl FnMut(T) -> U) -> NetConsts<U> {
        let layers = self
            .layers
            .iter()
            .map(|l| LayerConsts {
                n_in: l.n_in,
                n_out: l.n_out,
                wt: vmap(&l.wt, f),
                wsq_t: vmap(&l.wsq_t, f),
                units: l
                    .units
                    .iter()
                    .map(|u| UnitConsts {
                        lam: f(u.lam),
                        noise_var: f(u.noise_var),
                        v: vmap(&u.v, f),
                        beta: vmap(&u.beta, f),
                        m: vmap(&u.m, f),
                    })
                    .collect(),
            })
            .collect();
        let head = self.head.as_ref().map(|h| HeadConsts {
            n_in: h.n_in,
            n_classes: h.n_classes,
            wt: vmap(&h.wt, f),
            wsq_t: vmap(&h.wsq_t, f),
        });
        NetConsts {
            mode: self.mode,
            layers,
            head,
        }
    }
}

fn vmap<T: Copy, U>(xs: &[T], f: &mut impl FnMut(T) -> U) -> Vec<U> {
    xs.iter().map(|x| f(*x)).collect()
}

/// `K(v, v)` for the SE kernel, row-major.
pub(crate) fn kernel_matrix_generic<T: Real>(v: &[T], lam: T) -> Vec<T> {
    let r = v.len();
    let inv_two_l2 = T::cst(0.5) / (lam * lam);
    let mut k = vec![T::cst(1.0); r * r];
    for i in 0..r {
        for j in 0..i {
            let d = v[i] - v[j];
            let e = (-(d * d * inv_two_l2)).exp();
            k[i * r + j] = e;
            k[j * r + i] = e;
        }
    }
    k
}

pub(crate) enum UnitTargets<'a, T> {
    /// Virtual-observation targets and variances.
    Ml { u: &'a [T], s: &'a [T] },
    /// Variational posterior over the targets.
    Vb(&'a PostTensors<T>),
}

pub(crate) fn unit_consts<T: Real>(
    v: &[T],
    lam: T,
    sigma: T,
    targets: UnitTargets<'_, T>,
    mode: Mode,
) -> Result<UnitConsts<T>> {
    let r = v.len();
    let mut k = kernel_matrix_generic(v, lam);
    if let UnitTargets::Ml { s, .. } = &targets {
        for i in 0..r {
            k[i * r + i] += s[i];
        }
    }
    let (l, _) = jittered_cholesky_generic(&k, r, DEFAULT_JITTER)?;
    let kappa = chol_inverse_generic(&l, r);
    let mean_targets = match &targets {
        UnitTargets::Ml { u, .. } => u,
        UnitTargets::Vb(p) => &p.mu[..],
    };
    let beta = chol_solve_vec_generic(&l, r, mean_targets);
    let m = if mode == Mode::MeanOnly {
        Vec::new()
    } else {
        let mut m = match &targets {
            UnitTargets::Ml { .. } => kappa,
            UnitTargets::Vb(p) => {
                // kappa - kappa C C^T kappa = kappa - (kappa C)(kappa C)^T,
                // with the columns of kappa C obtained by solves.
                let kc: Vec<Vec<T>> = (0..r)
                    .map(|j| {
                        let col: Vec<T> = (0..r).map(|i| p.chol[i * r + j]).collect();
                        chol_solve_vec_generic(&l, r, &col)
                    })
                    .collect();
                let mut out = kappa.clone();
                for i in 0..r {
                    for j in 0..=i {
                        let q = (0..r).fold(T::cst(0.0), |acc, c| acc + kc[c][i] * kc[c][j]);
                        out[i * r + j] = kappa[i * r + j] - q;
                        out[j * r + i] = out[i * r + j];
                    }
                }
                out
            }
        };
        for i in 0..r {
            for j in 0..=i {
                let x = m[i * r + j] - beta[i] * beta[j];
                m[i * r + j] = x;
                m[j * r + i] = x;
            }
        }
        m
    };
    Ok(UnitConsts {
        lam,
        noise_var: sigma * sigma,
        v: v.to_vec(),
        beta,
        m,
    })
}

pub(crate) fn layer_consts<T: Real>(
    lt: &LayerTensors<T>,
    post: Option<&[PostTensors<T>]>,
    mode: Mode,
) -> Result<LayerConsts<T>> {
    let (n_in, n_out) = (lt.n_in, lt.n_out);
    if post.is_some() && lt.shared {
        return Err(GpnError::InvalidArgument(
            "variational posteriors require per-unit virtual observations".into(),
        ));
    }
    let mut wt = Vec::with_capacity(n_in * n_out);
    for col in 0..n_out {
        for row in 0..n_in {
            wt.push(lt.w[row * n_out + col]);
        }
    }
    let wsq_t = if mode == Mode::MeanVariance {
        wt.iter().map(|w| *w * *w).collect()
    } else {
        Vec::new()
    };
    let mut units = Vec::with_capacity(n_out);
    for n in 0..n_out {
        let o = lt.obs_for(n);
        let targets = match post {
            Some(p) => UnitTargets::Vb(&p[n]),
            None => UnitTargets::Ml { u: &o.u, s: &o.s },
        };
        units.push(unit_consts(&o.v, lt.lam[n], lt.sigma[n], targets, mode)?);
    }
    Ok(LayerConsts {
        n_in,
        n_out,
        wt,
        wsq_t,
        units,
    })
}

pub(crate) fn head_consts<T: Real>(h: &HeadTensors<T>, mode: Mode) -> HeadConsts<T> {
    let mut wt = Vec::with_capacity(h.n_in * h.n_classes);
    for col in 0..h.n_classes {
        for row in 0..h.n_in {
            wt.push(h.w[row * h.n_classes + col]);
        }
    }
    let wsq_t = if mode == Mode::MeanVariance {
        wt.iter().map(|w| *w * *w).collect()
    } else {
        Vec::new()
    };
    HeadConsts {
        n_in: h.n_in,
        n_classes: h.n_classes,
        wt,
        wsq_t,
    }
}

pub(crate) fn build_consts<T: Real>(p: &ParamTensors<T>, mode: Mode) -> Result<NetConsts<T>> {
    let layers = p
        .layers
        .iter()
        .enumerate()
        .map(|(li, lt)| {
            let post = p.post.as_ref().map(|pl| &pl[li][..]);
            layer_consts(lt, post, mode)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(NetConsts {
        mode,
        layers,
        head: p.head.as_ref().map(|h| head_consts(h, mode)),
    })
}

/// Moments of one sample's activations or responses. `cov` is the full
/// row-major covariance in full-covariance mode.
#[derive(Clone, Debug)]
pub(crate) struct Moments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub cov: Option<Vec<T>>,
}

/// Activations of the first layer, whose inputs are known exactly.
pub(crate) fn activation_deterministic<T: Real>(
    wt: &[T],
    n_in: usize,
    n_out: usize,
    x: &[f64],
    mode: Mode,
) -> Moments<T> {
    let xs: Vec<T> = x.iter().map(|v| T::cst(*v)).collect();
    let mean = (0..n_out)
        .map(|n| T::dot(&wt[n * n_in..(n + 1) * n_in], &xs))
        .collect();
    Moments {
        mean,
        var: vec![T::cst(0.0); n_out],
        cov: (mode == Mode::FullCovariance).then(|| vec![T::cst(0.0); n_out * n_out]),
    }
}

/// Moments of `x W` given moments of `x`.
pub(crate) fn activation<T: Real>(
    wt: &[T],
    wsq_t: &[T],
    n_in: usize,
    n_out: usize,
    x: &Moments<T>,
    mode: Mode,
) -> Moments<T> {
    let mean: Vec<T> = (0..n_out)
        .map(|n| T::dot(&wt[n * n_in..(n + 1) * n_in], &x.mean))
        .collect();
    match mode {
        Mode::MeanOnly => Moments {
            mean,
            var: vec![T::cst(0.0); n_out],
            cov: None,
        },
        Mode::MeanVariance => {
            let var = (0..n_out)
                .map(|n| T::dot(&wsq_t[n * n_in..(n + 1) * n_in], &x.var))
                .collect();
            Moments {
                mean,
                var,
                cov: None,
            }
        }
        Mode::FullCovariance => {
            let c = match &x.cov {
                Some(c) => c.clone(),
                None => {
                    let mut c = vec![T::cst(0.0); n_in * n_in];
                    for i in 0..n_in {
                        c[i * n_in + i] = x.var[i];
                    }
                    c
                }
            };
            // pt[m][i] = (C W)[i][m]
            let mut pt = Vec::with_capacity(n_out * n_in);
            for m in 0..n_out {
                let wm = &wt[m * n_in..(m + 1) * n_in];
                for i in 0..n_in {
                    pt.push(T::dot(&c[i * n_in..(i + 1) * n_in], wm));
                }
            }
            let mut cov = vec![T::cst(0.0); n_out * n_out];
            for n in 0..n_out {
                let wn = &wt[n * n_in..(n + 1) * n_in];
                for m in 0..=n {
                    let e = T::dot(wn, &pt[m * n_in..(m + 1) * n_in]);
                    cov[n * n_out + m] = e;
                    cov[m * n_out + n] = e;
                }
            }
            let var = (0..n_out).map(|n| cov[n * n_out + n]).collect();
            Moments {
                mean,
                var,
                cov: Some(cov),
            }
        }
    }
}

fn checked_variance<T: Real>(raw: T, layer: usize, unit: usize) -> Result<T> {
    let v = raw.val();
    if v >= 0.0 {
        return Ok(raw);
    }
    if !v.is_finite() || v < -VAR_FAIL {
        return Err(GpnError::NegativeVariance {
            layer,
            unit,
            value: v,
        });
    }
    if v < -VAR_WARN {
        log::warn!("clamping negative variance {v:e} at layer {layer}, unit {unit}");
    }
    Ok(T::cst(0.0))
}

/// Response moments of a layer of units given their activation moments.
pub(crate) fn response<T: Real>(
    units: &[UnitConsts<T>],
    a: &Moments<T>,
    mode: Mode,
    layer: usize,
) -> Result<Moments<T>> {
    let n = units.len();
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for (j, u) in units.iter().enumerate() {
        let mu = T::psi_dot(a.mean[j], a.var[j], u.lam, &u.v, &u.beta);
        mean.push(mu);
        if mode == Mode::MeanOnly {
            var.push(T::cst(0.0));
            continue;
        }
        let second = -T::omega_quad(a.mean[j], a.var[j], u.lam, &u.v, &u.m) + 1.0;
        var.push(checked_variance(second - mu * mu + u.noise_var, layer, j)?);
    }
    let cov = if mode == Mode::FullCovariance {
        let a_cov = a.cov.as_ref();
        let mut cov = vec![T::cst(0.0); n * n];
        for j in 0..n {
            cov[j * n + j] = var[j];
            for k in 0..j {
                if a.var[j].val() == 0.0 && a.var[k].val() == 0.0 {
                    // Deterministic activations leave the units independent.
                    continue;
                }
                let c_jk = a_cov.map_or(T::cst(0.0), |c| c[j * n + k]);
                let (uj, uk) = (&units[j], &units[k]);
                let cross = T::lambda_bilin(
                    a.mean[j], a.mean[k], a.var[j], a.var[k], c_jk, uj.lam, uk.lam, &uj.v, &uk.v,
                    &uj.beta, &uk.beta,
                );
                let e = cross - mean[j] * mean[k];
                cov[j * n + k] = e;
                cov[k * n + j] = e;
            }
        }
        Some(cov)
    } else {
        None
    };
    Ok(Moments { mean, var, cov })
}

/// Final-layer response moments for one input row.
pub(crate) fn sample_forward<T: Real>(c: &NetConsts<T>, x: &[f64]) -> Result<Moments<T>> {
    let mut state: Option<Moments<T>> = None;
    for (li, lc) in c.layers.iter().enumerate() {
        let a = match &state {
            None => activation_deterministic(&lc.wt, lc.n_in, lc.n_out, x, c.mode),
            Some(xm) => activation(&lc.wt, &lc.wsq_t, lc.n_in, lc.n_out, xm, c.mode),
        };
        state = Some(response(&lc.units, &a, c.mode, li)?);
    }
    state.ok_or_else(|| GpnError::BadShape("network has no layers".into()))
}
