//! GPN layers and networks with analytic moment propagation.
//!
//! A layer computes activations `A = X W` and passes every activation
//! through its own GP-distributed activation function, parameterized by
//! virtual observations (maximum-likelihood mode) or by a variational
//! posterior over the observation targets. Three propagation fidelities are
//! supported: means only, means with per-unit variances, and full
//! covariances between the units of a layer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{GpnError, Result};
use crate::gp::{fit_activation, linspace, ActivationTarget, VirtualObservations};
use crate::kernels::kernel_matrix;
use crate::linalg::{chol_solve, jittered_cholesky, DenseMatrix, DEFAULT_JITTER};
use crate::propagation::{
    activation, build_consts, layer_consts, lift_params, sample_forward, write_back, Moments,
    ParamKind, Slot,
};
use crate::seed::rng_for;

/// Propagation fidelity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    MeanOnly,
    MeanVariance,
    FullCovariance,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::MeanOnly, Mode::MeanVariance, Mode::FullCovariance];

    /// Short name used on the command line.
    pub fn short_name(self) -> &'static str {
        match self {
            Mode::MeanOnly => "mean",
            Mode::MeanVariance => "meanvar",
            Mode::FullCovariance => "fullcov",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Mode {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" | "mean_only" => Ok(Mode::MeanOnly),
            "meanvar" | "mean_variance" => Ok(Mode::MeanVariance),
            "fullcov" | "full_covariance" => Ok(Mode::FullCovariance),
            other => Err(GpnError::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// Whether each unit owns its virtual observations or the whole layer
/// shares one set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sharing {
    None,
    Layer,
}

impl FromStr for Sharing {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Sharing::None),
            "layer" => Ok(Sharing::Layer),
            other => Err(GpnError::InvalidArgument(format!("unknown sharing '{other}'"))),
        }
    }
}

/// Parameters of one GPN layer. `lambda`, `sigma` and the observation
/// variances are stored as positive values; optimization works on their
/// softplus preimages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    /// `n_in x n_out` weights.
    pub w: DenseMatrix,
    pub lambda: Vec<f64>,
    pub sigma: Vec<f64>,
    /// One record per unit, or a single record with [`Sharing::Layer`].
    pub obs: Vec<VirtualObservations>,
    pub sharing: Sharing,
    /// Inducing points are excluded from training when set.
    pub freeze_v: bool,
}

impl LayerParams {
    pub fn n_in(&self) -> usize {
        self.w.rows()
    }

    pub fn n_out(&self) -> usize {
        self.w.cols()
    }

    pub fn r_count(&self) -> usize {
        self.obs[0].len()
    }

    pub fn obs_for(&self, unit: usize) -> &VirtualObservations {
        match self.sharing {
            Sharing::None => &self.obs[unit],
            Sharing::Layer => &self.obs[0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_out();
        if self.w.as_slice().len() != self.w.rows() * self.w.cols() {
            return Err(GpnError::BadShape("weight entry count does not match shape".into()));
        }
        if self.lambda.len() != n || self.sigma.len() != n {
            return Err(GpnError::BadShape(format!(
                "layer with {n} units has {} lengthscales and {} noise levels",
                self.lambda.len(),
                self.sigma.len()
            )));
        }
        let expected = match self.sharing {
            Sharing::None => n,
            Sharing::Layer => 1,
        };
        if self.obs.len() != expected {
            return Err(GpnError::BadShape(format!(
                "expected {expected} observation records, found {}",
                self.obs.len()
            )));
        }
        let r = self.obs[0].len();
        for o in &self.obs {
            if o.len() != r || o.u.len() != r || o.s.len() != r || r == 0 {
                return Err(GpnError::BadShape("all units need the same number of observations".into()));
            }
        }
        if self.lambda.iter().chain(&self.sigma).any(|x| !(*x > 0.0)) {
            return Err(GpnError::InvalidArgument("lengthscales and noise levels must be positive".into()));
        }
        if !self.w.is_finite() {
            return Err(GpnError::InvalidArgument("weights must be finite".into()));
        }
        Ok(())
    }
}

/// Gaussian posterior `N(mu_u, L L^T)` over one unit's observation targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitPosterior {
    pub mu_u: Vec<f64>,
    /// Lower-triangular factor of the posterior covariance.
    pub chol_sigma_u: DenseMatrix,
}

impl UnitPosterior {
    pub fn sigma_u(&self) -> DenseMatrix {
        let l = &self.chol_sigma_u;
        l.matmul(&l.transpose()).expect("square factor")
    }
}

/// Per-layer, per-unit variational posteriors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalPosterior {
    pub layers: Vec<Vec<UnitPosterior>>,
}

impl VariationalPosterior {
    /// The exact posterior of the activation values at the inducing points
    /// given the virtual observations: `mu = K (K + S)^-1 u` and
    /// `Sigma = S - S (K + S)^-1 S` with `S = diag(s)`. Variational
    /// propagation with this posterior reproduces maximum-likelihood
    /// propagation.
    pub fn from_observations(net: &NetworkParams) -> Result<Self> {
        Self::build(net, |lambda, o| {
            let r = o.len();
            let mut a = kernel_matrix(&o.v, &o.v, lambda);
            for i in 0..r {
                a[(i, i)] += o.s[i];
            }
            let (fa, _) = jittered_cholesky(&a, DEFAULT_JITTER)?;
            let ainv_u = chol_solve(&fa, &DenseMatrix::column(&o.u))?;
            let mu_u = (0..r).map(|i| o.u[i] - o.s[i] * ainv_u[(i, 0)]).collect();
            let ainv = fa.inverse();
            let mut sigma = DenseMatrix::zeros(r, r);
            for i in 0..r {
                for j in 0..r {
                    let d = if i == j { o.s[i] } else { 0.0 };
                    sigma[(i, j)] = d - o.s[i] * ainv[(i, j)] * o.s[j];
                }
            }
            let (l, _) = jittered_cholesky(&sigma.symmetrized(0.0)?, DEFAULT_JITTER)?;
            Ok(UnitPosterior {
                mu_u,
                chol_sigma_u: l.lower().clone(),
            })
        })
    }

    /// The prior `N(0, K(V, V))` of every unit.
    pub fn prior(net: &NetworkParams) -> Result<Self> {
        Self::build(net, |lambda, o| {
            let k = kernel_matrix(&o.v, &o.v, lambda);
            let (l, _) = jittered_cholesky(&k, DEFAULT_JITTER)?;
            Ok(UnitPosterior {
                mu_u: vec![0.0; o.len()],
                chol_sigma_u: l.lower().clone(),
            })
        })
    }

    fn build(
        net: &NetworkParams,
        mut f: impl FnMut(f64, &VirtualObservations) -> Result<UnitPosterior>,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(net.layers.len());
        for layer in &net.layers {
            if layer.sharing == Sharing::Layer {
                return Err(GpnError::InvalidArgument(
                    "variational posteriors require per-unit virtual observations".into(),
                ));
            }
            let units = (0..layer.n_out())
                .map(|n| f(layer.lambda[n], layer.obs_for(n)))
                .collect::<Result<Vec<_>>>()?;
            layers.push(units);
        }
        Ok(VariationalPosterior { layers })
    }

    pub fn validate(&self, net: &NetworkParams) -> Result<()> {
        if self.layers.len() != net.layers.len() {
            return Err(GpnError::BadShape("posterior layer count differs from network".into()));
        }
        for (units, layer) in self.layers.iter().zip(&net.layers) {
            if units.len() != layer.n_out() {
                return Err(GpnError::BadShape("posterior unit count differs from layer".into()));
            }
            for u in units {
                let r = layer.r_count();
                if u.mu_u.len() != r || u.chol_sigma_u.rows() != r || u.chol_sigma_u.cols() != r {
                    return Err(GpnError::BadShape("posterior size differs from observation count".into()));
                }
            }
        }
        Ok(())
    }
}

/// A feed-forward stack of GPN layers with an optional linear
/// classification head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub layers: Vec<LayerParams>,
    /// `N_L x C` weights producing class logits.
    pub out_weights: Option<DenseMatrix>,
}

impl NetworkParams {
    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.n_out())
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(GpnError::BadShape("network needs at least one layer".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if i > 0 && self.layers[i - 1].n_out() != layer.n_in() {
                return Err(GpnError::BadShape(format!(
                    "layer {i} expects {} inputs but the previous layer has {} units",
                    layer.n_in(),
                    self.layers[i - 1].n_out()
                )));
            }
        }
        if let Some(h) = &self.out_weights {
            if h.rows() != self.n_outputs() || h.as_slice().len() != h.rows() * h.cols() {
                return Err(GpnError::BadShape("head weights do not match the last layer".into()));
            }
        }
        Ok(())
    }

    /// Unconstrained values of all trainable parameters in canonical order.
    pub fn trainable_vector(&self, post: Option<&VariationalPosterior>) -> Vec<f64> {
        let mut out = Vec::new();
        lift_params::<f64, _>(self, post, &mut |s: Slot| {
            if s.trainable {
                out.push(s.transform.inverse(s.value));
            }
            s.value
        });
        out
    }

    /// Locations of the entries of [`Self::trainable_vector`].
    pub fn trainable_kinds(&self, post: Option<&VariationalPosterior>) -> Vec<ParamKind> {
        let mut out = Vec::new();
        lift_params::<f64, _>(self, post, &mut |s: Slot| {
            if s.trainable {
                out.push(s.kind);
            }
            s.value
        });
        out
    }

    /// Inverse of [`Self::trainable_vector`].
    pub fn set_trainable(
        &mut self,
        post: Option<&mut VariationalPosterior>,
        theta: &[f64],
    ) -> Result<()> {
        let mut k = 0;
        let p = lift_params::<f64, _>(self, post.as_deref(), &mut |s: Slot| {
            if s.trainable {
                let v = theta.get(k).map_or(f64::NAN, |x| s.transform.forward(*x));
                k += 1;
                v
            } else {
                s.value
            }
        });
        if k != theta.len() {
            return Err(GpnError::DimensionMismatch(format!(
                "expected {k} trainable parameters, got {}",
                theta.len()
            )));
        }
        write_back(&p, self, post);
        Ok(())
    }
}

/// Per-sample moments of a layer's activations or outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState {
    pub mode: Mode,
    /// `S x N` means.
    pub mean: DenseMatrix,
    /// `S x N` variances (zero in mean-only mode).
    pub var: DenseMatrix,
    /// One `N x N` covariance per sample in full-covariance mode.
    pub cov: Vec<DenseMatrix>,
}

impl MomentState {
    /// Exactly known inputs.
    pub fn deterministic(x: &DenseMatrix, mode: Mode) -> Self {
        let (s, n) = (x.rows(), x.cols());
        let cov = if mode == Mode::FullCovariance {
            vec![DenseMatrix::zeros(n, n); s]
        } else {
            Vec::new()
        };
        MomentState {
            mode,
            mean: x.clone(),
            var: DenseMatrix::zeros(s, n),
            cov,
        }
    }

    pub fn samples(&self) -> usize {
        self.mean.rows()
    }

    pub fn width(&self) -> usize {
        self.mean.cols()
    }

    /// Covariance of sample `s`; diagonal outside full-covariance mode.
    pub fn sample_cov(&self, s: usize) -> DenseMatrix {
        match self.cov.get(s) {
            Some(c) => c.clone(),
            None => DenseMatrix::diag(self.var.row(s)),
        }
    }

    pub(crate) fn sample_moments(&self, s: usize) -> Moments<f64> {
        Moments {
            mean: self.mean.row(s).to_vec(),
            var: self.var.row(s).to_vec(),
            cov: self.cov.get(s).map(|c| c.as_slice().to_vec()),
        }
    }

    pub(crate) fn from_samples(mode: Mode, width: usize, samples: Vec<Moments<f64>>) -> Self {
        let s = samples.len();
        let mut mean = DenseMatrix::zeros(s, width);
        let mut var = DenseMatrix::zeros(s, width);
        let mut cov = Vec::new();
        for (i, m) in samples.into_iter().enumerate() {
            mean.row_mut(i).copy_from_slice(&m.mean);
            var.row_mut(i).copy_from_slice(&m.var);
            if mode == Mode::FullCovariance {
                let c = m.cov.unwrap_or_else(|| DenseMatrix::diag(&m.var).into_vec());
                cov.push(DenseMatrix::from_vec(width, width, c).expect("square covariance"));
            }
        }
        MomentState {
            mode,
            mean,
            var,
            cov,
        }
    }
}

/// Moments of `X W` given moments of `X`.
pub fn propagate_activation(x_state: &MomentState, w: &DenseMatrix) -> Result<MomentState> {
    if x_state.width() != w.rows() {
        return Err(GpnError::DimensionMismatch(format!(
            "state width {} against {} weight rows",
            x_state.width(),
            w.rows()
        )));
    }
    let (n_in, n_out) = (w.rows(), w.cols());
    let wt = w.transpose().into_vec();
    let wsq_t: Vec<f64> = wt.iter().map(|x| x * x).collect();
    let mode = x_state.mode;
    let samples = (0..x_state.samples())
        .map(|s| activation(&wt, &wsq_t, n_in, n_out, &x_state.sample_moments(s), mode))
        .collect();
    Ok(MomentState::from_samples(mode, n_out, samples))
}

fn single_layer(layer: &LayerParams) -> NetworkParams {
    NetworkParams {
        layers: vec![layer.clone()],
        out_weights: None,
    }
}

fn propagate_response(
    a_state: &MomentState,
    layer: &LayerParams,
    post: Option<&[crate::network::UnitPosterior]>,
) -> Result<MomentState> {
    layer.validate()?;
    if a_state.width() != layer.n_out() {
        return Err(GpnError::DimensionMismatch(format!(
            "state width {} against {} units",
            a_state.width(),
            layer.n_out()
        )));
    }
    let net = single_layer(layer);
    let vp = post.map(|units| VariationalPosterior {
        layers: vec![units.to_vec()],
    });
    if let Some(vp) = &vp {
        vp.validate(&net)?;
    }
    let p = lift_params::<f64, _>(&net, vp.as_ref(), &mut |s: Slot| s.value);
    let mode = a_state.mode;
    let post_t = p.post.as_ref().map(|pl| &pl[0][..]);
    let lc = layer_consts(&p.layers[0], post_t, mode)?;
    let samples = (0..a_state.samples())
        .map(|s| crate::propagation::response(&lc.units, &a_state.sample_moments(s), mode, 0))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentState::from_samples(mode, layer.n_out(), samples))
}

/// Output moments of a layer given activation moments, using the layer's
/// virtual observations.
pub fn propagate_response_ml(a_state: &MomentState, layer: &LayerParams) -> Result<MomentState> {
    propagate_response(a_state, layer, None)
}

/// Output moments of a layer given activation moments, using a variational
/// posterior over the observation targets. Observation variances are
/// ignored.
pub fn propagate_response_vb(
    a_state: &MomentState,
    layer: &LayerParams,
    post: &[UnitPosterior],
) -> Result<MomentState> {
    propagate_response(a_state, layer, Some(post))
}

/// Final-layer output moments for every row of `inputs`.
pub fn forward(
    net: &NetworkParams,
    inputs: &DenseMatrix,
    mode: Mode,
    post: Option<&VariationalPosterior>,
) -> Result<MomentState> {
    net.validate()?;
    if let Some(p) = post {
        p.validate(net)?;
    }
    if inputs.cols() != net.n_inputs() {
        return Err(GpnError::DimensionMismatch(format!(
            "inputs have {} columns but the network expects {}",
            inputs.cols(),
            net.n_inputs()
        )));
    }
    let p = lift_params::<f64, _>(net, post, &mut |s: Slot| s.value);
    let consts = build_consts(&p, mode)?;
    let samples = (0..inputs.rows())
        .map(|s| sample_forward(&consts, inputs.row(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(MomentState::from_samples(mode, net.n_outputs(), samples))
}

/// How the observation targets of a fresh network are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetInit {
    /// Independent standard-normal targets.
    RandomNormal,
    /// Targets read off a fixed activation function.
    Fit(ActivationTarget),
}

impl FromStr for TargetInit {
    type Err = GpnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" | "random_normal" => Ok(TargetInit::RandomNormal),
            other => Ok(TargetInit::Fit(other.parse()?)),
        }
    }
}

impl fmt::Display for TargetInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetInit::RandomNormal => f.write_str("random"),
            TargetInit::Fit(t) => f.write_str(t.name()),
        }
    }
}

/// Settings for [`init_network`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    /// Input width followed by the unit count of every GPN layer.
    pub shape: Vec<usize>,
    pub r_count: usize,
    pub v_range: [f64; 2],
    pub target_init: TargetInit,
    pub sharing: Sharing,
    /// Adds a linear head with this many outputs.
    pub n_classes: Option<usize>,
    pub freeze_v: bool,
    pub s_init: f64,
    pub lambda_init: f64,
    pub sigma_init: f64,
    pub seed: u64,
}

impl InitConfig {
    pub fn new(shape: Vec<usize>) -> Self {
        InitConfig {
            shape,
            r_count: 14,
            v_range: [-2.0, 2.0],
            target_init: TargetInit::RandomNormal,
            sharing: Sharing::None,
            n_classes: None,
            freeze_v: true,
            s_init: 0.1f64.sqrt(),
            lambda_init: 1.0,
            sigma_init: 0.1,
            seed: 0,
        }
    }
}

/// Parses an architecture string such as `16x30x15x26`.
pub fn parse_shape(s: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = s.split('x').collect();
    let shape = parts
        .iter()
        .map(|p| p.trim().parse::<usize>().ok().filter(|n| *n > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| GpnError::BadShape(format!("cannot parse architecture '{s}'")))?;
    if shape.len() < 2 {
        return Err(GpnError::BadShape(format!(
            "architecture '{s}' needs an input width and at least one layer"
        )));
    }
    Ok(shape)
}

/// Half-width of the uniform weight initialization of GPN layer `layer`
/// (1-based): `sqrt(6) / sqrt(N_{l-1} + N_{l+1})`. Past the last GPN layer
/// the class count is used, or the layer's own width without a head.
pub fn weight_bound(shape: &[usize], layer: usize, n_classes: Option<usize>) -> f64 {
    let next = shape
        .get(layer + 1)
        .copied()
        .unwrap_or_else(|| n_classes.unwrap_or(shape[layer]));
    6f64.sqrt() / ((shape[layer - 1] + next) as f64).sqrt()
}

/// A freshly initialized network.
pub fn init_network(cfg: &InitConfig) -> Result<NetworkParams> {
    if cfg.shape.len() < 2 || cfg.shape.contains(&0) {
        return Err(GpnError::BadShape(format!(
            "shape {:?} needs at least two positive sizes",
            cfg.shape
        )));
    }
    if cfg.r_count < 2 {
        return Err(GpnError::InvalidArgument("at least two virtual observations are needed".into()));
    }
    let mut rng = rng_for(cfg.seed, "init");
    let v = linspace(cfg.v_range[0], cfg.v_range[1], cfg.r_count);
    let mut layers = Vec::with_capacity(cfg.shape.len() - 1);
    for l in 1..cfg.shape.len() {
        let (n_in, n_out) = (cfg.shape[l - 1], cfg.shape[l]);
        let bound = weight_bound(&cfg.shape, l, cfg.n_classes);
        let dist = Uniform::new_inclusive(-bound, bound)
            .map_err(|e| GpnError::InvalidArgument(e.to_string()))?;
        let w: Vec<f64> = (0..n_in * n_out).map(|_| dist.sample(&mut rng)).collect();
        let n_obs = match cfg.sharing {
            Sharing::None => n_out,
            Sharing::Layer => 1,
        };
        let mut obs = Vec::with_capacity(n_obs);
        for _ in 0..n_obs {
            let o = match cfg.target_init {
                TargetInit::RandomNormal => {
                    let u = (0..cfg.r_count).map(|_| StandardNormal.sample(&mut rng)).collect();
                    VirtualObservations::new(v.clone(), u, vec![cfg.s_init; cfg.r_count])?
                }
                TargetInit::Fit(t) => fit_activation(t, cfg.r_count, cfg.v_range, cfg.s_init)?,
            };
            obs.push(o);
        }
        layers.push(LayerParams {
            w: DenseMatrix::from_vec(n_in, n_out, w)?,
            lambda: vec![cfg.lambda_init; n_out],
            sigma: vec![cfg.sigma_init; n_out],
            obs,
            sharing: cfg.sharing,
            freeze_v: cfg.freeze_v,
        });
    }
    let out_weights = match cfg.n_classes {
        Some(c) => {
            let n_last = *cfg.shape.last().expect("non-empty shape");
            let bound = (6.0 / (n_last + c) as f64).sqrt();
            let w = (0..n_last * c).map(|_| rng.random_range(-bound..=bound)).collect();
            Some(DenseMatrix::from_vec(n_last, c, w)?)
        }
        None => None,
    };
    let net = NetworkParams { layers, out_weights };
    net.validate()?;
    Ok(net)
}

const CHECKPOINT_FORMAT: &str = "gpn-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to restore a trained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub mode: Mode,
    pub net: NetworkParams,
    pub posterior: Option<VariationalPosterior>,
}

impl Checkpoint {
    pub fn new(net: NetworkParams, posterior: Option<VariationalPosterior>, mode: Mode, seed: u64) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            seed,
            mode,
            net,
            posterior,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        if value.get("format").and_then(|f| f.as_str()) != Some(CHECKPOINT_FORMAT) {
            return Err(GpnError::SchemaMismatch(format!(
                "{} is not a network checkpoint",
                path.display()
            )));
        }
        let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if version != CHECKPOINT_VERSION {
            return Err(GpnError::UnsupportedVersion(version));
        }
        let ck: Checkpoint = serde_json::from_value(value)?;
        ck.net.validate()?;
        if let Some(p) = &ck.posterior {
            p.validate(&ck.net)?;
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::sparse_predict;
    use crate::kernels::omega;
    use crate::linalg::cholesky;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_layer(rng: &mut ChaCha8Rng, n_in: usize, n_out: usize, r: usize) -> LayerParams {
        let w = (0..n_in * n_out).map(|_| rng.random_range(-1.0..1.0)).collect();
        let obs = (0..n_out)
            .map(|_| {
                let u = (0..r).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = (0..r).map(|_| rng.random_range(0.05..0.3)).collect();
                VirtualObservations::new(linspace(-2.0, 2.0, r), u, s).unwrap()
            })
            .collect();
        LayerParams {
            w: DenseMatrix::from_vec(n_in, n_out, w).unwrap(),
            lambda: (0..n_out).map(|_| rng.random_range(0.7..1.5)).collect(),
            sigma: (0..n_out).map(|_| rng.random_range(0.05..0.3)).collect(),
            obs,
            sharing: Sharing::None,
            freeze_v: true,
        }
    }

    fn random_state(rng: &mut ChaCha8Rng, s: usize, n: usize, mode: Mode) -> MomentState {
        let mean = DenseMatrix::from_vec(s, n, (0..s * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let mut covs = Vec::new();
        let mut var = DenseMatrix::zeros(s, n);
        for i in 0..s {
            let b = DenseMatrix::from_vec(n, n, (0..n * n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap();
            let c = b.matmul(&b.transpose()).unwrap();
            var.row_mut(i).copy_from_slice(&c.diagonal());
            covs.push(c);
        }
        MomentState {
            mode,
            mean,
            var,
            cov: if mode == Mode::FullCovariance { covs } else { Vec::new() },
        }
    }

    #[test]
    fn identity_weights_leave_state_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mode in Mode::ALL {
            let mut st = random_state(&mut rng, 3, 4, mode);
            if mode == Mode::MeanOnly {
                st.var = DenseMatrix::zeros(3, 4);
            }
            let out = propagate_activation(&st, &DenseMatrix::identity(4)).unwrap();
            assert!(out.mean.max_abs_diff(&st.mean) < 1e-15);
            assert!(out.var.max_abs_diff(&st.var) < 1e-15);
            for (a, b) in out.cov.iter().zip(&st.cov) {
                assert!(a.max_abs_diff(b) < 1e-15);
            }
        }
    }

    #[test]
    fn independent_variances_add() {
        let st = MomentState {
            mode: Mode::MeanVariance,
            mean: DenseMatrix::from_rows(&[vec![0.0, 0.0]]).unwrap(),
            var: DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap(),
            cov: Vec::new(),
        };
        let out = propagate_activation(&st, &DenseMatrix::column(&[1.0, 1.0])).unwrap();
        assert_eq!(out.var[(0, 0)], 2.0);
        assert!(propagate_activation(&st, &DenseMatrix::column(&[1.0, 1.0, 1.0])).is_err());
    }

    #[test]
    fn full_covariance_activation_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let st = random_state(&mut rng, 1, 3, Mode::FullCovariance);
        let w = DenseMatrix::from_vec(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let out = propagate_activation(&st, &w).unwrap();
        let l = cholesky(&st.cov[0]).unwrap();
        let n = 1_000_000;
        let mut sums = [0.0f64; 2];
        let mut prods = [[0.0f64; 2]; 2];
        let mut sq = [[0.0f64; 2]; 2];
        for _ in 0..n {
            let z: Vec<f64> = (0..3).map(|_| StandardNormal.sample(&mut rng)).collect();
            let x: Vec<f64> = (0..3)
                .map(|i| st.mean[(0, i)] + (0..=i).map(|k| l.lower()[(i, k)] * z[k]).sum::<f64>())
                .collect();
            let a: Vec<f64> = (0..2).map(|j| (0..3).map(|i| x[i] * w[(i, j)]).sum()).collect();
            for j in 0..2 {
                sums[j] += a[j];
                for k in 0..2 {
                    let d = (a[j] - out.mean[(0, j)]) * (a[k] - out.mean[(0, k)]);
                    prods[j][k] += d;
                    sq[j][k] += d * d;
                }
            }
        }
        let nf = n as f64;
        for j in 0..2 {
            for k in 0..2 {
                let est = prods[j][k] / nf;
                let se = ((sq[j][k] / nf - est * est) / nf).sqrt();
                assert!((out.cov[0][(j, k)] - est).abs() <= 3.0 * se + 1e-12, "({j},{k})");
            }
            assert!((sums[j] / nf - out.mean[(0, j)]).abs() < 0.01);
        }
    }

    #[test]
    fn deterministic_activations_reduce_to_sparse_prediction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = random_layer(&mut rng, 2, 3, 6);
        let a = DenseMatrix::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]).unwrap();
        let out = propagate_response_ml(&MomentState::deterministic(&a, Mode::FullCovariance), &layer).unwrap();
        for n in 0..3 {
            let col = a.col(n);
            let s2 = layer.sigma[n] * layer.sigma[n];
            let (m, c) = sparse_predict(&col, layer.obs_for(n), layer.lambda[n], s2).unwrap();
            for s in 0..2 {
                assert!((out.mean[(s, n)] - m[s]).abs() < 1e-10);
                assert!((out.var[(s, n)] - c[(s, s)]).abs() < 1e-10);
            }
        }
        for c in &out.cov {
            assert_eq!(c[(0, 1)], 0.0);
        }
    }

    #[test]
    fn zero_targets_leave_only_the_omega_trace() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut layer = random_layer(&mut rng, 1, 1, 5);
        layer.obs[0].u = vec![0.0; 5];
        let st = MomentState {
            mode: Mode::MeanVariance,
            mean: DenseMatrix::from_rows(&[vec![0.4]]).unwrap(),
            var: DenseMatrix::from_rows(&[vec![0.3]]).unwrap(),
            cov: Vec::new(),
        };
        let out = propagate_response_ml(&st, &layer).unwrap();
        let o = &layer.obs[0];
        let mut k = kernel_matrix(&o.v, &o.v, layer.lambda[0]);
        for i in 0..5 {
            k[(i, i)] += o.s[i];
        }
        let kappa = cholesky(&k).unwrap().inverse();
        let om = omega(0.4, 0.3, &o.v, layer.lambda[0]);
        let tr: f64 = kappa.matmul(&om).unwrap().diagonal().iter().sum();
        assert_eq!(out.mean[(0, 0)], 0.0);
        let expected = 1.0 - tr + layer.sigma[0] * layer.sigma[0];
        assert!((out.var[(0, 0)] - expected).abs() < 1e-12);
    }

    #[test]
    fn variational_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = random_layer(&mut rng, 2, 3, 5);
        let net = single_layer(&layer);
        let st = random_state(&mut rng, 2, 3, Mode::FullCovariance);
        let prior = VariationalPosterior::prior(&net).unwrap();
        let out = propagate_response_vb(&st, &layer, &prior.layers[0]).unwrap();
        for s in 0..2 {
            for n in 0..3 {
                assert!(out.mean[(s, n)].abs() < 1e-10);
                let expected = 1.0 + layer.sigma[n] * layer.sigma[n];
                assert!((out.var[(s, n)] - expected).abs() < 1e-10);
            }
        }
        // A point-mass posterior reproduces ML propagation with S = 0.
        let mut point = VariationalPosterior::from_observations(&net).unwrap();
        for (n, u) in point.layers[0].iter_mut().enumerate() {
            u.mu_u = layer.obs_for(n).u.clone();
            u.chol_sigma_u = DenseMatrix::zeros(5, 5);
        }
        let mut ml_layer = layer.clone();
        for o in &mut ml_layer.obs {
            o.s = vec![0.0; 5];
        }
        let vb = propagate_response_vb(&st, &layer, &point.layers[0]).unwrap();
        let ml = propagate_response_ml(&st, &ml_layer).unwrap();
        assert!(vb.mean.max_abs_diff(&ml.mean) < 1e-10);
        assert!(vb.var.max_abs_diff(&ml.var) < 1e-10);
        for (a, b) in vb.cov.iter().zip(&ml.cov) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn conditional_posterior_reproduces_ml_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let layer = random_layer(&mut rng, 2, 3, 6);
        let net = single_layer(&layer);
        let st = random_state(&mut rng, 2, 3, Mode::FullCovariance);
        let post = VariationalPosterior::from_observations(&net).unwrap();
        let vb = propagate_response_vb(&st, &layer, &post.layers[0]).unwrap();
        let ml = propagate_response_ml(&st, &layer).unwrap();
        assert!(vb.mean.max_abs_diff(&ml.mean) < 1e-8);
        assert!(vb.var.max_abs_diff(&ml.var) < 1e-8);
        for (a, b) in vb.cov.iter().zip(&ml.cov) {
            assert!(a.max_abs_diff(b) < 1e-8);
        }
    }

    fn small_net(seed: u64, shape: Vec<usize>) -> NetworkParams {
        let mut cfg = InitConfig::new(shape);
        cfg.r_count = 6;
        cfg.seed = seed;
        init_network(&cfg).unwrap()
    }

    #[test]
    fn forward_single_layer_matches_layer_propagation() {
        let net = small_net(1, vec![3, 4]);
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.3]]).unwrap();
        let f = forward(&net, &x, Mode::MeanVariance, None).unwrap();
        let a = propagate_activation(&MomentState::deterministic(&x, Mode::MeanVariance), &net.layers[0].w).unwrap();
        let r = propagate_response_ml(&a, &net.layers[0]).unwrap();
        assert!(f.mean.max_abs_diff(&r.mean) < 1e-14);
        assert!(f.var.max_abs_diff(&r.var) < 1e-14);
    }

    #[test]
    fn zero_weights_make_outputs_input_independent() {
        let mut net = small_net(2, vec![3, 4, 2]);
        for l in &mut net.layers {
            l.w = DenseMatrix::zeros(l.n_in(), l.n_out());
        }
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.3]]).unwrap();
        for mode in Mode::ALL {
            let out = forward(&net, &x, mode, None).unwrap();
            assert_eq!(out.mean.row(0), out.mean.row(1));
            assert_eq!(out.var.row(0), out.var.row(1));
        }
    }

    #[test]
    fn modes_agree_on_shared_quantities() {
        let net = small_net(3, vec![16, 5, 5]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = DenseMatrix::from_vec(4, 16, (0..64).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
        let mo = forward(&net, &x, Mode::MeanOnly, None).unwrap();
        let mv = forward(&net, &x, Mode::MeanVariance, None).unwrap();
        let fc = forward(&net, &x, Mode::FullCovariance, None).unwrap();
        assert!(mv.mean.max_abs_diff(&fc.mean) < 1e-10);
        assert!(mv.var.max_abs_diff(&fc.var) < 1e-10);
        for (s, c) in fc.cov.iter().enumerate() {
            for n in 0..5 {
                assert!((c[(n, n)] - fc.var[(s, n)]).abs() < 1e-12);
            }
        }
        assert!(mo.var.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scaling_weights_lengthscales_and_inducing_points_is_invisible() {
        let net = small_net(4, vec![3, 4, 2]);
        let mut scaled = net.clone();
        let c = 1.7;
        for l in &mut scaled.layers {
            l.w = l.w.scale(c);
            l.lambda.iter_mut().for_each(|x| *x *= c);
            for o in &mut l.obs {
                o.v.iter_mut().for_each(|x| *x *= c);
            }
        }
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.5, 0.9], vec![0.7, 0.2, 0.3]]).unwrap();
        for mode in Mode::ALL {
            let a = forward(&net, &x, mode, None).unwrap();
            let b = forward(&scaled, &x, mode, None).unwrap();
            assert!(a.mean.max_abs_diff(&b.mean) < 1e-10);
            assert!(a.var.max_abs_diff(&b.var) < 1e-10);
        }
    }

    #[test]
    fn init_cases() {
        let mut cfg = InitConfig::new(vec![2, 3]);
        cfg.r_count = 3;
        cfg.v_range = [-1.0, 1.0];
        cfg.target_init = TargetInit::Fit(ActivationTarget::Identity);
        let net = init_network(&cfg).unwrap();
        for o in &net.layers[0].obs {
            assert_eq!(o.v, vec![-1.0, 0.0, 1.0]);
            assert_eq!(o.u, o.v);
            assert!((o.s[0] - 0.1f64.sqrt()).abs() < 1e-15);
        }
        assert_eq!(net.layers[0].lambda, vec![1.0; 3]);
        assert_eq!(net.layers[0].sigma, vec![0.1; 3]);

        let mut cfg = InitConfig::new(vec![16, 30, 15, 26]);
        cfg.n_classes = Some(26);
        cfg.seed = 11;
        let a = init_network(&cfg).unwrap();
        let b = init_network(&cfg).unwrap();
        assert_eq!(a, b);
        let bound = weight_bound(&cfg.shape, 1, cfg.n_classes);
        assert_eq!(bound, 6f64.sqrt() / 31f64.sqrt());
        assert!(a.layers[0].w.as_slice().iter().all(|w| w.abs() <= bound));
        assert_eq!(a.out_weights.as_ref().unwrap().rows(), 26);
        assert!(init_network(&InitConfig::new(vec![16])).is_err());
    }

    #[test]
    fn shape_parsing() {
        assert_eq!(parse_shape("16x30x15x26").unwrap(), vec![16, 30, 15, 26]);
        assert!(parse_shape("16xx30").is_err());
        assert!(parse_shape("16").is_err());
        assert!(parse_shape("16x0").is_err());
    }

    #[test]
    fn trainable_round_trip() {
        let mut cfg = InitConfig::new(vec![3, 4, 2]);
        cfg.r_count = 5;
        cfg.n_classes = Some(3);
        let mut net = init_network(&cfg).unwrap();
        let theta = net.trainable_vector(None);
        let kinds = net.trainable_kinds(None);
        assert_eq!(theta.len(), kinds.len());
        assert!(!kinds.iter().any(|k| matches!(k, ParamKind::InducingPoint { .. })));
        let before = net.clone();
        net.set_trainable(None, &theta).unwrap();
        assert!(net.layers[0].w.max_abs_diff(&before.layers[0].w) == 0.0);
        assert!((net.layers[1].lambda[0] - 1.0).abs() < 1e-14);
        assert!(net.set_trainable(None, &theta[1..]).is_err());

        let mut post = VariationalPosterior::from_observations(&net).unwrap();
        let theta = net.trainable_vector(Some(&post));
        let kinds = net.trainable_kinds(Some(&post));
        assert!(!kinds.iter().any(|k| matches!(k, ParamKind::Target { .. })));
        let n_chol = kinds.iter().filter(|k| matches!(k, ParamKind::PosteriorChol { .. })).count();
        assert_eq!(n_chol, 6 * 15);
        let mut shifted = theta.clone();
        shifted[0] += 1.0;
        net.set_trainable(Some(&mut post), &shifted).unwrap();
        assert!((net.layers[0].w[(0, 0)] - before.layers[0].w[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let mut cfg = InitConfig::new(vec![3, 4, 2]);
        cfg.n_classes = Some(3);
        cfg.seed = 99;
        let net = init_network(&cfg).unwrap();
        let post = VariationalPosterior::from_observations(&net).unwrap();
        let ck = Checkpoint::new(net, Some(post), Mode::FullCovariance, 99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.json");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        std::fs::write(&path, "{\"format\":\"gpn-checkpoint\",\"version\":9}").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(GpnError::UnsupportedVersion(9))));
    }

    #[test]
    fn shared_observations() {
        let mut cfg = InitConfig::new(vec![3, 4]);
        cfg.sharing = Sharing::Layer;
        cfg.r_count = 5;
        let net = init_network(&cfg).unwrap();
        assert_eq!(net.layers[0].obs.len(), 1);
        let x = DenseMatrix::from_rows(&[vec![0.1, 0.5, 0.9]]).unwrap();
        assert!(forward(&net, &x, Mode::MeanVariance, None).is_ok());
        assert!(VariationalPosterior::prior(&net).is_err());
    }
}
