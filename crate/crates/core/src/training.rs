//! Exact gradients of the training objectives, the Adam optimizer, the
//! plateau learning-rate schedule and a finite-difference gradient checker.
//!
//! Gradients are computed in two stages. The parameters are lifted onto a
//! first tape and condensed into the sample-independent constants of every
//! unit. These constants become the leaves of a second tape, which is reused
//! for every sample of the batch by truncating it back to its leaves. The
//! accumulated adjoints of the constants are finally pulled back through the
//! first tape in one reverse sweep.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Real, Tape, Var};
use crate::error::{GpnError, Result};
use crate::linalg::DenseMatrix;
use crate::network::{Mode, NetworkParams, VariationalPosterior};
use crate::objectives::{
    classification_sample, default_kappa, kl_generic, regression_sample, s_penalty_generic,
    Objective, DEFAULT_ALPHA_S, DEFAULT_BETA_S,
};
use crate::propagation::{build_consts, lift_params, sample_forward, NetConsts, ParamTensors, Slot};
use crate::seed::rng_for;
use crate::ParamKind;

/// Everything needed to evaluate one training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub objective: Objective,
    pub mode: Mode,
    /// `(alpha_S, beta_S)` of the observation-variance penalty (ML only).
    pub penalty: Option<(f64, f64)>,
    /// Sigma-point spread; `3 - C` when absent.
    pub kappa_u: Option<f64>,
    /// Training-set size that scales the KL term of the variational bound.
    pub n_train: usize,
}

impl ObjectiveSpec {
    pub fn new(objective: Objective, mode: Mode) -> Self {
        ObjectiveSpec {
            objective,
            mode,
            penalty: (!objective.is_variational()).then_some((DEFAULT_ALPHA_S, DEFAULT_BETA_S)),
            kappa_u: None,
            n_train: 1,
        }
    }
}

fn check_inputs(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    x: &DenseMatrix,
    t: &DenseMatrix,
    spec: &ObjectiveSpec,
) -> Result<()> {
    match (spec.objective.is_variational(), post) {
        (true, None) => {
            return Err(GpnError::InvalidArgument(format!(
                "{} needs a variational posterior",
                spec.objective
            )))
        }
        (false, Some(_)) => {
            return Err(GpnError::InvalidArgument(format!(
                "{} does not take a variational posterior",
                spec.objective
            )))
        }
        (true, Some(p)) => p.validate(net)?,
        (false, None) => {}
    }
    if spec.objective.is_classification() && net.out_weights.is_none() {
        return Err(GpnError::InvalidArgument("classification needs a softmax head".into()));
    }
    let out_width = net.out_weights.as_ref().map_or(net.n_outputs(), |h| h.cols());
    if x.cols() != net.n_inputs() || t.cols() != out_width || x.rows() != t.rows() {
        return Err(GpnError::DimensionMismatch(format!(
            "inputs {}x{} and targets {}x{} for a network with {} inputs and {} outputs",
            x.rows(),
            x.cols(),
            t.rows(),
            t.cols(),
            net.n_inputs(),
            out_width
        )));
    }
    Ok(())
}

/// Terms of the loss that do not depend on the samples.
fn batch_term<T: Real>(p: &ParamTensors<T>, spec: &ObjectiveSpec) -> Result<T> {
    if spec.objective.is_variational() {
        Ok(kl_generic(p)? / spec.n_train.max(1) as f64)
    } else if let Some((alpha, beta)) = spec.penalty {
        Ok(s_penalty_generic(p, alpha, beta))
    } else {
        Ok(T::cst(0.0))
    }
}

fn sample_loss<T: Real>(c: &NetConsts<T>, x: &[f64], t: &[f64], spec: &ObjectiveSpec) -> Result<T> {
    let m = sample_forward(c, x)?;
    if spec.objective.is_classification() {
        let head = c
            .head
            .as_ref()
            .ok_or_else(|| GpnError::InvalidArgument("classification needs a softmax head".into()))?;
        let kappa = spec.kappa_u.unwrap_or_else(|| default_kappa(head.n_classes));
        classification_sample(&m, head, t, kappa, spec.mode)
    } else {
        let last = c
            .layers
            .last()
            .ok_or_else(|| GpnError::BadShape("network without layers".into()))?;
        let noise: Vec<T> = last.units.iter().map(|u| u.noise_var).collect();
        Ok(regression_sample(&m, t, &noise, spec.mode))
    }
}

/// Value of the objective: mean per-sample loss plus the batch term.
pub fn objective_value(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    x: &DenseMatrix,
    t: &DenseMatrix,
    spec: &ObjectiveSpec,
) -> Result<f64> {
    check_inputs(net, post, x, t, spec)?;
    let p = lift_params::<f64, _>(net, post, &mut |s: Slot| s.value);
    let c = build_consts(&p, spec.mode)?;
    let mut total = 0.0;
    for i in 0..x.rows() {
        total += sample_loss(&c, x.row(i), t.row(i), spec)?;
    }
    Ok(total / x.rows().max(1) as f64 + batch_term(&p, spec)?)
}

/// Mean per-sample loss and error of a data set, without the batch term.
/// The error is the misclassification rate for classification and the
/// root-mean-square error of the predicted means for regression.
pub fn evaluate(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    x: &DenseMatrix,
    t: &DenseMatrix,
    spec: &ObjectiveSpec,
) -> Result<(f64, f64)> {
    check_inputs(net, post, x, t, spec)?;
    let p = lift_params::<f64, _>(net, post, &mut |s: Slot| s.value);
    let c = build_consts(&p, spec.mode)?;
    let (mut loss, mut err) = (0.0, 0.0);
    for i in 0..x.rows() {
        loss += sample_loss(&c, x.row(i), t.row(i), spec)?;
        let m = sample_forward(&c, x.row(i))?;
        let target = t.row(i);
        match &c.head {
            Some(h) if spec.objective.is_classification() => {
                let logits: Vec<f64> = (0..h.n_classes)
                    .map(|k| f64::dot(&h.wt[k * h.n_in..(k + 1) * h.n_in], &m.mean))
                    .collect();
                if argmax(&logits) != argmax(target) {
                    err += 1.0;
                }
            }
            _ => {
                err += m.mean.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    / target.len().max(1) as f64;
            }
        }
    }
    let n = x.rows().max(1) as f64;
    let err = if spec.objective.is_classification() {
        err / n
    } else {
        (err / n).sqrt()
    };
    Ok((loss / n, err))
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
        .0
}

/// Objective value and its gradient with respect to the unconstrained
/// trainable parameters (the layout of [`NetworkParams::trainable_vector`]).
pub fn loss_and_grad(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    x: &DenseMatrix,
    t: &DenseMatrix,
    spec: &ObjectiveSpec,
) -> Result<(f64, Vec<f64>)> {
    check_inputs(net, post, x, t, spec)?;
    let ta = Tape::new();
    let mut leaves = Vec::new();
    let pa = lift_params(net, post, &mut |s: Slot| {
        if s.trainable {
            let leaf = ta.var(s.transform.inverse(s.value));
            leaves.push(leaf);
            s.transform.apply(leaf)
        } else {
            Var::cst(s.value)
        }
    });
    let consts_a = build_consts(&pa, spec.mode)?;
    let batch = batch_term(&pa, spec)?;

    // Sample-independent constants become the leaves of the second tape.
    let tb = Tape::new();
    let mut linked = Vec::new();
    let consts_b = consts_a.map(&mut |a: Var<'_>| {
        if a.is_const() {
            Var::cst(a.val())
        } else {
            linked.push(a);
            tb.var(a.val())
        }
    });
    let base = tb.len();
    let mut acc = vec![0.0; base];
    let mut total = 0.0;
    for i in 0..x.rows() {
        tb.truncate(base);
        let loss = sample_loss(&consts_b, x.row(i), t.row(i), spec)?;
        total += loss.val();
        if loss.is_const() {
            continue;
        }
        let adj = tb.gradient(loss);
        for (a, g) in acc.iter_mut().zip(&adj[..base]) {
            *a += g;
        }
    }
    let n = x.rows().max(1) as f64;
    let mut seeds: Vec<(Var<'_>, f64)> = linked.iter().zip(&acc).map(|(v, g)| (*v, g / n)).collect();
    seeds.push((batch, 1.0));
    let adj = ta.backward(&seeds);
    let grad: Vec<f64> = leaves
        .iter()
        .map(|l| l.index().map_or(0.0, |k| adj[k]))
        .collect();
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(GpnError::NonFiniteGradient { index });
    }
    Ok((total / n + batch.val(), grad))
}

/// Gradient of an arbitrary scalar function of the parameters, recorded on a
/// fresh tape.
pub fn grad<F>(objective: F, params: &[f64]) -> Result<Vec<f64>>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.var(*p)).collect();
    let out = objective(&vars);
    let g: Vec<f64> = if out.is_const() {
        vec![0.0; params.len()]
    } else {
        let adj = tape.gradient(out);
        vars.iter().map(|v| v.index().map_or(0.0, |k| adj[k])).collect()
    };
    if let Some(index) = g.iter().position(|x| !x.is_finite()) {
        return Err(GpnError::NonFiniteGradient { index });
    }
    Ok(g)
}

/// Adam accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut OptimizerState, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(GpnError::DimensionMismatch(format!(
            "{} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= lr * mhat / (vhat.sqrt() + state.eps);
    }
    Ok(())
}

/// Optimization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_decay: f64,
    pub lr_min: f64,
    /// Validation evaluations without sufficient improvement before the
    /// learning rate is decayed.
    pub patience: usize,
    /// Relative improvement of the best validation loss that resets the
    /// plateau counter.
    pub min_rel_improvement: f64,
    pub batch_size: usize,
    pub max_iters: usize,
    pub seed: u64,
    pub mode: Mode,
    pub objective: Objective,
    pub penalty: Option<(f64, f64)>,
    pub kappa_u: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            lr_decay: 10.0,
            lr_min: 1e-6,
            patience: 10,
            min_rel_improvement: 1e-3,
            batch_size: 200,
            max_iters: 100_000,
            seed: 0,
            mode: Mode::MeanVariance,
            objective: Objective::MlClassification,
            penalty: Some((DEFAULT_ALPHA_S, DEFAULT_BETA_S)),
            kappa_u: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return Err(GpnError::InvalidArgument(format!(
                "learning rates must satisfy lr0 > lr_min > 0 (got {} and {})",
                self.lr0, self.lr_min
            )));
        }
        if self.batch_size == 0 {
            return Err(GpnError::InvalidArgument("batch size must be at least 1".into()));
        }
        if !(self.lr_decay > 1.0) {
            return Err(GpnError::InvalidArgument("learning-rate decay must exceed 1".into()));
        }
        Ok(())
    }

    pub fn spec(&self, n_train: usize) -> ObjectiveSpec {
        ObjectiveSpec {
            objective: self.objective,
            mode: self.mode,
            penalty: if self.objective.is_variational() {
                None
            } else {
                self.penalty
            },
            kappa_u: self.kappa_u,
            n_train,
        }
    }
}

/// Training and validation data for [`train`].
#[derive(Clone, Debug)]
pub struct TrainData {
    pub x_train: DenseMatrix,
    pub t_train: DenseMatrix,
    pub x_val: DenseMatrix,
    pub t_val: DenseMatrix,
}

/// One validation evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    /// Mean mini-batch objective since the previous evaluation.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_error: f64,
    pub wall_ms: f64,
}

/// Why training ended.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The next decay would take the learning rate below its minimum.
    LearningRateExhausted,
    MaxIterations,
    NonFiniteGradient { index: usize },
    NegativeVariance { message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    pub stop: StopReason,
    pub iterations: usize,
    pub best_iteration: usize,
    pub best_val_loss: f64,
}

/// Minimizes the configured objective with mini-batch Adam. The validation
/// loss is evaluated once per epoch; after `patience` evaluations without
/// sufficient improvement the learning rate is divided by `lr_decay`.
/// Training stops once another decay would fall below `lr_min`. On return
/// `net` (and `post`) hold the parameters of the best validation evaluation.
/// Without validation data the full training loss is monitored instead.
pub fn train(
    net: &mut NetworkParams,
    mut post: Option<&mut VariationalPosterior>,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = data.x_train.rows();
    if n == 0 {
        return Err(GpnError::InvalidArgument("empty training set".into()));
    }
    let spec = cfg.spec(n);
    check_inputs(net, post.as_deref(), &data.x_train, &data.t_train, &spec)?;
    let (x_mon, t_mon) = if data.x_val.rows() > 0 {
        (&data.x_val, &data.t_val)
    } else {
        (&data.x_train, &data.t_train)
    };

    let mut theta = net.trainable_vector(post.as_deref());
    let mut best_theta = theta.clone();
    let mut opt = OptimizerState::new(theta.len());
    let mut rng = rng_for(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let batch = cfg.batch_size.min(n);

    let start = Instant::now();
    let mut lr = cfg.lr0;
    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best_iteration = 0;
    let mut plateau_ref = f64::INFINITY;
    let mut since_improvement = 0;
    let mut iteration = 0;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);

    let stop = 'outer: loop {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            if iteration >= cfg.max_iters {
                break 'outer StopReason::MaxIterations;
            }
            let xb = crate::data::gather(&data.x_train, chunk);
            let tb = crate::data::gather(&data.t_train, chunk);
            let (loss, g) = match loss_and_grad(net, post.as_deref(), &xb, &tb, &spec) {
                Ok(r) => r,
                Err(GpnError::NonFiniteGradient { index }) => {
                    break 'outer StopReason::NonFiniteGradient { index }
                }
                Err(e @ GpnError::NegativeVariance { .. }) => {
                    break 'outer StopReason::NegativeVariance { message: e.to_string() }
                }
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                break 'outer StopReason::NonFiniteGradient { index: 0 };
            }
            adam_step(&mut opt, &mut theta, &g, lr)?;
            net.set_trainable(post.as_deref_mut(), &theta)?;
            iteration += 1;
            loss_sum += loss;
            loss_count += 1;
        }

        let (val_loss, val_error) = match evaluate(net, post.as_deref(), x_mon, t_mon, &spec) {
            Ok(r) => r,
            Err(e @ GpnError::NegativeVariance { .. }) => {
                break StopReason::NegativeVariance { message: e.to_string() }
            }
            Err(e) => return Err(e),
        };
        history.push(HistoryRow {
            iteration,
            lr,
            train_loss: loss_sum / loss_count.max(1) as f64,
            val_loss,
            val_error,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        (loss_sum, loss_count) = (0.0, 0);
        if !val_loss.is_finite() {
            break StopReason::NonFiniteGradient { index: 0 };
        }
        if val_loss < best_val {
            best_val = val_loss;
            best_theta.clone_from(&theta);
            best_iteration = iteration;
        }
        let improved = !plateau_ref.is_finite()
            || val_loss < plateau_ref - cfg.min_rel_improvement * plateau_ref.abs();
        if improved {
            plateau_ref = val_loss;
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.patience {
                let next = lr / cfg.lr_decay;
                if next < cfg.lr_min * (1.0 - 1e-9) {
                    break StopReason::LearningRateExhausted;
                }
                log::info!("iteration {iteration}: learning rate {lr:e} -> {next:e}");
                lr = next;
                since_improvement = 0;
            }
        }
    };
    net.set_trainable(post, &best_theta)?;
    Ok(TrainOutcome {
        history,
        stop,
        iterations: iteration,
        best_iteration,
        best_val_loss: best_val,
    })
}

/// Writes the history as CSV with a header row.
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "iteration,lr,train_loss,val_loss,val_error,wall_ms")?;
    for r in history {
        writeln!(
            w,
            "{},{:e},{},{},{},{:.3}",
            r.iteration, r.lr, r.train_loss, r.val_loss, r.val_error, r.wall_ms
        )?;
    }
    w.flush()?;
    Ok(())
}

/// One gradient component that disagrees with its finite difference.
#[derive(Clone, Debug, PartialEq)]
pub struct FdComponent {
    pub index: usize,
    pub kind: ParamKind,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Outcome of [`finite_diff_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub n_params: usize,
    pub n_checked: usize,
    pub worst: Option<FdComponent>,
    pub failures: Vec<FdComponent>,
    pub tolerance: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn worst_rel_error(&self) -> f64 {
        self.worst.as_ref().map_or(0.0, |c| c.rel_error)
    }
}

/// Maximum number of components checked when the network is larger.
pub const FD_MAX_CHECKED: usize = 200;

/// Compares [`loss_and_grad`] with fourth-order central differences of
/// [`objective_value`] with step `h` in the unconstrained parameters.
/// Components whose analytic and numeric values are both below `1e-6` in
/// magnitude are compared in absolute terms against `tolerance * 1e-6`.
/// Larger networks are checked on a seeded random subset of
/// [`FD_MAX_CHECKED`] components.
#[allow(clippy::too_many_arguments)]
pub fn finite_diff_check(
    net: &NetworkParams,
    post: Option<&VariationalPosterior>,
    x: &DenseMatrix,
    t: &DenseMatrix,
    spec: &ObjectiveSpec,
    h: f64,
    tolerance: f64,
    seed: u64,
) -> Result<FdReport> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(GpnError::InvalidArgument(format!("step {h} outside [1e-7, 1e-3]")));
    }
    let (_, analytic) = loss_and_grad(net, post, x, t, spec)?;
    let theta = net.trainable_vector(post);
    let kinds = net.trainable_kinds(post);
    let mut idx: Vec<usize> = (0..theta.len()).collect();
    if idx.len() > FD_MAX_CHECKED {
        idx.shuffle(&mut rng_for(seed, "finite-difference"));
        idx.truncate(FD_MAX_CHECKED);
        idx.sort_unstable();
    }
    let eval_at = |k: usize, delta: f64| -> Result<f64> {
        let mut net2 = net.clone();
        let mut post2 = post.cloned();
        let mut th = theta.clone();
        th[k] += delta;
        net2.set_trainable(post2.as_mut(), &th)?;
        objective_value(&net2, post2.as_ref(), x, t, spec)
    };
    let mut worst: Option<FdComponent> = None;
    let mut failures = Vec::new();
    for &k in &idx {
        let numeric = (8.0 * (eval_at(k, h)? - eval_at(k, -h)?) - (eval_at(k, 2.0 * h)? - eval_at(k, -2.0 * h)?))
            / (12.0 * h);
        let a = analytic[k];
        let scale = a.abs().max(numeric.abs()).max(1e-6);
        let rel_error = (a - numeric).abs() / scale;
        let c = FdComponent {
            index: k,
            kind: kinds[k],
            analytic: a,
            numeric,
            rel_error,
        };
        if worst.as_ref().is_none_or(|w| rel_error > w.rel_error) || !rel_error.is_finite() {
            worst = Some(c.clone());
        }
        if !(rel_error <= tolerance) {
            failures.push(c);
        }
    }
    Ok(FdReport {
        n_params: theta.len(),
        n_checked: idx.len(),
        worst,
        failures,
        tolerance,
    })
}
