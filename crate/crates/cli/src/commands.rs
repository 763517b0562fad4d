//! Subcommand implementations.

use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use gpn_core::data::{split, Dataset, Split};
use gpn_core::gp::ActivationTarget;
use gpn_core::network::{init_network, Checkpoint, VariationalPosterior};
use gpn_core::seed::derive_seed;
use gpn_core::training::{evaluate, train, write_history_csv, TrainData};
use gpn_core::verify::{
    activation_fit_experiment, benchmark_run, clt_experiment, export_activations, gradient_cases,
    kernel_oracle_suite, layer_oracle_suite, write_bench_csv, Fault, KernelQuantity, FD_STEP, FD_TOLERANCE,
};
use log::info;
use serde::Serialize;

use crate::config::{prepare_out, usage, Manifest, RunConfig};
use crate::{Command, CommonArgs};

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(common) => cmd_train(&common),
        Command::Eval {
            common,
            checkpoint,
            split,
        } => cmd_eval(&common, &checkpoint, &split),
        Command::Verify {
            common,
            only,
            fault,
            draws,
            cases,
        } => cmd_verify(&common, &only, fault.as_deref(), draws, cases),
        Command::Bench {
            common,
            seeds,
            export_activations,
        } => cmd_bench(&common, seeds, export_activations),
        Command::Clt {
            common,
            widths,
            draws,
            trials,
        } => cmd_clt(&common, &widths, draws, trials),
        Command::FitActivation {
            common,
            r_counts,
            functions,
        } => cmd_fit_activation(&common, &r_counts, &functions),
        Command::ExportActivations {
            common,
            checkpoint,
            range,
            points,
        } => cmd_export(&common, &checkpoint, &range, points),
    }
}

/// Resolves the configuration and prepares the output directory with its
/// manifest.
fn start(command: &str, common: &CommonArgs) -> Result<RunConfig> {
    let cfg = RunConfig::resolve(common)?;
    prepare_out(&cfg.out)?;
    Manifest::write(command, &cfg)?;
    Ok(cfg)
}

fn split_data(cfg: &RunConfig, ds: &Dataset) -> Result<(Dataset, TrainData)> {
    let ds = split(ds, cfg.val_fraction, derive_seed(cfg.seed, "validation"))
        .map_err(|e| usage(format!("invalid val_fraction: {e}")))?;
    let (x_train, t_train) = ds.subset(Split::Train);
    let (x_val, t_val) = ds.subset(Split::Val);
    let data = TrainData {
        x_train,
        t_train,
        x_val,
        t_val,
    };
    Ok((ds, data))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

#[derive(Serialize)]
struct TrainSummary {
    iterations: usize,
    best_iteration: usize,
    best_val_loss: f64,
    stop: gpn_core::training::StopReason,
    wall_seconds: f64,
}

fn cmd_train(common: &CommonArgs) -> Result<ExitCode> {
    let cfg = start("train", common)?;
    let ds = cfg.load_dataset()?;
    let init = cfg.init_config(&ds)?;
    let (_, data) = split_data(&cfg, &ds)?;
    let mut net = init_network(&init)?;
    let mut post = if cfg.objective().is_variational() {
        Some(VariationalPosterior::from_observations(&net)?)
    } else {
        None
    };
    info!(
        "training {:?} on {} ({} train, {} val rows), {} {}",
        init.shape,
        cfg.dataset,
        data.x_train.rows(),
        data.x_val.rows(),
        cfg.objective(),
        cfg.mode
    );
    let started = std::time::Instant::now();
    let outcome = train(&mut net, post.as_mut(), &data, &cfg.train)?;
    let summary = TrainSummary {
        iterations: outcome.iterations,
        best_iteration: outcome.best_iteration,
        best_val_loss: outcome.best_val_loss,
        stop: outcome.stop.clone(),
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    write_history_csv(&cfg.out.join("history.csv"), &outcome.history)?;
    Checkpoint::new(net, post, cfg.mode, cfg.seed).save(&cfg.out.join("checkpoint.json"))?;
    write_json(&cfg.out.join("summary.json"), &summary)?;
    println!(
        "stopped after {} iterations ({:?}); best validation loss {:.6} at iteration {}",
        summary.iterations, summary.stop, summary.best_val_loss, summary.best_iteration
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalSummary {
    split: String,
    rows: usize,
    loss: f64,
    error: f64,
}

fn cmd_eval(common: &CommonArgs, checkpoint: &Path, which: &str) -> Result<ExitCode> {
    let cfg = start("eval", common)?;
    let which_split = match which {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(usage(format!("invalid --split '{other}' (expected train, val or test)"))),
    };
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let ds = cfg.load_dataset()?;
    let (ds, data) = split_data(&cfg, &ds)?;
    let (x, t) = ds.subset(which_split);
    if x.rows() == 0 {
        return Err(usage(format!("the {which} split of {} is empty", cfg.dataset)));
    }
    let mut spec = cfg.train.spec(data.x_train.rows());
    spec.mode = ckpt.mode;
    let (loss, error) = evaluate(&ckpt.net, ckpt.posterior.as_ref(), &x, &t, &spec)?;
    let summary = EvalSummary {
        split: which.to_string(),
        rows: x.rows(),
        loss,
        error,
    };
    write_json(&cfg.out.join("eval.json"), &summary)?;
    println!("{which}: {} rows, loss {loss:.6}, error {error:.6}", x.rows());
    Ok(ExitCode::SUCCESS)
}

/// Outcome of one verification suite.
#[derive(Serialize)]
struct Check {
    name: String,
    passed: bool,
    detail: String,
}

/// At least `fraction` of `n` cases.
fn enough(passed: usize, n: usize, fraction: f64) -> bool {
    passed as f64 >= (fraction * n as f64).ceil() - 1e-9
}

const SUITES: [&str; 5] = ["kernels", "layers", "gradients", "clt", "activation-fit"];

fn cmd_verify(
    common: &CommonArgs,
    only: &[String],
    fault: Option<&str>,
    draws: Option<usize>,
    cases: Option<usize>,
) -> Result<ExitCode> {
    let cfg = start("verify", common)?;
    for s in only {
        if !SUITES.contains(&s.as_str()) {
            return Err(usage(format!("invalid --only '{s}' (expected one of {})", SUITES.join(", "))));
        }
    }
    let fault: Fault = match fault {
        Some(f) => f.parse().map_err(|e| usage(format!("invalid --fault: {e}")))?,
        None => Fault::None,
    };
    let selected = |s: &str| only.is_empty() || only.iter().any(|o| o == s);
    let draws = draws.unwrap_or(1_000_000);
    let seed = cfg.seed;
    let mut checks = Vec::new();

    if selected("kernels") {
        let n = cases.unwrap_or(100);
        for q in KernelQuantity::ALL {
            let reports = kernel_oracle_suite(q, n, draws, seed, fault)?;
            let passed = reports.iter().filter(|r| r.pass).count();
            checks.push(Check {
                name: format!("kernel {q}"),
                passed: enough(passed, n, 0.99),
                detail: format!("{passed}/{n} within 3 se of {draws} draws"),
            });
        }
    }
    if selected("layers") {
        let n = cases.unwrap_or(20);
        let results = layer_oracle_suite(n, draws.max(gpn_core::verify::MIN_LAYER_DRAWS), seed, fault)?;
        let ml = results.iter().filter(|(m, _)| m.passed()).count();
        let vb = results.iter().filter(|(_, v)| v.passed()).count();
        for (name, passed) in [("layer ml", ml), ("layer vb", vb)] {
            checks.push(Check {
                name: name.to_string(),
                passed: enough(passed, n, 0.95),
                detail: format!("{passed}/{n} layers within 3 se"),
            });
        }
    }
    if selected("gradients") {
        let n = cases.unwrap_or(20);
        let (mut total, mut failed, mut worst) = (0, 0, 0.0f64);
        for i in 0..n {
            for case in gradient_cases(derive_seed(seed, &format!("fd-{i}")), FD_STEP, FD_TOLERANCE)? {
                total += 1;
                worst = worst.max(case.report.worst_rel_error());
                failed += usize::from(!case.report.passed());
            }
        }
        checks.push(Check {
            name: "finite differences".to_string(),
            passed: failed == 0,
            detail: format!("{}/{total} cases within {FD_TOLERANCE:e}, worst {worst:.2e}", total - failed),
        });
    }
    if selected("clt") {
        let (wins, trials) = clt_wins(seed, 20, 1000)?;
        checks.push(Check {
            name: "central limit".to_string(),
            passed: enough(wins, trials, 0.75),
            detail: format!("KS(10) < KS(3) in {wins}/{trials} trials"),
        });
    }
    if selected("activation-fit") {
        let rows = activation_fit_experiment(&[5, 8], &[ActivationTarget::Tanh, ActivationTarget::Relu])?;
        let get = |r: usize, f: ActivationTarget| {
            rows.iter()
                .find(|x| x.r_count == r && x.function == f)
                .map_or(f64::NAN, |x| x.max_abs)
        };
        let (tanh8, relu5, relu8) = (
            get(8, ActivationTarget::Tanh),
            get(5, ActivationTarget::Relu),
            get(8, ActivationTarget::Relu),
        );
        checks.push(Check {
            name: "activation fit".to_string(),
            passed: tanh8 <= 0.05 && relu5 > relu8,
            detail: format!("tanh R=8 {tanh8:.4}; relu R=5 {relu5:.4} vs R=8 {relu8:.4}"),
        });
    }

    let mut w = csv::Writer::from_path(cfg.out.join("verify.csv"))?;
    for c in &checks {
        w.serialize(c)?;
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    w.flush()?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        println!("all {} checks passed", checks.len());
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("failing checks: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

/// Number of trials in which width 10 is closer to normal than width 3.
fn clt_wins(seed: u64, trials: usize, draws: usize) -> Result<(usize, usize)> {
    let mut wins = 0;
    for t in 0..trials {
        let res = clt_experiment(&[3, 10], derive_seed(seed, &format!("clt-{t}")), draws)?;
        if res[1].ks < res[0].ks {
            wins += 1;
        }
    }
    Ok((wins, trials))
}

fn cmd_bench(common: &CommonArgs, seeds: Option<usize>, export: bool) -> Result<ExitCode> {
    let mut cfg = RunConfig::resolve(common)?;
    if let Some(n) = seeds {
        cfg.seeds = n;
    }
    if cfg.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    prepare_out(&cfg.out)?;
    Manifest::write("bench", &cfg)?;
    let ds = cfg.load_dataset()?;
    let init = cfg.init_config(&ds)?;
    let seed_list: Vec<u64> = (0..cfg.seeds as u64).map(|i| cfg.seed + i).collect();
    let summary = benchmark_run(&ds, &cfg.dataset, cfg.mode.short_name(), &init, &cfg.train, &seed_list)?;
    write_bench_csv(&cfg.out.join("bench.csv"), &summary)?;
    for r in &summary.rows {
        println!(
            "seed {}: train {:.4}, val {:.4}, test {:.4}, {} iterations, {:.2} ms/iter",
            r.seed, r.train_error, r.val_error, r.test_error, r.iterations, r.ms_per_iter
        );
    }
    println!(
        "{} {}: test error {:.4} +- {:.4} over {} seeds",
        cfg.dataset,
        cfg.mode,
        summary.mean_test_error,
        summary.stderr_test_error,
        summary.rows.len()
    );
    if export {
        for (row, net) in summary.rows.iter().zip(&summary.networks) {
            export_activations(net, &cfg.out.join(format!("activations/seed{}", row.seed)), [-3.0, 3.0], 101)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_clt(common: &CommonArgs, widths: &[usize], draws: usize, trials: usize) -> Result<ExitCode> {
    let cfg = start("clt", common)?;
    if widths.len() < 2 {
        return Err(usage("--widths needs at least two entries"));
    }
    let mut w = csv::Writer::from_path(cfg.out.join("clt.csv"))?;
    w.write_record(["trial", "seed", "width", "ks", "n_draws"])?;
    for t in 0..trials {
        let seed = derive_seed(cfg.seed, &format!("clt-{t}"));
        let res = clt_experiment(widths, seed, draws).map_err(|e| usage(e.to_string()))?;
        for r in &res {
            w.write_record([t.to_string(), seed.to_string(), r.width.to_string(), r.ks.to_string(), r.n_draws.to_string()])?;
        }
        let line: Vec<String> = res.iter().map(|r| format!("KS({})={:.4}", r.width, r.ks)).collect();
        println!("trial {t}: {}", line.join(" "));
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_fit_activation(common: &CommonArgs, r_counts: &[usize], functions: &[String]) -> Result<ExitCode> {
    let cfg = start("fit-activation", common)?;
    let targets = functions
        .iter()
        .map(|f| f.parse::<ActivationTarget>().map_err(|e| usage(format!("invalid --functions: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let rows = activation_fit_experiment(r_counts, &targets).map_err(|e| usage(e.to_string()))?;
    let mut w = csv::Writer::from_path(cfg.out.join("fit.csv"))?;
    w.write_record(["r_count", "function", "max_abs", "rms"])?;
    for r in &rows {
        w.write_record([r.r_count.to_string(), r.function.name().to_string(), r.max_abs.to_string(), r.rms.to_string()])?;
        println!("R={} {}: max-abs {:.5}, rms {:.5}", r.r_count, r.function.name(), r.max_abs, r.rms);
    }
    w.flush()?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(common: &CommonArgs, checkpoint: &Path, range: &[f64], points: usize) -> Result<ExitCode> {
    let cfg = start("export-activations", common)?;
    let range: [f64; 2] = range
        .try_into()
        .ok()
        .filter(|r: &[f64; 2]| r[0] < r[1])
        .ok_or_else(|| usage("--range needs two increasing values, e.g. -3,3"))?;
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let paths = export_activations(&ckpt.net, &cfg.out, range, points)?;
    println!("wrote {} activation files to {}", paths.len(), cfg.out.display());
    Ok(ExitCode::SUCCESS)
}
