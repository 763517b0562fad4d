//! Run configuration: defaults, overridden by a JSON config file, overridden
//! by command-line flags.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gpn_core::data::{toy_regression, with_test_rows, Dataset};
use gpn_core::network::{parse_shape, InitConfig, Mode, Sharing, TargetInit};
use gpn_core::objectives::Objective;
use gpn_core::seed::derive_seed;
use gpn_core::training::TrainConfig;
use gpn_core::verify::BenchDataset;
use serde::{Deserialize, Serialize};

use crate::CommonArgs;

/// A configuration or usage mistake; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Name of the built-in synthetic regression data set.
pub const TOY: &str = "toy";

/// Everything a run depends on. Written to every output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Input width, GPN layer widths and, for classification, the class
    /// count, e.g. `16x30x15x26`.
    pub arch: Option<String>,
    /// `toy` or one of the benchmark data sets.
    pub dataset: String,
    pub data_dir: PathBuf,
    pub toy_samples: usize,
    /// Extra toy samples held out as test rows.
    pub toy_test_samples: usize,
    pub toy_noise: f64,
    pub val_fraction: f64,
    pub mode: Mode,
    /// Defaults to regression for `toy` and classification otherwise.
    pub objective: Option<Objective>,
    pub sharing: Sharing,
    pub target_init: TargetInit,
    pub r_count: usize,
    pub train: TrainConfig,
    /// Number of seeds of a benchmark run.
    pub seeds: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            arch: None,
            dataset: TOY.to_string(),
            data_dir: PathBuf::from("data"),
            toy_samples: 400,
            toy_test_samples: 100,
            toy_noise: 0.1,
            val_fraction: 0.1,
            mode: Mode::MeanVariance,
            objective: None,
            sharing: Sharing::None,
            target_init: TargetInit::RandomNormal,
            r_count: 14,
            train: TrainConfig::default(),
            seeds: 5,
            out: PathBuf::from("gpn-out"),
        }
    }
}

fn parse_flag<T: std::str::FromStr>(flag: &str, value: &Option<String>) -> Result<Option<T>>
where
    T::Err: fmt::Display,
{
    value
        .as_deref()
        .map(|v| v.parse::<T>().map_err(|e| usage(format!("invalid --{flag} '{v}': {e}"))))
        .transpose()
}

/// Reads a config file, which may also be a manifest written by an earlier
/// run.
fn read_config_file(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("invalid --config {}: {e}", path.display())))?;
    let inner = match value.get("config") {
        Some(c) if value.get("build_id").is_some() => c.clone(),
        _ => value,
    };
    serde_json::from_value(inner).map_err(|e| usage(format!("invalid --config {}: {e}", path.display())))
}

impl RunConfig {
    /// Defaults, then the config file, then flags.
    pub fn resolve(args: &CommonArgs) -> Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => read_config_file(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            cfg.seed = s;
        }
        if let Some(a) = &args.arch {
            cfg.arch = Some(a.clone());
        }
        if let Some(d) = &args.dataset {
            cfg.dataset = d.clone();
        }
        if let Some(d) = &args.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(m) = parse_flag("mode", &args.mode)? {
            cfg.mode = m;
        }
        if let Some(o) = parse_flag("objective", &args.objective)? {
            cfg.objective = Some(o);
        }
        if let Some(s) = parse_flag("sharing", &args.sharing)? {
            cfg.sharing = s;
        }
        if let Some(t) = parse_flag("target-init", &args.target_init)? {
            cfg.target_init = t;
        }
        if let Some(n) = args.max_iters {
            cfg.train.max_iters = n;
        }
        if let Some(lr) = args.lr {
            cfg.train.lr0 = lr;
        }
        if let Some(b) = args.batch_size {
            cfg.train.batch_size = b;
        }
        if let Some(o) = &args.out {
            cfg.out = o.clone();
        }
        if cfg.objective.is_none() {
            cfg.objective = Some(if cfg.dataset == TOY {
                Objective::MlRegression
            } else {
                Objective::MlClassification
            });
        }
        if let Some(a) = &cfg.arch {
            parse_shape(a).map_err(|e| usage(format!("invalid --arch '{a}': {e}")))?;
        }
        if cfg.dataset != TOY {
            cfg.dataset
                .parse::<BenchDataset>()
                .map_err(|e| usage(format!("invalid --dataset: {e}")))?;
        }
        cfg.train.mode = cfg.mode;
        cfg.train.objective = cfg.objective();
        cfg.train.seed = cfg.seed;
        cfg.train.validate().map_err(|e| usage(format!("invalid training settings: {e}")))?;
        Ok(cfg)
    }

    pub fn objective(&self) -> Objective {
        self.objective.unwrap_or(Objective::MlRegression)
    }

    /// Loads the configured data set. Test rows stay untouched; nothing is
    /// split off for validation yet.
    pub fn load_dataset(&self) -> Result<Dataset> {
        if self.dataset == TOY {
            let train = toy_regression(self.toy_samples, self.toy_noise, derive_seed(self.seed, "toy-data"));
            let test = toy_regression(self.toy_test_samples, self.toy_noise, derive_seed(self.seed, "toy-test"));
            return Ok(with_test_rows(train, test)?);
        }
        let d: BenchDataset = self.dataset.parse().map_err(|e| usage(format!("{e}")))?;
        Ok(d.load(&self.data_dir)?)
    }

    fn arch_string(&self) -> String {
        match (&self.arch, self.dataset.parse::<BenchDataset>()) {
            (Some(a), _) => a.clone(),
            (None, Ok(d)) => d.default_arch().to_string(),
            (None, Err(_)) => "1x10x1".to_string(),
        }
    }

    /// Network initialization for a data set, checking the architecture
    /// against its input and output widths.
    pub fn init_config(&self, ds: &Dataset) -> Result<InitConfig> {
        let arch = self.arch_string();
        let shape = parse_shape(&arch).map_err(|e| usage(format!("invalid --arch '{arch}': {e}")))?;
        let classification = self.objective().is_classification();
        if classification != ds.is_classification() {
            return Err(usage(format!(
                "objective {} does not fit the {} data set",
                self.objective(),
                self.dataset
            )));
        }
        if shape[0] != ds.n_features() {
            return Err(usage(format!(
                "--arch '{arch}' expects {} inputs but the data set has {}",
                shape[0],
                ds.n_features()
            )));
        }
        let last = *shape.last().expect("parsed shape is non-empty");
        if last != ds.n_targets() {
            return Err(usage(format!(
                "--arch '{arch}' ends in {last} outputs but the data set has {}",
                ds.n_targets()
            )));
        }
        let (gpn_shape, n_classes) = if classification {
            if shape.len() < 3 {
                return Err(usage(format!(
                    "--arch '{arch}' needs at least one GPN layer before the {last} classes"
                )));
            }
            (shape[..shape.len() - 1].to_vec(), Some(last))
        } else {
            (shape, None)
        };
        let mut init = InitConfig::new(gpn_shape);
        init.r_count = self.r_count;
        init.sharing = self.sharing;
        init.target_init = self.target_init;
        init.n_classes = n_classes;
        init.seed = self.seed;
        Ok(init)
    }
}

/// Build id recorded in manifests.
pub fn build_id() -> String {
    format!("{}+{}", env!("CARGO_PKG_VERSION"), env!("GPN_BUILD_ID"))
}

/// Contents of `manifest.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub build_id: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: RunConfig,
}

impl Manifest {
    pub fn write(command: &str, config: &RunConfig) -> Result<()> {
        let manifest = Manifest {
            build_id: build_id(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: config.clone(),
        };
        let path = config.out.join("manifest.json");
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

/// Creates the output directory.
pub fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("output directory {} is not writable: {e}", dir.display())))
}
