//! Run configuration: a strict INI file mirroring every pipeline setting.
//!
//! Unknown sections, unknown keys and repeated keys are errors. Relative
//! paths in `[paths]` resolve against the directory holding the file.
//! [`DEFAULT_INI`] lists every key with its default.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::finetune::{DataSpec, FactoryConfig, HyperParams, SearchGrid};
use crate::model::{Activation, ModelSpec};
use crate::seed;
use crate::soup::{Basis, SoupMethod, SoupTrainConfig};

/// Every key with its default value.
pub const DEFAULT_INI: &str = "\
[run]
# master seed; every random stream derives from it
seed = 0

[data]
num_classes = 3
input_dim = 8
center_scale = 1.0
stddev = 1.5
n_train = 300
n_val = 300
n_test = 1000

[model]
# comma-separated hidden widths; empty for a linear model
hidden = 32
activation = relu

[pretrain]
learning_rate = 0.05
weight_decay = 0.0
epochs = 2
label_smoothing = 0.0
batch_size = 16

[search]
k = 16
jobs = 4
learning_rate = 0.003, 0.01, 0.03, 0.1
weight_decay = 0.0, 0.0001, 0.001, 0.01
epochs = 2, 5, 10
label_smoothing = 0.0, 0.05, 0.1
batch_size = 16

[soup]
model_batch = 4
outer_iters = 4
inner_iters = 250
data_batch = 32
lr = 0.01
weight_decay = 0.1
beta1 = 0.9
beta2 = 0.999
eps = 1e-8
label_smoothing = 0.0
decentralize = true
reset_adam_per_block = false
# cosine horizon in steps, or auto for outer_iters * inner_iters
schedule_horizon = auto
softmax_lr = 0.05
softmax_wd = 0.0

[bench]
methods = uniform, greedy, learned-softmax, learned-softmax-plus, hl, hl-plus, mehl, mehl-plus
sensitivity = 0, 2
convergence_outer = 4, 16, 64, 256
convergence_inner = 10
convergence_lr = 0.01
convergence_data_batch = 32

[paths]
data = data
pool = pool
out = out
";

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub methods: Vec<SoupMethod>,
    /// Numbers of top ingredients removed in the sensitivity study.
    pub sensitivity: Vec<usize>,
    /// Outer-iteration counts for the convergence trace.
    pub convergence_outer: Vec<usize>,
    pub convergence_inner: usize,
    pub convergence_lr: f64,
    pub convergence_data_batch: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            methods: SoupMethod::ALL.to_vec(),
            sensitivity: vec![0, 2],
            convergence_outer: vec![4, 16, 64, 256],
            convergence_inner: 10,
            convergence_lr: 0.01,
            convergence_data_batch: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathsConfig {
    pub data: PathBuf,
    pub pool: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// `seed` is overwritten by [`RunConfig::data_spec`].
    pub data: DataSpec,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// `seed` is derived from the master seed.
    pub pretrain: HyperParams,
    pub grid: SearchGrid,
    pub k: usize,
    pub jobs: usize,
    /// `seed` is overwritten by [`RunConfig::soup_config`].
    pub soup: SoupTrainConfig,
    pub softmax_lr: f64,
    pub softmax_wd: f64,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data: DataSpec::default(),
            hidden: vec![32],
            activation: Activation::Relu,
            pretrain: HyperParams {
                learning_rate: 0.05,
                weight_decay: 0.0,
                epochs: 2,
                label_smoothing: 0.0,
                batch_size: 16,
                seed: 0,
            },
            grid: SearchGrid::default(),
            k: 16,
            jobs: 4,
            soup: SoupTrainConfig::default(),
            softmax_lr: 0.05,
            softmax_wd: 0.0,
            bench: BenchConfig::default(),
            paths: PathsConfig {
                data: "data".into(),
                pool: "pool".into(),
                out: "out".into(),
            },
        }
    }
}

fn bad(section: &str, key: &str, value: &str, what: &str) -> Error {
    Error::Config(format!("[{section}] {key} = {value:?}: expected {what}"))
}

fn num<T: FromStr>(section: &str, key: &str, value: &str, what: &str) -> Result<T> {
    value.trim().parse().map_err(|_| bad(section, key, value, what))
}

fn list<T: FromStr>(section: &str, key: &str, value: &str, what: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad(section, key, value, what)))
        .collect()
}

fn boolean(section: &str, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(section, key, value, "true or false")),
    }
}

impl RunConfig {
    /// Parses `path`; relative paths resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Parses INI text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((key, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key {key:?} appears before any [section]")));
                }
                continue;
            };
            for (key, value) in props.iter() {
                if !seen.insert((section.to_string(), key.to_string())) {
                    return Err(Error::Config(format!("[{section}] {key} is set twice")));
                }
                cfg.set(section, key, value)?;
            }
        }
        for p in [&mut cfg.paths.data, &mut cfg.paths.pool, &mut cfg.paths.out] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let (s, k) = (section, key);
        const INT: &str = "a non-negative integer";
        const REAL: &str = "a real number";
        match (s, k) {
            ("run", "seed") => self.seed = num(s, k, v, INT)?,

            ("data", "num_classes") => self.data.num_classes = num(s, k, v, INT)?,
            ("data", "input_dim") => self.data.input_dim = num(s, k, v, INT)?,
            ("data", "center_scale") => self.data.center_scale = num(s, k, v, REAL)?,
            ("data", "stddev") => self.data.stddev = num(s, k, v, REAL)?,
            ("data", "n_train") => self.data.n_train = num(s, k, v, INT)?,
            ("data", "n_val") => self.data.n_val = num(s, k, v, INT)?,
            ("data", "n_test") => self.data.n_test = num(s, k, v, INT)?,

            ("model", "hidden") => self.hidden = list(s, k, v, "comma-separated widths")?,
            ("model", "activation") => {
                self.activation = v.trim().parse().map_err(|_| bad(s, k, v, "relu or tanh"))?
            }

            ("pretrain", "learning_rate") => self.pretrain.learning_rate = num(s, k, v, REAL)?,
            ("pretrain", "weight_decay") => self.pretrain.weight_decay = num(s, k, v, REAL)?,
            ("pretrain", "epochs") => self.pretrain.epochs = num(s, k, v, INT)?,
            ("pretrain", "label_smoothing") => self.pretrain.label_smoothing = num(s, k, v, REAL)?,
            ("pretrain", "batch_size") => self.pretrain.batch_size = num(s, k, v, INT)?,

            ("search", "k") => self.k = num(s, k, v, INT)?,
            ("search", "jobs") => self.jobs = num(s, k, v, INT)?,
            ("search", "learning_rate") => self.grid.learning_rate = list(s, k, v, "a list of reals")?,
            ("search", "weight_decay") => self.grid.weight_decay = list(s, k, v, "a list of reals")?,
            ("search", "epochs") => self.grid.epochs = list(s, k, v, "a list of integers")?,
            ("search", "label_smoothing") => self.grid.label_smoothing = list(s, k, v, "a list of reals")?,
            ("search", "batch_size") => self.grid.batch_size = num(s, k, v, INT)?,

            ("soup", "model_batch") => self.soup.model_batch = num(s, k, v, INT)?,
            ("soup", "outer_iters") => self.soup.outer_iters = num(s, k, v, INT)?,
            ("soup", "inner_iters") => self.soup.inner_iters = num(s, k, v, INT)?,
            ("soup", "data_batch") => self.soup.data_batch = num(s, k, v, INT)?,
            ("soup", "lr") => self.soup.lr = num(s, k, v, REAL)?,
            ("soup", "weight_decay") => self.soup.weight_decay = num(s, k, v, REAL)?,
            ("soup", "beta1") => self.soup.beta1 = num(s, k, v, REAL)?,
            ("soup", "beta2") => self.soup.beta2 = num(s, k, v, REAL)?,
            ("soup", "eps") => self.soup.eps = num(s, k, v, REAL)?,
            ("soup", "label_smoothing") => self.soup.label_smoothing = num(s, k, v, REAL)?,
            ("soup", "decentralize") => {
                self.soup.basis = if boolean(s, k, v)? { Basis::Centered } else { Basis::Raw }
            }
            ("soup", "reset_adam_per_block") => self.soup.reset_adam_per_block = boolean(s, k, v)?,
            ("soup", "schedule_horizon") => {
                self.soup.schedule_horizon = match v.trim() {
                    "auto" => None,
                    _ => Some(num(s, k, v, "an integer or auto")?),
                }
            }
            ("soup", "softmax_lr") => self.softmax_lr = num(s, k, v, REAL)?,
            ("soup", "softmax_wd") => self.softmax_wd = num(s, k, v, REAL)?,

            ("bench", "methods") => {
                self.bench.methods = v
                    .split(',')
                    .map(str::trim)
                    .filter(|m| !m.is_empty())
                    .map(|m| m.parse().map_err(|e: Error| Error::Config(format!("[bench] methods: {e}"))))
                    .collect::<Result<_>>()?
            }
            ("bench", "sensitivity") => self.bench.sensitivity = list(s, k, v, "a list of integers")?,
            ("bench", "convergence_outer") => self.bench.convergence_outer = list(s, k, v, "a list of integers")?,
            ("bench", "convergence_inner") => self.bench.convergence_inner = num(s, k, v, INT)?,
            ("bench", "convergence_lr") => self.bench.convergence_lr = num(s, k, v, REAL)?,
            ("bench", "convergence_data_batch") => self.bench.convergence_data_batch = num(s, k, v, INT)?,

            ("paths", "data") => self.paths.data = v.trim().into(),
            ("paths", "pool") => self.paths.pool = v.trim().into(),
            ("paths", "out") => self.paths.out = v.trim().into(),

            ("run" | "data" | "model" | "pretrain" | "search" | "soup" | "bench" | "paths", _) => {
                return Err(Error::Config(format!("unknown key {key:?} in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| Error::Config(e.to_string());
        self.data_spec().validate().map_err(cfg_err)?;
        self.model_spec().map_err(cfg_err)?;
        self.soup_config().validate().map_err(cfg_err)?;
        let grid = &self.grid;
        if grid.learning_rate.is_empty()
            || grid.weight_decay.is_empty()
            || grid.epochs.is_empty()
            || grid.label_smoothing.is_empty()
        {
            return Err(Error::Config("[search] grids must be non-empty".into()));
        }
        if self.k == 0 {
            return Err(Error::Config("[search] k must be at least 1".into()));
        }
        if self.soup.model_batch == 0 || self.soup.model_batch > self.k {
            return Err(Error::Config(format!(
                "[soup] model_batch must be in 1..={}",
                self.k
            )));
        }
        if self.bench.sensitivity.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("[bench] sensitivity drops must be strictly increasing".into()));
        }
        if self.bench.sensitivity.last().is_some_and(|&d| d >= self.k) {
            return Err(Error::Config("[bench] sensitivity drops must be below k".into()));
        }
        Ok(())
    }

    /// Replaces the master seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            self.data.input_dim,
            self.hidden.clone(),
            self.data.num_classes,
            self.activation,
        )
    }

    pub fn factory(&self) -> Result<FactoryConfig> {
        Ok(FactoryConfig {
            model: self.model_spec()?,
            pretrain: HyperParams {
                seed: seed::derive(self.seed, "pretrain"),
                ..self.pretrain.clone()
            },
            grid: self.grid.clone(),
            k: self.k,
            master_seed: self.seed,
            jobs: self.jobs.max(1),
        })
    }

    pub fn soup_config(&self) -> SoupTrainConfig {
        SoupTrainConfig {
            seed: self.seed,
            ..self.soup.clone()
        }
    }

    /// Soup settings for the softmax baseline.
    pub fn softmax_config(&self) -> SoupTrainConfig {
        SoupTrainConfig {
            lr: self.softmax_lr,
            weight_decay: self.softmax_wd,
            ..self.soup_config()
        }
    }

    /// Settings used by [`crate::bench::convergence_trace`] for each `T`.
    pub fn convergence_config(&self) -> SoupTrainConfig {
        let t_max = self.bench.convergence_outer.iter().copied().max().unwrap_or(1);
        SoupTrainConfig {
            inner_iters: self.bench.convergence_inner,
            lr: self.bench.convergence_lr,
            weight_decay: 0.0,
            data_batch: self.bench.convergence_data_batch,
            schedule_horizon: Some(t_max * self.bench.convergence_inner),
            ..self.soup_config()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_defaults_match_the_struct() {
        let parsed = RunConfig::parse(DEFAULT_INI, Path::new("")).unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(RunConfig::parse("", Path::new("")).unwrap(), RunConfig::default());
    }

    #[test]
    fn values_override_defaults() {
        let text = "[model]\nhidden = 4, 5\nactivation = tanh\n[soup]\ndecentralize = false\nschedule_horizon = 2000\n";
        let cfg = RunConfig::parse(text, Path::new("/cfg")).unwrap();
        assert_eq!(cfg.hidden, vec![4, 5]);
        assert_eq!(cfg.activation, Activation::Tanh);
        assert_eq!(cfg.soup.basis, Basis::Raw);
        assert_eq!(cfg.soup.schedule_horizon, Some(2000));
        assert_eq!(cfg.paths.pool, Path::new("/cfg/pool"));
    }

    #[test]
    fn empty_hidden_gives_a_linear_model() {
        let cfg = RunConfig::parse("[model]\nhidden =\n", Path::new("")).unwrap();
        assert!(cfg.model_spec().unwrap().hidden_dims.is_empty());
    }

    #[test]
    fn strictness() {
        for text in [
            "[soup]\nlearning_rate = 0.1\n",
            "[sop]\nlr = 0.1\n",
            "seed = 3\n",
            "[soup]\nlr = fast\n",
            "[soup]\nlr = 0.1\nlr = 0.2\n",
            "[soup]\ndecentralize = yes\n",
            "[bench]\nmethods = uniform, average\n",
            "[search]\nk = 0\n",
            "[soup]\nmodel_batch = 17\n",
            "[bench]\nsensitivity = 2, 1\n",
        ] {
            let err = RunConfig::parse(text, Path::new("")).unwrap_err();
            assert!(matches!(err, Error::Config(_)), "{text:?} gave {err}");
        }
    }

    #[test]
    fn absolute_paths_are_kept() {
        let cfg = RunConfig::parse("[paths]\nout = /tmp/x\n", Path::new("/cfg")).unwrap();
        assert_eq!(cfg.paths.out, Path::new("/tmp/x"));
    }

    #[test]
    fn one_seed_feeds_every_stage() {
        let cfg = RunConfig::default().with_seed(7);
        assert_eq!(cfg.data_spec().seed, 7);
        assert_eq!(cfg.soup_config().seed, 7);
        assert_eq!(cfg.factory().unwrap().master_seed, 7);
        let conv = cfg.convergence_config();
        assert_eq!(conv.schedule_horizon, Some(2560));
        assert_eq!(conv.weight_decay, 0.0);
    }
}
