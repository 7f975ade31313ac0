//! Ingredient factory: synthetic Gaussian-blob data, pre-training, and
//! fine-tuning K variants under a seeded random hyperparameter search.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{backward, Dataset, ModelSpec, Split};
use crate::params::{write_checkpoint, write_manifest, ParamVector, MANIFEST_NAME};
use crate::{fmt_real, seed};

/// Gaussian-blob classification problem.
#[derive(Clone, Debug, PartialEq)]
pub struct DataSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    /// Standard deviation of the class-center distribution.
    pub center_scale: f64,
    /// Within-class standard deviation.
    pub stddev: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for DataSpec {
    fn default() -> Self {
        DataSpec {
            num_classes: 3,
            input_dim: 8,
            center_scale: 1.0,
            stddev: 1.5,
            n_train: 300,
            n_val: 300,
            n_test: 1000,
            seed: 0,
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("data needs at least 2 classes".into()));
        }
        if self.input_dim < 1 {
            return Err(Error::InvalidArgument("input dimension must be at least 1".into()));
        }
        if self.n_train < self.num_classes {
            return Err(Error::InvalidArgument("n_train must cover every class".into()));
        }
        if self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidArgument("validation and test splits must be non-empty".into()));
        }
        if !(self.stddev >= 0.0 && self.center_scale >= 0.0) {
            return Err(Error::InvalidArgument("scales must be non-negative".into()));
        }
        Ok(())
    }

    /// Class centers, one row of `input_dim` values per class.
    pub fn centers(&self) -> Vec<Vec<f64>> {
        let mut rng = seed::stream(self.seed, "data/centers");
        (0..self.num_classes)
            .map(|_| {
                (0..self.input_dim)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        self.center_scale * z
                    })
                    .collect()
            })
            .collect()
    }
}

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn generate_dataset(spec: &DataSpec) -> Result<Splits> {
    spec.validate()?;
    let centers = spec.centers();
    let make = |n: usize, split: Split| {
        let mut rng = seed::stream(spec.seed, &format!("data/{split}"));
        let mut labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
        labels.shuffle(&mut rng);
        let mut features = Vec::with_capacity(n * spec.input_dim);
        for &y in &labels {
            for &c in &centers[y] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                features.push(c + spec.stddev * noise);
            }
        }
        Dataset::new(features, labels, spec.input_dim, split)
    };
    Ok(Splits {
        train: make(spec.n_train, Split::Train)?,
        val: make(spec.n_val, Split::Validation)?,
        test: make(spec.n_test, Split::Test)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub label_smoothing: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl HyperParams {
    fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.batch_size > 0;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid hyperparameters {self:?}")));
        }
        Ok(())
    }
}

/// Grids sampled by [`random_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct SearchGrid {
    pub learning_rate: Vec<f64>,
    pub weight_decay: Vec<f64>,
    pub epochs: Vec<usize>,
    pub label_smoothing: Vec<f64>,
    pub batch_size: usize,
}

impl Default for SearchGrid {
    fn default() -> Self {
        SearchGrid {
            learning_rate: vec![0.003, 0.01, 0.03, 0.1],
            weight_decay: vec![0.0, 1e-4, 1e-3, 1e-2],
            epochs: vec![2, 5, 10],
            label_smoothing: vec![0.0, 0.05, 0.1],
            batch_size: 16,
        }
    }
}

/// `n` configurations drawn uniformly from the grids. Config `i` draws from
/// stream `search/i` and trains with seed `finetune/i`.
pub fn random_search(n: usize, master_seed: u64, grid: &SearchGrid) -> Vec<HyperParams> {
    fn pick<T: Copy>(rng: &mut seed::Rng, values: &[T]) -> T {
        values[rng.random_range(0..values.len())]
    }
    (1..=n)
        .map(|i| {
            let mut rng = seed::stream(master_seed, &format!("search/{i}"));
            HyperParams {
                learning_rate: pick(&mut rng, &grid.learning_rate),
                weight_decay: pick(&mut rng, &grid.weight_decay),
                epochs: pick(&mut rng, &grid.epochs),
                label_smoothing: pick(&mut rng, &grid.label_smoothing),
                batch_size: grid.batch_size,
                seed: seed::derive(master_seed, &format!("finetune/{i}")),
            }
        })
        .collect()
}

/// Weights ~ U(−s, s) with `s = sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &ModelSpec, init_seed: u64) -> ParamVector {
    let mut rng = seed::stream(init_seed, "init");
    let mut out = Vec::with_capacity(spec.param_count());
    for (fan_in, fan_out) in spec.dense_dims() {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        out.extend((0..fan_in * fan_out).map(|_| rng.random_range(-s..s)));
        out.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector::new(out)
}

/// Mini-batch SGD with decoupled weight decay:
/// `θ ← θ − lr·(∇ℓ_batch + wd·θ)`, batch order a fresh seeded permutation per epoch.
pub fn sgd_train(spec: &ModelSpec, init: &ParamVector, train: &Dataset, h: &HyperParams) -> Result<ParamVector> {
    h.validate()?;
    if init.len() != spec.param_count() {
        return Err(Error::ShapeMismatch {
            expected: spec.param_count(),
            actual: init.len(),
        });
    }
    let mut theta = init.clone();
    if h.learning_rate == 0.0 {
        return Ok(theta);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..h.epochs {
        let mut rng = seed::stream(h.seed, &format!("epoch/{epoch}"));
        order.shuffle(&mut rng);
        for chunk in order.chunks(h.batch_size) {
            let batch = train.select(chunk)?;
            let (loss, grad) = backward(spec, &theta, &batch, h.label_smoothing)
                .map_err(|e| Error::TrainingDiverged(format!("epoch {epoch}: {e}")))?;
            if !loss.value.is_finite() {
                return Err(Error::TrainingDiverged(format!("loss became {} in epoch {epoch}", loss.value)));
            }
            for (t, g) in theta.iter_mut().zip(grad.iter()) {
                *t -= h.learning_rate * (g + h.weight_decay * *t);
            }
        }
        if !theta.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite parameters after epoch {epoch}")));
        }
    }
    Ok(theta)
}

/// Trains `θ_0` from a seeded initialization.
pub fn pretrain(spec: &ModelSpec, train: &Dataset, cfg: &HyperParams) -> Result<ParamVector> {
    let init = init_params(spec, cfg.seed);
    sgd_train(spec, &init, train, cfg)
}

pub fn finetune_one(spec: &ModelSpec, theta0: &ParamVector, train: &Dataset, h: &HyperParams) -> Result<ParamVector> {
    sgd_train(spec, theta0, train, h)
}

pub const THETA0_NAME: &str = "theta0.soup";

/// Paths and configs of a freshly built ingredient pool.
#[derive(Debug)]
pub struct Pool {
    pub dir: PathBuf,
    pub theta0: PathBuf,
    pub manifest: PathBuf,
    pub hparams: Vec<HyperParams>,
}

/// Settings for [`build_pool`].
#[derive(Clone, Debug)]
pub struct FactoryConfig {
    pub model: ModelSpec,
    pub pretrain: HyperParams,
    pub grid: SearchGrid,
    pub k: usize,
    pub master_seed: u64,
    pub jobs: usize,
}

impl FactoryConfig {
    pub fn pretrain_params(&self) -> HyperParams {
        HyperParams {
            seed: seed::derive(self.master_seed, "pretrain"),
            ..self.pretrain.clone()
        }
    }
}

/// Pre-trains `θ_0`, fine-tunes `k` ingredients and writes
/// `theta0.soup`, `ingredient_001.soup`…, `manifest.txt` and `hparams.csv` into `dir`.
pub fn build_pool(dir: impl AsRef<Path>, train: &Dataset, cfg: &FactoryConfig) -> Result<Pool> {
    let dir = dir.as_ref();
    if cfg.k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = cfg.model.layer_map();
    let theta0 = pretrain(&cfg.model, train, &cfg.pretrain_params())?;
    let theta0_path = dir.join(THETA0_NAME);
    write_checkpoint(&layout, &theta0, &theta0_path)?;

    let hparams = random_search(cfg.k, cfg.master_seed, &cfg.grid);
    let names: Vec<String> = (1..=cfg.k).map(|i| format!("ingredient_{i:03}.soup")).collect();
    let jobs = cfg.jobs.clamp(1, cfg.k);
    let work: Vec<(usize, &HyperParams)> = hparams.iter().enumerate().collect();
    let results: Vec<Result<()>> = std::thread::scope(|s| {
        let handles: Vec<_> = work
            .chunks(cfg.k.div_ceil(jobs))
            .map(|chunk| {
                let (theta0, layout, names) = (&theta0, &layout, &names);
                s.spawn(move || -> Result<()> {
                    for &(i, h) in chunk {
                        let theta = finetune_one(&cfg.model, theta0, train, h)?;
                        write_checkpoint(layout, &theta, dir.join(&names[i]))?;
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("fine-tune worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;

    let manifest = dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &names)?;
    write_hparams_csv(&dir.join("hparams.csv"), &hparams)?;
    Ok(Pool {
        dir: dir.to_path_buf(),
        theta0: theta0_path,
        manifest,
        hparams,
    })
}

fn write_hparams_csv(path: &Path, hparams: &[HyperParams]) -> Result<()> {
    let mut text = String::from("model_id,learning_rate,weight_decay,epochs,label_smoothing,batch_size,seed\n");
    for (i, h) in hparams.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            i + 1,
            fmt_real(h.learning_rate),
            fmt_real(h.weight_decay),
            h.epochs,
            fmt_real(h.label_smoothing),
            h.batch_size,
            h.seed
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, Activation};
    use crate::params::{dot, read_checkpoint, CheckpointStore};

    fn default_model(data: &DataSpec) -> ModelSpec {
        ModelSpec::new(data.input_dim, vec![16], data.num_classes, Activation::Relu).unwrap()
    }

    fn pretrain_cfg() -> HyperParams {
        HyperParams {
            learning_rate: 0.05,
            weight_decay: 0.0,
            epochs: 3,
            label_smoothing: 0.0,
            batch_size: 16,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic_and_balanced() {
        let spec = DataSpec::default();
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        for ds in [&a.train, &a.val, &a.test] {
            let mut counts = vec![0usize; spec.num_classes];
            for &y in ds.labels() {
                counts[y] += 1;
            }
            let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
            assert!(hi - lo <= 1, "{counts:?}");
        }
        let dir = tempfile::tempdir().unwrap();
        a.train.write_csv(dir.path().join("1.csv")).unwrap();
        b.train.write_csv(dir.path().join("2.csv")).unwrap();
        assert_eq!(
            fs::read(dir.path().join("1.csv")).unwrap(),
            fs::read(dir.path().join("2.csv")).unwrap()
        );
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let mut spec = DataSpec {
            num_classes: 1,
            ..DataSpec::default()
        };
        assert!(generate_dataset(&spec).is_err());
        spec.num_classes = 3;
        spec.input_dim = 0;
        assert!(generate_dataset(&spec).is_err());
    }

    #[test]
    fn noiseless_blobs_are_linearly_separable_through_centers() {
        let spec = DataSpec {
            stddev: 0.0,
            ..DataSpec::default()
        };
        let splits = generate_dataset(&spec).unwrap();
        let centers = spec.centers();
        // logit_c = μ_c·x − ‖μ_c‖²/2 picks the nearest center
        let model = ModelSpec::new(spec.input_dim, vec![], spec.num_classes, Activation::Relu).unwrap();
        let mut params: Vec<f64> = centers.iter().flatten().copied().collect();
        params.extend(centers.iter().map(|c| -0.5 * dot(c, c)));
        assert_eq!(accuracy(&model, &params, &splits.test).unwrap(), 1.0);
    }

    #[test]
    fn nearest_center_oracle_rate_is_in_range() {
        let spec = DataSpec {
            num_classes: 3,
            input_dim: 8,
            stddev: 1.5,
            n_test: 1000,
            seed: 3,
            ..DataSpec::default()
        };
        let splits = generate_dataset(&spec).unwrap();
        let centers = spec.centers();
        let test = &splits.test;
        let correct = (0..test.len())
            .filter(|&i| {
                let x = test.row(i);
                let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..centers.len())
                    .min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b])))
                    .unwrap();
                best == test.labels()[i]
            })
            .count();
        let rate = correct as f64 / test.len() as f64;
        assert!((0.5..=1.0).contains(&rate), "{rate}");
    }

    #[test]
    fn pretraining_behaviour() {
        let data = DataSpec::default();
        let splits = generate_dataset(&data).unwrap();
        let spec = default_model(&data);
        let cfg = pretrain_cfg();

        let zero_epochs = HyperParams { epochs: 0, ..cfg.clone() };
        assert!(pretrain(&spec, &splits.train, &zero_epochs).unwrap().bit_eq(&init_params(&spec, cfg.seed)));

        let a = pretrain(&spec, &splits.train, &cfg).unwrap();
        let b = pretrain(&spec, &splits.train, &cfg).unwrap();
        assert!(a.bit_eq(&b));

        let before = accuracy(&spec, &init_params(&spec, cfg.seed), &splits.train).unwrap();
        let after = accuracy(&spec, &a, &splits.train).unwrap();
        assert!(after > before, "{before} -> {after}");
    }

    #[test]
    fn finetune_edge_cases() {
        let data = DataSpec::default();
        let splits = generate_dataset(&data).unwrap();
        let spec = default_model(&data);
        let theta0 = pretrain(&spec, &splits.train, &pretrain_cfg()).unwrap();
        let mut h = random_search(1, 5, &SearchGrid::default()).remove(0);

        h.learning_rate = 0.0;
        assert!(finetune_one(&spec, &theta0, &splits.train, &h).unwrap().bit_eq(&theta0));

        h.learning_rate = 0.03;
        let a = finetune_one(&spec, &theta0, &splits.train, &h).unwrap();
        h.seed ^= 1;
        let b = finetune_one(&spec, &theta0, &splits.train, &h).unwrap();
        let dist: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(dist > 0.0);
    }

    #[test]
    fn huge_learning_rate_diverges() {
        let data = DataSpec::default();
        let splits = generate_dataset(&data).unwrap();
        let spec = default_model(&data);
        let h = HyperParams {
            learning_rate: 1e200,
            ..pretrain_cfg()
        };
        assert!(matches!(pretrain(&spec, &splits.train, &h), Err(Error::TrainingDiverged(_))));
    }

    #[test]
    fn random_search_draws_from_grids() {
        let grid = SearchGrid::default();
        assert_eq!(random_search(20, 9, &grid), random_search(20, 9, &grid));
        for h in random_search(100, 9, &grid) {
            assert!(grid.learning_rate.contains(&h.learning_rate));
            assert!(grid.weight_decay.contains(&h.weight_decay));
            assert!(grid.epochs.contains(&h.epochs));
            assert!(grid.label_smoothing.contains(&h.label_smoothing));
        }
        let draws = random_search(1000, 9, &grid);
        for lr in &grid.learning_rate {
            let freq = draws.iter().filter(|h| h.learning_rate == *lr).count() as f64 / 1000.0;
            assert!((freq - 0.25).abs() <= 0.05, "lr {lr}: {freq}");
        }
    }

    #[test]
    fn weight_decay_shrinks_final_norm() {
        let data = DataSpec::default();
        let splits = generate_dataset(&data).unwrap();
        let spec = default_model(&data);
        let theta0 = pretrain(&spec, &splits.train, &pretrain_cfg()).unwrap();
        let mean_norm = |wd: f64| {
            (0..3)
                .map(|s| {
                    let h = HyperParams {
                        learning_rate: 0.05,
                        weight_decay: wd,
                        epochs: 5,
                        label_smoothing: 0.0,
                        batch_size: 16,
                        seed: s,
                    };
                    finetune_one(&spec, &theta0, &splits.train, &h).unwrap().norm()
                })
                .sum::<f64>()
                / 3.0
        };
        assert!(mean_norm(1e-2) < mean_norm(0.0));
    }

    #[test]
    fn pool_is_reproducible_and_decentralization_lowers_cosine() {
        let data = DataSpec::default();
        let splits = generate_dataset(&data).unwrap();
        let cfg = FactoryConfig {
            model: default_model(&data),
            pretrain: pretrain_cfg(),
            grid: SearchGrid::default(),
            k: 8,
            master_seed: 7,
            jobs: 3,
        };
        let dir = tempfile::tempdir().unwrap();
        let a = build_pool(dir.path().join("a"), &splits.train, &cfg).unwrap();
        let b = build_pool(dir.path().join("b"), &splits.train, &FactoryConfig { jobs: 1, ..cfg.clone() }).unwrap();
        let store = CheckpointStore::open(&a.manifest).unwrap();
        assert_eq!(store.len(), 8);
        for i in 1..=8 {
            let name = format!("ingredient_{i:03}.soup");
            assert!(read_checkpoint(a.dir.join(&name)).unwrap().1.bit_eq(&read_checkpoint(b.dir.join(&name)).unwrap().1));
        }

        let thetas: Vec<ParamVector> = (1..=8).map(|i| store.acquire_one(i).unwrap().clone()).collect();
        let d = thetas[0].len();
        let mean: Vec<f64> = (0..d).map(|j| thetas.iter().map(|t| t[j]).sum::<f64>() / 8.0).collect();
        let centered: Vec<Vec<f64>> = thetas.iter().map(|t| t.iter().zip(&mean).map(|(x, m)| x - m).collect()).collect();
        let mean_cos = |vs: &[&[f64]]| {
            let mut s = 0.0;
            let mut n = 0.0;
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    s += dot(vs[i], vs[j]) / (dot(vs[i], vs[i]).sqrt() * dot(vs[j], vs[j]).sqrt());
                    n += 1.0;
                }
            }
            s / n
        };
        let raw = mean_cos(&thetas.iter().map(|t| t.as_slice()).collect::<Vec<_>>());
        let cen = mean_cos(&centered.iter().map(Vec::as_slice).collect::<Vec<_>>());
        assert!(raw > cen, "raw {raw} centered {cen}");
    }
}
