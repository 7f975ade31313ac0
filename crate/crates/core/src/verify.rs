//! Invariant suite behind `soupforge verify`.
//!
//! Each property runs on small seeded fixtures and reports pass or fail with
//! a one-line detail. `corrupt_grad` flips the sign of the largest analytic
//! gradient entry before comparison, so the gradient properties must fail.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::finetune::{generate_dataset, init_params, DataSpec};
use crate::model::{accuracy, backward, central_difference, evaluate, fd_gradient, Activation, Dataset, ModelSpec};
use crate::params::{mean_vector, read_checkpoint, write_checkpoint, CheckpointId, CheckpointStore, LayerMap, ParamVector};
use crate::seed;
use crate::soup::{alpha_gradient, greedy_soup, hl_soup, mehl_soup, SoupTrainConfig};

#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyOptions {
    pub seed: u64,
    pub corrupt_grad: bool,
}

#[derive(Clone, Debug)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&VerifyOptions) -> Result<std::result::Result<String, String>>;

const PROPERTIES: [(&str, Check); 8] = [
    ("model-gradient", model_gradient),
    ("alpha-gradient", alpha_gradient_check),
    ("sum-to-one", sum_to_one),
    ("full-block-reduction", reduction),
    ("block-isolation", block_isolation),
    ("residency", residency),
    ("checkpoint-roundtrip", roundtrip),
    ("greedy-guarantee", greedy_guarantee),
];

pub fn property_names() -> Vec<&'static str> {
    PROPERTIES.iter().map(|(n, _)| *n).collect()
}

pub fn run_suite(opts: &VerifyOptions) -> Vec<PropertyOutcome> {
    PROPERTIES
        .iter()
        .map(|(name, check)| {
            let (passed, detail) = match check(opts) {
                Ok(Ok(d)) => (true, d),
                Ok(Err(d)) => (false, d),
                Err(e) => (false, format!("error: {e}")),
            };
            PropertyOutcome { name, passed, detail }
        })
        .collect()
}

fn corrupt(opts: &VerifyOptions, g: &mut [f64]) {
    if opts.corrupt_grad {
        if let Some(i) = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())) {
            g[i] = -g[i];
        }
    }
}

fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn verdict(ok: bool, detail: String) -> Result<std::result::Result<String, String>> {
    Ok(if ok { Ok(detail) } else { Err(detail) })
}

struct Fixture {
    _dir: tempfile::TempDir,
    store: CheckpointStore,
    spec: ModelSpec,
    val: Dataset,
}

fn fixture(k: usize, seed_: u64) -> Result<Fixture> {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Tanh)?;
    let data = generate_dataset(&DataSpec {
        n_train: 3,
        n_val: 60,
        n_test: 1,
        seed: seed_,
        ..Default::default()
    })?;
    let base = init_params(&spec, seed_);
    let mut rng = seed::stream(seed_, "verify/ingredients");
    let vectors: Vec<ParamVector> = (0..k)
        .map(|_| {
            ParamVector::new(
                base.iter()
                    .map(|&b| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        b + 0.3 * z
                    })
                    .collect(),
            )
        })
        .collect();
    let dir = tempfile::tempdir().map_err(|e| crate::Error::io(std::env::temp_dir(), e))?;
    let store = CheckpointStore::create(dir.path(), &spec.layer_map(), &vectors)?;
    Ok(Fixture {
        _dir: dir,
        store,
        spec,
        val: data.val,
    })
}

fn small_cfg(seed_: u64) -> SoupTrainConfig {
    SoupTrainConfig {
        model_batch: 2,
        outer_iters: 4,
        inner_iters: 5,
        data_batch: 16,
        lr: 0.05,
        seed: seed_,
        ..Default::default()
    }
}

fn model_gradient(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let mut worst: f64 = 0.0;
    let mut rng = seed::stream(opts.seed, "verify/model");
    for activation in [Activation::Relu, Activation::Tanh] {
        let spec = ModelSpec::new(5, vec![7, 4], 3, activation)?;
        let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features: Vec<f64> = (0..6 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        let batch = Dataset::new(features, labels, 5, crate::model::Split::Validation)?;
        let (_, mut g) = backward(&spec, &params, &batch, 0.1)?;
        corrupt(opts, &mut g);
        let fd = fd_gradient(&spec, &params, &batch, 0.1, 1e-4)?;
        worst = worst.max(max_rel_err(&g, &fd));
    }
    verdict(worst < 1e-6, format!("max relative error {worst:.3e} (limit 1e-6)"))
}

fn alpha_gradient_check(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let f = fixture(8, opts.seed)?;
    let layout: LayerMap = f.store.layout().clone();
    let mean = mean_vector(&f.store)?;
    let ids: Vec<CheckpointId> = f.store.ids().collect();
    let diffs = f.store.acquire_centered(&ids, &mean)?;
    let mut rng = seed::stream(opts.seed, "verify/alpha");
    let mut worst: f64 = 0.0;
    for layerwise in [false, true] {
        let cols = if layerwise { layout.len() } else { 1 };
        let alpha: Vec<f64> = (0..8 * cols).map(|_| rng.random_range(-0.5..0.5)).collect();
        let combine = |a: &[f64]| {
            let mut theta = mean.to_param_vector().into_inner();
            for (li, layer) in layout.layers().iter().enumerate() {
                let c = if layerwise { li } else { 0 };
                for (k, d) in diffs.iter().enumerate() {
                    for i in layer.range() {
                        theta[i] += a[k * cols + c] * d[i];
                    }
                }
            }
            theta
        };
        let (_, grad) = backward(&f.spec, &combine(&alpha), &f.val, 0.0)?;
        let pairs: Vec<(CheckpointId, &[f64])> = diffs.iter().map(|d| (d.id(), d.as_slice())).collect();
        let mut analytic = alpha_gradient(&grad, &pairs, &layout, layerwise)?.concat();
        corrupt(opts, &mut analytic);
        let numeric = central_difference(|a| evaluate(&f.spec, &combine(a), &f.val, 0.0).map(|l| l.value), &alpha, 1e-5)?;
        worst = worst.max(max_rel_err(&analytic, &numeric));
    }
    verdict(worst < 1e-5, format!("max relative error {worst:.3e} (limit 1e-5)"))
}

fn sum_to_one(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let f = fixture(6, opts.seed)?;
    let mut worst: f64 = 0.0;
    for layerwise in [false, true] {
        for r in [
            hl_soup(&f.store, &f.spec, &f.val, &small_cfg(opts.seed), layerwise)?,
            mehl_soup(&f.store, &f.spec, &f.val, &small_cfg(opts.seed), layerwise)?,
        ] {
            for s in r.effective.column_sums() {
                worst = worst.max((s - 1.0).abs());
            }
        }
    }
    verdict(worst <= 1e-12, format!("max |column sum - 1| = {worst:.3e}"))
}

fn reduction(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let f = fixture(5, opts.seed)?;
    for layerwise in [false, true] {
        let cfg = SoupTrainConfig {
            model_batch: 5,
            outer_iters: 1,
            inner_iters: 10,
            ..small_cfg(opts.seed)
        };
        let hl = hl_soup(&f.store, &f.spec, &f.val, &cfg, layerwise)?;
        let mehl = mehl_soup(&f.store, &f.spec, &f.val, &cfg, layerwise)?;
        if !hl.bit_eq(&mehl) {
            return verdict(false, format!("b=K, T=1 result differs from the full-batch soup (layerwise={layerwise})"));
        }
    }
    verdict(true, "bitwise equal, global and layer-wise".into())
}

fn block_isolation(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let f = fixture(8, opts.seed)?;
    let cfg = SoupTrainConfig {
        record_states: true,
        ..small_cfg(opts.seed)
    };
    let r = mehl_soup(&f.store, &f.spec, &f.val, &cfg, true)?;
    for (t, block) in r.blocks.iter().enumerate() {
        for k in 0..8 {
            let unchanged = r.states[t + 1].row_bit_eq(&r.states[t], k);
            if unchanged == block.contains(&(k + 1)) {
                return verdict(false, format!("coefficient {} at outer iteration {}", k + 1, t + 1));
            }
        }
    }
    verdict(true, format!("{} outer iterations checked", r.blocks.len()))
}

fn residency(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let mut peaks = Vec::new();
    for k in [8, 16] {
        let f = fixture(k, opts.seed)?;
        let cfg = small_cfg(opts.seed);
        f.store.set_ceiling(Some(cfg.model_batch + 3));
        mehl_soup(&f.store, &f.spec, &f.val, &cfg, true)?;
        peaks.push(f.store.peak_resident());
    }
    verdict(
        peaks[0] == peaks[1] && peaks[0] <= 5,
        format!("peak resident vectors {peaks:?} for K = 8, 16 at b = 2"),
    )
}

fn roundtrip(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let dir = tempfile::tempdir().map_err(|e| crate::Error::io(std::env::temp_dir(), e))?;
    let layout = LayerMap::new([("w0", vec![3, 4]), ("b0", vec![3])])?;
    let mut rng = seed::stream(opts.seed, "verify/roundtrip");
    for i in 0..20 {
        let v: ParamVector = (0..15).map(|_| f64::from_bits(rng.random::<u64>() & !(0x7FF << 52) | (0x3FF << 52))).collect::<Vec<_>>().into();
        let path = dir.path().join(format!("{i}.soup"));
        write_checkpoint(&layout, &v, &path)?;
        let (l2, v2) = read_checkpoint(&path)?;
        if l2 != layout || !v2.bit_eq(&v) {
            return verdict(false, format!("instance {i} did not round-trip"));
        }
    }
    let path = dir.path().join("0.soup");
    let mut bytes = std::fs::read(&path).map_err(|e| crate::Error::io(&path, e))?;
    let at = bytes.len() - 12;
    bytes[at] ^= 0x01;
    std::fs::write(&path, &bytes).map_err(|e| crate::Error::io(&path, e))?;
    let detected = matches!(read_checkpoint(&path), Err(crate::Error::CrcMismatch { .. }));
    verdict(detected, "20 round-trips bit-identical; flipped payload bit detected".into())
}

fn greedy_guarantee(opts: &VerifyOptions) -> Result<std::result::Result<String, String>> {
    let f = fixture(6, opts.seed)?;
    let mut best: f64 = 0.0;
    for id in f.store.ids() {
        let theta = f.store.acquire_one(id)?;
        best = best.max(accuracy(&f.spec, &theta, &f.val)?);
    }
    let r = greedy_soup(&f.store, &f.spec, &f.val)?;
    let acc = accuracy(&f.spec, &r.soup, &f.val)?;
    verdict(acc >= best, format!("soup {acc:.4} vs best ingredient {best:.4}"))
}
