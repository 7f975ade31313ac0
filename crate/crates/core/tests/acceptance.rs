//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Expected values come from oracles written here: finite differences,
//! direct cosine and accuracy computations, and a hand-rolled log-log fit.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use soupforge::bench::sensitivity_study;
use soupforge::config::RunConfig;
use soupforge::finetune::{build_pool, generate_dataset, init_params, DataSpec, Splits};
use soupforge::model::{accuracy, backward, evaluate, Activation, Dataset, ModelSpec, Split};
use soupforge::params::{read_checkpoint, write_checkpoint, CheckpointId, CheckpointStore, LayerMap, ParamVector};
use soupforge::seed;
use soupforge::soup::{
    alpha_gradient, greedy_soup, hl_soup, mehl_soup, uniform_soup, SoupResult, SoupTrainConfig,
};
use soupforge::Error;

type Verdict = Result<String, String>;

struct Gate {
    sum_to_one_worst: f64,
    sum_to_one_runs: usize,
}

impl Gate {
    fn note(&mut self, r: &SoupResult) {
        for s in r.effective.column_sums() {
            self.sum_to_one_worst = self.sum_to_one_worst.max((s - 1.0).abs());
        }
        self.sum_to_one_runs += 1;
    }
}

fn within(limit: Duration, start: Instant, v: Verdict) -> Verdict {
    let took = start.elapsed();
    let v = v.map(|d| format!("{d}; {:.2}s", took.as_secs_f64()));
    match v {
        Ok(d) if took > limit => Err(format!("{d}, over the {}s limit", limit.as_secs())),
        other => other,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn gaussian_pool(spec: &ModelSpec, k: usize, seed_: u64, scale: f64) -> (tempfile::TempDir, CheckpointStore, Vec<Vec<f64>>) {
    let base = init_params(spec, seed_);
    let mut rng = seed::stream(seed_, "acceptance/pool");
    let vectors: Vec<Vec<f64>> = (0..k)
        .map(|_| {
            base.iter()
                .map(|&b| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    b + scale * z
                })
                .collect()
        })
        .collect();
    let dir = tempfile::tempdir().unwrap();
    let pv: Vec<ParamVector> = vectors.iter().cloned().map(ParamVector::new).collect();
    let store = CheckpointStore::create(dir.path(), &spec.layer_map(), &pv).unwrap();
    (dir, store, vectors)
}

fn small_val(seed_: u64) -> Dataset {
    generate_dataset(&DataSpec {
        n_train: 3,
        n_val: 80,
        n_test: 1,
        seed: seed_,
        ..Default::default()
    })
    .unwrap()
    .val
}

/// Mean of `vectors`, accumulated independently of the library.
fn plain_mean(vectors: &[Vec<f64>]) -> Vec<f64> {
    let n = vectors.len() as f64;
    (0..vectors[0].len()).map(|i| vectors.iter().map(|v| v[i]).sum::<f64>() / n).collect()
}

fn criterion_1() -> Verdict {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Tanh).unwrap();
    let (_d, store, vectors) = gaussian_pool(&spec, 8, 101, 0.3);
    let val = small_val(101);
    let layout = store.layout().clone();
    let mean = plain_mean(&vectors);
    let diffs: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mut rng = seed::stream(101, "acceptance/alpha");
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for state in 0..10 {
        let layerwise = state % 2 == 1;
        let cols = if layerwise { layout.len() } else { 1 };
        let alpha: Vec<f64> = (0..8 * cols).map(|_| rng.random_range(-0.6..0.6)).collect();
        let theta_of = |a: &[f64]| -> Vec<f64> {
            let mut t = mean.clone();
            for (li, layer) in layout.layers().iter().enumerate() {
                let c = if layerwise { li } else { 0 };
                for (k, d) in diffs.iter().enumerate() {
                    for i in layer.range() {
                        t[i] += a[k * cols + c] * d[i];
                    }
                }
            }
            t
        };
        let loss_of = |a: &[f64]| evaluate(&spec, &theta_of(a), &val, 0.0).unwrap().value;
        let (_, grad) = backward(&spec, &theta_of(&alpha), &val, 0.0).unwrap();
        let pairs: Vec<(CheckpointId, &[f64])> = diffs.iter().enumerate().map(|(k, d)| (k + 1, d.as_slice())).collect();
        let analytic = alpha_gradient(&grad, &pairs, &layout, layerwise).unwrap().concat();
        for (i, &g) in analytic.iter().enumerate() {
            let (mut up, mut down) = (alpha.clone(), alpha.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss_of(&up) - loss_of(&down)) / (2.0 * h);
            worst = worst.max(rel_err(g, fd));
        }
    }
    if worst < 1e-5 {
        Ok(format!("max relative error {worst:.2e} over 10 states"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-5"))
    }
}

fn train_cfg(seed_: u64) -> SoupTrainConfig {
    SoupTrainConfig {
        model_batch: 2,
        outer_iters: 4,
        inner_iters: 10,
        data_batch: 16,
        lr: 0.05,
        seed: seed_,
        ..Default::default()
    }
}

fn criterion_3(gate: &mut Gate) -> Verdict {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Relu).unwrap();
    let mut checked = 0;
    for s in [1u64, 2, 3] {
        let (_d, store, _) = gaussian_pool(&spec, 6, 300 + s, 0.3);
        let val = small_val(300 + s);
        for layerwise in [false, true] {
            let cfg = SoupTrainConfig {
                model_batch: 6,
                outer_iters: 1,
                inner_iters: 25,
                ..train_cfg(s)
            };
            let hl = hl_soup(&store, &spec, &val, &cfg, layerwise).unwrap();
            let mehl = mehl_soup(&store, &spec, &val, &cfg, layerwise).unwrap();
            gate.note(&hl);
            gate.note(&mehl);
            if !hl.bit_eq(&mehl) {
                return Err(format!("seed {s}, layerwise {layerwise}: results differ"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} runs bitwise equal"))
}

fn criterion_4(gate: &mut Gate) -> Verdict {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Relu).unwrap();
    let (_d, store, _) = gaussian_pool(&spec, 8, 404, 0.3);
    let val = small_val(404);
    let cfg = SoupTrainConfig {
        record_states: true,
        ..train_cfg(4)
    };
    let mut checks = 0;
    for layerwise in [false, true] {
        let r = mehl_soup(&store, &spec, &val, &cfg, layerwise).unwrap();
        gate.note(&r);
        if r.blocks.len() != 4 || r.states.len() != 5 {
            return Err("trace does not cover 4 outer iterations".into());
        }
        for (t, block) in r.blocks.iter().enumerate() {
            let (before, after) = (&r.states[t], &r.states[t + 1]);
            for k in 0..8 {
                let c = before.alpha.cols();
                let bits = |s: &soupforge::soup::SoupState| -> Vec<u64> {
                    s.alpha.row(k).iter()
                        .chain(&s.m[k * c..(k + 1) * c])
                        .chain(&s.v[k * c..(k + 1) * c])
                        .map(|x| x.to_bits())
                        .collect()
                };
                let same = bits(before) == bits(after) && before.updates[k] == after.updates[k];
                if !block.contains(&(k + 1)) {
                    checks += 1;
                    if !same {
                        return Err(format!("inactive coefficient {} changed at t = {}", k + 1, t + 1));
                    }
                } else if same {
                    return Err(format!("active coefficient {} did not move at t = {}", k + 1, t + 1));
                }
            }
        }
    }
    Ok(format!("{checks} inactive rows unchanged"))
}

fn criterion_5(gate: &mut Gate) -> Verdict {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Relu).unwrap();
    let val = small_val(505);
    let cfg = SoupTrainConfig {
        model_batch: 4,
        ..train_cfg(5)
    };
    let mut peaks = Vec::new();
    for k in [16, 32] {
        let (_d, store, _) = gaussian_pool(&spec, k, 505, 0.3);
        store.set_ceiling(Some(4 + 3));
        for layerwise in [false, true] {
            store.reset_peak();
            match mehl_soup(&store, &spec, &val, &cfg, layerwise) {
                Ok(r) => gate.note(&r),
                Err(e @ Error::BudgetViolation { .. }) => return Err(format!("K = {k}: {e}")),
                Err(e) => return Err(e.to_string()),
            }
            peaks.push(store.peak_resident());
        }
    }
    if peaks.iter().all(|&p| p <= 7) && peaks[0] == peaks[2] && peaks[1] == peaks[3] {
        Ok(format!("peaks {peaks:?} (K = 16, 16, 32, 32; b + 3 = 7)"))
    } else {
        Err(format!("peaks {peaks:?}"))
    }
}

fn criterion_6() -> Verdict {
    let mut rng = seed::stream(606, "acceptance/backprop");
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for activation in [Activation::Relu, Activation::Tanh] {
        for hidden in [vec![], vec![7], vec![6, 5]] {
            let spec = ModelSpec::new(4, hidden, 3, activation).unwrap();
            let params: Vec<f64> = (0..spec.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let feats: Vec<f64> = (0..5 * 4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
            let batch = Dataset::new(feats, labels, 4, Split::Validation).unwrap();
            let (_, g) = backward(&spec, &params, &batch, 0.1).unwrap();
            for i in 0..params.len() {
                let (mut up, mut down) = (params.clone(), params.clone());
                up[i] += h;
                down[i] -= h;
                let fd = (evaluate(&spec, &up, &batch, 0.1).unwrap().value
                    - evaluate(&spec, &down, &batch, 0.1).unwrap().value)
                    / (2.0 * h);
                worst = worst.max(rel_err(g[i], fd));
            }
        }
    }
    if worst < 1e-6 {
        Ok(format!("max relative error {worst:.2e}, relu and tanh"))
    } else {
        Err(format!("max relative error {worst:.2e} >= 1e-6"))
    }
}

fn criterion_7() -> Verdict {
    let spec = ModelSpec::new(8, vec![16], 3, Activation::Relu).unwrap();
    let mut lines = Vec::new();
    for s in 1..=5u64 {
        let (_d, store, vectors) = gaussian_pool(&spec, 10, 700 + s, 0.4);
        let val = small_val(700 + s);
        let best = vectors.iter().map(|v| accuracy(&spec, v, &val).unwrap()).fold(0.0, f64::max);
        let r = greedy_soup(&store, &spec, &val).unwrap();
        let acc = accuracy(&spec, &r.soup, &val).unwrap();
        if acc < best {
            return Err(format!("seed {s}: soup {acc} < best ingredient {best}"));
        }
        lines.push(format!("{acc:.3}>={best:.3}"));
    }
    Ok(lines.join(" "))
}

fn fit_slope(ts: &[usize], ys: &[f64]) -> f64 {
    let n = ts.len() as f64;
    let lx: Vec<f64> = ts.iter().map(|&t| (t as f64).ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let num: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let den: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    num / den
}

fn criterion_8() -> Verdict {
    let ts = [4usize, 16, 64, 256];
    let mut slopes = Vec::new();
    for s in 1..=3u64 {
        let cfg = RunConfig {
            hidden: vec![],
            ..RunConfig::default()
        }
        .with_seed(s);
        let splits = generate_dataset(&cfg.data_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let factory = cfg.factory().unwrap();
        let pool = build_pool(dir.path(), &splits.train, &factory).unwrap();
        let store = CheckpointStore::open(&pool.manifest).unwrap();
        let conv = cfg.convergence_config();
        let mut mins = Vec::new();
        for &t in &ts {
            let run = SoupTrainConfig {
                outer_iters: t,
                ..conv.clone()
            };
            let r = mehl_soup(&store, &factory.model, &splits.val, &run, true).unwrap();
            if r.trace.len() != t {
                return Err(format!("T = {t}: {} trace points", r.trace.len()));
            }
            mins.push(r.trace.iter().map(|p| p.grad_norm_sq).fold(f64::INFINITY, f64::min));
        }
        if mins.windows(2).any(|w| w[1] > w[0]) {
            return Err(format!("seed {s}: minimum increased with T: {mins:?}"));
        }
        slopes.push(fit_slope(&ts, &mins));
    }
    let mean = slopes.iter().sum::<f64>() / slopes.len() as f64;
    let detail = format!("mean slope {mean:.3} (per seed {:?})", slopes.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>());
    if mean <= -0.4 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

struct DefaultPool {
    _dir: tempfile::TempDir,
    store: CheckpointStore,
    cfg: RunConfig,
    spec: ModelSpec,
    splits: Splits,
}

fn default_pool(s: u64) -> DefaultPool {
    let cfg = RunConfig::default().with_seed(s);
    let splits = generate_dataset(&cfg.data_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let factory = cfg.factory().unwrap();
    let pool = build_pool(dir.path(), &splits.train, &factory).unwrap();
    DefaultPool {
        store: CheckpointStore::open(&pool.manifest).unwrap(),
        _dir: dir,
        spec: factory.model,
        cfg,
        splits,
    }
}

fn criterion_9() -> Verdict {
    let p = default_pool(0);
    let vectors: Vec<Vec<f64>> = p.store.ids().map(|id| p.store.acquire_one(id).unwrap().to_vec()).collect();
    let mean = plain_mean(&vectors);
    let centered: Vec<Vec<f64>> = vectors.iter().map(|v| v.iter().zip(&mean).map(|(a, m)| a - m).collect()).collect();
    let mean_cos = |vs: &[Vec<f64>]| {
        let mut acc = Vec::new();
        for j in 0..vs.len() {
            for k in j + 1..vs.len() {
                acc.push(cos(&vs[j], &vs[k]));
            }
        }
        acc.iter().sum::<f64>() / acc.len() as f64
    };
    let (raw, cen) = (mean_cos(&vectors), mean_cos(&centered));
    let detail = format!("raw {raw:.4}, decentralized {cen:.4} (K = {})", vectors.len());
    if cen < raw {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_10(gate: &mut Gate) -> Verdict {
    let (mut beats_uniform, mut degrades_less) = (0, 0);
    let mut rows = Vec::new();
    for s in 1..=5u64 {
        let p = default_pool(s);
        let soup_cfg = p.cfg.soup_config();
        let test_acc = |theta: &[f64]| accuracy(&p.spec, theta, &p.splits.test).unwrap();
        let uniform = uniform_soup(&p.store).unwrap();
        let mehl = mehl_soup(&p.store, &p.spec, &p.splits.val, &soup_cfg, true).unwrap();
        gate.note(&mehl);
        let (u, m) = (test_acc(&uniform.soup), test_acc(&mehl.soup));
        beats_uniform += usize::from(m >= u);

        let sens = sensitivity_study(&p.store, &p.spec, &p.splits.val, &p.splits.test, &[0, 2], &soup_cfg).unwrap();
        let (r0, r2) = (&sens.rows[0], &sens.rows[1]);
        if r0.mehl_plus_acc != m {
            return Err(format!("seed {s}: sensitivity baseline {} differs from direct run {m}", r0.mehl_plus_acc));
        }
        let (dg, dm) = (r0.greedy_acc - r2.greedy_acc, r0.mehl_plus_acc - r2.mehl_plus_acc);
        degrades_less += usize::from(dm <= dg);
        rows.push(format!("s{s}: uni {u:.3} mehl+ {m:.3} deg greedy {dg:+.3} mehl+ {dm:+.3}"));
    }
    let detail = format!(
        "mehl-plus >= uniform in {beats_uniform}/5, degradation <= greedy in {degrades_less}/5 [{}]",
        rows.join("; ")
    );
    if beats_uniform >= 4 && degrades_less >= 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_11() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = seed::stream(1111, "acceptance/format");
    for i in 0..100 {
        let n_layers = rng.random_range(1..4);
        let shapes: Vec<(String, Vec<usize>)> = (0..n_layers)
            .map(|l| {
                let ndim = rng.random_range(1..3);
                (format!("layer{l}"), (0..ndim).map(|_| rng.random_range(1..5)).collect())
            })
            .collect();
        let layout = LayerMap::new(shapes.iter().map(|(n, s)| (n.as_str(), s.clone()))).unwrap();
        let values: Vec<f64> = (0..layout.total_len())
            .map(|_| loop {
                let x = f64::from_bits(rng.random::<u64>());
                if x.is_finite() {
                    break x;
                }
            })
            .collect();
        let v = ParamVector::new(values);
        let path = dir.path().join(format!("{i}.soup"));
        write_checkpoint(&layout, &v, &path).unwrap();
        let (l2, v2) = read_checkpoint(&path).unwrap();
        let same = l2 == layout && v2.len() == v.len() && v2.iter().zip(v.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("instance {i} did not round-trip"));
        }
    }
    let path = dir.path().join("7.soup");
    let mut bytes = std::fs::read(&path).unwrap();
    let at = bytes.len() - 5;
    bytes[at] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    match read_checkpoint(&path) {
        Err(Error::CrcMismatch { .. }) => Ok("100 bit-identical round-trips; corrupted payload rejected by CRC".into()),
        other => Err(format!("corrupted payload not detected: {:?}", other.map(|_| ()))),
    }
}

fn main() -> ExitCode {
    let mut gate = Gate {
        sum_to_one_worst: 0.0,
        sum_to_one_runs: 0,
    };
    let mut results: Vec<(u32, &str, Verdict)> = Vec::new();
    let mut run = |n, name, limit: u64, f: &mut dyn FnMut(&mut Gate) -> Verdict| {
        let start = Instant::now();
        let v = f(&mut gate);
        let v = within(Duration::from_secs(limit), start, v);
        println!("criterion {n:>2} {:<4} {name}: {}", if v.is_ok() { "PASS" } else { "FAIL" }, match &v {
            Ok(d) | Err(d) => d,
        });
        results.push((n, name, v));
    };
    run(1, "alpha gradient vs finite differences", 10, &mut |_| criterion_1());
    run(3, "full-block single-pass reduction", 60, &mut criterion_3);
    run(4, "block isolation", 60, &mut criterion_4);
    run(5, "residency contract", 120, &mut criterion_5);
    run(6, "model backprop vs finite differences", 60, &mut |_| criterion_6());
    run(7, "greedy guarantee", 60, &mut |_| criterion_7());
    run(8, "convergence trend", 180, &mut |_| criterion_8());
    run(9, "decentralized cosine below raw", 60, &mut |_| criterion_9());
    run(10, "directional quality", 300, &mut criterion_10);
    run(11, "checkpoint format", 60, &mut |_| criterion_11());
    run(2, "effective coefficients sum to one", 1, &mut |g: &mut Gate| {
        let detail = format!("max |sum - 1| = {:.2e} over {} runs", g.sum_to_one_worst, g.sum_to_one_runs);
        if g.sum_to_one_runs > 0 && g.sum_to_one_worst <= 1e-12 {
            Ok(detail)
        } else {
            Err(detail)
        }
    });

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}
