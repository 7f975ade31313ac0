//! Measurement harness: construction time and peak residency per method,
//! convergence traces, pairwise cosine similarity of the ingredients, and
//! the top-model elimination study.
//!
//! Wall time is measured with a monotonic clock around the soup
//! construction only; data generation and evaluation are excluded.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::fmt_real;
use crate::model::{accuracy, forward, Dataset, ModelSpec};
use crate::params::{dot, mean_vector, CheckpointId, CheckpointStore};
use crate::soup::{greedy_soup, mehl_soup, run_method, SoupMethod, SoupResult, SoupTrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub method: SoupMethod,
    pub k: usize,
    /// Ingredients resident per outer iteration.
    pub b: usize,
    pub t: usize,
    pub j: usize,
    pub wall_seconds: f64,
    pub peak_resident_vectors: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    /// Greedy members, or the range of effective coefficients.
    pub summary: String,
}

fn summarize(method: SoupMethod, r: &SoupResult) -> String {
    match method {
        SoupMethod::Greedy => {
            let ids: Vec<String> = r.members.iter().map(ToString::to_string).collect();
            format!("members={}", ids.join(" "))
        }
        _ => {
            let e = r.effective.values();
            let lo = e.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            format!("effective_min={} effective_max={}", fmt_real(lo), fmt_real(hi))
        }
    }
}

/// Runs `method` once with `cfg` and measures it.
pub fn run_bench(
    method: SoupMethod,
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    test: &Dataset,
    cfg: &SoupTrainConfig,
) -> Result<(BenchReport, SoupResult)> {
    store.reset_peak();
    let start = Instant::now();
    let result = run_method(method, store, spec, val, cfg)?;
    let wall_seconds = start.elapsed().as_secs_f64();
    let peak_resident_vectors = store.peak_resident();

    let k = store.len();
    let (b, t, j) = match method {
        SoupMethod::Uniform | SoupMethod::Greedy => (k, 0, 0),
        SoupMethod::LearnedSoftmax { .. } | SoupMethod::Hyperplane { .. } => (k, 1, cfg.inner_iters),
        SoupMethod::MemoryEfficient { .. } => (cfg.model_batch, cfg.outer_iters, cfg.inner_iters),
    };
    let report = BenchReport {
        method,
        k,
        b,
        t,
        j,
        wall_seconds,
        peak_resident_vectors,
        val_acc: accuracy(spec, &result.soup, val)?,
        test_acc: accuracy(spec, &result.soup, test)?,
        summary: summarize(method, &result),
    };
    Ok((report, result))
}

fn write_text(path: &Path, text: String) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Columns: method, k, b, t, j, wall_seconds, peak_resident_vectors,
/// val_acc, test_acc, summary.
pub fn write_bench_csv(path: impl AsRef<Path>, reports: &[BenchReport]) -> Result<()> {
    let mut text = String::from("method,k,b,t,j,wall_seconds,peak_resident_vectors,val_acc,test_acc,summary\n");
    for r in reports {
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.method,
            r.k,
            r.b,
            r.t,
            r.j,
            fmt_real(r.wall_seconds),
            r.peak_resident_vectors,
            fmt_real(r.val_acc),
            fmt_real(r.test_acc),
            r.summary
        ));
    }
    write_text(path.as_ref(), text)
}

/// Accuracy of the logit ensemble (running mean of per-model logits),
/// loading one ingredient at a time.
pub fn ensemble_accuracy(store: &CheckpointStore, spec: &ModelSpec, data: &Dataset) -> Result<f64> {
    let mut mean: Option<crate::model::Logits> = None;
    for id in store.ids() {
        let theta = store.acquire_one(id)?;
        let logits = forward(spec, &theta, data)?;
        match &mut mean {
            None => mean = Some(logits),
            Some(m) => {
                let n = id as f64;
                for (a, z) in m.data.iter_mut().zip(&logits.data) {
                    *a += (z - *a) / n;
                }
            }
        }
    }
    let mean = mean.ok_or(Error::EmptyBatch)?;
    let correct = (0..data.len()).filter(|&r| mean.argmax(r) == data.labels()[r]).count();
    Ok(correct as f64 / data.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvergenceReport {
    pub outer_iters: Vec<usize>,
    /// `min_{t ≤ T} ‖∇α L‖²` over the outer-boundary trace, per `T`.
    pub min_grad_norm_sq: Vec<f64>,
    /// Least-squares slope of `ln min_grad_norm_sq` against `ln T`;
    /// `None` when a minimum is zero or fewer than two `T` are given.
    pub slope: Option<f64>,
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() < 2 || xs.len() != ys.len() || xs.iter().chain(ys).any(|&v| !(v > 0.0)) {
        return None;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Runs MEHL once per `T` in `outer_iters` on a linear model and records
/// the smallest full-validation coefficient-gradient norm seen.
///
/// Without an explicit `cfg.schedule_horizon` every run shares the horizon
/// `max(T)·J`, so shorter runs are exact prefixes of longer ones.
pub fn convergence_trace(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
    outer_iters: &[usize],
    layerwise: bool,
) -> Result<ConvergenceReport> {
    if !spec.hidden_dims.is_empty() {
        return Err(Error::InvalidArgument(
            "the convergence trace needs a linear model (no hidden layers)".into(),
        ));
    }
    let t_max = outer_iters.iter().copied().max().unwrap_or(0);
    let horizon = cfg.schedule_horizon.unwrap_or(t_max * cfg.inner_iters);
    let mut mins = Vec::with_capacity(outer_iters.len());
    for &t in outer_iters {
        let run = SoupTrainConfig {
            outer_iters: t,
            schedule_horizon: Some(horizon),
            ..cfg.clone()
        };
        let r = mehl_soup(store, spec, val, &run, layerwise)?;
        mins.push(r.trace.iter().map(|p| p.grad_norm_sq).fold(f64::INFINITY, f64::min));
    }
    let xs: Vec<f64> = outer_iters.iter().map(|&t| t as f64).collect();
    Ok(ConvergenceReport {
        outer_iters: outer_iters.to_vec(),
        slope: loglog_slope(&xs, &mins),
        min_grad_norm_sq: mins,
    })
}

/// Columns: outer_iters, min_grad_norm_sq.
pub fn write_convergence_csv(path: impl AsRef<Path>, report: &ConvergenceReport) -> Result<()> {
    let mut text = String::from("outer_iters,min_grad_norm_sq\n");
    for (t, m) in report.outer_iters.iter().zip(&report.min_grad_norm_sq) {
        text.push_str(&format!("{t},{}\n", fmt_real(*m)));
    }
    write_text(path.as_ref(), text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CosineReport {
    /// Mean over pairs `j < k` of `cos(θ_j, θ_k)`; `None` if every pair was excluded.
    pub mean_raw: Option<f64>,
    /// Mean over pairs of `cos(θ_j − θ̄, θ_k − θ̄)`.
    pub mean_centered: Option<f64>,
    pub raw_pairs: usize,
    pub centered_pairs: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn mean_pairwise_cosine(
    store: &CheckpointStore,
    mean: Option<&[f64]>,
    label: &str,
) -> Result<(Option<f64>, usize)> {
    let load = |id: CheckpointId| match mean {
        Some(m) => store.acquire_centered(&[id], m).map(|mut v| v.remove(0)),
        None => store.acquire_one(id),
    };
    let (mut sum, mut pairs) = (0.0, 0usize);
    let ids: Vec<CheckpointId> = store.ids().collect();
    for (i, &a) in ids.iter().enumerate() {
        let va = load(a)?;
        for &b in &ids[i + 1..] {
            let vb = load(b)?;
            match cosine(&va, &vb) {
                Some(c) => {
                    sum += c;
                    pairs += 1;
                }
                None => log::warn!("{label} pair ({a}, {b}) has a zero-norm vector; excluded"),
            }
        }
    }
    Ok(((pairs > 0).then(|| sum / pairs as f64), pairs))
}

/// Mean pairwise cosine similarity of the raw ingredients and of their
/// deviations from the mean. Pairs with a zero-norm vector are excluded
/// with a warning. At most three full vectors are resident.
pub fn cosine_report(store: &CheckpointStore) -> Result<CosineReport> {
    if store.len() < 2 {
        return Err(Error::InvalidArgument("cosine report needs at least 2 ingredients".into()));
    }
    let (mean_raw, raw_pairs) = mean_pairwise_cosine(store, None, "raw")?;
    let mean = mean_vector(store)?;
    let (mean_centered, centered_pairs) = mean_pairwise_cosine(store, Some(&mean), "centered")?;
    Ok(CosineReport {
        mean_raw,
        mean_centered,
        raw_pairs,
        centered_pairs,
    })
}

/// Columns: basis, mean_cos, pairs. `mean_cos` is empty when every pair was excluded.
pub fn write_cosine_csv(path: impl AsRef<Path>, report: &CosineReport) -> Result<()> {
    let cell = |m: Option<f64>| m.map(fmt_real).unwrap_or_default();
    let text = format!(
        "basis,mean_cos,pairs\nraw,{},{}\ncentered,{},{}\n",
        cell(report.mean_raw),
        report.raw_pairs,
        cell(report.mean_centered),
        report.centered_pairs
    );
    write_text(path.as_ref(), text)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityRow {
    pub drop: usize,
    pub greedy_acc: f64,
    pub mehl_plus_acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    pub rows: Vec<SensitivityRow>,
}

impl SensitivityReport {
    pub fn drops(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.drop).collect()
    }

    /// `(greedy, mehl-plus)` accuracy lost between the first and last drop level.
    pub fn degradation(&self) -> Option<(f64, f64)> {
        let (first, last) = (self.rows.first()?, self.rows.last()?);
        Some((first.greedy_acc - last.greedy_acc, first.mehl_plus_acc - last.mehl_plus_acc))
    }
}

/// Ingredient ids by validation accuracy, best first; ties keep the lower id first.
pub fn rank_by_accuracy(store: &CheckpointStore, spec: &ModelSpec, val: &Dataset) -> Result<Vec<CheckpointId>> {
    let mut ranked = Vec::with_capacity(store.len());
    for id in store.ids() {
        let theta = store.acquire_one(id)?;
        ranked.push((id, accuracy(spec, &theta, val)?));
    }
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(ranked.into_iter().map(|(id, _)| id).collect())
}

/// For each `n` in `drops`, removes the `n` ingredients with the best
/// validation accuracy and records the test accuracy of greedy and
/// layer-wise MEHL soups built from the rest. The block size is clamped to
/// the remaining pool.
pub fn sensitivity_study(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    test: &Dataset,
    drops: &[usize],
    cfg: &SoupTrainConfig,
) -> Result<SensitivityReport> {
    if drops.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("drops must be strictly increasing".into()));
    }
    if drops.last().is_some_and(|&d| d >= store.len()) {
        return Err(Error::InvalidArgument(format!(
            "cannot drop {} of {} ingredients",
            drops.last().unwrap(),
            store.len()
        )));
    }
    let ranked = rank_by_accuracy(store, spec, val)?;
    let mut rows = Vec::with_capacity(drops.len());
    for &n in drops {
        let mut keep = ranked[n..].to_vec();
        keep.sort_unstable();
        let pool = store.subset(&keep)?;
        let greedy = greedy_soup(&pool, spec, val)?;
        let run = SoupTrainConfig {
            model_batch: cfg.model_batch.min(pool.len()),
            ..cfg.clone()
        };
        let mehl = mehl_soup(&pool, spec, val, &run, true)?;
        rows.push(SensitivityRow {
            drop: n,
            greedy_acc: accuracy(spec, &greedy.soup, test)?,
            mehl_plus_acc: accuracy(spec, &mehl.soup, test)?,
        });
    }
    Ok(SensitivityReport { rows })
}

/// Columns: drop, greedy_test_acc, mehl_plus_test_acc.
pub fn write_sensitivity_csv(path: impl AsRef<Path>, report: &SensitivityReport) -> Result<()> {
    let mut text = String::from("drop,greedy_test_acc,mehl_plus_test_acc\n");
    for r in &report.rows {
        text.push_str(&format!("{},{},{}\n", r.drop, fmt_real(r.greedy_acc), fmt_real(r.mehl_plus_acc)));
    }
    write_text(path.as_ref(), text)
}
