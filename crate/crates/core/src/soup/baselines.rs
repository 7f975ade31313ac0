use super::adamw::{adamw_cosine_step, SoupState};
use super::coeffs::{alpha_gradient, MixCoefficients};
use super::engine::{compose, full_gradient, streamed_dots, sum_sq, DataSampler};
use super::{SoupResult, SoupTrainConfig, TracePoint};
use crate::error::{Error, Result};
use crate::model::{accuracy, Dataset, ModelSpec};
use crate::params::{mean_vector, CheckpointId, CheckpointStore, ParamVector};

/// Plain average of every ingredient.
pub fn uniform_soup(store: &CheckpointStore) -> Result<SoupResult> {
    let k = store.len();
    let cols = store.layout().len();
    let soup = mean_vector(store)?.into_inner();
    Ok(SoupResult {
        soup,
        alpha: MixCoefficients::zeros(k, cols, false),
        effective: MixCoefficients::filled(k, cols, false, 1.0 / k as f64),
        members: store.ids().collect(),
        trace: Vec::new(),
        blocks: Vec::new(),
        states: Vec::new(),
    })
}

/// Greedy soup: visit ingredients by validation accuracy (descending, ties
/// to the lower id) and keep each one whose addition does not lower the
/// soup's validation accuracy.
///
/// The soup's accuracy never drops below the best single ingredient's.
pub fn greedy_soup(store: &CheckpointStore, spec: &ModelSpec, val: &Dataset) -> Result<SoupResult> {
    let mut ranked: Vec<(CheckpointId, f64)> = Vec::with_capacity(store.len());
    for id in store.ids() {
        let h = store.acquire_one(id)?;
        ranked.push((id, accuracy(spec, &h, val)?));
    }
    // stable: equal accuracies keep ascending id order
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));

    let (first, mut best) = ranked[0];
    let mut soup = store.scratch(store.acquire_one(first)?.as_slice().to_vec().into())?;
    let mut members = vec![first];
    for &(id, _) in &ranked[1..] {
        let cand = store.acquire_one(id)?;
        let n = (members.len() + 1) as f64;
        let trial: Vec<f64> = soup.iter().zip(cand.iter()).map(|(s, c)| s + (c - s) / n).collect();
        drop(cand);
        let trial = store.scratch(ParamVector::new(trial))?;
        let acc = accuracy(spec, &trial, val)?;
        if acc >= best {
            soup = trial;
            best = acc;
            members.push(id);
        }
    }

    let k = store.len();
    let cols = store.layout().len();
    let mut alpha = MixCoefficients::zeros(k, cols, false);
    let mut effective = MixCoefficients::zeros(k, cols, false);
    for &id in &members {
        alpha.row_mut(id - 1)[0] = 1.0;
        effective.row_mut(id - 1)[0] = 1.0 / members.len() as f64;
    }
    Ok(SoupResult {
        soup: soup.into_inner(),
        alpha,
        effective,
        members,
        trace: Vec::new(),
        blocks: Vec::new(),
        states: Vec::new(),
    })
}

/// Column-wise softmax over ingredients.
pub fn softmax_columns(z: &MixCoefficients) -> MixCoefficients {
    let mut w = z.clone();
    for c in 0..z.cols() {
        let max = (0..z.k()).map(|r| z.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in 0..z.k() {
            let e = (z.get(r, c) - max).exp();
            w.row_mut(r)[c] = e;
            total += e;
        }
        for r in 0..z.k() {
            w.row_mut(r)[c] /= total;
        }
    }
    w
}

/// `∂L/∂z_k = w_k (g_k − Σ_j w_j g_j)` per column, with `g_k = ∇θL · θ_k`.
pub(super) fn softmax_grad(w: &MixCoefficients, dots: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; w.cols()]; w.k()];
    for c in 0..w.cols() {
        let mut mix = 0.0;
        for (r, d) in dots.iter().enumerate() {
            mix += w.get(r, c) * d[c];
        }
        for (r, d) in dots.iter().enumerate() {
            out[r][c] = w.get(r, c) * (d[c] - mix);
        }
    }
    out
}

/// Soup `Σ_k softmax(z)_k ⊙ θ_k` with logits `z` trained by AdamW on
/// validation mini-batches; all `K` ingredients stay resident.
/// `cfg.outer_iters` is ignored: `J` steps total.
pub fn learned_soup_softmax(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
    layerwise: bool,
) -> Result<SoupResult> {
    let cfg = SoupTrainConfig {
        outer_iters: 1,
        ..cfg.clone()
    };
    cfg.validate()?;
    let layout = store.layout().clone();
    if spec.layer_map() != layout {
        return Err(Error::Dimension(
            "model architecture does not match the checkpoints' layer map".into(),
        ));
    }
    let k = store.len();
    let ids: Vec<CheckpointId> = store.ids().collect();
    let rows: Vec<usize> = (0..k).collect();
    let thetas = store.acquire(&ids)?;
    let terms: Vec<(usize, &[f64])> = rows.iter().zip(&thetas).map(|(&r, t)| (r, t.as_slice())).collect();
    let vectors: Vec<&[f64]> = thetas.iter().map(|t| t.as_slice()).collect();

    let mut state = SoupState::new(MixCoefficients::zeros(k, layout.len(), layerwise));
    let mut theta = store.scratch_zeros()?;
    let mut sampler = DataSampler::new(val, cfg.data_batch, cfg.seed);
    let opt = cfg.adamw();
    let total = cfg.total_steps();

    for _ in 0..cfg.inner_iters {
        let w = softmax_columns(&state.alpha);
        compose(&mut theta, None, &layout, &w, &terms, 1.0);
        let batch = sampler.next_batch()?;
        let (_, dots) = streamed_dots(spec, &layout, &theta, &batch, cfg.label_smoothing, &vectors, layerwise)?;
        adamw_cosine_step(&mut state, &rows, &softmax_grad(&w, &dots), &opt, total)?;
        if !state.alpha.is_finite() {
            return Err(Error::TrainingDiverged(format!("non-finite logits after step {}", state.step)));
        }
    }
    let w = softmax_columns(&state.alpha);
    compose(&mut theta, None, &layout, &w, &terms, 1.0);

    let (loss, grad) = full_gradient(spec, &theta, val, cfg.label_smoothing)?;
    let grad = store.scratch(grad)?;
    let pairs: Vec<(CheckpointId, &[f64])> = ids.iter().copied().zip(vectors.iter().copied()).collect();
    let dots = alpha_gradient(&grad, &pairs, &layout, layerwise)?;
    let norm = sum_sq(&softmax_grad(&w, &dots));

    Ok(SoupResult {
        soup: theta.into_inner(),
        alpha: state.alpha,
        effective: w,
        members: Vec::new(),
        trace: vec![TracePoint {
            step: cfg.inner_iters,
            val_loss: loss.value,
            grad_norm_sq: norm,
        }],
        blocks: Vec::new(),
        states: Vec::new(),
    })
}
