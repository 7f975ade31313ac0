use rand::seq::index;

use super::adamw::{adamw_cosine_step, SoupState};
use super::coeffs::{alpha_gradient, effective_coefficients, MixCoefficients};
use super::engine::{compose, full_gradient, streamed_dots, DataSampler};
use super::{Basis, SoupResult, SoupTrainConfig, TracePoint};
use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec};
use crate::params::{mean_vector, CheckpointHandle, CheckpointId, CheckpointStore, LayerMap, ScratchVector};
use crate::seed;

/// `b` distinct ids from `1..=k`, sorted, drawn from stream `soup/block/<t>`.
pub fn sample_block(k: usize, b: usize, master_seed: u64, t: usize) -> Vec<CheckpointId> {
    let mut rng = seed::stream(master_seed, &format!("soup/block/{t}"));
    let mut ids: Vec<CheckpointId> = index::sample(&mut rng, k, b).into_iter().map(|i| i + 1).collect();
    ids.sort_unstable();
    ids
}

fn check_model(spec: &ModelSpec, layout: &LayerMap) -> Result<()> {
    if spec.layer_map() != *layout {
        return Err(Error::Dimension(
            "model architecture does not match the checkpoints' layer map".into(),
        ));
    }
    Ok(())
}

fn initial_alpha(k: usize, layers: usize, layerwise: bool, basis: Basis) -> MixCoefficients {
    match basis {
        Basis::Centered => MixCoefficients::zeros(k, layers, layerwise),
        Basis::Raw => MixCoefficients::filled(k, layers, layerwise, 1.0 / k as f64),
    }
}

fn effective_for(basis: Basis, alpha: &MixCoefficients) -> MixCoefficients {
    match basis {
        Basis::Centered => effective_coefficients(alpha),
        Basis::Raw => alpha.clone(),
    }
}

fn acquire_basis(store: &CheckpointStore, ids: &[CheckpointId], mean: Option<&ScratchVector>) -> Result<Vec<CheckpointHandle>> {
    match mean {
        Some(m) => store.acquire_centered(ids, m),
        None => store.acquire(ids),
    }
}

fn diverged(err: Error) -> Error {
    match err {
        Error::NonFinite(what) => Error::TrainingDiverged(format!("non-finite {what}")),
        other => other,
    }
}

fn ensure_finite(state: &SoupState, theta: &[f64]) -> Result<()> {
    if !state.alpha.is_finite() || !theta.iter().all(|x| x.is_finite()) {
        return Err(Error::TrainingDiverged(format!(
            "non-finite soup after step {}",
            state.step
        )));
    }
    Ok(())
}

/// Accumulates `Σ_k Σ_c (∂L/∂α_kc)²` in ascending `k`.
struct NormAcc(f64);

impl NormAcc {
    fn add(&mut self, rows: &[Vec<f64>]) {
        for r in rows {
            for g in r {
                self.0 += g * g;
            }
        }
    }
}

/// Hyperplane learned soup, all `K` ingredients resident: `J` AdamW steps
/// on α over validation mini-batches. Same operation order as
/// [`mehl_soup`] with `b = K`, `T = 1`.
pub fn hl_soup(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
    layerwise: bool,
) -> Result<SoupResult> {
    let cfg = SoupTrainConfig {
        model_batch: store.len(),
        outer_iters: 1,
        ..cfg.clone()
    };
    cfg.validate()?;
    let layout = store.layout().clone();
    check_model(spec, &layout)?;
    let k = store.len();
    let ids: Vec<CheckpointId> = store.ids().collect();
    let rows: Vec<usize> = (0..k).collect();

    let mean = match cfg.basis {
        Basis::Centered => Some(mean_vector(store)?),
        Basis::Raw => None,
    };
    let diffs = acquire_basis(store, &ids, mean.as_ref())?;
    let terms: Vec<(usize, &[f64])> = rows.iter().zip(&diffs).map(|(&r, d)| (r, d.as_slice())).collect();
    let vectors: Vec<&[f64]> = diffs.iter().map(|d| d.as_slice()).collect();
    let base = mean.as_ref().map(|m| m.as_slice());

    let mut state = SoupState::new(initial_alpha(k, layout.len(), layerwise, cfg.basis));
    let mut states = Vec::new();
    if cfg.record_states {
        states.push(state.clone());
    }
    let mut theta = store.scratch_zeros()?;
    let mut sampler = DataSampler::new(val, cfg.data_batch, cfg.seed);
    let opt = cfg.adamw();
    let total = cfg.total_steps();

    for _ in 0..cfg.inner_iters {
        compose(&mut theta, base, &layout, &state.alpha, &terms, 1.0);
        let batch = sampler.next_batch()?;
        let (_, grads) = streamed_dots(spec, &layout, &theta, &batch, cfg.label_smoothing, &vectors, layerwise)
            .map_err(diverged)?;
        adamw_cosine_step(&mut state, &rows, &grads, &opt, total)?;
        ensure_finite(&state, &theta)?;
    }
    compose(&mut theta, base, &layout, &state.alpha, &terms, 1.0);
    ensure_finite(&state, &theta)?;

    let (loss, grad) = full_gradient(spec, &theta, val, cfg.label_smoothing).map_err(diverged)?;
    let grad = store.scratch(grad)?;
    let diff_refs: Vec<(CheckpointId, &[f64])> = ids.iter().copied().zip(vectors.iter().copied()).collect();
    let mut norm = NormAcc(0.0);
    for pair in &diff_refs {
        norm.add(&alpha_gradient(&grad, std::slice::from_ref(pair), &layout, layerwise)?);
    }
    if cfg.record_states {
        states.push(state.clone());
    }

    Ok(SoupResult {
        soup: theta.into_inner(),
        effective: effective_for(cfg.basis, &state.alpha),
        alpha: state.alpha,
        members: Vec::new(),
        trace: vec![TracePoint {
            step: cfg.inner_iters,
            val_loss: loss.value,
            grad_norm_sq: norm.0,
        }],
        blocks: vec![ids],
        states,
    })
}

/// Memory-efficient hyperplane soup by block-coordinate descent, with
/// blocks drawn by [`sample_block`].
pub fn mehl_soup(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
    layerwise: bool,
) -> Result<SoupResult> {
    let (k, b, seed) = (store.len(), cfg.model_batch, cfg.seed);
    mehl_soup_with_blocks(store, spec, val, cfg, layerwise, |t| sample_block(k, b, seed, t))
}

/// [`mehl_soup`] with caller-chosen blocks: `blocks(t)` yields the ids
/// loaded at outer iteration `t` (1-based). Each block must hold
/// `cfg.model_batch` distinct ids.
///
/// Per outer iteration `t`:
/// 1. load the block's ingredients as `d_k`;
/// 2. `θ_fix = θ★ − Σ_{k∈block} α_k ⊙ d_k` (frozen for the whole iteration);
/// 3. `J` times: `θ★ = θ_fix + Σ_{k∈block} α_k ⊙ d_k`, draw a validation
///    mini-batch, step the block's α with AdamW;
/// 4. rebuild `θ★`, release the block, record the full-validation trace point.
///
/// Resident full vectors peak at `b + 3` (θ̄, θ★, θ_fix and the block).
pub fn mehl_soup_with_blocks(
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
    layerwise: bool,
    mut blocks: impl FnMut(usize) -> Vec<CheckpointId>,
) -> Result<SoupResult> {
    cfg.validate()?;
    let k = store.len();
    let b = cfg.model_batch;
    if b == 0 || b > k {
        return Err(Error::InvalidArgument(format!("model batch {b} must be in 1..={k}")));
    }
    if cfg.outer_iters == 0 {
        return Err(Error::InvalidArgument("at least one outer iteration is required".into()));
    }
    let layout = store.layout().clone();
    check_model(spec, &layout)?;

    let mean = match cfg.basis {
        Basis::Centered => Some(mean_vector(store)?),
        Basis::Raw => None,
    };
    let mut state = SoupState::new(initial_alpha(k, layout.len(), layerwise, cfg.basis));
    let mut states = Vec::new();
    if cfg.record_states {
        states.push(state.clone());
    }

    let mut theta = match &mean {
        Some(m) => store.scratch(m.to_param_vector())?,
        None => {
            let mut acc = store.scratch_zeros()?;
            for id in store.ids() {
                let h = store.acquire_one(id)?;
                for (li, layer) in layout.layers().iter().enumerate() {
                    let a = state.alpha.get(id - 1, state.alpha.col_of(li));
                    for i in layer.range() {
                        acc[i] += a * h[i];
                    }
                }
            }
            acc
        }
    };

    let mut sampler = DataSampler::new(val, cfg.data_batch, cfg.seed);
    let opt = cfg.adamw();
    let total = cfg.total_steps();
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut history = Vec::with_capacity(cfg.outer_iters);

    for t in 1..=cfg.outer_iters {
        let block = blocks(t);
        let mut sorted = block.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if block.len() != b || sorted.len() != b {
            return Err(Error::InvalidArgument(format!(
                "outer iteration {t}: block {block:?} must hold {b} distinct ids"
            )));
        }
        let handles = acquire_basis(store, &block, mean.as_ref())?;
        let rows: Vec<usize> = block.iter().map(|id| id - 1).collect();
        let terms: Vec<(usize, &[f64])> = rows.iter().zip(&handles).map(|(&r, d)| (r, d.as_slice())).collect();
        let vectors: Vec<&[f64]> = handles.iter().map(|d| d.as_slice()).collect();

        let mut theta_fix = store.scratch_zeros()?;
        compose(&mut theta_fix, Some(theta.as_slice()), &layout, &state.alpha, &terms, -1.0);
        if cfg.reset_adam_per_block {
            state.reset_rows(&rows);
        }

        for _ in 0..cfg.inner_iters {
            compose(&mut theta, Some(theta_fix.as_slice()), &layout, &state.alpha, &terms, 1.0);
            let batch = sampler.next_batch()?;
            let (_, grads) = streamed_dots(spec, &layout, &theta, &batch, cfg.label_smoothing, &vectors, layerwise)
                .map_err(diverged)?;
            adamw_cosine_step(&mut state, &rows, &grads, &opt, total)?;
            ensure_finite(&state, &theta)?;
        }
        compose(&mut theta, Some(theta_fix.as_slice()), &layout, &state.alpha, &terms, 1.0);
        ensure_finite(&state, &theta)?;
        drop(theta_fix);
        drop(vectors);
        drop(terms);
        store.release(handles);

        let (loss, grad) = full_gradient(spec, &theta, val, cfg.label_smoothing).map_err(diverged)?;
        let grad = store.scratch(grad)?;
        let mut norm = NormAcc(0.0);
        for id in store.ids() {
            let d = acquire_basis(store, &[id], mean.as_ref())?;
            norm.add(&alpha_gradient(&grad, &[(id, d[0].as_slice())], &layout, layerwise)?);
        }
        drop(grad);
        trace.push(TracePoint {
            step: t * cfg.inner_iters,
            val_loss: loss.value,
            grad_norm_sq: norm.0,
        });
        history.push(block);
        if cfg.record_states {
            states.push(state.clone());
        }
    }

    Ok(SoupResult {
        soup: theta.into_inner(),
        effective: effective_for(cfg.basis, &state.alpha),
        alpha: state.alpha,
        members: Vec::new(),
        trace,
        blocks: history,
        states,
    })
}
