//! Pieces shared by the learned-soup trainers.

use rand::seq::SliceRandom;

use super::coeffs::LayerDots;
use super::MixCoefficients;
use crate::error::{Error, Result};
use crate::model::{backward, backward_layers, Dataset, LossValue, ModelSpec};
use crate::params::LayerMap;
use crate::seed;

/// Validation mini-batches: contiguous slices of a seeded permutation,
/// reshuffled (stream `soup/data/<epoch>`) when fewer than a full batch remain.
pub(crate) struct DataSampler<'a> {
    data: &'a Dataset,
    batch: usize,
    seed: u64,
    order: Vec<usize>,
    pos: usize,
    epoch: usize,
}

impl<'a> DataSampler<'a> {
    pub(crate) fn new(data: &'a Dataset, batch: usize, seed: u64) -> Self {
        DataSampler {
            data,
            batch: batch.min(data.len()),
            seed,
            order: Vec::new(),
            pos: usize::MAX,
            epoch: 0,
        }
    }

    pub(crate) fn next_batch(&mut self) -> Result<Dataset> {
        if self.batch == self.data.len() {
            return Ok(self.data.clone());
        }
        if self.pos.saturating_add(self.batch) > self.order.len() {
            self.order = (0..self.data.len()).collect();
            let mut rng = seed::stream(self.seed, &format!("soup/data/{}", self.epoch));
            self.order.shuffle(&mut rng);
            self.epoch += 1;
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        self.data.select(idx)
    }
}

/// `out = base + Σ_j coef[rows_j] ⊙ vecs_j`, with coefficients broadcast per
/// layer. `base = None` means a zero base. Terms are added per element in
/// list order.
pub(crate) fn compose(
    out: &mut [f64],
    base: Option<&[f64]>,
    layout: &LayerMap,
    coeffs: &MixCoefficients,
    terms: &[(usize, &[f64])],
    sign: f64,
) {
    for (li, layer) in layout.layers().iter().enumerate() {
        let col = coeffs.col_of(li);
        let scaled: Vec<(f64, &[f64])> = terms
            .iter()
            .map(|&(row, v)| (sign * coeffs.get(row, col), v))
            .collect();
        for i in layer.range() {
            let mut s = base.map_or(0.0, |b| b[i]);
            for &(c, v) in &scaled {
                s += c * v[i];
            }
            out[i] = s;
        }
    }
}

/// Mini-batch loss and `∇θL · v_j` for every vector, without materializing `∇θL`.
pub(crate) fn streamed_dots(
    spec: &ModelSpec,
    layout: &LayerMap,
    theta: &[f64],
    batch: &Dataset,
    label_smoothing: f64,
    vectors: &[&[f64]],
    layerwise: bool,
) -> Result<(LossValue, Vec<Vec<f64>>)> {
    let mut dots = LayerDots::new(vectors.len(), layout.len(), layerwise);
    let loss = backward_layers(spec, theta, batch, label_smoothing, |li, g| {
        dots.accumulate(layout, li, g, vectors);
    })?;
    let out = dots.finish();
    check_finite(&out)?;
    Ok((loss, out))
}

/// Full-data loss and gradient at `theta` (the gradient is a full-size vector
/// and must be counted by the caller).
pub(crate) fn full_gradient(
    spec: &ModelSpec,
    theta: &[f64],
    data: &Dataset,
    label_smoothing: f64,
) -> Result<(LossValue, crate::params::ParamVector)> {
    backward(spec, theta, data, label_smoothing)
}

pub(crate) fn check_finite(rows: &[Vec<f64>]) -> Result<()> {
    if rows.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::TrainingDiverged("non-finite coefficient gradient".into()))
    }
}

pub(crate) fn sum_sq(rows: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for r in rows {
        for g in r {
            s += g * g;
        }
    }
    s
}
