use crate::error::{Error, Result};
use crate::params::{dot, CheckpointId, LayerMap};

/// Mixing coefficients, one row per ingredient and one column per layer
/// (layer-wise) or a single column (global).
#[derive(Clone, Debug, PartialEq)]
pub struct MixCoefficients {
    layerwise: bool,
    k: usize,
    cols: usize,
    values: Vec<f64>,
}

impl MixCoefficients {
    /// `cols` is ignored unless `layerwise`.
    pub fn filled(k: usize, cols: usize, layerwise: bool, value: f64) -> Self {
        let cols = if layerwise { cols } else { 1 };
        MixCoefficients {
            layerwise,
            k,
            cols,
            values: vec![value; k * cols],
        }
    }

    pub fn zeros(k: usize, cols: usize, layerwise: bool) -> Self {
        Self::filled(k, cols, layerwise, 0.0)
    }

    pub fn from_rows(rows: Vec<Vec<f64>>, layerwise: bool) -> Result<Self> {
        let k = rows.len();
        let cols = rows.first().map_or(0, Vec::len);
        if k == 0 || cols == 0 || rows.iter().any(|r| r.len() != cols) || (!layerwise && cols != 1) {
            return Err(Error::InvalidArgument("ragged or empty coefficient rows".into()));
        }
        Ok(MixCoefficients {
            layerwise,
            k,
            cols,
            values: rows.into_iter().flatten().collect(),
        })
    }

    pub fn layerwise(&self) -> bool {
        self.layerwise
    }

    /// Number of ingredients.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Column holding the coefficient for layer `layer_index`.
    pub fn col_of(&self, layer_index: usize) -> usize {
        if self.layerwise {
            layer_index
        } else {
            0
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.values[row * self.cols..(row + 1) * self.cols]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn bit_eq(&self, other: &Self) -> bool {
        self.layerwise == other.layerwise
            && self.k == other.k
            && self.cols == other.cols
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Per-column sums.
    pub fn column_sums(&self) -> Vec<f64> {
        (0..self.cols)
            .map(|c| (0..self.k).map(|r| self.get(r, c)).sum())
            .collect()
    }
}

/// Weight on each raw ingredient implied by a centered combination:
/// `1/K + α_k − mean(α)` per column. Columns sum to one.
pub fn effective_coefficients(alpha: &MixCoefficients) -> MixCoefficients {
    let k = alpha.k();
    let inv_k = 1.0 / k as f64;
    let mut out = alpha.clone();
    for c in 0..alpha.cols() {
        let mean = (0..k).map(|r| alpha.get(r, c)).sum::<f64>() * inv_k;
        for r in 0..k {
            out.values[r * alpha.cols + c] = inv_k + alpha.get(r, c) - mean;
        }
    }
    out
}

/// Per-layer partial dot products `∇θ^(l) · d_k^(l)`, reduced either per
/// layer or into one global sum accumulated in layer order.
///
/// Both the full-gradient path ([`alpha_gradient`]) and the streaming path
/// used during training go through this accumulator, so they agree bitwise.
pub(crate) struct LayerDots {
    partials: Vec<Vec<f64>>,
    layerwise: bool,
}

impl LayerDots {
    pub(crate) fn new(n_vectors: usize, n_layers: usize, layerwise: bool) -> Self {
        LayerDots {
            partials: vec![vec![0.0; n_layers]; n_vectors],
            layerwise,
        }
    }

    pub(crate) fn accumulate(&mut self, layout: &LayerMap, layer_index: usize, grad_slice: &[f64], vectors: &[&[f64]]) {
        let range = layout.layers()[layer_index].range();
        for (p, v) in self.partials.iter_mut().zip(vectors) {
            p[layer_index] = dot(grad_slice, &v[range.clone()]);
        }
    }

    pub(crate) fn finish(self) -> Vec<Vec<f64>> {
        if self.layerwise {
            return self.partials;
        }
        self.partials
            .into_iter()
            .map(|p| {
                let mut s = 0.0;
                for x in p {
                    s += x;
                }
                vec![s]
            })
            .collect()
    }
}

/// `∇_{α_k} L = ∇θ L · d_k` for each `(id, d_k)`, restricted to each layer's
/// slice when `layerwise`. Output rows follow the order of `diffs`.
pub fn alpha_gradient(
    grad: &[f64],
    diffs: &[(CheckpointId, &[f64])],
    layout: &LayerMap,
    layerwise: bool,
) -> Result<Vec<Vec<f64>>> {
    if grad.len() != layout.total_len() {
        return Err(Error::ShapeMismatch {
            expected: layout.total_len(),
            actual: grad.len(),
        });
    }
    for (_, d) in diffs {
        if d.len() != grad.len() {
            return Err(Error::ShapeMismatch {
                expected: grad.len(),
                actual: d.len(),
            });
        }
    }
    let vectors: Vec<&[f64]> = diffs.iter().map(|(_, d)| *d).collect();
    let mut dots = LayerDots::new(diffs.len(), layout.len(), layerwise);
    for (idx, layer) in layout.layers().iter().enumerate() {
        dots.accumulate(layout, idx, &grad[layer.range()], &vectors);
    }
    Ok(dots.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_alpha_gives_uniform_weights() {
        let e = effective_coefficients(&MixCoefficients::zeros(4, 3, true));
        assert!(e.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn worked_example() {
        let a = MixCoefficients::from_rows(vec![vec![0.5], vec![-0.2], vec![0.1]], false).unwrap();
        let e = effective_coefficients(&a);
        let want = [0.7, 0.0, 0.3];
        for (got, want) in e.values().iter().zip(want) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
        assert!((e.column_sums()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_shift_is_invisible() {
        let a = MixCoefficients::from_rows(vec![vec![0.3, -1.0], vec![2.0, 0.25], vec![-0.7, 0.0]], true).unwrap();
        let shifted = MixCoefficients::from_rows(
            (0..3).map(|r| a.row(r).iter().map(|v| v + 0.75).collect()).collect(),
            true,
        )
        .unwrap();
        let (e1, e2) = (effective_coefficients(&a), effective_coefficients(&shifted));
        for (x, y) in e1.values().iter().zip(e2.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn dot_product_example() {
        let layout = LayerMap::new([("a", vec![3])]).unwrap();
        let g = alpha_gradient(&[1.0, 0.0, 2.0], &[(1, &[2.0, 3.0, -1.0])], &layout, false).unwrap();
        assert_eq!(g, vec![vec![0.0]]);
    }

    #[test]
    fn layerwise_partials_sum_to_global() {
        let layout = LayerMap::new([("w", vec![2, 2]), ("b", vec![2]), ("v", vec![3])]).unwrap();
        let grad: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let d1: Vec<f64> = (0..9).map(|i| (i as f64 * 1.3).cos()).collect();
        let d2: Vec<f64> = (0..9).map(|i| i as f64 - 4.0).collect();
        let diffs = [(1, d1.as_slice()), (2, d2.as_slice())];
        let lw = alpha_gradient(&grad, &diffs, &layout, true).unwrap();
        let gl = alpha_gradient(&grad, &diffs, &layout, false).unwrap();
        for k in 0..2 {
            assert_eq!(lw[k].len(), 3);
            let full = dot(&grad, diffs[k].1);
            assert!((lw[k].iter().sum::<f64>() - gl[k][0]).abs() < 1e-12);
            assert!((gl[k][0] - full).abs() < 1e-12);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let layout = LayerMap::new([("a", vec![3])]).unwrap();
        assert!(alpha_gradient(&[1.0; 3], &[(1, &[1.0; 2])], &layout, false).is_err());
        assert!(alpha_gradient(&[1.0; 2], &[], &layout, false).is_err());
    }
}
