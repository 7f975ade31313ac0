use std::fmt;
use std::str::FromStr;

use super::Dataset;
use crate::error::{Error, Result};
use crate::params::{LayerMap, ParamVector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    /// The relu subgradient at 0 is 0.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::InvalidArgument(format!(
                "unknown activation {other:?} (expected relu or tanh)"
            ))),
        }
    }
}

/// Fully-connected classifier architecture.
///
/// Layer `l` holds weight `w{l}` of shape `[fan_out, fan_in]` (row-major) and
/// bias `b{l}` of shape `[fan_out]`, laid out in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        Ok(ModelSpec {
            input_dim,
            hidden_dims,
            num_classes,
            activation,
        })
    }

    /// `(fan_in, fan_out)` for each dense layer.
    pub fn dense_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden_dims.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden_dims);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.dense_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn layer_map(&self) -> LayerMap {
        let specs = self.dense_dims().into_iter().enumerate().flat_map(|(l, (i, o))| {
            [(format!("w{l}"), vec![o, i]), (format!("b{l}"), vec![o])]
        });
        LayerMap::new(specs).expect("model spec yields a valid layer map")
    }

    /// Recovers the architecture from a checkpoint's layer map.
    pub fn from_layer_map(map: &LayerMap, activation: Activation) -> Result<Self> {
        let layers = map.layers();
        if layers.len() < 2 || layers.len() % 2 != 0 {
            return Err(Error::InvalidArgument(
                "layer map is not an alternating w/b dense stack".into(),
            ));
        }
        let mut widths = Vec::new();
        for (l, pair) in layers.chunks(2).enumerate() {
            let (w, b) = (&pair[0], &pair[1]);
            let ok = w.name == format!("w{l}")
                && b.name == format!("b{l}")
                && w.shape.len() == 2
                && b.shape == [w.shape[0]]
                && widths.last().is_none_or(|&prev| prev == w.shape[1]);
            if !ok {
                return Err(Error::InvalidArgument(format!(
                    "layer pair {l} ({}, {}) does not describe a dense layer",
                    w.name, b.name
                )));
            }
            if l == 0 {
                widths.push(w.shape[1]);
            }
            widths.push(w.shape[0]);
        }
        let num_classes = widths.pop().expect("at least one layer");
        let input_dim = widths.remove(0);
        ModelSpec::new(input_dim, widths, num_classes, activation)
    }

    fn check(&self, params: &[f64], batch: &Dataset) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if batch.dim() != self.input_dim {
            return Err(Error::Dimension(format!(
                "expected {} input features, got {}",
                self.input_dim,
                batch.dim()
            )));
        }
        Ok(())
    }
}

/// Row-major `rows × cols` logit matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Index of the largest entry in row `r`; ties go to the smallest index.
    pub fn argmax(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub correct: usize,
}

/// Per-layer activations retained for the backward pass.
struct Trace {
    /// `acts[0]` is the input; `acts[l+1]` is the output of dense layer `l`
    /// (post-activation for hidden layers, logits for the last).
    acts: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
}

fn run_forward(spec: &ModelSpec, params: &[f64], batch: &Dataset) -> Trace {
    let n = batch.len();
    let dims = spec.dense_dims();
    let last = dims.len() - 1;
    let mut acts = vec![batch.features().to_vec()];
    let mut pre = Vec::with_capacity(last);
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let input = &acts[l];
        let mut z = vec![0.0; n * fan_out];
        for r in 0..n {
            let x = &input[r * fan_in..(r + 1) * fan_in];
            for j in 0..fan_out {
                let wj = &w[j * fan_in..(j + 1) * fan_in];
                let mut s = b[j];
                for (wi, xi) in wj.iter().zip(x) {
                    s += wi * xi;
                }
                z[r * fan_out + j] = s;
            }
        }
        if l < last {
            let a = z.iter().map(|&v| spec.activation.apply(v)).collect();
            pre.push(z);
            acts.push(a);
        } else {
            acts.push(z);
        }
    }
    Trace { acts, pre }
}

pub fn forward(spec: &ModelSpec, params: &[f64], batch: &Dataset) -> Result<Logits> {
    spec.check(params, batch)?;
    let mut trace = run_forward(spec, params, batch);
    Ok(Logits {
        rows: batch.len(),
        cols: spec.num_classes,
        data: trace.acts.pop().expect("output layer"),
    })
}

/// Numerically stable `log Σ exp(row)`.
fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + s.ln()
}

/// Mean cross-entropy against `(1-ε)·onehot + ε/C`, and `∂loss/∂logits` when
/// `want_grad` is set.
fn loss_and_grad(
    logits: &Logits,
    labels: &[usize],
    label_smoothing: f64,
    want_grad: bool,
) -> Result<(LossValue, Vec<f64>)> {
    let n = logits.rows;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} rows", labels.len())));
    }
    if !(0.0..1.0).contains(&label_smoothing) {
        return Err(Error::InvalidArgument(format!(
            "label smoothing {label_smoothing} outside [0, 1)"
        )));
    }
    let c = logits.cols;
    let off = label_smoothing / c as f64;
    let on = 1.0 - label_smoothing + off;
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut correct = 0;
    let mut grad = if want_grad { vec![0.0; n * c] } else { Vec::new() };
    for r in 0..n {
        let row = logits.row(r);
        let y = labels[r];
        if y >= c {
            return Err(Error::Dimension(format!("label {y} out of range for {c} classes")));
        }
        let lse = log_sum_exp(row);
        let mut row_loss = 0.0;
        for (k, &z) in row.iter().enumerate() {
            let t = if k == y { on } else { off };
            row_loss -= t * (z - lse);
            if want_grad {
                grad[r * c + k] = ((z - lse).exp() - t) * inv_n;
            }
        }
        total += row_loss;
        if logits.argmax(r) == y {
            correct += 1;
        }
    }
    Ok((
        LossValue {
            value: total * inv_n,
            correct,
        },
        grad,
    ))
}

pub fn loss(logits: &Logits, labels: &[usize], label_smoothing: f64) -> Result<LossValue> {
    loss_and_grad(logits, labels, label_smoothing, false).map(|(l, _)| l)
}

/// Loss of the model on `batch`.
pub fn evaluate(spec: &ModelSpec, params: &[f64], batch: &Dataset, label_smoothing: f64) -> Result<LossValue> {
    let logits = forward(spec, params, batch)?;
    loss(&logits, batch.labels(), label_smoothing)
}

/// Backward pass that hands each layer's gradient to `sink` as soon as it is
/// complete, without materializing the full gradient vector.
///
/// `sink(layer_index, grad)` receives layers in reverse order (last bias
/// first); `layer_index` indexes [`ModelSpec::layer_map`].
pub fn backward_layers(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Dataset,
    label_smoothing: f64,
    mut sink: impl FnMut(usize, &[f64]),
) -> Result<LossValue> {
    spec.check(params, batch)?;
    let n = batch.len();
    let dims = spec.dense_dims();
    let mut trace = run_forward(spec, params, batch);
    let logits = Logits {
        rows: n,
        cols: spec.num_classes,
        data: trace.acts.pop().expect("output layer"),
    };
    let (value, mut delta) = loss_and_grad(&logits, batch.labels(), label_smoothing, true)?;
    if !value.value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }

    let mut offsets = Vec::with_capacity(dims.len());
    let mut offset = 0;
    for &(i, o) in &dims {
        offsets.push(offset);
        offset += i * o + o;
    }

    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let input = &trace.acts[l];
        let mut gb = vec![0.0; fan_out];
        for r in 0..n {
            for j in 0..fan_out {
                gb[j] += delta[r * fan_out + j];
            }
        }
        sink(2 * l + 1, &gb);
        drop(gb);

        let mut gw = vec![0.0; fan_out * fan_in];
        for r in 0..n {
            let x = &input[r * fan_in..(r + 1) * fan_in];
            for j in 0..fan_out {
                let d = delta[r * fan_out + j];
                let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
        }
        sink(2 * l, &gw);
        drop(gw);

        if l > 0 {
            let w = &params[offsets[l]..offsets[l] + fan_in * fan_out];
            let z = &trace.pre[l - 1];
            let mut prev = vec![0.0; n * fan_in];
            for r in 0..n {
                for j in 0..fan_out {
                    let d = delta[r * fan_out + j];
                    let wj = &w[j * fan_in..(j + 1) * fan_in];
                    let p = &mut prev[r * fan_in..(r + 1) * fan_in];
                    for (pi, wi) in p.iter_mut().zip(wj) {
                        *pi += d * wi;
                    }
                }
                for i in 0..fan_in {
                    let k = r * fan_in + i;
                    prev[k] *= spec.activation.derivative(z[k], input[k]);
                }
            }
            delta = prev;
        }
    }
    Ok(value)
}

/// Exact gradient of the mean loss with respect to every parameter.
pub fn backward(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Dataset,
    label_smoothing: f64,
) -> Result<(LossValue, ParamVector)> {
    let map = spec.layer_map();
    let mut grad = ParamVector::zeros(spec.param_count());
    let value = backward_layers(spec, params, batch, label_smoothing, |idx, g| {
        grad[map.layers()[idx].range()].copy_from_slice(g);
    })?;
    Ok((value, grad))
}

/// Central differences `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!("finite-difference step {h} must be positive")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

pub fn fd_gradient(
    spec: &ModelSpec,
    params: &[f64],
    batch: &Dataset,
    label_smoothing: f64,
    h: f64,
) -> Result<ParamVector> {
    spec.check(params, batch)?;
    let g = central_difference(
        |p| evaluate(spec, p, batch, label_smoothing).map(|l| l.value),
        params,
        h,
    )?;
    Ok(ParamVector::new(g))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn accuracy(spec: &ModelSpec, params: &[f64], data: &Dataset) -> Result<f64> {
    let logits = forward(spec, params, data)?;
    let correct = (0..data.len())
        .filter(|&r| logits.argmax(r) == data.labels()[r])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Mean of the per-model logits (running mean, so copies of one model are exact).
pub fn ensemble_logits(spec: &ModelSpec, models: &[&[f64]], batch: &Dataset) -> Result<Logits> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one model".into()))?;
    let mut acc = forward(spec, first, batch)?;
    for (i, m) in rest.iter().enumerate() {
        let next = forward(spec, m, batch)?;
        let k = (i + 2) as f64;
        for (a, b) in acc.data.iter_mut().zip(&next.data) {
            *a += (b - *a) / k;
        }
    }
    Ok(acc)
}
