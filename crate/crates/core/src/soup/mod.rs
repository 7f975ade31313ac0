//! Soup construction: uniform, greedy, softmax-learned, hyperplane-learned
//! (HL) and memory-efficient block-coordinate (MEHL) soups.
//!
//! The hyperplane soups train coefficients `α` over centered ingredients
//! `d_k = θ_k − θ̄`:
//!
//! ```text
//! θ★ = θ̄ + Σ_k α_k ⊙ d_k          (⊙ broadcasts one α per layer when layer-wise)
//! ∂L/∂α_k = ∇θ★ L · d_k
//! ```
//!
//! MEHL trains the same objective by block-coordinate descent: each outer
//! iteration loads only a block of `b` ingredients, freezes the rest of the
//! soup into `θ_fix`, and takes `J` AdamW steps on the block's coefficients.

mod adamw;
mod baselines;
mod coeffs;
mod engine;
mod hyperplane;

use std::fmt;
use std::str::FromStr;

pub use adamw::{adamw_cosine_step, cosine_lr, AdamW, SoupState};
pub use baselines::{greedy_soup, learned_soup_softmax, softmax_columns, uniform_soup};
pub use coeffs::{alpha_gradient, effective_coefficients, MixCoefficients};
pub use hyperplane::{hl_soup, mehl_soup, mehl_soup_with_blocks, sample_block};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelSpec};
use crate::params::{CheckpointId, CheckpointStore, ParamVector};

/// Combination basis for the hyperplane soups.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Basis {
    /// `θ★ = θ̄ + Σ α_k (θ_k − θ̄)`, α initialized to 0.
    Centered,
    /// `θ★ = Σ α_k θ_k`, α initialized to 1/K (no decentralization).
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoupTrainConfig {
    /// Ingredients loaded per outer iteration (`b`).
    pub model_batch: usize,
    /// Outer iterations (`T`).
    pub outer_iters: usize,
    /// Inner iterations per outer iteration (`J`).
    pub inner_iters: usize,
    /// Validation rows per inner step.
    pub data_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub label_smoothing: f64,
    pub basis: Basis,
    pub reset_adam_per_block: bool,
    /// Cosine horizon; defaults to `T·J`.
    pub schedule_horizon: Option<usize>,
    /// Keep a snapshot of the optimizer state at every outer boundary.
    pub record_states: bool,
}

impl Default for SoupTrainConfig {
    fn default() -> Self {
        SoupTrainConfig {
            model_batch: 4,
            outer_iters: 4,
            inner_iters: 250,
            data_batch: 32,
            lr: 0.01,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            label_smoothing: 0.0,
            basis: Basis::Centered,
            reset_adam_per_block: false,
            schedule_horizon: None,
            record_states: false,
        }
    }
}

impl SoupTrainConfig {
    /// Defaults for the softmax baseline: higher rate, no weight decay.
    pub fn softmax_defaults() -> Self {
        SoupTrainConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..Default::default()
        }
    }

    pub fn adamw(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.schedule_horizon
            .unwrap_or(self.outer_iters * self.inner_iters)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.data_batch >= 1
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.label_smoothing)
            && self.total_steps() >= self.outer_iters * self.inner_iters;
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid soup training config {self:?}")));
        }
        Ok(())
    }
}

/// Loss and squared coefficient-gradient norm on the full validation set,
/// recorded at an outer-iteration boundary.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TracePoint {
    pub step: usize,
    pub val_loss: f64,
    pub grad_norm_sq: f64,
}

#[derive(Clone, Debug)]
pub struct SoupResult {
    pub soup: ParamVector,
    /// Trained parameters: α for hyperplane soups, logits for the softmax
    /// baseline, zeros for uniform, 0/1 membership for greedy.
    pub alpha: MixCoefficients,
    /// Weight each raw ingredient carries in the soup.
    pub effective: MixCoefficients,
    /// Greedy soup members, in the order they joined.
    pub members: Vec<CheckpointId>,
    pub trace: Vec<TracePoint>,
    /// Block sampled at each outer iteration (MEHL; a single full block for HL).
    pub blocks: Vec<Vec<CheckpointId>>,
    /// State after each outer iteration, preceded by the initial state, when
    /// `record_states` is set.
    pub states: Vec<SoupState>,
}

impl SoupResult {
    /// Bitwise equality of everything except recorded states.
    pub fn bit_eq(&self, other: &SoupResult) -> bool {
        self.soup.bit_eq(&other.soup)
            && self.alpha.bit_eq(&other.alpha)
            && self.effective.bit_eq(&other.effective)
            && self.members == other.members
            && self.trace.len() == other.trace.len()
            && self.trace.iter().zip(&other.trace).all(|(a, b)| {
                a.step == b.step
                    && a.val_loss.to_bits() == b.val_loss.to_bits()
                    && a.grad_norm_sq.to_bits() == b.grad_norm_sq.to_bits()
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SoupMethod {
    Uniform,
    Greedy,
    LearnedSoftmax { layerwise: bool },
    Hyperplane { layerwise: bool },
    MemoryEfficient { layerwise: bool },
}

impl SoupMethod {
    pub const ALL: [SoupMethod; 8] = [
        SoupMethod::Uniform,
        SoupMethod::Greedy,
        SoupMethod::LearnedSoftmax { layerwise: false },
        SoupMethod::LearnedSoftmax { layerwise: true },
        SoupMethod::Hyperplane { layerwise: false },
        SoupMethod::Hyperplane { layerwise: true },
        SoupMethod::MemoryEfficient { layerwise: false },
        SoupMethod::MemoryEfficient { layerwise: true },
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SoupMethod::Uniform => "uniform",
            SoupMethod::Greedy => "greedy",
            SoupMethod::LearnedSoftmax { layerwise: false } => "learned-softmax",
            SoupMethod::LearnedSoftmax { layerwise: true } => "learned-softmax-plus",
            SoupMethod::Hyperplane { layerwise: false } => "hl",
            SoupMethod::Hyperplane { layerwise: true } => "hl-plus",
            SoupMethod::MemoryEfficient { layerwise: false } => "mehl",
            SoupMethod::MemoryEfficient { layerwise: true } => "mehl-plus",
        }
    }

    pub fn names() -> Vec<&'static str> {
        Self::ALL.iter().map(SoupMethod::name).collect()
    }

    pub fn with_layerwise(self, layerwise: bool) -> Self {
        match self {
            SoupMethod::LearnedSoftmax { .. } => SoupMethod::LearnedSoftmax { layerwise },
            SoupMethod::Hyperplane { .. } => SoupMethod::Hyperplane { layerwise },
            SoupMethod::MemoryEfficient { .. } => SoupMethod::MemoryEfficient { layerwise },
            other => other,
        }
    }

    pub fn is_learned(&self) -> bool {
        !matches!(self, SoupMethod::Uniform | SoupMethod::Greedy)
    }
}

impl fmt::Display for SoupMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SoupMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.iter().copied().find(|m| m.name() == s).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "unknown soup method {s:?}; valid methods: {}",
                Self::names().join(", ")
            ))
        })
    }
}

/// Runs `method` with `cfg`. For the softmax baseline `cfg` is used as given;
/// callers wanting its own defaults pass [`SoupTrainConfig::softmax_defaults`].
pub fn run_method(
    method: SoupMethod,
    store: &CheckpointStore,
    spec: &ModelSpec,
    val: &Dataset,
    cfg: &SoupTrainConfig,
) -> Result<SoupResult> {
    match method {
        SoupMethod::Uniform => uniform_soup(store),
        SoupMethod::Greedy => greedy_soup(store, spec, val),
        SoupMethod::LearnedSoftmax { layerwise } => learned_soup_softmax(store, spec, val, cfg, layerwise),
        SoupMethod::Hyperplane { layerwise } => hl_soup(store, spec, val, cfg, layerwise),
        SoupMethod::MemoryEfficient { layerwise } => mehl_soup(store, spec, val, cfg, layerwise),
    }
}
