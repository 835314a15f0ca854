//! Single-head, pre-LN, causal decoder-only transformer.
//!
//! Each block computes
//!
//! ```text
//! z_i    = v_i + sum_{j <= i} a_ij * norm1(v_j)
//! v_i'   = z_i + mlp(norm2(z_i))
//! ```
//!
//! with `a_ij` a causal softmax over rotary-encoded scaled dot products of
//! projected `norm1` outputs. There is no separate value projection: the
//! attended values are the `norm1` outputs themselves. After the last block,
//! `y_i = norm3(v_i)`.
//!
//! The forward pass keeps every intermediate snapshot, can capture or replay
//! attention matrices, applies region masks on top of the causal mask, and
//! invokes the summary-token rewiring from [`crate::rewire`] before attention
//! at scheduled layers.

mod layers;
mod rope;
mod weights;

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use layers::{row_variances, softmax_into, Mlp, Norm, NORM_EPS};
pub use rope::{PositionalEncoding, PositionalScheme};
pub use weights::{init_weights, LayerWeights, ModelWeights, INIT_STD};

use crate::error::{Error, Result};
use crate::rewire::{self, RewirePlan};
use crate::tokens::TokenId;

/// Inclusive range of hidden-state layers `[start, end]` at which rewiring fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.start..=self.end).contains(&layer)
    }

    /// Number of layers in `1..=num_layers` the range covers.
    pub fn active_count(&self, num_layers: usize) -> usize {
        (1..=num_layers).filter(|&l| self.contains(l)).count()
    }
}

impl std::str::FromStr for LayerRange {
    type Err = Error;

    /// Parses `start:end`.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidConfig(format!("layer range {s:?} is not start:end")))?;
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::InvalidConfig(format!("layer range {s:?} is not start:end")))
        };
        Ok(Self::new(parse(a)?, parse(b)?))
    }
}

impl std::fmt::Display for LayerRange {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub rope_base: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    #[serde(default)]
    pub positional: PositionalScheme,
    /// Layers at which rewiring fires; `None` disables it.
    pub tp_layer_range: Option<LayerRange>,
    /// Early-exit layer `L'` used for readout.
    pub exit_layer: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            hidden_dim: 16,
            mlp_hidden: 32,
            rope_base: 10_000.0,
            max_seq_len: 4096,
            seed: 0,
            positional: PositionalScheme::Rotary,
            tp_layer_range: Some(LayerRange::new(1, 2)),
            exit_layer: 3,
        }
    }
}

impl ModelConfig {
    /// A tiny two-layer model used throughout the tests.
    pub fn small() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 8,
            mlp_hidden: 16,
            max_seq_len: 1024,
            tp_layer_range: Some(LayerRange::new(1, 2)),
            exit_layer: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.hidden_dim == 0 || self.mlp_hidden == 0 || self.max_seq_len == 0 {
            return bad("hidden_dim, mlp_hidden and max_seq_len must be positive".into());
        }
        if self.positional == PositionalScheme::Rotary && !self.hidden_dim.is_multiple_of(2) {
            return bad(format!(
                "d must be even for rotary encoding, got {}",
                self.hidden_dim
            ));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return bad(format!(
                "rope_base must be positive, got {}",
                self.rope_base
            ));
        }
        if let Some(r) = self.tp_layer_range {
            if r.start < 1 || r.start > r.end || r.end > self.num_layers {
                return bad(format!(
                    "tp layer range {r} must satisfy 1 <= start <= end <= {}",
                    self.num_layers
                ));
            }
        }
        if self.num_layers == 0 {
            // Depth-zero models only apply the final norm.
            if self.exit_layer != 0 {
                return bad("a zero-layer model must use exit_layer 0".into());
            }
        } else if self.exit_layer < 1 || self.exit_layer > self.num_layers {
            return bad(format!(
                "exit_layer {} must lie in [1, {}]",
                self.exit_layer, self.num_layers
            ));
        }
        Ok(())
    }
}

/// Query/key rectangles forced to `-inf` score on top of the causal mask.
/// Ranges are 0-based and half-open.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RegionMask {
    pub rects: Vec<MaskRect>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRect {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
}

impl RegionMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_rect(mut self, queries: Range<usize>, keys: Range<usize>) -> Self {
        self.rects.push(MaskRect { queries, keys });
        self
    }

    pub fn is_masked(&self, query: usize, key: usize) -> bool {
        self.rects
            .iter()
            .any(|r| r.queries.contains(&query) && r.keys.contains(&key))
    }

    fn validate(&self, n: usize) -> Result<()> {
        for r in &self.rects {
            if r.queries.end > n || r.keys.end > n {
                return Err(Error::MaskOutOfRange(format!(
                    "rectangle {:?} x {:?} exceeds sequence length {n}",
                    r.queries, r.keys
                )));
            }
        }
        Ok(())
    }

    /// Dense `n x n` grid; `true` marks a blocked pair.
    fn grid(&self, n: usize) -> Vec<bool> {
        let mut g = vec![false; n * n];
        for r in &self.rects {
            for q in r.queries.clone() {
                for k in r.keys.clone() {
                    g[q * n + k] = true;
                }
            }
        }
        g
    }
}

/// Per-layer attention matrices, each lower-triangular and row-stochastic.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace {
    pub layers: Vec<DMatrix<f64>>,
}

impl AttentionTrace {
    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.layers.first().map_or(0, |m| m.nrows())
    }

    /// Largest deviation from the lower-triangular, unit-row-sum structure.
    pub fn max_structure_error(&self) -> f64 {
        self.layers.iter().map(stochastic_error).fold(0.0, f64::max)
    }
}

/// Max over rows of `|row sum - 1|` plus the largest absolute entry above
/// the diagonal, plus the magnitude of any negative entry.
pub fn stochastic_error(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if j > i {
                worst = worst.max(v.abs());
            }
            if v < 0.0 {
                worst = worst.max(-v);
            }
            sum += v;
        }
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

/// Every hidden-state snapshot of one forward pass. All matrices are
/// `n x d` with one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    /// `v^(l)` for `l = 0..=L`, before rewiring.
    pub pre: Vec<DMatrix<f64>>,
    /// `v'^(l)`: after local (`<PST>`) rewiring.
    pub local: Vec<DMatrix<f64>>,
    /// `v''^(l)`: after global (`<B-PST>`) rewiring; this is what attention consumes.
    pub rewired: Vec<DMatrix<f64>>,
    /// `z^(l)` for `l = 0..L`: post-attention residual stream.
    pub attn_out: Vec<DMatrix<f64>>,
    /// `y = norm3(v''^(L))`.
    pub output: DMatrix<f64>,
    final_norm: Norm,
}

impl HiddenStates {
    pub fn num_layers(&self) -> usize {
        self.pre.len() - 1
    }

    pub fn seq_len(&self) -> usize {
        self.output.nrows()
    }

    /// Rows used for readout at `exit_layer`: the final outputs at `L`,
    /// otherwise the rewired snapshot, optionally passed through the final norm.
    pub fn readout_rows(&self, exit_layer: usize, apply_final_norm: bool) -> Result<DMatrix<f64>> {
        let layers = self.num_layers();
        if exit_layer > layers {
            return Err(Error::ExitLayerOutOfRange {
                exit: exit_layer,
                layers,
            });
        }
        Ok(if exit_layer == layers {
            self.output.clone()
        } else if apply_final_norm {
            self.final_norm.apply(&self.rewired[exit_layer])
        } else {
            self.rewired[exit_layer].clone()
        })
    }
}

/// Options for one forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions<'a> {
    pub region_mask: Option<&'a RegionMask>,
    pub capture_trace: bool,
    /// Replay these attention matrices instead of computing the softmax.
    pub frozen_trace: Option<&'a AttentionTrace>,
    pub rewire: Option<&'a RewirePlan<'a>>,
    /// Seed for placeholder embeddings; falls back to the plan's seed, then
    /// to one derived from the model seed.
    pub placeholder_seed: Option<u64>,
}

impl<'a> ForwardOptions<'a> {
    pub fn capture() -> Self {
        Self {
            capture_trace: true,
            ..Self::default()
        }
    }

    pub fn frozen(trace: &'a AttentionTrace) -> Self {
        Self {
            frozen_trace: Some(trace),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub hidden: HiddenStates,
    /// Present when `capture_trace` was requested or a frozen trace was replayed.
    pub trace: Option<AttentionTrace>,
}

/// Embeds `token_ids` and runs the forward pass.
pub fn forward(
    weights: &ModelWeights,
    token_ids: &[TokenId],
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let max = weights.config().max_seq_len;
    if token_ids.len() > max {
        return Err(Error::SequenceTooLong {
            len: token_ids.len(),
            max,
        });
    }
    let seed = opts
        .placeholder_seed
        .or(opts.rewire.map(|p| p.placeholder_seed))
        .unwrap_or_else(|| weights.default_placeholder_seed());
    let v0 = weights.embed(token_ids, seed)?;
    forward_embeddings(weights, v0, opts)
}

/// Runs the forward pass from input states `v^(0)` (one row per token).
pub fn forward_embeddings(
    weights: &ModelWeights,
    v0: DMatrix<f64>,
    opts: ForwardOptions<'_>,
) -> Result<ForwardOutput> {
    let config = weights.config();
    let n = v0.nrows();
    let d = config.hidden_dim;
    let num_layers = config.num_layers;
    if n > config.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n,
            max: config.max_seq_len,
        });
    }
    if v0.ncols() != d {
        return Err(Error::DimensionMismatch(format!(
            "input states have {} columns, model width is {d}",
            v0.ncols()
        )));
    }
    if let Some(trace) = opts.frozen_trace {
        if trace.num_layers() != num_layers || trace.layers.iter().any(|m| m.shape() != (n, n)) {
            return Err(Error::TraceShape(format!(
                "expected {num_layers} layers of {n}x{n}, got {} layers of {:?}",
                trace.num_layers(),
                trace.layers.first().map(|m| m.shape())
            )));
        }
    }
    if let Some(plan) = opts.rewire {
        plan.check_len(n)?;
    }
    let mask_grid = match opts.region_mask {
        Some(mask) if opts.frozen_trace.is_none() => {
            mask.validate(n)?;
            Some(mask.grid(n))
        }
        _ => None,
    };
    check_finite(&v0, 0)?;

    let mut hidden = HiddenStates {
        pre: Vec::with_capacity(num_layers + 1),
        local: Vec::with_capacity(num_layers + 1),
        rewired: Vec::with_capacity(num_layers + 1),
        attn_out: Vec::with_capacity(num_layers),
        output: DMatrix::zeros(0, 0),
        final_norm: weights.final_norm().clone(),
    };
    let record_trace = opts.capture_trace || opts.frozen_trace.is_some();
    let mut trace = Vec::with_capacity(if record_trace { num_layers } else { 0 });

    let mut v = v0;
    for layer in 0..=num_layers {
        let (local, rewired) = match opts.rewire {
            Some(plan) => rewire::rewire_layer(&v, plan, layer)?,
            None => (v.clone(), v.clone()),
        };
        hidden.pre.push(v);
        hidden.local.push(local);
        if layer == num_layers {
            hidden.rewired.push(rewired);
            break;
        }

        let w = &weights.layers()[layer];
        let normed = w.norm1.apply(&rewired);
        let attn = match opts.frozen_trace {
            Some(t) => t.layers[layer].clone(),
            None => attention_weights(weights, w, &normed, mask_grid.as_deref(), layer)?,
        };
        let z = &rewired + &attn * &normed;
        let next = &z + w.mlp.apply(&w.norm2.apply(&z));
        check_finite(&next, layer + 1)?;

        if record_trace {
            trace.push(attn);
        }
        hidden.rewired.push(rewired);
        hidden.attn_out.push(z);
        v = next;
    }
    hidden.output = weights.final_norm().apply(&hidden.rewired[num_layers]);

    Ok(ForwardOutput {
        hidden,
        trace: record_trace.then_some(AttentionTrace { layers: trace }),
    })
}

fn attention_weights(
    weights: &ModelWeights,
    w: &LayerWeights,
    normed: &DMatrix<f64>,
    mask: Option<&[bool]>,
    layer: usize,
) -> Result<DMatrix<f64>> {
    let n = normed.nrows();
    let scale = 1.0 / (weights.config().hidden_dim as f64).sqrt();
    let mut q = normed * w.query.transpose();
    let mut k = normed * w.key.transpose();
    weights.positional().rotate_rows(&mut q);
    weights.positional().rotate_rows(&mut k);

    let mut attn = DMatrix::zeros(n, n);
    let mut scores = vec![0.0; n];
    let mut probs = vec![0.0; n];
    for i in 0..n {
        for j in 0..=i {
            scores[j] = if mask.is_some_and(|g| g[i * n + j]) {
                f64::NEG_INFINITY
            } else {
                q.row(i).dot(&k.row(j)) * scale
            };
        }
        if !softmax_into(&scores[..=i], &mut probs[..=i]) {
            return Err(Error::FullyMaskedRow { layer, row: i });
        }
        for j in 0..=i {
            attn[(i, j)] = probs[j];
        }
    }
    Ok(attn)
}

fn check_finite(m: &DMatrix<f64>, layer: usize) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { layer })
    }
}

/// Last-token readout at `exit_layer`.
pub fn embed_last(
    hidden: &HiddenStates,
    exit_layer: usize,
    apply_final_norm_at_exit: bool,
) -> Result<DVector<f64>> {
    let rows = hidden.readout_rows(exit_layer, apply_final_norm_at_exit)?;
    let n = rows.nrows();
    if n == 0 {
        return Err(Error::EmptySelection);
    }
    Ok(rows.row(n - 1).transpose())
}

/// Mean readout over `positions` (0-based) at `exit_layer`.
pub fn embed_mean(
    hidden: &HiddenStates,
    exit_layer: usize,
    positions: &[usize],
    apply_final_norm_at_exit: bool,
) -> Result<DVector<f64>> {
    if positions.is_empty() {
        return Err(Error::EmptySelection);
    }
    let rows = hidden.readout_rows(exit_layer, apply_final_norm_at_exit)?;
    if let Some(&p) = positions.iter().find(|&&p| p >= rows.nrows()) {
        return Err(Error::DimensionMismatch(format!(
            "position {p} outside sequence of length {}",
            rows.nrows()
        )));
    }
    Ok(mean_rows(&rows, positions))
}

pub(crate) fn mean_rows(rows: &DMatrix<f64>, positions: &[usize]) -> DVector<f64> {
    let mut acc = DVector::zeros(rows.ncols());
    for &p in positions {
        acc += rows.row(p).transpose();
    }
    acc / positions.len() as f64
}
