use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{estimate_lipschitz, spectral_norm, LipschitzProfile, MixingSystem, NormScope};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::model::{
    forward_embeddings, init_weights, mean_rows, AttentionTrace, ForwardOptions, ModelConfig,
    ModelWeights, PositionalScheme,
};
use crate::seed;
use crate::tokens::{TokenId, BYTE_VOCAB};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Largest `n * d` accepted by the finite-difference path.
pub const MAX_FD_ENTRIES: usize = 4096;

pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    spectral_norm(m)
}

/// Central-difference Jacobian of `f` at `x`, one column per input coordinate.
pub fn finite_difference_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    let mut cols = Vec::with_capacity(x.len());
    for c in 0..x.len() {
        let mut plus = x.clone();
        let mut minus = x.clone();
        plus[c] += h;
        minus[c] -= h;
        cols.push((f(&plus)? - f(&minus)?) / (2.0 * h));
    }
    let rows = cols.first().map_or(0, |v| v.len());
    Ok(DMatrix::from_fn(rows, x.len(), |r, c| cols[c][r]))
}

/// Jacobians of the output rows with respect to input row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionJacobians {
    /// `dy_j / dv_i^(0)` for every `j`.
    pub per_row: Vec<DMatrix<f64>>,
    /// `d(mean_j y_j) / dv_i^(0)`, differenced directly on the mean.
    pub mean: DMatrix<f64>,
}

/// Perturbs every coordinate of row `i` of `v0` and differences the outputs.
/// With a trace the attention weights are replayed, otherwise recomputed.
pub fn position_jacobians(
    weights: &ModelWeights,
    v0: &DMatrix<f64>,
    trace: Option<&AttentionTrace>,
    i: usize,
) -> Result<PositionJacobians> {
    let (n, d) = v0.shape();
    if i >= n {
        return Err(Error::DimensionMismatch(format!(
            "position {i} outside n={n}"
        )));
    }
    let opts = ForwardOptions {
        frozen_trace: trace,
        ..Default::default()
    };
    let all: Vec<usize> = (0..n).collect();
    let mut per_row = vec![DMatrix::zeros(d, d); n];
    let mut mean = DMatrix::zeros(d, d);
    for c in 0..d {
        let run = |delta: f64| -> Result<DMatrix<f64>> {
            let mut v = v0.clone();
            v[(i, c)] += delta;
            Ok(forward_embeddings(weights, v, opts)?.hidden.output)
        };
        let plus = run(FD_STEP)?;
        let minus = run(-FD_STEP)?;
        let diff = (&plus - &minus) / (2.0 * FD_STEP);
        for (j, jac) in per_row.iter_mut().enumerate() {
            jac.column_mut(c).copy_from(&diff.row(j).transpose());
        }
        let mdiff = (mean_rows(&plus, &all) - mean_rows(&minus, &all)) / (2.0 * FD_STEP);
        mean.column_mut(c).copy_from(&mdiff);
    }
    if per_row
        .iter()
        .chain(std::iter::once(&mean))
        .any(|m| m.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFiniteJacobian { position: i });
    }
    Ok(PositionJacobians { per_row, mean })
}

/// Measured and bounded sensitivity of both readouts to one input position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PositionSensitivity {
    pub position: usize,
    pub measured_last: f64,
    pub bound_last: f64,
    pub measured_mean: f64,
    pub bound_mean: f64,
}

fn ratio(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 {
        0.0
    } else {
        measured / bound
    }
}

impl PositionSensitivity {
    /// `measured / bound` for the last-token readout.
    pub fn slack_last(&self) -> f64 {
        ratio(self.measured_last, self.bound_last)
    }

    pub fn slack_mean(&self) -> f64 {
        ratio(self.measured_mean, self.bound_mean)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JacobianReport {
    pub n: usize,
    pub d: usize,
    pub layers: usize,
    pub k_l: f64,
    /// False when attention was recomputed under perturbation; the bounds
    /// then do not formally apply.
    pub frozen: bool,
    pub positions: Vec<PositionSensitivity>,
}

impl JacobianReport {
    /// Number of bound violations over both readouts at relative slack `rel`.
    pub fn violations(&self, rel: f64) -> usize {
        self.positions
            .iter()
            .map(|p| {
                usize::from(p.measured_last > p.bound_last * (1.0 + rel))
                    + usize::from(p.measured_mean > p.bound_mean * (1.0 + rel))
            })
            .sum()
    }

    pub fn max_slack(&self) -> f64 {
        self.positions
            .iter()
            .map(|p| p.slack_last().max(p.slack_mean()))
            .fold(0.0, f64::max)
    }
}

/// Measures `||dy_n/dv_i||` and `||d ybar/dv_i||` for every `i` and pairs
/// them with `K_L A_{n,i}` and `(K_L/n) sum_j A_{j,i}`.
pub fn jacobian_norms(
    weights: &ModelWeights,
    v0: &DMatrix<f64>,
    profile: &LipschitzProfile,
    frozen_trace: Option<&AttentionTrace>,
) -> Result<JacobianReport> {
    let (n, d) = v0.shape();
    let layers = weights.config().num_layers;
    if n == 0 {
        return Err(Error::EmptySelection);
    }
    if n * d > MAX_FD_ENTRIES {
        return Err(Error::GuardExceeded(format!(
            "n*d = {} exceeds {MAX_FD_ENTRIES}",
            n * d
        )));
    }
    if profile.num_layers() != layers {
        return Err(Error::DimensionMismatch(format!(
            "profile has {} layers, model has {layers}",
            profile.num_layers()
        )));
    }
    let live;
    let attention = match frozen_trace {
        Some(t) => &t.layers,
        None => {
            live = forward_embeddings(weights, v0.clone(), ForwardOptions::capture())?
                .trace
                .expect("capture requested");
            &live.layers
        }
    };
    let mix = MixingSystem::from_layers(n, attention, &profile.beta1)?;
    let k_l = profile.k_l();
    let mut positions = Vec::with_capacity(n);
    for i in 0..n {
        let jac = position_jacobians(weights, v0, frozen_trace, i)?;
        let col_sum: f64 = (0..n).map(|j| mix.a[(j, i)]).sum();
        positions.push(PositionSensitivity {
            position: i,
            measured_last: operator_norm(&jac.per_row[n - 1]),
            bound_last: k_l * mix.a[(n - 1, i)],
            measured_mean: operator_norm(&jac.mean),
            bound_mean: k_l / n as f64 * col_sum,
        });
    }
    Ok(JacobianReport {
        n,
        d,
        layers,
        k_l,
        frozen: frozen_trace.is_some(),
        positions,
    })
}

/// Random-model experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub mlp_hidden: usize,
    pub seq_len: usize,
    pub seeds: Vec<u64>,
    /// Multiplies every attention and MLP matrix after initialisation.
    pub weight_scale: f64,
    pub positional: PositionalScheme,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_dim: 8,
            mlp_hidden: 16,
            seq_len: 8,
            seeds: (0..100).collect(),
            weight_scale: 1.0,
            positional: PositionalScheme::Rotary,
        }
    }
}

impl SweepConfig {
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            num_layers: self.num_layers,
            hidden_dim: self.hidden_dim,
            mlp_hidden: self.mlp_hidden,
            max_seq_len: self.seq_len.max(1),
            seed,
            positional: self.positional,
            tp_layer_range: None,
            exit_layer: self.num_layers,
            ..ModelConfig::default()
        }
    }

    /// Weights and input states for one seed.
    pub fn instance(&self, seed: u64) -> Result<(ModelWeights, DMatrix<f64>)> {
        let mut weights = init_weights(&self.model_config(seed))?;
        if self.weight_scale != 1.0 {
            let s = self.weight_scale;
            weights = weights.map_layers(|_, l| {
                let mut l = l.clone();
                l.query *= s;
                l.key *= s;
                l.mlp.w_in *= s;
                l.mlp.w_out *= s;
                l
            })?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, seed::EXPERIMENT));
        let ids: Vec<TokenId> = (0..self.seq_len)
            .map(|_| rng.random_range(0..BYTE_VOCAB))
            .collect();
        let v0 = weights.embed(&ids, weights.default_placeholder_seed())?;
        Ok((weights, v0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedReport {
    pub seed: u64,
    pub report: JacobianReport,
}

/// Frozen-attention bound check for one seed, with norm constants taken
/// from the base forward pass.
pub fn run_seed(cfg: &SweepConfig, seed: u64) -> Result<JacobianReport> {
    let (weights, v0) = cfg.instance(seed)?;
    let out = forward_embeddings(&weights, v0.clone(), ForwardOptions::capture())?;
    let trace = out.trace.expect("capture requested");
    let profile = estimate_lipschitz(&weights, NormScope::Local(&out.hidden))?;
    jacobian_norms(&weights, &v0, &profile, Some(&trace))
}

pub fn bound_sweep(cfg: &SweepConfig, exec: Execution) -> Result<Vec<SeedReport>> {
    exec::try_map_slice(&cfg.seeds, exec, |&seed| {
        run_seed(cfg, seed).map(|report| SeedReport { seed, report })
    })
}
