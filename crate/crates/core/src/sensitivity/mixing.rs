use nalgebra::DMatrix;

use super::LipschitzProfile;
use crate::error::{Error, Result};
use crate::model::{stochastic_error, AttentionTrace};

pub const MAX_PATH_N: usize = 6;
pub const MAX_PATH_LAYERS: usize = 4;

/// Residual-augmented attention for every layer and their normalised product.
#[derive(Debug, Clone, PartialEq)]
pub struct MixingSystem {
    /// `alpha / beta1 + I`, per layer.
    pub alpha_bar: Vec<DMatrix<f64>>,
    /// Row-sum scale `1 + 1/beta1`, per layer.
    pub r: Vec<f64>,
    /// `alpha_bar / r`, per layer.
    pub m: Vec<DMatrix<f64>>,
    /// `M^(L-1) ... M^(0)`; the identity when there are no layers.
    pub a: DMatrix<f64>,
}

impl MixingSystem {
    /// Builds the system for `n` tokens from raw attention and per-layer `beta1`.
    pub fn from_layers(n: usize, attention: &[DMatrix<f64>], beta1: &[f64]) -> Result<Self> {
        if attention.len() != beta1.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} attention layers but {} beta1 values",
                attention.len(),
                beta1.len()
            )));
        }
        let mut alpha_bar = Vec::with_capacity(attention.len());
        let mut r = Vec::with_capacity(attention.len());
        let mut m = Vec::with_capacity(attention.len());
        let mut a = DMatrix::identity(n, n);
        for (layer, (attn, &b)) in attention.iter().zip(beta1).enumerate() {
            if attn.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "layer {layer} attention is {:?}, expected {n}x{n}",
                    attn.shape()
                )));
            }
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "beta1 at layer {layer} is {b}"
                )));
            }
            let bar = DMatrix::from_fn(n, n, |j, i| {
                if i > j {
                    0.0
                } else {
                    attn[(j, i)] / b + if i == j { 1.0 } else { 0.0 }
                }
            });
            let rl = 1.0 + 1.0 / b;
            let ml = &bar / rl;
            a = &ml * &a;
            alpha_bar.push(bar);
            r.push(rl);
            m.push(ml);
        }
        Ok(Self { alpha_bar, r, m, a })
    }

    pub fn num_layers(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn seq_len(&self) -> usize {
        self.a.nrows()
    }

    pub fn r_product(&self) -> f64 {
        self.r.iter().product()
    }

    /// Worst structural deviation over every `M^(l)` and `A`.
    pub fn structure_error(&self) -> f64 {
        self.m
            .iter()
            .chain(std::iter::once(&self.a))
            .map(stochastic_error)
            .fold(0.0, f64::max)
    }
}

pub fn build_mixing(trace: &AttentionTrace, profile: &LipschitzProfile) -> Result<MixingSystem> {
    if trace.num_layers() != profile.num_layers() {
        return Err(Error::DimensionMismatch(format!(
            "trace has {} layers, profile has {}",
            trace.num_layers(),
            profile.num_layers()
        )));
    }
    if trace.num_layers() == 0 {
        return Err(Error::DimensionMismatch(
            "an empty trace does not determine the sequence length".into(),
        ));
    }
    MixingSystem::from_layers(trace.seq_len(), &trace.layers, &profile.beta1)
}

/// Sums `prod_l alpha_bar^(l)` over every monotone index chain from `i` up
/// to `j`. With `L` layers a chain has `L - 1` free intermediate indices.
pub fn path_sum_bruteforce(mix: &MixingSystem, j: usize, i: usize) -> Result<f64> {
    let n = mix.seq_len();
    let layers = mix.num_layers();
    if n > MAX_PATH_N || layers > MAX_PATH_LAYERS {
        return Err(Error::GuardExceeded(format!(
            "path enumeration needs n <= {MAX_PATH_N} and L <= {MAX_PATH_LAYERS}, got n={n}, L={layers}"
        )));
    }
    if i >= n || j >= n {
        return Err(Error::DimensionMismatch(format!(
            "index ({j}, {i}) outside n={n}"
        )));
    }
    if layers == 0 {
        return Ok(if i == j { 1.0 } else { 0.0 });
    }
    Ok(chains(&mix.alpha_bar, 0, i, j))
}

// Sum over chains starting at index `from` entering layer `layer`, ending at `to`.
fn chains(bars: &[DMatrix<f64>], layer: usize, from: usize, to: usize) -> f64 {
    if layer + 1 == bars.len() {
        return if from <= to {
            bars[layer][(to, from)]
        } else {
            0.0
        };
    }
    (from..=to)
        .map(|k| bars[layer][(k, from)] * chains(bars, layer + 1, k, to))
        .sum()
}
