use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::{row_variances, HiddenStates, ModelWeights, Norm, NORM_EPS};

/// Per-layer Lipschitz data entering the sensitivity bound.
///
/// A norm layer with constant `beta` is `1/beta`-Lipschitz.
#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzProfile {
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub beta3: f64,
    pub sigma_psi: Vec<f64>,
}

impl LipschitzProfile {
    pub fn num_layers(&self) -> usize {
        self.beta1.len()
    }

    /// `(1/beta3) * prod (sigma_psi / beta2 + 1)`.
    pub fn c(&self) -> f64 {
        let prod: f64 = self
            .sigma_psi
            .iter()
            .zip(&self.beta2)
            .map(|(s, b)| s / b + 1.0)
            .product();
        prod / self.beta3
    }

    /// `C * prod (1 + 1/beta1)`.
    pub fn k_l(&self) -> f64 {
        self.c() * self.beta1.iter().map(|b| 1.0 + 1.0 / b).product::<f64>()
    }
}

/// Which activations the norm constants are evaluated on.
#[derive(Debug, Clone, Copy)]
pub enum NormScope<'a> {
    /// Worst case over all inputs: `max|gamma| / sqrt(eps)`.
    Global,
    /// Worst row of the given forward pass: `max|gamma| / sqrt(min var + eps)`.
    Local(&'a HiddenStates),
}

/// Largest singular value.
pub fn spectral_norm(w: &DMatrix<f64>) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    w.singular_values().max()
}

/// `beta` such that the norm's Jacobian at every row of `rows` (or at any
/// input when `rows` is `None`) has operator norm at most `1/beta`.
///
/// The Jacobian at a row `x` is `diag(gamma) P / sqrt(var(x) + eps)` with
/// `||P|| <= 1`.
pub fn norm_beta(norm: &Norm, rows: Option<&DMatrix<f64>>, label: &str) -> Result<f64> {
    let gamma = norm.max_abs_scale();
    if gamma == 0.0 || !gamma.is_finite() {
        return Err(Error::DegenerateNorm(format!(
            "{label} has max |scale| = {gamma}"
        )));
    }
    let var = match rows {
        Some(x) => row_variances(x).into_iter().fold(f64::INFINITY, f64::min),
        None => 0.0,
    };
    let var = if var.is_finite() { var } else { 0.0 };
    Ok((var + NORM_EPS).sqrt() / gamma)
}

pub fn estimate_lipschitz(
    weights: &ModelWeights,
    scope: NormScope<'_>,
) -> Result<LipschitzProfile> {
    let layers = weights.layers();
    if let NormScope::Local(h) = scope {
        if h.num_layers() != layers.len() {
            return Err(Error::DimensionMismatch(format!(
                "hidden states cover {} layers, model has {}",
                h.num_layers(),
                layers.len()
            )));
        }
    }
    let mut profile = LipschitzProfile {
        beta1: Vec::with_capacity(layers.len()),
        beta2: Vec::with_capacity(layers.len()),
        beta3: 0.0,
        sigma_psi: Vec::with_capacity(layers.len()),
    };
    for (l, w) in layers.iter().enumerate() {
        let (x1, x2) = match scope {
            NormScope::Global => (None, None),
            NormScope::Local(h) => (Some(&h.rewired[l]), Some(&h.attn_out[l])),
        };
        profile
            .beta1
            .push(norm_beta(&w.norm1, x1, &format!("layer {l} norm1"))?);
        profile
            .beta2
            .push(norm_beta(&w.norm2, x2, &format!("layer {l} norm2"))?);
        profile
            .sigma_psi
            .push(spectral_norm(&w.mlp.w_out) * spectral_norm(&w.mlp.w_in));
    }
    let x3 = match scope {
        NormScope::Global => None,
        NormScope::Local(h) => Some(&h.rewired[layers.len()]),
    };
    profile.beta3 = norm_beta(weights.final_norm(), x3, "final norm")?;
    Ok(profile)
}
