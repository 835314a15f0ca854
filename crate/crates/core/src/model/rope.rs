//! Rotary positional encoding.
//!
//! Pairs `(2k, 2k+1)` of a query/key vector are rotated by `pos * theta_k`
//! with `theta_k = base^(-2k/d)`. The resulting score depends on positions
//! only through their difference, which is what makes echo second passes
//! reproduce single-pass states once cross-pass attention is masked.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PositionalScheme {
    #[default]
    Rotary,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionalEncoding {
    scheme: PositionalScheme,
    inv_freq: Vec<f64>,
}

impl PositionalEncoding {
    pub fn new(scheme: PositionalScheme, dim: usize, base: f64) -> Self {
        let inv_freq = match scheme {
            PositionalScheme::Rotary => (0..dim / 2)
                .map(|k| base.powf(-2.0 * k as f64 / dim as f64))
                .collect(),
            PositionalScheme::None => Vec::new(),
        };
        Self { scheme, inv_freq }
    }

    pub fn scheme(&self) -> PositionalScheme {
        self.scheme
    }

    /// Rotates every row `i` of `x` in place by position `i`.
    pub fn rotate_rows(&self, x: &mut DMatrix<f64>) {
        if self.scheme == PositionalScheme::None {
            return;
        }
        for i in 0..x.nrows() {
            let pos = i as f64;
            for (k, &f) in self.inv_freq.iter().enumerate() {
                let (sin, cos) = (pos * f).sin_cos();
                let a = x[(i, 2 * k)];
                let b = x[(i, 2 * k + 1)];
                x[(i, 2 * k)] = a * cos - b * sin;
                x[(i, 2 * k + 1)] = a * sin + b * cos;
            }
        }
    }

    /// Relative phase vector between query position `i` and key position `j`:
    /// `(cos((i-j) theta_k), sin((i-j) theta_k))` for every frequency.
    pub fn phase_vector(&self, i: usize, j: usize) -> Vec<f64> {
        let delta = i as f64 - j as f64;
        self.inv_freq
            .iter()
            .flat_map(|&f| {
                let (s, c) = (delta * f).sin_cos();
                [c, s]
            })
            .collect()
    }

    /// Upper bound on `|p_ij|` over all position pairs.
    pub fn p_max(&self) -> f64 {
        (self.inv_freq.len() as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phase_vectors_bounded() {
        let pe = PositionalEncoding::new(PositionalScheme::Rotary, 8, 10_000.0);
        for i in 0..64 {
            for j in 0..64 {
                let norm = pe
                    .phase_vector(i, j)
                    .iter()
                    .map(|x| x * x)
                    .sum::<f64>()
                    .sqrt();
                assert!(norm <= pe.p_max() + 1e-12);
            }
        }
        let none = PositionalEncoding::new(PositionalScheme::None, 8, 10_000.0);
        assert_eq!(none.p_max(), 0.0);
        assert!(none.phase_vector(3, 1).is_empty());
    }

    #[test]
    fn dot_products_depend_on_offset_only() {
        let pe = PositionalEncoding::new(PositionalScheme::Rotary, 4, 100.0);
        let q = [0.3, -1.2, 0.7, 0.05];
        let k = [-0.4, 0.9, 1.1, -0.6];
        let score = |qi: usize, kj: usize| {
            let mut m = DMatrix::<f64>::zeros(qi.max(kj) + 1, 4);
            let mut n = m.clone();
            for c in 0..4 {
                m[(qi, c)] = q[c];
                n[(kj, c)] = k[c];
            }
            pe.rotate_rows(&mut m);
            pe.rotate_rows(&mut n);
            m.row(qi).dot(&n.row(kj))
        };
        assert!((score(5, 2) - score(13, 10)).abs() < 1e-12);
        assert!((score(3, 3) - score(40, 40)).abs() < 1e-12);
    }
}
