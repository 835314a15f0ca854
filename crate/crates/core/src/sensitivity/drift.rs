use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::Serialize;

use super::MixingSystem;
use crate::error::{Error, Result};

/// Causal attention spreading each row evenly over its prefix.
pub fn uniform_causal(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, i| if i <= j { 1.0 / (j + 1) as f64 } else { 0.0 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftPoint {
    pub layers: usize,
    /// `A_{n,i}` for every `i`.
    pub last_row: Vec<f64>,
    /// `sum_j A_{j,i}` for every `i`.
    pub column_sums: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftCurve {
    pub n: usize,
    pub beta1: f64,
    pub points: Vec<DriftPoint>,
}

impl DriftCurve {
    /// One header line, then one row per depth.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layers");
        for i in 1..=self.n {
            write!(s, ",a_last_{i}").unwrap();
        }
        for i in 1..=self.n {
            write!(s, ",col_sum_{i}").unwrap();
        }
        s.push('\n');
        for p in &self.points {
            write!(s, "{}", p.layers).unwrap();
            for v in p.last_row.iter().chain(&p.column_sums) {
                write!(s, ",{v:e}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    /// Depths `L -> L+1` at which `A_{n,i}` fails to strictly decrease.
    pub fn last_row_increases(&self, i: usize) -> Vec<usize> {
        self.points
            .windows(2)
            .filter(|w| w[1].last_row[i] >= w[0].last_row[i])
            .map(|w| w[0].layers)
            .collect()
    }

    /// Depths at which `sum_j A_{j,i}` decreases.
    pub fn column_sum_decreases(&self, i: usize) -> Vec<usize> {
        self.points
            .windows(2)
            .filter(|w| w[1].column_sums[i] < w[0].column_sums[i])
            .map(|w| w[0].layers)
            .collect()
    }
}

/// Holds uniform causal attention fixed and tracks `A = M^L` for `L = 1..=l_max`.
pub fn left_drift_limit(n: usize, l_max: usize, beta1: f64) -> Result<DriftCurve> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "drift curve needs n >= 2, got {n}"
        )));
    }
    let step = MixingSystem::from_layers(n, &[uniform_causal(n)], &[beta1])?;
    let m = &step.m[0];
    let mut a = DMatrix::identity(n, n);
    let mut points = Vec::with_capacity(l_max);
    for layers in 1..=l_max {
        a = m * &a;
        points.push(DriftPoint {
            layers,
            last_row: a.row(n - 1).iter().copied().collect(),
            column_sums: a.row_sum().iter().copied().collect(),
        });
    }
    Ok(DriftCurve { n, beta1, points })
}
