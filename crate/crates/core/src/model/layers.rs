use nalgebra::{DMatrix, DVector};

/// Variance floor inside every normalisation layer.
pub const NORM_EPS: f64 = 1e-5;

/// Per-token normalisation with learned scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub scale: DVector<f64>,
    pub shift: DVector<f64>,
}

impl Norm {
    pub fn identity(dim: usize) -> Self {
        Self {
            scale: DVector::from_element(dim, 1.0),
            shift: DVector::zeros(dim),
        }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let d = x.ncols();
        let mut out = DMatrix::zeros(x.nrows(), d);
        for i in 0..x.nrows() {
            let row = x.row(i);
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for c in 0..d {
                out[(i, c)] = (x[(i, c)] - mean) * inv * self.scale[c] + self.shift[c];
            }
        }
        out
    }

    pub fn max_abs_scale(&self) -> f64 {
        self.scale.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Population variance of every row.
pub fn row_variances(x: &DMatrix<f64>) -> Vec<f64> {
    let d = x.ncols() as f64;
    (0..x.nrows())
        .map(|i| {
            let row = x.row(i);
            let mean = row.sum() / d;
            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d
        })
        .collect()
}

/// Two-matrix MLP `w_out * tanh(w_in * x + b_in) + b_out`.
///
/// `tanh` is 1-Lipschitz, so the MLP's Lipschitz constant is bounded by the
/// product of the two spectral norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub w_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub w_out: DMatrix<f64>,
    pub b_out: DVector<f64>,
}

impl Mlp {
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut hidden = x * self.w_in.transpose();
        for mut row in hidden.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v + self.b_in[c]).tanh();
            }
        }
        let mut out = hidden * self.w_out.transpose();
        for mut row in out.row_iter_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v += self.b_out[c];
            }
        }
        out
    }
}

/// Numerically stable softmax over `scores[..len]`, written into `out`.
/// Entries equal to `-inf` receive exactly zero weight.
pub fn softmax_into(scores: &[f64], out: &mut [f64]) -> bool {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut total = 0.0;
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = if s == f64::NEG_INFINITY {
            0.0
        } else {
            (s - max).exp()
        };
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    true
}
