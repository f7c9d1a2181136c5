//! Row-major f64 matrix and the small numeric kernels the model needs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major matrix. All model tensors are 64-bit; the gradient-check
/// tolerances elsewhere in the crate assume it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Seeded normal init with standard deviation `std` (Box-Muller).
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen::<f64>();
            data.push(std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos());
        }
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `y[t] = W x[t]` for every row of `x`, with `W: [out, in]` row-major.
pub fn linear(x: &Mat, w: &Mat) -> Mat {
    debug_assert_eq!(x.cols, w.cols);
    let mut y = Mat::zeros(x.rows, w.rows);
    for t in 0..x.rows {
        linear_into(x.row(t), w, y.row_mut(t));
    }
    y
}

/// `linear` evaluated at selected rows only; other rows stay zero.
pub fn linear_rows(x: &Mat, w: &Mat, rows: &[usize]) -> Mat {
    debug_assert_eq!(x.cols, w.cols);
    let mut y = Mat::zeros(x.rows, w.rows);
    for &t in rows {
        linear_into(x.row(t), w, y.row_mut(t));
    }
    y
}

#[inline]
fn linear_into(xr: &[f64], w: &Mat, yr: &mut [f64]) {
    for (o, yo) in yr.iter_mut().enumerate() {
        *yo = xr.iter().zip(w.row(o)).map(|(a, b)| a * b).sum();
    }
}

/// Accumulates `dW += dy^T x` and returns `dx = dy W`.
pub fn linear_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat) -> Mat {
    debug_assert_eq!(dy.cols, w.rows);
    let mut dx = Mat::zeros(x.rows, x.cols);
    for t in 0..x.rows {
        let xr = x.row(t);
        let dyr = dy.row(t);
        let dxr = dx.row_mut(t);
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = w.row(o);
            let dwr = dw.row_mut(o);
            for i in 0..xr.len() {
                dwr[i] += g * xr[i];
                dxr[i] += g * wr[i];
            }
        }
    }
    dx
}

/// Numerically stable log-sum-exp.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Softmax of `logits / temperature`, log-sum-exp stabilized.
pub fn softmax_temperature(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let lse = log_sum_exp(&scaled);
    scaled.iter().map(|&x| (x - lse).exp()).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    softmax_temperature(logits, 1.0)
}

/// In-place softmax over the leading `n` entries of a row (the causal mask).
pub fn softmax_prefix_inplace(row: &mut [f64], n: usize) {
    let lse = log_sum_exp(&row[..n]);
    for v in row[..n].iter_mut() {
        *v = (*v - lse).exp();
    }
    for v in row[n..].iter_mut() {
        *v = 0.0;
    }
}

/// Shannon entropy (nats) of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// `ln(1 + e^x)` without overflow; exactly `ln 2` at `x = 0`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic function, stable for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// GELU (tanh approximation). Smooth, so central finite differences of the
/// losses converge everywhere.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// RMS normalization of one row (no learned gain). Returns the reciprocal
/// root-mean-square needed by the backward pass.
pub fn rmsnorm_row(x: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let ri = 1.0 / (ms + 1e-8).sqrt();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v * ri;
    }
    ri
}

/// Gradient of `rmsnorm_row` with respect to its input row.
pub fn rmsnorm_backward_row(dy: &[f64], x: &[f64], ri: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
    let k = ri * ri * ri / n;
    for i in 0..x.len() {
        dx[i] += ri * dy[i] - k * dot * x[i];
    }
}
