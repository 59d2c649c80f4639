use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows);
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            vec_mat_acc(self.row(i), other, out.row_mut(i));
        }
        out
    }

    /// `self += a^T · b` restricted to the rows of `a`/`b` listed in `rows`.
    pub fn add_at_b(&mut self, a: &Matrix, b: &Matrix, rows: impl Iterator<Item = usize>) {
        assert_eq!((self.rows, self.cols), (a.cols, b.cols));
        assert_eq!(a.rows, b.rows);
        for r in rows {
            add_outer(self, a.row(r), b.row(r));
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `out += x · m` for a row vector `x`.
#[inline]
pub fn vec_mat_acc(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (o, &w) in out.iter_mut().zip(m.row(i)) {
            *o += xi * w;
        }
    }
}

/// `out += m · y` (i.e. `y · m^T` for a row vector `y`).
#[inline]
pub fn mat_vec_acc(m: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (i, o) in out.iter_mut().enumerate() {
        *o += dot(m.row(i), y);
    }
}

/// `m += x^T · y`.
#[inline]
pub fn add_outer(m: &mut Matrix, x: &[f64], y: &[f64]) {
    debug_assert_eq!((m.rows, m.cols), (x.len(), y.len()));
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        for (w, &yj) in m.row_mut(i).iter_mut().zip(y) {
            *w += xi * yj;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Log-softmax computed with the max shift.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in &mut out {
        *o /= sum;
    }
    out
}
