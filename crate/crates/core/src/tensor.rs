//! Dense row-major matrices and the handful of kernels the encoder needs.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec shape");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out = x · w + bias` with `x: n×k`, `w: k×m`, `bias: 1×m`.
pub fn affine(x: &Mat, w: &Mat, bias: &Mat) -> Mat {
    debug_assert_eq!(x.cols, w.rows);
    debug_assert_eq!(bias.len(), w.cols);
    let mut out = Mat::zeros(x.rows, w.cols);
    for i in 0..x.rows {
        let orow = &mut out.data[i * w.cols..(i + 1) * w.cols];
        orow.copy_from_slice(&bias.data);
        for (k, &xv) in x.row(i).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = w.row(k);
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xv * wv;
            }
        }
    }
    out
}

/// Backward of [`affine`]: accumulates `dW += xᵀ·dout`, `db += Σ dout` and
/// returns `dx = dout·wᵀ`.
pub fn affine_backward(x: &Mat, w: &Mat, dout: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    debug_assert_eq!(dout.cols, w.cols);
    let mut dx = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let drow = dout.row(i);
        for (b, &d) in db.data.iter_mut().zip(drow) {
            *b += d;
        }
        let xrow = x.row(i);
        for (k, &xv) in xrow.iter().enumerate() {
            let wrow = &mut dw.data[k * w.cols..(k + 1) * w.cols];
            if xv != 0.0 {
                for (g, &d) in wrow.iter_mut().zip(drow) {
                    *g += xv * d;
                }
            }
            dx.data[i * x.cols + k] = dot(w.row(k), drow);
        }
    }
    dx
}

/// `out = x · w` without bias.
pub fn matmul(x: &Mat, w: &Mat) -> Mat {
    affine(x, w, &Mat::zeros(1, w.cols))
}

/// Backward of [`matmul`]: accumulates `dW` and returns `dx`.
pub fn matmul_backward(x: &Mat, w: &Mat, dout: &Mat, dw: &mut Mat) -> Mat {
    let mut scratch = Mat::zeros(1, w.cols);
    affine_backward(x, w, dout, dw, &mut scratch)
}

/// Row-wise numerically stable softmax, in place.
pub fn softmax_rows(m: &mut Mat) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }
}

/// `log Σ exp(x)` with max subtraction.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
