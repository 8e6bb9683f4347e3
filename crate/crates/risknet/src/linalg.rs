//! Minimal dense row-major matrix used by the neural model.
//!
//! The model is small (tens of thousands of parameters) and runs in f64,
//! so straightforward loops are fast enough and keep the hand-written
//! backward pass easy to audit against them.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
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

    /// y += A x
    ///
    /// Four independent accumulators keep several multiply-add chains in
    /// flight. The resulting (fixed) summation order is part of the crate's
    /// numeric contract: every matrix-vector product anywhere reduces in
    /// exactly this order.
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for r in 0..self.rows {
            let row = self.row(r);
            let mut acc = [0.0f64; 4];
            for (a, b) in row.chunks_exact(4).zip(x.chunks_exact(4)) {
                acc[0] += a[0] * b[0];
                acc[1] += a[1] * b[1];
                acc[2] += a[2] * b[2];
                acc[3] += a[3] * b[3];
            }
            let mut tail = 0.0;
            let rem = row.chunks_exact(4).remainder();
            for (a, b) in rem.iter().zip(x.chunks_exact(4).remainder()) {
                tail += a * b;
            }
            y[r] += (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail;
        }
    }

    /// y = A x
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_add(x, &mut y);
        y
    }

    /// y += A^T x  (x has `rows` entries, y has `cols`)
    pub fn matvec_t_add(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for r in 0..self.rows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            let row = r * self.cols;
            for c in 0..self.cols {
                y[c] += self.data[row + c] * xr;
            }
        }
    }

    /// self += scale * (u ⊗ v), the rank-one update used by gradient
    /// accumulation (u has `rows` entries, v has `cols`).
    pub fn add_outer(&mut self, u: &[f64], v: &[f64], scale: f64) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for r in 0..self.rows {
            let ur = u[r] * scale;
            if ur == 0.0 {
                continue;
            }
            let row = r * self.cols;
            for c in 0..self.cols {
                self.data[row + c] += ur * v[c];
            }
        }
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// y += x, elementwise.
pub fn axpy(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x.iter()) {
        *a += b;
    }
}

/// y += s * x, elementwise.
pub fn axpy_scaled(y: &mut [f64], x: &[f64], s: f64) {
    debug_assert_eq!(y.len(), x.len());
    for (a, b) in y.iter_mut().zip(x.iter()) {
        *a += s * b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_and_transpose_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = a.matvec(&[1.0, 0.5, -1.0]);
        assert_eq!(y, vec![1.0 + 1.0 - 3.0, 4.0 + 2.5 - 6.0]);

        let mut yt = vec![0.0; 3];
        a.matvec_t_add(&[1.0, -1.0], &mut yt);
        assert_eq!(yt, vec![-3.0, -3.0, -3.0]);
    }

    #[test]
    fn outer_product_accumulates() {
        let mut g = Mat::zeros(2, 2);
        g.add_outer(&[1.0, 2.0], &[3.0, 4.0], 0.5);
        assert_eq!(g.data, vec![1.5, 2.0, 3.0, 4.0]);
    }
}
