//! Row-major f64 matrices for the training path.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.cols..(t + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Previous-position rows, zero at position 0.
    pub fn shifted(&self) -> Mat {
        let mut out = Mat::zeros(self.rows, self.cols);
        if self.rows > 1 {
            let n = self.data.len() - self.cols;
            out.data[self.cols..].copy_from_slice(&self.data[..n]);
        }
        out
    }

    /// Adjoint of [`Mat::shifted`]: adds row t+1 of `d` into row t of `self`.
    pub fn add_unshifted(&mut self, d: &Mat) {
        for t in 0..self.rows.saturating_sub(1) {
            let src = &d.data[(t + 1) * d.cols..(t + 2) * d.cols];
            for (a, b) in self.row_mut(t).iter_mut().zip(src) {
                *a += b;
            }
        }
    }

    /// `self · W`, `W` stored `[cols, n_out]`.
    pub fn matmul(&self, w: &[f64], n_out: usize) -> Mat {
        debug_assert_eq!(w.len(), self.cols * n_out);
        let mut out = Mat::zeros(self.rows, n_out);
        for t in 0..self.rows {
            let x = &self.data[t * self.cols..(t + 1) * self.cols];
            let o = &mut out.data[t * n_out..(t + 1) * n_out];
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (oj, &wij) in o.iter_mut().zip(&w[i * n_out..(i + 1) * n_out]) {
                    *oj += xi * wij;
                }
            }
        }
        out
    }

    /// `self · Wᵀ`, `W` stored `[n_in, cols]`; gives the input gradient of
    /// [`Mat::matmul`].
    pub fn matmul_t(&self, w: &[f64], n_in: usize) -> Mat {
        debug_assert_eq!(w.len(), self.cols * n_in);
        let mut out = Mat::zeros(self.rows, n_in);
        for t in 0..self.rows {
            let g = &self.data[t * self.cols..(t + 1) * self.cols];
            let o = &mut out.data[t * n_in..(t + 1) * n_in];
            for (i, oi) in o.iter_mut().enumerate() {
                *oi = g.iter().zip(&w[i * self.cols..(i + 1) * self.cols]).map(|(a, b)| a * b).sum();
            }
        }
        out
    }

    /// `acc += selfᵀ · d`, the weight gradient of [`Mat::matmul`].
    pub fn acc_t_mul(&self, d: &Mat, acc: &mut [f64]) {
        debug_assert_eq!(acc.len(), self.cols * d.cols);
        for t in 0..self.rows {
            let x = self.row(t);
            let g = d.row(t);
            for (i, &xi) in x.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (a, &gj) in acc[i * d.cols..(i + 1) * d.cols].iter_mut().zip(g) {
                    *a += xi * gj;
                }
            }
        }
    }

    /// Column sums added into `acc`.
    pub fn acc_col_sums(&self, acc: &mut [f64]) {
        for t in 0..self.rows {
            for (a, v) in acc.iter_mut().zip(self.row(t)) {
                *a += v;
            }
        }
    }
}
