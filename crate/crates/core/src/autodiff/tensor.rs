use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Dense row-major 2-D tensor of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::filled(1, 1, v)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(alloc::format!(
                "{} values for a {rows}x{cols} tensor",
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
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

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

// The kernels below block four terms of the reduction at a time. Each
// output element still accumulates its terms in index order, so results do
// not depend on the blocking.

/// out (n×m) += a (n×k) · b (k×m)
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    let k4 = k - k % 4;
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        let arow = &a[i * k..(i + 1) * k];
        for p in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[p], arow[p + 1], arow[p + 2], arow[p + 3]);
            let b0 = &b[p * m..(p + 1) * m];
            let b1 = &b[(p + 1) * m..(p + 2) * m];
            let b2 = &b[(p + 2) * m..(p + 3) * m];
            let b3 = &b[(p + 3) * m..(p + 4) * m];
            for j in 0..m {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
        for p in k4..k {
            let av = arow[p];
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out (n×m) += a (n×k) · bᵀ where b is m×k
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // row-times-row dot products do not vectorise; transposing b is cheap
    // next to the product
    let mut bt = vec![0.0; k * m];
    for j in 0..m {
        for p in 0..k {
            bt[p * m + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, out, n, k, m);
}

/// out (n×m) += aᵀ · b where a is k×n and b is k×m
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], k: usize, n: usize, m: usize) {
    let k4 = k - k % 4;
    for p in (0..k4).step_by(4) {
        let b0 = &b[p * m..(p + 1) * m];
        let b1 = &b[(p + 1) * m..(p + 2) * m];
        let b2 = &b[(p + 2) * m..(p + 3) * m];
        let b3 = &b[(p + 3) * m..(p + 4) * m];
        for i in 0..n {
            let (a0, a1, a2, a3) = (a[p * n + i], a[(p + 1) * n + i], a[(p + 2) * n + i], a[(p + 3) * n + i]);
            if a0 == 0.0 && a1 == 0.0 && a2 == 0.0 && a3 == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for j in 0..m {
                orow[j] = orow[j] + a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
        }
    }
    for p in k4..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        // a 2x3, b 3x2
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut nn = [0.0; 4];
        gemm_nn(&a, &b, &mut nn, 2, 3, 2);
        assert_eq!(nn, [58.0, 64.0, 139.0, 154.0]);
        let bt = Tensor::from_vec(3, 2, b.to_vec()).unwrap().transpose();
        let mut nt = [0.0; 4];
        gemm_nt(&a, &bt.data, &mut nt, 2, 3, 2);
        assert_eq!(nt, nn);
        let at = Tensor::from_vec(2, 3, a.to_vec()).unwrap().transpose();
        let mut tn = [0.0; 4];
        gemm_tn(&at.data, &b, &mut tn, 3, 2, 2);
        assert_eq!(tn, nn);
    }
}
