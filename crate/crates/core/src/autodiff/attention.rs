//! Kernelised linear attention with φ(u) = elu(u) + 1.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::math::exp;

/// Added to every attention denominator.
pub const ATTENTION_EPS: f64 = 1e-6;

/// `out_i = φ(q_i)ᵀ Σ_j φ(k_j) v_jᵀ / (φ(q_i)ᵀ Σ_j φ(k_j) + eps)` built from
/// primitive graph ops, so it differentiates like any other expression.
pub fn linear_attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    let (qs, ks, vs) = (g.shape(q), g.shape(k), g.shape(v));
    if qs.1 != ks.1 || ks.0 != vs.0 || qs.0 == 0 || ks.0 == 0 {
        return Err(Error::DimensionMismatch(alloc::format!(
            "attention q {qs:?}, k {ks:?}, v {vs:?}"
        )));
    }
    let fq = g.elu1(q)?;
    let fk = g.elu1(k)?;
    let kv = g.matmul_tn(fk, v)?;
    let num = g.matmul(fq, kv)?;
    let ksum = g.sum_rows(fk)?;
    let den = g.matmul_nt(fq, ksum)?;
    let den = g.add_scalar(den, ATTENTION_EPS)?;
    g.div_col(num, den)
}

fn phi(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        exp(x)
    }
}

/// Direct double-loop evaluation of the same formula, for cross-checking.
pub fn linear_attention_direct(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(q.rows, v.cols);
    for i in 0..q.rows {
        let mut den = 0.0;
        let mut num = alloc::vec![0.0; v.cols];
        for j in 0..k.rows {
            let s: f64 = (0..q.cols).map(|c| phi(q.at(i, c)) * phi(k.at(j, c))).sum();
            den += s;
            for c in 0..v.cols {
                num[c] += s * v.at(j, c);
            }
        }
        for c in 0..v.cols {
            out.data[i * v.cols + c] = num[c] / (den + ATTENTION_EPS);
        }
    }
    out
}
