//! Symmetric eigendecomposition by cyclic Jacobi rotations.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_SWEEPS: usize = 100;

/// Full spectrum of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct EigPair {
    /// Eigenvalues in descending order.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, aligned with `values`.
    pub vectors: Tensor,
}

/// Eigendecomposition of a symmetric matrix.
///
/// The input is symmetrized as `(a + aᵀ)/2` before rotating, so tiny
/// asymmetries from floating-point round-off are tolerated.
pub fn sym_eig(a: &Tensor) -> Result<EigPair> {
    if !a.is_square() {
        return Err(Error::dim(
            "sym_eig",
            format!("expected square matrix, got {}x{}", a.rows(), a.cols()),
        ));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite("sym_eig input"));
    }
    let n = a.rows();
    let mut m = Tensor::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut v = Tensor::eye(n);

    let scale = m.frobenius_sq();
    let mut converged = n <= 1 || scale == 0.0;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(Error::Convergence {
                op: "sym_eig",
                iterations: MAX_SWEEPS,
            });
        }
        sweep += 1;
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                rotate(&mut m, &mut v, p, q);
            }
        }
        converged = off_diagonal_sq(&m) <= scale * 1e-30;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let vectors = Tensor::from_fn(n, n, |r, c| v.get(r, order[c]));
    Ok(EigPair { values, vectors })
}

fn off_diagonal_sq(m: &Tensor) -> f64 {
    let n = m.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += m.get(i, j) * m.get(i, j);
            }
        }
    }
    s
}

/// Annihilates `m[p][q]` with one two-sided plane rotation and accumulates
/// it into `v`.
fn rotate(m: &mut Tensor, v: &mut Tensor, p: usize, q: usize) {
    let apq = m.get(p, q);
    if apq == 0.0 {
        return;
    }
    let app = m.get(p, p);
    let aqq = m.get(q, q);
    let theta = (aqq - app) / (2.0 * apq);
    let t = if theta.is_finite() {
        theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
    } else {
        0.0
    };
    if t == 0.0 {
        return;
    }
    let c = 1.0 / (t * t + 1.0).sqrt();
    let s = t * c;
    let n = m.rows();

    for k in 0..n {
        let mkp = m.get(k, p);
        let mkq = m.get(k, q);
        m.set(k, p, c * mkp - s * mkq);
        m.set(k, q, s * mkp + c * mkq);
    }
    for k in 0..n {
        let mpk = m.get(p, k);
        let mqk = m.get(q, k);
        m.set(p, k, c * mpk - s * mqk);
        m.set(q, k, s * mpk + c * mqk);
    }
    m.set(p, q, 0.0);
    m.set(q, p, 0.0);

    for k in 0..n {
        let vkp = v.get(k, p);
        let vkq = v.get(k, q);
        v.set(k, p, c * vkp - s * vkq);
        v.set(k, q, s * vkp + c * vkq);
    }
}
