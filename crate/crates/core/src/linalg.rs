//! Small dense linear algebra on [`Tensor`] matrices.
//!
//! Everything here targets desk-scale problems (n <= 6 for the control
//! oracles, n <= a few hundred for policy weights), so plain O(n^3) kernels
//! with partial pivoting are the right tool.

use crate::scalar::Real;
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is singular to working precision (pivot {pivot:e} at column {col})")]
    Singular { col: usize, pivot: f64 },
    #[error("matrix is not positive definite (leading minor {order})")]
    NotPositiveDefinite { order: usize },
    #[error("dimension mismatch: {0}")]
    Dim(String),
}

pub fn transpose<S: Real>(a: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Tensor::zeros(&[n, m]);
    for i in 0..m {
        for j in 0..n {
            out.set(j, i, a.at(i, j));
        }
    }
    out
}

pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Tensor::zeros(&[m, n]);
    for i in 0..m {
        for p in 0..k {
            let aip = a.at(i, p);
            for j in 0..n {
                let v = out.at(i, j) + aip * b.at(p, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

pub fn matvec<S: Real>(a: &Tensor<S>, x: &[S]) -> Vec<S> {
    let (m, n) = (a.rows(), a.cols());
    assert_eq!(n, x.len(), "matvec dims {n} vs {}", x.len());
    let mut out = vec![S::zero(); m];
    for i in 0..m {
        let mut acc = S::zero();
        for j in 0..n {
            acc += a.at(i, j) * x[j];
        }
        out[i] = acc;
    }
    out
}

pub fn add<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn sub<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn scale<S: Real>(a: &Tensor<S>, c: S) -> Tensor<S> {
    let data = a.data().iter().map(|&x| x * c).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn frobenius_norm<S: Real>(a: &Tensor<S>) -> S {
    a.data().iter().map(|&x| x * x).sum::<S>().sqrt()
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm2<S: Real>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Solve A x = b by LU with partial pivoting. A is consumed as a copy.
pub fn solve<S: Real>(a: &Tensor<S>, b: &[S]) -> Result<Vec<S>, LinalgError> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "solve needs a square matrix");
    assert_eq!(b.len(), n);
    let mut lu = a.clone();
    let mut x: Vec<S> = b.to_vec();
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = lu.at(col, col).abs();
        for r in col + 1..n {
            let v = lu.at(r, col).abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best <= S::lit(1e-300) {
            return Err(LinalgError::Singular { col, pivot: best.to_f64_lossy() });
        }
        if piv != col {
            for j in 0..n {
                let tmp = lu.at(col, j);
                lu.set(col, j, lu.at(piv, j));
                lu.set(piv, j, tmp);
            }
            x.swap(col, piv);
        }
        let d = lu.at(col, col);
        for r in col + 1..n {
            let f = lu.at(r, col) / d;
            if f != S::zero() {
                for j in col..n {
                    let v = lu.at(r, j) - f * lu.at(col, j);
                    lu.set(r, j, v);
                }
                x[r] = x[r] - f * x[col];
            }
        }
    }
    // back substitution
    for i in (0..n).rev() {
        let mut acc = x[i];
        for j in i + 1..n {
            acc = acc - lu.at(i, j) * x[j];
        }
        x[i] = acc / lu.at(i, i);
    }
    Ok(x)
}

/// Solve A X = B column by column.
pub fn solve_mat<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    let (n, cols) = (b.rows(), b.cols());
    let mut out = Tensor::zeros(&[n, cols]);
    for j in 0..cols {
        let col: Vec<S> = (0..n).map(|i| b.at(i, j)).collect();
        let x = solve(a, &col)?;
        for i in 0..n {
            out.set(i, j, x[i]);
        }
    }
    Ok(out)
}

pub fn inverse<S: Real>(a: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    solve_mat(a, &Tensor::eye(a.rows()))
}

/// Cholesky factor of a symmetric positive definite matrix (lower triangular).
pub fn cholesky<S: Real>(a: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    let n = a.rows();
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.at(i, j);
            for k in 0..j {
                acc = acc - l.at(i, k) * l.at(j, k);
            }
            if i == j {
                if acc <= S::zero() {
                    return Err(LinalgError::NotPositiveDefinite { order: i + 1 });
                }
                l.set(i, j, acc.sqrt());
            } else {
                l.set(i, j, acc / l.at(j, j));
            }
        }
    }
    Ok(l)
}

/// Kronecker product A (m x n) with B (p x q) -> (mp x nq).
pub fn kron<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n) = (a.rows(), a.cols());
    let (p, q) = (b.rows(), b.cols());
    let mut out = Tensor::zeros(&[m * p, n * q]);
    for i in 0..m {
        for j in 0..n {
            let aij = a.at(i, j);
            for r in 0..p {
                for c in 0..q {
                    out.set(i * p + r, j * q + c, aij * b.at(r, c));
                }
            }
        }
    }
    out
}

/// Column-major vectorization, matching vec(AXB) = (B^T kron A) vec(X).
fn vec_cm<S: Real>(a: &Tensor<S>) -> Vec<S> {
    let (m, n) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.at(i, j));
        }
    }
    out
}

fn unvec_cm<S: Real>(v: &[S], m: usize, n: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[m, n]);
    for j in 0..n {
        for i in 0..m {
            out.set(i, j, v[j * m + i]);
        }
    }
    out
}

/// Solve the continuous Lyapunov equation A^T P + P A = C for P by
/// Kronecker vectorization: (I kron A^T + A^T kron I) vec(P) = vec(C).
pub fn solve_lyapunov<S: Real>(a: &Tensor<S>, c: &Tensor<S>) -> Result<Tensor<S>, LinalgError> {
    let n = a.rows();
    assert_eq!(a.cols(), n);
    assert_eq!(c.shape(), &[n, n]);
    let at = transpose(a);
    let eye = Tensor::eye(n);
    let big = add(&kron(&eye, &at), &kron(&at, &eye));
    let sol = solve(&big, &vec_cm(c))?;
    Ok(unvec_cm(&sol, n, n))
}

/// Thin Householder QR of an m x n matrix with m >= n: returns Q (m x n with
/// orthonormal columns) and R (n x n upper triangular).
pub fn qr_thin<S: Real>(a: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let (m, n) = (a.rows(), a.cols());
    assert!(m >= n, "qr_thin needs m >= n");
    let mut r = a.clone();
    // Accumulate Householder vectors, then form Q by applying them to I.
    let mut vs: Vec<Vec<S>> = Vec::with_capacity(n);
    for k in 0..n {
        let mut v = vec![S::zero(); m];
        let mut norm = S::zero();
        for i in k..m {
            let x = r.at(i, k);
            v[i] = x;
            norm += x * x;
        }
        let norm = norm.sqrt();
        if norm > S::zero() {
            let sign = if v[k] >= S::zero() { S::one() } else { -S::one() };
            v[k] += sign * norm;
            let vnorm2: S = v[k..].iter().map(|&x| x * x).sum();
            if vnorm2 > S::zero() {
                // apply H = I - 2 v v^T / (v^T v) to R
                for j in k..n {
                    let mut proj = S::zero();
                    for i in k..m {
                        proj += v[i] * r.at(i, j);
                    }
                    let f = S::lit(2.0) * proj / vnorm2;
                    for i in k..m {
                        let val = r.at(i, j) - f * v[i];
                        r.set(i, j, val);
                    }
                }
            }
        }
        vs.push(v);
    }
    // Q = H_0 H_1 ... H_{n-1} applied to the first n columns of I.
    let mut q = Tensor::zeros(&[m, n]);
    for j in 0..n {
        q.set(j, j, S::one());
    }
    for k in (0..n).rev() {
        let v = &vs[k];
        let vnorm2: S = v[k..].iter().map(|&x| x * x).sum();
        if vnorm2 > S::zero() {
            for j in 0..n {
                let mut proj = S::zero();
                for i in k..m {
                    proj += v[i] * q.at(i, j);
                }
                let f = S::lit(2.0) * proj / vnorm2;
                for i in k..m {
                    let val = q.at(i, j) - f * v[i];
                    q.set(i, j, val);
                }
            }
        }
    }
    // zero the strictly-lower part of R and truncate to n x n
    let mut rn = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i..n {
            rn.set(i, j, r.at(i, j));
        }
    }
    (q, rn)
}
