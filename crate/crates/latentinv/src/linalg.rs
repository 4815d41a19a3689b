//! Dense linear algebra on small-to-medium symmetric problems: Cholesky
//! factorization with triangular solves, a cyclic Jacobi eigensolver, thin QR
//! via modified Gram-Schmidt, spectral norms, and the Fréchet derivative of
//! the Cholesky map.
//!
//! Everything here is O(n³) dense and intended for matrices up to ~1000×1000
//! (covariance factors, Jacobian Gram matrices, subspace overlaps). Row-major
//! `Tensor` storage throughout; lower-triangular factors keep their upper
//! triangle zeroed so they can be fed straight into `matmul`.

use crate::tensor::{dot, Tensor};
use crate::{Error, Result};

fn expect_square(a: &Tensor, op: &'static str) -> Result<usize> {
    if a.shape().len() != 2 || a.rows() != a.cols() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(a.rows())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
///
/// Fails with the offending pivot index and value if a diagonal pivot is
/// non-positive; callers that expect borderline matrices should add jitter
/// and retry rather than pre-condition here.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let n = expect_square(a, "cholesky")?;
    let ad = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let d = ad[j * n + j] - dot(&l[j * n..j * n + j], &l[j * n..j * n + j]);
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::CholeskyFailed { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[j * n + j] = djj;
        for i in j + 1..n {
            let s = ad[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            l[i * n + j] = s / djj;
        }
    }
    Tensor::matrix(n, n, l)
}

/// Solves `L x = b` by forward substitution; `b` may have multiple columns.
pub fn solve_lower(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = expect_square(l, "solve_lower")?;
    if b.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower",
            lhs: l.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in 0..n {
        let (done, rest) = x.split_at_mut(i * k);
        let xi = &mut rest[..k];
        for j in 0..i {
            let lij = ld[i * n + j];
            if lij != 0.0 {
                let xj = &done[j * k..(j + 1) * k];
                for c in 0..k {
                    xi[c] -= lij * xj[c];
                }
            }
        }
        let d = ld[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    Tensor::matrix(n, k, x)
}

/// Solves `Lᵀ x = b` by back substitution, reading the lower factor in place.
pub fn solve_lower_t(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = expect_square(l, "solve_lower_t")?;
    if b.rows() != n {
        return Err(Error::ShapeMismatch {
            op: "solve_lower_t",
            lhs: l.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let k = b.cols();
    let ld = l.data();
    let mut x = b.data().to_vec();
    for i in (0..n).rev() {
        let (head, tail) = x.split_at_mut((i + 1) * k);
        let xi = &mut head[i * k..];
        for j in i + 1..n {
            let lji = ld[j * n + i]; // (Lᵀ)[i,j]
            if lji != 0.0 {
                let xj = &tail[(j - i - 1) * k..(j - i) * k];
                for c in 0..k {
                    xi[c] -= lji * xj[c];
                }
            }
        }
        let d = ld[i * n + i];
        for v in xi.iter_mut() {
            *v /= d;
        }
    }
    Tensor::matrix(n, k, x)
}

/// Solves `L Lᵀ x = b` given the lower factor.
pub fn chol_solve(l: &Tensor, b: &Tensor) -> Result<Tensor> {
    solve_lower_t(l, &solve_lower(l, b)?)
}

/// Cholesky with additive diagonal jitter: tries each ladder value in order
/// and returns the factor of `a + jitter·I` for the first that factorizes;
/// the final failure propagates if none do.
pub fn chol_jitter_ladder(a: &Tensor, ladder: &[f64]) -> Result<Tensor> {
    let n = expect_square(a, "chol_jitter_ladder")?;
    let mut last: Option<Error> = None;
    for &j in ladder {
        let mut aj = a.clone();
        for i in 0..n {
            aj.data_mut()[i * n + i] += j;
        }
        match cholesky(&aj) {
            Ok(l) => return Ok(l),
            Err(e) => last = Some(e),
        }
    }
    Err(last.unwrap_or(Error::CholeskyFailed {
        pivot: 0,
        value: f64::NAN,
    }))
}

/// Log-determinant of `L Lᵀ` from the lower factor.
pub fn chol_logdet(l: &Tensor) -> f64 {
    let n = l.rows();
    (0..n).map(|i| l.data()[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns of an orthogonal matrix. Quadratically convergent; the sweep
/// count is generous because callers feed it Gram matrices that may be
/// numerically semi-definite.
pub fn jacobi_eigh(a: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let n = expect_square(a, "jacobi_eigh")?;
    let mut m = a.data().to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[p * n + q] * m[p * n + q];
            }
        }
        if off.sqrt() < 1e-14 * (1.0 + frobenius_raw(&m)) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for i in 0..n {
                    let aip = m[i * n + p];
                    let aiq = m[i * n + q];
                    m[i * n + p] = c * aip - s * aiq;
                    m[i * n + q] = s * aip + c * aiq;
                }
                for j in 0..n {
                    let apj = m[p * n + j];
                    let aqj = m[q * n + j];
                    m[p * n + j] = c * apj - s * aqj;
                    m[q * n + j] = s * apj + c * aqj;
                }
                for i in 0..n {
                    let vip = v[i * n + p];
                    let viq = v[i * n + q];
                    v[i * n + p] = c * vip - s * viq;
                    v[i * n + q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    order.sort_by(|&a, &b| diag[a].partial_cmp(&diag[b]).unwrap());
    let eigvals: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (new_col, &old_col) in order.iter().enumerate() {
        for i in 0..n {
            vecs[i * n + new_col] = v[i * n + old_col];
        }
    }
    Ok((eigvals, Tensor::matrix(n, n, vecs)?))
}

fn frobenius_raw(m: &[f64]) -> f64 {
    dot(m, m).sqrt()
}

/// Frobenius norm of a tensor viewed as a flat vector.
pub fn frobenius(a: &Tensor) -> f64 {
    frobenius_raw(a.data())
}

/// Largest singular value, computed from the eigenvalues of the smaller Gram
/// matrix. Exact (up to Jacobi convergence) and cheap for the short-fat or
/// tall-thin matrices this crate produces.
pub fn spectral_norm(a: &Tensor) -> Result<f64> {
    if a.is_empty() {
        return Ok(0.0);
    }
    let gram = if a.rows() <= a.cols() {
        a.matmul_nt(a)? // A Aᵀ, rows×rows
    } else {
        a.matmul_tn(a)? // Aᵀ A, cols×cols
    };
    let (eigs, _) = jacobi_eigh(&gram)?;
    Ok(eigs.last().copied().unwrap_or(0.0).max(0.0).sqrt())
}

/// Orthonormal basis for the column space of `a` by modified Gram-Schmidt
/// with a second orthogonalization pass.
///
/// Columns whose residual after projection falls below `tol` times the
/// largest original column norm are treated as linearly dependent and
/// dropped, so the returned matrix is `[rows, rank]`. Returns an empty
/// `[rows, 0]` tensor for a numerically zero input.
pub fn thin_qr_q(a: &Tensor, tol: f64) -> Result<Tensor> {
    let (n, m) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..n).map(|i| a.data()[i * m + j]).collect())
        .collect();
    let scale = cols
        .iter()
        .map(|c| dot(c, c).sqrt())
        .fold(0.0_f64, f64::max);
    let mut q: Vec<Vec<f64>> = Vec::new();
    if scale == 0.0 {
        return Tensor::matrix(n, 0, vec![]);
    }
    for v in cols.iter_mut() {
        // Two MGS passes: the second mops up the O(eps·cond) error the first
        // leaves behind, which matters because downstream tests check
        // orthogonality at 1e-10.
        for _ in 0..2 {
            for qi in &q {
                let proj = dot(qi, v);
                for (vv, qv) in v.iter_mut().zip(qi) {
                    *vv -= proj * qv;
                }
            }
        }
        let norm = dot(v, v).sqrt();
        if norm > tol * scale {
            let inv = 1.0 / norm;
            q.push(v.iter().map(|x| x * inv).collect());
        }
    }
    let r = q.len();
    let mut out = vec![0.0; n * r];
    for (j, qj) in q.iter().enumerate() {
        for i in 0..n {
            out[i * r + j] = qj[i];
        }
    }
    Tensor::matrix(n, r, out)
}

/// Fréchet derivative of the Cholesky map: given the factor `L` of `K` and a
/// symmetric perturbation `dK`, returns `dL = L · Φ(L⁻¹ dK L⁻ᵀ)` where `Φ`
/// takes the lower triangle and halves the diagonal.
pub fn cholesky_differential(l: &Tensor, dk: &Tensor) -> Result<Tensor> {
    let n = expect_square(l, "cholesky_differential")?;
    if dk.rows() != n || dk.cols() != n {
        return Err(Error::ShapeMismatch {
            op: "cholesky_differential",
            lhs: l.shape().to_vec(),
            rhs: dk.shape().to_vec(),
        });
    }
    let y = solve_lower(l, dk)?; // L⁻¹ dK
    let s = solve_lower(l, &y.transposed())?.transposed(); // (L⁻¹ dKᵀ)ᵀ L⁻ᵀ... = L⁻¹ dK L⁻ᵀ
    let mut phi = vec![0.0; n * n];
    let sd = s.data();
    for i in 0..n {
        for j in 0..i {
            phi[i * n + j] = sd[i * n + j];
        }
        phi[i * n + i] = 0.5 * sd[i * n + i];
    }
    l.matmul(&Tensor::matrix(n, n, phi)?)
}
