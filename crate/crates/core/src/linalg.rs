//! Dense linear algebra on `ndarray` matrices, generic over [`Scalar`].
//!
//! Symmetric eigendecomposition uses Householder tridiagonalisation followed
//! by the implicit QL algorithm (EISPACK `tred2`/`tql2`). Least squares uses
//! Householder QR so that collinear design columns can be reported by index.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("eigensolver did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("matrix is not positive definite (pivot {pivot})")]
    NotPositiveDefinite { pivot: usize },
    #[error("design column {column} is linearly dependent on earlier columns")]
    Collinear { column: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Eigenpairs of a symmetric matrix, eigenvalues in descending order.
#[derive(Debug, Clone)]
pub struct SymmetricEigen<T> {
    pub values: Array1<T>,
    /// Eigenvectors stored as columns, aligned with `values`.
    pub vectors: Array2<T>,
}

const MAX_QL_ITERATIONS: usize = 60;

/// Eigendecomposition of a real symmetric matrix. Only the lower triangle is
/// read in spirit, though the full matrix is copied.
pub fn symmetric_eigen<T: Scalar>(a: ArrayView2<T>) -> Result<SymmetricEigen<T>, LinalgError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let n = rows;
    if n == 0 {
        return Ok(SymmetricEigen {
            values: Array1::zeros(0),
            vectors: Array2::zeros((0, 0)),
        });
    }
    let mut v = a.to_owned();
    let mut d = Array1::<T>::zeros(n);
    let mut e = Array1::<T>::zeros(n);
    tridiagonalize(&mut v, &mut d, &mut e);
    tridiagonal_ql(&mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| d[i]).collect::<Array1<T>>();
    let mut vectors = Array2::<T>::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok(SymmetricEigen { values, vectors })
}

fn tridiagonalize<T: Scalar>(v: &mut Array2<T>, d: &mut Array1<T>, e: &mut Array1<T>) {
    let n = d.len();
    let zero = T::zero();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
                v[[j, i]] = zero;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for j in 0..i {
                e[j] = zero;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[[k, j]] -= upd;
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = T::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[[k, j]] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = zero;
    }
    v[[n - 1, n - 1]] = T::one();
    e[0] = zero;
}

fn tridiagonal_ql<T: Scalar>(
    v: &mut Array2<T>,
    d: &mut Array1<T>,
    e: &mut Array1<T>,
) -> Result<(), LinalgError> {
    let n = d.len();
    let zero = T::zero();
    let one = T::one();
    let two = T::lit(2.0);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    let eps = T::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        // e[n-1] is zero, so m < n always holds here.
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(LinalgError::NoConvergence { iterations: iter });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for i in (l + 2)..n {
                    d[i] -= h;
                }
                f += h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = zero;
    }
    Ok(())
}

/// Lower-triangular Cholesky factor `L` with `a = L L'`.
pub fn cholesky<T: Scalar>(a: ArrayView2<T>) -> Result<Array2<T>, LinalgError> {
    let (rows, cols) = a.dim();
    if rows != cols {
        return Err(LinalgError::NotSquare { rows, cols });
    }
    let n = rows;
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > T::zero()) {
            return Err(LinalgError::NotPositiveDefinite { pivot: j });
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut acc = a[[i, j]];
            for k in 0..j {
                acc -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = acc / ljj;
        }
    }
    Ok(l)
}

/// Solves `L L' x = b` for each column of `b` given the Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: ArrayView2<T>, b: ArrayView2<T>) -> Array2<T> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for mut col in x.columns_mut() {
        for i in 0..n {
            let mut acc = col[i];
            for k in 0..i {
                acc -= l[[i, k]] * col[k];
            }
            col[i] = acc / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut acc = col[i];
            for k in (i + 1)..n {
                acc -= l[[k, i]] * col[k];
            }
            col[i] = acc / l[[i, i]];
        }
    }
    x
}

/// Least-squares solution of `a x ≈ b` via Householder QR.
///
/// Returns `Collinear { column }` for the first column whose residual norm
/// after projecting out earlier columns falls below a relative tolerance.
pub fn least_squares<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
) -> Result<Array2<T>, LinalgError> {
    let (n, p) = a.dim();
    if b.nrows() != n {
        return Err(LinalgError::DimensionMismatch {
            expected: n,
            actual: b.nrows(),
        });
    }
    if n < p {
        return Err(LinalgError::DimensionMismatch {
            expected: p,
            actual: n,
        });
    }
    let tol = T::epsilon().sqrt() * T::lit(1e-2);
    let col_norms: Vec<T> = a.columns().into_iter().map(|c| norm(c)).collect();
    let mut r = a.to_owned();
    let mut qtb = b.to_owned();
    for (j, &col_norm) in col_norms.iter().enumerate() {
        let x = r.slice(s![j.., j]).to_owned();
        let alpha = norm(x.view());
        if alpha <= tol * col_norm.max(T::min_positive_value()) {
            return Err(LinalgError::Collinear { column: j });
        }
        let alpha = if x[0] > T::zero() { -alpha } else { alpha };
        let mut v = x;
        v[0] -= alpha;
        let vnorm2 = v.dot(&v);
        if vnorm2 > T::zero() {
            let two = T::lit(2.0);
            for k in j..p {
                let mut col = r.slice_mut(s![j.., k]);
                let proj = v.dot(&col) * two / vnorm2;
                col.scaled_add(-proj, &v);
            }
            for k in 0..qtb.ncols() {
                let mut col = qtb.slice_mut(s![j.., k]);
                let proj = v.dot(&col) * two / vnorm2;
                col.scaled_add(-proj, &v);
            }
        }
    }
    let mut x = Array2::<T>::zeros((p, b.ncols()));
    for c in 0..b.ncols() {
        for i in (0..p).rev() {
            let mut acc = qtb[[i, c]];
            for k in (i + 1)..p {
                acc -= r[[i, k]] * x[[k, c]];
            }
            x[[i, c]] = acc / r[[i, i]];
        }
    }
    Ok(x)
}

pub fn norm<T: Scalar>(v: ArrayView1<T>) -> T {
    v.dot(&v).sqrt()
}

/// Column means.
pub fn column_means<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    let n = T::from_count(x.nrows());
    x.sum_axis(Axis(0)) / n
}

/// Column sample standard deviations with the `n - 1` denominator.
pub fn column_std_devs<T: Scalar>(x: ArrayView2<T>) -> Array1<T> {
    let means = column_means(x);
    let denom = T::from_count(x.nrows().saturating_sub(1));
    let mut out = Array1::<T>::zeros(x.ncols());
    for (j, col) in x.columns().into_iter().enumerate() {
        let ss: T = col.iter().map(|&v| (v - means[j]) * (v - means[j])).sum();
        out[j] = (ss / denom).sqrt();
    }
    out
}

/// Sample covariance matrix (`n - 1` denominator) of the columns of `x`.
pub fn sample_covariance<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let means = column_means(x);
    let centered = &x - &means;
    let denom = T::from_count(x.nrows().saturating_sub(1));
    let mut cov = centered.t().dot(&centered) / denom;
    symmetrize(&mut cov);
    cov
}

pub fn symmetrize<T: Scalar>(m: &mut Array2<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = (m[[i, j]] + m[[j, i]]) * half;
            m[[i, j]] = avg;
            m[[j, i]] = avg;
        }
    }
}

/// Orthonormal basis of the column space of `a` (modified Gram–Schmidt,
/// two passes). Columns with negligible residual are dropped.
pub fn orthonormal_basis<T: Scalar>(a: ArrayView2<T>) -> Array2<T> {
    let tol = T::epsilon().sqrt();
    let mut basis: Vec<Array1<T>> = Vec::new();
    for col in a.columns() {
        let mut v = col.to_owned();
        let original = norm(v.view());
        for _ in 0..2 {
            for q in &basis {
                let proj = q.dot(&v);
                v.scaled_add(-proj, q);
            }
        }
        let nv = norm(v.view());
        if nv > tol * original.max(T::min_positive_value()) {
            basis.push(v / nv);
        }
    }
    let mut out = Array2::<T>::zeros((a.nrows(), basis.len()));
    for (j, q) in basis.iter().enumerate() {
        out.column_mut(j).assign(q);
    }
    out
}

/// Principal angles (radians, ascending) between the column spaces of `a` and `b`.
pub fn principal_angles<T: Scalar>(
    a: ArrayView2<T>,
    b: ArrayView2<T>,
) -> Result<Array1<T>, LinalgError> {
    if a.nrows() != b.nrows() {
        return Err(LinalgError::DimensionMismatch {
            expected: a.nrows(),
            actual: b.nrows(),
        });
    }
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let m = qa.t().dot(&qb);
    let gram = m.dot(&m.t());
    let eig = symmetric_eigen(gram.view())?;
    let k = qa.ncols().min(qb.ncols());
    Ok(eig
        .values
        .iter()
        .take(k)
        .map(|&s2| s2.max(T::zero()).sqrt().min(T::one()).acos())
        .collect())
}
